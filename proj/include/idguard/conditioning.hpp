#pragma once

// Closed prompt vocabulary, bag-of-token prompts, prompt embedding, and the
// dispatch that decides which training objectives a prompt activates.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "idguard/autograd.hpp"

namespace idguard::conditioning {

enum class RestrictionMode { Target, Untarget, Conditioning };

std::string to_string(RestrictionMode m);
RestrictionMode restriction_mode_from_string(std::string_view s);

class ConceptVocabulary;

/// Order-free token bag. Only a vocabulary can build one, which keeps the
/// identity/prohibited flags consistent with the token set.
class Prompt {
 public:
  [[nodiscard]] const std::vector<int>& ids() const { return ids_; }
  [[nodiscard]] bool has_identity() const { return has_identity_; }
  [[nodiscard]] bool has_prohibited() const { return has_prohibited_; }
  [[nodiscard]] bool contains(int id) const;
  bool operator==(const Prompt& o) const { return ids_ == o.ids_; }

 private:
  friend class ConceptVocabulary;
  std::vector<int> ids_;  // sorted, unique
  bool has_identity_ = false;
  bool has_prohibited_ = false;
};

class ConceptVocabulary {
 public:
  ConceptVocabulary(std::vector<std::string> tokens, std::string identity, std::string null_token,
                    std::vector<std::string> blacklist);

  /// shapes, colors, the identity token "sks", the prohibited "hazard", and "null".
  static ConceptVocabulary standard(std::vector<std::string> blacklist = {"hazard"});

  [[nodiscard]] ConceptVocabulary with_blacklist(std::vector<std::string> blacklist) const;

  [[nodiscard]] int size() const { return static_cast<int>(tokens_.size()); }
  [[nodiscard]] int id(std::string_view token) const;
  [[nodiscard]] const std::string& token(int id) const;
  [[nodiscard]] int identity_id() const { return identity_; }
  [[nodiscard]] int null_id() const { return null_; }
  [[nodiscard]] const std::vector<int>& blacklist_ids() const { return blacklist_; }
  [[nodiscard]] bool is_prohibited(int id) const;
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

  [[nodiscard]] Prompt prompt(std::vector<int> ids) const;
  [[nodiscard]] Prompt prompt(const std::vector<std::string>& tokens) const;
  /// Space-separated tokens, e.g. "sks circle blue".
  [[nodiscard]] Prompt parse(std::string_view text) const;
  [[nodiscard]] std::string render(const Prompt& p) const;

  [[nodiscard]] Prompt null_prompt() const { return prompt(std::vector<int>{null_}); }
  /// The prompt's tokens minus the blacklist (the benign counterpart, c*).
  [[nodiscard]] Prompt without_prohibited(const Prompt& p) const;
  /// Only the prompt's blacklisted tokens (c_p alone).
  [[nodiscard]] Prompt prohibited_only(const Prompt& p) const;
  /// The prompt plus every blacklisted token.
  [[nodiscard]] Prompt with_prohibited(const Prompt& p) const;

  [[nodiscard]] nlohmann::json to_json() const;
  static ConceptVocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  int identity_ = -1;
  int null_ = -1;
  std::vector<int> blacklist_;
};

enum class LossKind : std::uint8_t { DbInstance = 1, DbPrior = 2, Cip = 4, Wm = 8, Preserve = 16 };

std::string to_string(LossKind k);

/// Set of objectives a prompt activates.
class LossRoute {
 public:
  LossRoute() = default;
  LossRoute(std::initializer_list<LossKind> kinds);
  [[nodiscard]] bool has(LossKind k) const { return (bits_ & static_cast<std::uint8_t>(k)) != 0; }
  [[nodiscard]] bool empty() const { return bits_ == 0; }
  void add(LossKind k) { bits_ |= static_cast<std::uint8_t>(k); }
  void remove(LossKind k) { bits_ &= static_cast<std::uint8_t>(~static_cast<std::uint8_t>(k)); }
  [[nodiscard]] std::uint8_t bits() const { return bits_; }
  bool operator==(const LossRoute& o) const = default;
  [[nodiscard]] std::string str() const;

 private:
  std::uint8_t bits_ = 0;
};

/// Identity without prohibited -> {DB_instance, WM}; identity with prohibited
/// -> {CIP, WM}; neither -> {DB_prior}; prohibited alone -> {} or, in
/// Conditioning mode, {Preserve}.
LossRoute route_prompt(const ConceptVocabulary& vocab, const Prompt& prompt, RestrictionMode mode);

/// Sum of the embedding rows of each prompt's tokens: [N, D].
template <typename T>
ag::Var<T> embed_prompts(const ag::Var<T>& table, const std::vector<Prompt>& prompts);

}  // namespace idguard::conditioning
