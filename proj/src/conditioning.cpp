#include "idguard/conditioning.hpp"

#include <algorithm>
#include <sstream>

#include "idguard/errors.hpp"

namespace idguard::conditioning {

std::string to_string(RestrictionMode m) {
  switch (m) {
    case RestrictionMode::Target: return "target";
    case RestrictionMode::Untarget: return "untarget";
    case RestrictionMode::Conditioning: return "conditioning";
  }
  return "?";
}

RestrictionMode restriction_mode_from_string(std::string_view s) {
  if (s == "target" || s == "Target") return RestrictionMode::Target;
  if (s == "untarget" || s == "Untarget") return RestrictionMode::Untarget;
  if (s == "conditioning" || s == "Conditioning") return RestrictionMode::Conditioning;
  throw ValidationError("unknown restriction mode '" + std::string(s) + "' (target|untarget|conditioning)");
}

bool Prompt::contains(int id) const { return std::binary_search(ids_.begin(), ids_.end(), id); }

ConceptVocabulary::ConceptVocabulary(std::vector<std::string> tokens, std::string identity,
                                     std::string null_token, std::vector<std::string> blacklist)
    : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (tokens_[i] == tokens_[j]) throw ValidationError("duplicate vocabulary token " + tokens_[i]);
    }
  }
  identity_ = id(identity);
  null_ = id(null_token);
  for (const auto& b : blacklist) {
    const int bid = id(b);
    if (bid == identity_ || bid == null_) {
      throw ValidationError("token '" + b + "' cannot be blacklisted");
    }
    if (std::find(blacklist_.begin(), blacklist_.end(), bid) == blacklist_.end()) blacklist_.push_back(bid);
  }
  std::sort(blacklist_.begin(), blacklist_.end());
}

ConceptVocabulary ConceptVocabulary::standard(std::vector<std::string> blacklist) {
  return ConceptVocabulary({"circle", "square", "triangle", "red", "green", "blue", "yellow", "sks", "hazard", "null"},
                           "sks", "null", std::move(blacklist));
}

ConceptVocabulary ConceptVocabulary::with_blacklist(std::vector<std::string> blacklist) const {
  return ConceptVocabulary(tokens_, tokens_[identity_], tokens_[null_], std::move(blacklist));
}

int ConceptVocabulary::id(std::string_view token) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == token) return static_cast<int>(i);
  }
  throw ValidationError("unknown token '" + std::string(token) + "'");
}

const std::string& ConceptVocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw ValidationError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

bool ConceptVocabulary::is_prohibited(int id) const {
  return std::binary_search(blacklist_.begin(), blacklist_.end(), id);
}

Prompt ConceptVocabulary::prompt(std::vector<int> ids) const {
  if (ids.empty()) throw ValidationError("empty prompt");
  for (int i : ids) {
    if (i < 0 || i >= size()) throw ValidationError("token id " + std::to_string(i) + " out of range");
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Prompt p;
  p.ids_ = std::move(ids);
  p.has_identity_ = p.contains(identity_);
  p.has_prohibited_ = std::any_of(p.ids_.begin(), p.ids_.end(), [&](int i) { return is_prohibited(i); });
  return p;
}

Prompt ConceptVocabulary::prompt(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return prompt(std::move(ids));
}

Prompt ConceptVocabulary::parse(std::string_view text) const {
  std::istringstream is{std::string(text)};
  std::vector<std::string> tokens;
  for (std::string tok; is >> tok;) tokens.push_back(tok);
  return prompt(tokens);
}

std::string ConceptVocabulary::render(const Prompt& p) const {
  std::string out;
  for (int i : p.ids()) out += (out.empty() ? "" : " ") + tokens_[i];
  return out;
}

Prompt ConceptVocabulary::without_prohibited(const Prompt& p) const {
  std::vector<int> ids;
  for (int i : p.ids()) {
    if (!is_prohibited(i)) ids.push_back(i);
  }
  if (ids.empty()) ids.push_back(null_);
  return prompt(std::move(ids));
}

Prompt ConceptVocabulary::prohibited_only(const Prompt& p) const {
  std::vector<int> ids;
  for (int i : p.ids()) {
    if (is_prohibited(i)) ids.push_back(i);
  }
  if (ids.empty()) throw ValidationError("prompt has no prohibited token");
  return prompt(std::move(ids));
}

Prompt ConceptVocabulary::with_prohibited(const Prompt& p) const {
  std::vector<int> ids = p.ids();
  ids.insert(ids.end(), blacklist_.begin(), blacklist_.end());
  return prompt(std::move(ids));
}

nlohmann::json ConceptVocabulary::to_json() const {
  std::vector<std::string> bl;
  for (int b : blacklist_) bl.push_back(tokens_[b]);
  return {{"tokens", tokens_}, {"identity", tokens_[identity_]}, {"null", tokens_[null_]}, {"blacklist", bl}};
}

ConceptVocabulary ConceptVocabulary::from_json(const nlohmann::json& j) {
  try {
    return ConceptVocabulary(j.at("tokens").get<std::vector<std::string>>(), j.at("identity").get<std::string>(),
                             j.at("null").get<std::string>(), j.at("blacklist").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed vocabulary: ") + e.what());
  }
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::DbInstance: return "DB_instance";
    case LossKind::DbPrior: return "DB_prior";
    case LossKind::Cip: return "CIP";
    case LossKind::Wm: return "WM";
    case LossKind::Preserve: return "Preserve";
  }
  return "?";
}

LossRoute::LossRoute(std::initializer_list<LossKind> kinds) {
  for (auto k : kinds) add(k);
}

std::string LossRoute::str() const {
  std::string out = "{";
  for (auto k : {LossKind::DbInstance, LossKind::DbPrior, LossKind::Cip, LossKind::Wm, LossKind::Preserve}) {
    if (has(k)) out += (out.size() > 1 ? ", " : "") + to_string(k);
  }
  return out + "}";
}

LossRoute route_prompt(const ConceptVocabulary& vocab, const Prompt& prompt, RestrictionMode mode) {
  (void)vocab;
  if (prompt.has_identity()) {
    if (prompt.has_prohibited()) return {LossKind::Cip, LossKind::Wm};
    return {LossKind::DbInstance, LossKind::Wm};
  }
  if (!prompt.has_prohibited()) return {LossKind::DbPrior};
  if (mode == RestrictionMode::Conditioning) return {LossKind::Preserve};
  return {};
}

template <typename T>
ag::Var<T> embed_prompts(const ag::Var<T>& table, const std::vector<Prompt>& prompts) {
  std::vector<std::vector<int>> bags;
  bags.reserve(prompts.size());
  for (const auto& p : prompts) bags.push_back(p.ids());
  return ag::embed_bag(table, bags);
}

template ag::Var<float> embed_prompts<float>(const ag::Var<float>&, const std::vector<Prompt>&);
template ag::Var<double> embed_prompts<double>(const ag::Var<double>&, const std::vector<Prompt>&);

}  // namespace idguard::conditioning
