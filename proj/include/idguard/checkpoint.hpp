#pragma once

// Single-file tensor container shared by every persisted component.
//
//   u64 little-endian header length | JSON header | raw little-endian f32 payload
//
// The header carries format_version, free-form metadata (module config,
// vocabulary, training counters), and an index of named tensors with their
// shapes and byte offsets into the payload.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "idguard/nn.hpp"
#include "idguard/tensor.hpp"

namespace idguard::checkpoint {

inline constexpr int kFormatVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  void add(std::string name, Tensor<float> t) { tensors.emplace_back(std::move(name), std::move(t)); }
  [[nodiscard]] bool contains(const std::string& name) const;
  [[nodiscard]] const Tensor<float>& get(const std::string& name) const;

  /// Adds every parameter under "prefix/name".
  void add_params(const std::string& prefix, const nn::ParamStore<float>& ps);
  /// Rebuilds a store from the tensors under "prefix/", in file order.
  [[nodiscard]] nn::ParamStore<float> params(const std::string& prefix) const;
};

std::string serialize(const Checkpoint& ck, int format_version = kFormatVersion);
Checkpoint deserialize(const std::string& bytes, const std::string& origin = "<memory>");

/// Writes via a temporary file and rename.
void save(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load(const std::filesystem::path& path);

/// 64-bit FNV-1a as 16 hex digits.
std::string hash_bytes(std::string_view bytes);
std::string hash_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace idguard::checkpoint
