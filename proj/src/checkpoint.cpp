#include "idguard/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "idguard/errors.hpp"

namespace idguard::checkpoint {

static_assert(std::endian::native == std::endian::little, "container assumes a little-endian host");

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const Tensor<float>& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::add_params(const std::string& prefix, const nn::ParamStore<float>& ps) {
  for (const auto& [name, v] : ps.items()) add(prefix + "/" + name, v.value());
}

nn::ParamStore<float> Checkpoint::params(const std::string& prefix) const {
  nn::ParamStore<float> ps;
  const std::string p = prefix + "/";
  for (const auto& [n, t] : tensors) {
    if (n.compare(0, p.size(), p) == 0) ps.add(n.substr(p.size()), t);
  }
  if (ps.items().empty()) throw FormatError("checkpoint has no parameters under '" + prefix + "'");
  return ps;
}

std::string serialize(const Checkpoint& ck, int format_version) {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    const std::uint64_t len = t.size() * sizeof(float);
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", len}});
    offset += len;
  }
  const nlohmann::json header{
      {"format_version", format_version}, {"meta", ck.meta}, {"tensors", index}, {"payload_bytes", offset}};
  const std::string h = header.dump();
  std::string out(8, '\0');
  const std::uint64_t hlen = h.size();
  std::memcpy(out.data(), &hlen, 8);
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : ck.tensors) {
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes, const std::string& origin) {
  auto corrupt = [&](const std::string& why) { return FormatError(origin + ": corrupt checkpoint (" + why + ")"); };
  if (bytes.size() < 8) throw corrupt("truncated header length");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data(), 8);
  if (hlen > bytes.size() - 8) throw corrupt("header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(std::string("header is not JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kFormatVersion) {
      throw FormatError(origin + ": unsupported checkpoint format_version " + std::to_string(version) +
                        " (this build reads version " + std::to_string(kFormatVersion) + ")");
    }
    const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    const std::uint64_t base = 8 + hlen;
    if (bytes.size() - base != payload_bytes) {
      throw corrupt("payload is " + std::to_string(bytes.size() - base) + " bytes, header declares " +
                    std::to_string(payload_bytes));
    }
    ck.meta = header.at("meta");
    for (const auto& e : header.at("tensors")) {
      auto shape = e.at("shape").get<std::vector<int>>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("length").get<std::uint64_t>();
      const std::size_t count = Tensor<float>::count(shape);
      if (len != count * sizeof(float)) throw corrupt("tensor '" + e.at("name").get<std::string>() + "' length/shape");
      if (off > payload_bytes || len > payload_bytes - off) throw corrupt("tensor offset out of range");
      Tensor<float> t(std::move(shape));
      std::memcpy(t.data(), bytes.data() + base + off, len);
      ck.add(e.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(std::string("malformed header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const FormatError*>(&e)) throw;
    throw corrupt(e.what());
  }
  return ck;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void save(const std::filesystem::path& path, const Checkpoint& ck) { write_file(path, serialize(ck)); }

Checkpoint load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("checkpoint " + path.string() + " does not exist");
  return deserialize(read_file(path), path.string());
}

std::string hash_bytes(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string hash_file(const std::filesystem::path& path) { return hash_bytes(read_file(path)); }

}  // namespace idguard::checkpoint
