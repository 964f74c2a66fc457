#include "doctest.h"

#include <filesystem>

#include "idguard/checkpoint.hpp"
#include "idguard/errors.hpp"

using namespace idguard;
using namespace idguard::checkpoint;

namespace {

Checkpoint sample() {
  Checkpoint ck;
  ck.meta = {{"kind", "test"}, {"n", 3}};
  ck.add("a/w", Tensor<float>({2, 3}, std::vector<float>{1, 2, 3, 4, 5, -6.5f}));
  ck.add("b", Tensor<float>({1}, 0.25f));
  return ck;
}

}  // namespace

TEST_CASE("serialization round-trips byte for byte") {
  const auto bytes = serialize(sample());
  const auto back = deserialize(bytes);
  CHECK(back.meta == sample().meta);
  CHECK(back.get("a/w").vec() == sample().get("a/w").vec());
  CHECK(back.get("a/w").shape() == std::vector<int>{2, 3});
  CHECK(serialize(back) == bytes);
  CHECK_FALSE(back.contains("c"));
  CHECK_THROWS_AS(back.get("c"), ValidationError);
}

TEST_CASE("corrupt or foreign files are rejected") {
  const auto bytes = serialize(sample());
  CHECK_THROWS_AS(deserialize(serialize(sample(), kFormatVersion + 1)), FormatError);
  CHECK_THROWS_AS(deserialize(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(deserialize(bytes + "x"), FormatError);
  CHECK_THROWS_AS(deserialize(bytes.substr(0, 5)), FormatError);
  auto garbled = bytes;
  garbled[9] = '#';
  CHECK_THROWS_AS(deserialize(garbled), FormatError);
  std::string huge = bytes;
  huge[7] = '\x7f';
  CHECK_THROWS_AS(deserialize(huge), FormatError);
}

TEST_CASE("files are written atomically and hashed") {
  const auto dir = std::filesystem::temp_directory_path() / "idguard_ckpt_test";
  std::filesystem::create_directories(dir);
  save(dir / "x.ckpt", sample());
  CHECK(read_file(dir / "x.ckpt") == serialize(sample()));
  CHECK(hash_file(dir / "x.ckpt") == hash_bytes(serialize(sample())));
  CHECK_THROWS_AS(load(dir / "missing.ckpt"), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("FNV-1a reference values") {
  CHECK(hash_bytes("") == "cbf29ce484222325");
  CHECK(hash_bytes("a") == "af63dc4c8601ec8c");
  CHECK(hash_bytes("foobar") == "85944171f73967e8");
}

TEST_CASE("parameter stores persist under a prefix") {
  nn::ParamStore<float> ps;
  Rng rng(1);
  nn::add_dense(ps, rng, "fc", 3, 2);
  Checkpoint ck;
  ck.add_params("model", ps);
  const auto back = deserialize(serialize(ck)).params("model");
  CHECK(nn::fingerprint(back) == nn::fingerprint(ps));
}
