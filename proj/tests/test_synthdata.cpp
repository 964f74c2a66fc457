#include "doctest.h"

#include <filesystem>
#include <map>
#include <set>
#include <tuple>

#include "idguard/errors.hpp"
#include "idguard/synthdata.hpp"

using namespace idguard;
using namespace idguard::synthdata;

namespace {

std::array<int, 3> px(const std::vector<std::uint8_t>& rgb, int x, int y) {
  const auto* p = &rgb[(y * kImageSize + x) * 3];
  return {p[0], p[1], p[2]};
}

}  // namespace

TEST_CASE("hazard band covers the bottom rows with half red, half black stripes") {
  SceneSpec s{Shape::Square, Color::Green, true, false, 42};
  const auto rgb = render_rgb(s);
  int red = 0, black = 0;
  for (int y = kHazardRow; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const auto c = px(rgb, x, y);
      red += c == std::array<int, 3>{255, 0, 0};
      black += c == std::array<int, 3>{0, 0, 0};
    }
  }
  CHECK(red + black == (kImageSize - kHazardRow) * kImageSize);
  // stripes of width 3 along x + y: count cells with ((x + y) / 3) even directly
  int even = 0;
  for (int y = kHazardRow; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) even += ((x + y) / 3) % 2 == 0;
  CHECK(red == even);
  s.has_hazard = false;
  const auto clean = render_rgb(s);
  for (int x = 0; x < kImageSize; ++x) CHECK(px(clean, x, kImageSize - 1) == std::array<int, 3>{128, 128, 128});
}

TEST_CASE("identity mark is a white block on a blue circle only") {
  SceneSpec s{Shape::Circle, Color::Blue, false, true, 7};
  s.validate();
  const auto p = placement(7);
  const auto rgb = render_rgb(s);
  for (int y = p.cy - 3; y <= p.cy - 1; ++y)
    for (int x = p.cx + 1; x <= p.cx + 3; ++x) CHECK(px(rgb, x, y) == std::array<int, 3>{255, 255, 255});
  CHECK(px(rgb, p.cx, p.cy) == std::array<int, 3>{40, 60, 220});
  CHECK_THROWS_AS((SceneSpec{Shape::Square, Color::Blue, false, true, 0}.validate()), ValidationError);
  CHECK_THROWS_AS((SceneSpec{Shape::Circle, Color::Red, false, true, 0}.validate()), ValidationError);
}

TEST_CASE("placement jitter stays inside its ranges") {
  std::set<int> radii;
  for (std::int64_t j = 0; j < 500; ++j) {
    const auto p = placement(j);
    CHECK(p.cx >= 13);
    CHECK(p.cx <= 19);
    CHECK(p.cy >= 9);
    CHECK(p.cy <= 15);
    CHECK(p.radius >= 4);
    CHECK(p.radius <= 8);
    radii.insert(p.radius);
  }
  CHECK(radii.size() == 5);
}

TEST_CASE("pixel mapping round-trips bytes") {
  for (int b = 0; b < 256; ++b) CHECK(unit_to_byte(byte_to_unit(static_cast<std::uint8_t>(b))) == b);
  CHECK(unit_to_byte(-3.0f) == 0);
  CHECK(unit_to_byte(3.0f) == 255);
}

TEST_CASE("corpora are deterministic, sized, and disjoint in jitter") {
  const auto a = build_corpora(5), b = build_corpora(5), c = build_corpora(6);
  CHECK(a.base_train.size() == 4000);
  CHECK(a.subject_instances.size() == 24);
  CHECK(a.class_prior.size() == 200);
  CHECK(a.eval_refs.size() == 500);
  CHECK(a.base_train.images.vec() == b.base_train.images.vec());
  CHECK(a.base_train.images.vec() != c.base_train.images.vec());
  std::set<std::int64_t> seen;
  std::size_t total = 0;
  for (const auto* corpus : a.all()) {
    corpus->validate();
    for (const auto& s : corpus->specs) seen.insert(s.jitter_seed);
    total += corpus->specs.size();
  }
  CHECK(seen.size() == total);
  for (const auto& s : a.subject_instances.specs) {
    CHECK(s.identity_mark);
    CHECK_FALSE(s.has_hazard);
  }
  for (const auto& s : a.class_prior.specs) CHECK_FALSE(s.identity_mark);
  // base_train covers every (shape, color, hazard) combination equally
  std::map<std::tuple<int, int, bool>, int> combos;
  for (const auto& s : a.base_train.specs) ++combos[{int(s.shape), int(s.color), s.has_hazard}];
  CHECK(combos.size() == 24);
  for (const auto& [k, n] : combos) CHECK(n == 4000 / 24 + (std::get<0>(k) * 8 + std::get<1>(k) * 2 + std::get<2>(k) < 4000 % 24));
}

TEST_CASE("corpus prompts carry the scene tokens") {
  const auto v = conditioning::ConceptVocabulary::standard();
  SceneSpec s{Shape::Circle, Color::Blue, true, true, 0};
  CHECK(v.render(s.prompt(v)) == "circle blue sks hazard");
  CHECK(SceneSpec::from_json(s.to_json()) == s);
}

TEST_CASE("corpora persist as PNG plus manifest") {
  const auto dir = std::filesystem::temp_directory_path() / "idguard_corpus_test";
  std::filesystem::remove_all(dir);
  const auto c = build_corpora(1);
  save_corpus(c.subject_instances, dir);
  const auto back = load_corpus(dir);
  CHECK(back.specs == c.subject_instances.specs);
  CHECK(back.images.vec() == c.subject_instances.images.vec());
  CHECK_THROWS_AS(load_corpus(dir / "missing"), PrerequisiteError);
  std::filesystem::remove_all(dir);
}
