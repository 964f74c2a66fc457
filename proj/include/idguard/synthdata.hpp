#pragma once

// Procedural 32x32 scenes: one colored shape on a gray field, an optional
// hazard band (red/black diagonal stripes across the bottom quarter), and an
// optional identity mark (a small white block) on the subject.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "idguard/conditioning.hpp"
#include "idguard/tensor.hpp"

namespace idguard::synthdata {

enum class Shape { Circle, Square, Triangle };
enum class Color { Red, Green, Blue, Yellow };

inline constexpr int kImageSize = 32;
inline constexpr int kChannels = 3;
inline constexpr int kHazardRow = 24;  // first row of the hazard band

std::string to_string(Shape s);
std::string to_string(Color c);
Shape shape_from_string(std::string_view s);
Color color_from_string(std::string_view s);

struct SceneSpec {
  Shape shape = Shape::Circle;
  Color color = Color::Blue;
  bool has_hazard = false;
  bool identity_mark = false;
  std::int64_t jitter_seed = 0;

  /// The identity mark only appears on blue circles.
  void validate() const;
  bool operator==(const SceneSpec&) const = default;

  /// Tokens describing the scene: shape, color, "hazard" if present, "sks" if marked.
  [[nodiscard]] conditioning::Prompt prompt(const conditioning::ConceptVocabulary& vocab) const;

  [[nodiscard]] nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

/// Shape placement derived from the jitter seed.
struct Placement {
  int cx = 16;
  int cy = 12;
  int radius = 6;
};
Placement placement(std::int64_t jitter_seed);

/// Stripe colors of the hazard band.
inline constexpr std::array<std::uint8_t, 3> kStripeRed{255, 0, 0};
inline constexpr std::array<std::uint8_t, 3> kStripeBlack{0, 0, 0};

/// 8-bit HWC rendering.
std::vector<std::uint8_t> render_rgb(const SceneSpec& spec);
/// The same rendering as a [3, 32, 32] tensor in [-1, 1].
Tensor<float> render(const SceneSpec& spec);

/// Byte <-> float mapping used by rendering and PNG storage.
inline float byte_to_unit(std::uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }
std::uint8_t unit_to_byte(float v);

/// HWC bytes of image i of an NCHW batch in [-1, 1].
std::vector<std::uint8_t> to_rgb(const Tensor<float>& batch, int i);
/// Writes HWC bytes into slot i of an NCHW batch.
void from_rgb(std::span<const std::uint8_t> rgb, Tensor<float>& batch, int i);

enum class Split { Train, Eval };

struct Corpus {
  std::string name;
  Split split = Split::Train;
  std::vector<SceneSpec> specs;
  Tensor<float> images;  // [N, 3, 32, 32]

  [[nodiscard]] int size() const { return static_cast<int>(specs.size()); }
  [[nodiscard]] Tensor<float> image(int i) const { return images.slice0(i, i + 1); }
  /// Batch gathered by index.
  [[nodiscard]] Tensor<float> gather(std::span<const int> idx) const;
  void validate() const;
};

Corpus make_corpus(std::string name, Split split, std::vector<SceneSpec> specs);

struct Corpora {
  Corpus base_train;         // 4000, all shape/color/hazard combinations
  Corpus subject_instances;  // 24 marked blue circles
  Corpus class_prior;        // 200 unmarked blue circles
  Corpus classifier_train;   // 1000, half with hazard
  Corpus classifier_test;    // 400 held out for the classifier quality gate
  Corpus eval_refs;          // 500 held-out subject renderings (Frechet reference)

  [[nodiscard]] std::vector<const Corpus*> all() const {
    return {&base_train, &subject_instances, &class_prior, &classifier_train, &classifier_test, &eval_refs};
  }
};

Corpora build_corpora(std::int64_t seed);

/// Jitter seed of item i in split slot s; slots never collide.
std::int64_t jitter_seed_for(std::int64_t seed, int slot, int i);

/// Directory layout: manifest.json plus img_00000.png, ...
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

void save_corpora(const Corpora& c, const std::filesystem::path& root);
Corpora load_corpora(const std::filesystem::path& root);

}  // namespace idguard::synthdata
