#include "idguard/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "idguard/errors.hpp"
#include "idguard/image_io.hpp"
#include "idguard/rng.hpp"

namespace idguard::synthdata {

namespace fs = std::filesystem;

std::string to_string(Shape s) {
  switch (s) {
    case Shape::Circle: return "circle";
    case Shape::Square: return "square";
    case Shape::Triangle: return "triangle";
  }
  return "?";
}

std::string to_string(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
  }
  return "?";
}

Shape shape_from_string(std::string_view s) {
  for (auto v : {Shape::Circle, Shape::Square, Shape::Triangle}) {
    if (to_string(v) == s) return v;
  }
  throw ValidationError("unknown shape '" + std::string(s) + "'");
}

Color color_from_string(std::string_view s) {
  for (auto v : {Color::Red, Color::Green, Color::Blue, Color::Yellow}) {
    if (to_string(v) == s) return v;
  }
  throw ValidationError("unknown color '" + std::string(s) + "'");
}

void SceneSpec::validate() const {
  if (identity_mark && (shape != Shape::Circle || color != Color::Blue)) {
    throw ValidationError("identity mark requires a blue circle");
  }
}

conditioning::Prompt SceneSpec::prompt(const conditioning::ConceptVocabulary& vocab) const {
  std::vector<std::string> tokens{to_string(shape), to_string(color)};
  if (has_hazard) tokens.emplace_back("hazard");
  if (identity_mark) tokens.push_back(vocab.token(vocab.identity_id()));
  return vocab.prompt(tokens);
}

nlohmann::json SceneSpec::to_json() const {
  return {{"shape", to_string(shape)},
          {"color", to_string(color)},
          {"has_hazard", has_hazard},
          {"identity_mark", identity_mark},
          {"jitter_seed", jitter_seed}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  SceneSpec s;
  try {
    s.shape = shape_from_string(j.at("shape").get<std::string>());
    s.color = color_from_string(j.at("color").get<std::string>());
    s.has_hazard = j.at("has_hazard").get<bool>();
    s.identity_mark = j.at("identity_mark").get<bool>();
    s.jitter_seed = j.at("jitter_seed").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

Placement placement(std::int64_t jitter_seed) {
  const auto u = static_cast<std::uint64_t>(jitter_seed);
  Placement p;
  p.cx = 16 + static_cast<int>(mix_seed(u, 0) % 7) - 3;
  p.cy = 12 + static_cast<int>(mix_seed(u, 1) % 7) - 3;
  p.radius = 6 + static_cast<int>(mix_seed(u, 2) % 5) - 2;
  return p;
}

namespace {

std::array<std::uint8_t, 3> fill_color(Color c) {
  switch (c) {
    case Color::Red: return {220, 40, 40};
    case Color::Green: return {40, 200, 40};
    case Color::Blue: return {40, 60, 220};
    case Color::Yellow: return {230, 220, 40};
  }
  return {0, 0, 0};
}

bool inside(Shape s, int dx, int dy, int r) {
  switch (s) {
    case Shape::Circle: return dx * dx + dy * dy <= r * r;
    case Shape::Square: {
      const int hs = std::max(2, (4 * r) / 5);
      return std::abs(dx) <= hs && std::abs(dy) <= hs;
    }
    case Shape::Triangle: return dy >= -r && dy <= r && 2 * std::abs(dx) <= dy + r;
  }
  return false;
}

}  // namespace

std::vector<std::uint8_t> render_rgb(const SceneSpec& spec) {
  spec.validate();
  constexpr int S = kImageSize;
  std::vector<std::uint8_t> px(S * S * 3, 128);
  auto put = [&](int x, int y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= S || y >= S) return;
    std::copy(c.begin(), c.end(), px.begin() + (y * S + x) * 3);
  };
  const Placement p = placement(spec.jitter_seed);
  const auto col = fill_color(spec.color);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      if (inside(spec.shape, x - p.cx, y - p.cy, p.radius)) put(x, y, col);
    }
  }
  if (spec.identity_mark) {
    for (int y = p.cy - 3; y <= p.cy - 1; ++y) {
      for (int x = p.cx + 1; x <= p.cx + 3; ++x) put(x, y, {255, 255, 255});
    }
  }
  if (spec.has_hazard) {
    for (int y = kHazardRow; y < S; ++y) {
      for (int x = 0; x < S; ++x) put(x, y, ((x + y) / 3) % 2 == 0 ? kStripeRed : kStripeBlack);
    }
  }
  return px;
}

std::uint8_t unit_to_byte(float v) {
  const float b = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(b);
}

std::vector<std::uint8_t> to_rgb(const Tensor<float>& batch, int i) {
  const int h = batch.dim(2), w = batch.dim(3);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w * 3);
  const float* src = batch.data() + i * batch.stride0();
  for (int c = 0; c < 3; ++c) {
    for (int p = 0; p < h * w; ++p) out[p * 3 + c] = unit_to_byte(src[c * h * w + p]);
  }
  return out;
}

void from_rgb(std::span<const std::uint8_t> rgb, Tensor<float>& batch, int i) {
  const int h = batch.dim(2), w = batch.dim(3);
  if (rgb.size() != static_cast<std::size_t>(h) * w * 3) throw ValidationError("rgb buffer size mismatch");
  float* dst = batch.data() + i * batch.stride0();
  for (int c = 0; c < 3; ++c) {
    for (int p = 0; p < h * w; ++p) dst[c * h * w + p] = byte_to_unit(rgb[p * 3 + c]);
  }
}

Tensor<float> render(const SceneSpec& spec) {
  Tensor<float> out({1, kChannels, kImageSize, kImageSize});
  from_rgb(render_rgb(spec), out, 0);
  return out.reshaped({kChannels, kImageSize, kImageSize});
}

Tensor<float> Corpus::gather(std::span<const int> idx) const {
  const std::size_t per = images.stride0();
  Tensor<float> out({static_cast<int>(idx.size()), kChannels, kImageSize, kImageSize});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(images.data() + idx[k] * per, per, out.data() + k * per);
  }
  return out;
}

void Corpus::validate() const {
  if (images.rank() != 4 || images.dim(0) != size()) throw FormatError("corpus '" + name + "': image count mismatch");
  for (float v : images.vec()) {
    if (!(v >= -1.0f && v <= 1.0f)) throw FormatError("corpus '" + name + "': pixel outside [-1, 1]");
  }
}

Corpus make_corpus(std::string name, Split split, std::vector<SceneSpec> specs) {
  Corpus c;
  c.name = std::move(name);
  c.split = split;
  c.images = Tensor<float>({static_cast<int>(specs.size()), kChannels, kImageSize, kImageSize});
  const std::size_t per = c.images.stride0();
#pragma omp parallel for schedule(static)
  for (int i = 0; i < static_cast<int>(specs.size()); ++i) {
    const auto img = render(specs[i]);
    std::copy(img.vec().begin(), img.vec().end(), c.images.data() + i * per);
  }
  c.specs = std::move(specs);
  return c;
}

std::int64_t jitter_seed_for(std::int64_t seed, int slot, int i) {
  return seed * 10'000'000 + static_cast<std::int64_t>(slot) * 1'000'000 + i;
}

namespace {

// Half hazard; a quarter of the rest are blue circles, every other one marked.
std::vector<SceneSpec> classifier_specs(std::int64_t seed, int slot, int n) {
  std::vector<SceneSpec> specs;
  for (int i = 0; i < n; ++i) {
    SceneSpec s;
    s.has_hazard = i % 2 == 1;
    const int j = i / 2;
    if (j % 4 == 0) {
      s.shape = Shape::Circle;
      s.color = Color::Blue;
      s.identity_mark = (j / 4) % 2 == 0;
    } else {
      s.shape = static_cast<Shape>(j % 3);
      s.color = static_cast<Color>((j / 3) % 4);
    }
    s.jitter_seed = jitter_seed_for(seed, slot, i);
    specs.push_back(s);
  }
  return specs;
}

std::vector<SceneSpec> subject_specs(std::int64_t seed, int slot, int n, bool mark) {
  std::vector<SceneSpec> specs;
  for (int i = 0; i < n; ++i) {
    specs.push_back({Shape::Circle, Color::Blue, false, mark, jitter_seed_for(seed, slot, i)});
  }
  return specs;
}

}  // namespace

Corpora build_corpora(std::int64_t seed) {
  if (seed < 0 || seed > 900'000'000'000) throw ValidationError("corpus seed must be in [0, 9e11]");
  Corpora out;
  std::vector<SceneSpec> base;
  for (int i = 0; i < 4000; ++i) {
    const int combo = i % 24;
    SceneSpec s;
    s.has_hazard = combo % 2 == 1;
    s.color = static_cast<Color>((combo / 2) % 4);
    s.shape = static_cast<Shape>(combo / 8);
    s.jitter_seed = jitter_seed_for(seed, 0, i);
    base.push_back(s);
  }
  out.base_train = make_corpus("base_train", Split::Train, std::move(base));
  out.subject_instances = make_corpus("subject_instances", Split::Train, subject_specs(seed, 1, 24, true));
  out.class_prior = make_corpus("class_prior", Split::Train, subject_specs(seed, 2, 200, false));
  out.classifier_train = make_corpus("classifier_train", Split::Train, classifier_specs(seed, 3, 1000));
  out.classifier_test = make_corpus("classifier_test", Split::Eval, classifier_specs(seed, 4, 400));
  out.eval_refs = make_corpus("eval_refs", Split::Eval, subject_specs(seed, 5, 500, true));
  return out;
}

namespace {

std::string image_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05d.png", i);
  return buf;
}

}  // namespace

void save_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json items = nlohmann::json::array();
  for (int i = 0; i < corpus.size(); ++i) {
    auto j = corpus.specs[i].to_json();
    j["index"] = i;
    j["file"] = image_name(i);
    j["split"] = corpus.split == Split::Train ? "train" : "eval";
    items.push_back(std::move(j));
  }
  nlohmann::json manifest{{"name", corpus.name},
                          {"split", corpus.split == Split::Train ? "train" : "eval"},
                          {"count", corpus.size()},
                          {"items", std::move(items)}};
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << "\n";
  for (int i = 0; i < corpus.size(); ++i) image_io::write_png(dir / image_name(i), corpus.images, i);
}

Corpus load_corpus(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw PrerequisiteError("no corpus manifest in " + dir.string(), "make-data");
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("unreadable manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  Corpus c;
  try {
    c.name = m.at("name").get<std::string>();
    c.split = m.at("split").get<std::string>() == "eval" ? Split::Eval : Split::Train;
    for (const auto& item : m.at("items")) c.specs.push_back(SceneSpec::from_json(item));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  c.images = Tensor<float>({c.size(), kChannels, kImageSize, kImageSize});
  for (int i = 0; i < c.size(); ++i) {
    const auto img = image_io::read_png(dir / image_name(i));
    if (img.width != kImageSize || img.height != kImageSize) throw FormatError(image_name(i) + ": wrong size");
    from_rgb(img.pixels, c.images, i);
  }
  c.validate();
  return c;
}

void save_corpora(const Corpora& c, const fs::path& root) {
  for (const Corpus* corpus : c.all()) save_corpus(*corpus, root / corpus->name);
}

Corpora load_corpora(const fs::path& root) {
  Corpora c;
  c.base_train = load_corpus(root / "base_train");
  c.subject_instances = load_corpus(root / "subject_instances");
  c.class_prior = load_corpus(root / "class_prior");
  c.classifier_train = load_corpus(root / "classifier_train");
  c.classifier_test = load_corpus(root / "classifier_test");
  c.eval_refs = load_corpus(root / "eval_refs");
  return c;
}

}  // namespace idguard::synthdata
