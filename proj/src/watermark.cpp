#include "idguard/watermark.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "idguard/errors.hpp"
#include "idguard/rng.hpp"
#include "idguard/synthdata.hpp"

namespace idguard::watermark {

Message::Message(std::vector<int> bits) : bits_(std::move(bits)) {
  if (bits_.size() < 8) throw ValidationError("watermark message needs at least 8 bits");
  for (int b : bits_) {
    if (b != 0 && b != 1) throw ValidationError("watermark bits must be 0 or 1");
  }
}

Message Message::parse(std::string_view s) {
  std::vector<int> bits;
  for (char c : s) {
    if (c != '0' && c != '1') throw ValidationError("message must contain only '0' and '1' characters");
    bits.push_back(c - '0');
  }
  return Message(std::move(bits));
}

Message Message::random(int k, std::uint64_t seed) {
  std::vector<int> bits(k);
  for (int i = 0; i < k; ++i) bits[i] = static_cast<int>(mix_seed(seed, i) & 1U);
  return Message(std::move(bits));
}

std::string Message::str() const {
  std::string s;
  for (int b : bits_) s += static_cast<char>('0' + b);
  return s;
}

template <typename T>
Tensor<T> Message::targets(int n) const {
  Tensor<T> t({n, size()});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < size(); ++j) t[i * size() + j] = static_cast<T>(bits_[j]);
  }
  return t;
}

template Tensor<float> Message::targets<float>(int) const;
template Tensor<double> Message::targets<double>(int) const;

nlohmann::json CodecConfig::to_json() const {
  return {{"k", k}, {"hidden", hidden}, {"residual_scale", residual_scale}};
}

CodecConfig CodecConfig::from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.k = j.at("k").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.residual_scale = j.at("residual_scale").get<double>();
  return c;
}

namespace {

// sin/cos of the pixel coordinates at one period per image side, so the
// encoder can place spatially varying patterns.
Tensor<float> position_channels(int n, int h, int w) {
  Tensor<float> p({n, 4, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double ax = 2 * std::numbers::pi * x / w, ay = 2 * std::numbers::pi * y / h;
      const float v[4] = {static_cast<float>(std::sin(ax)), static_cast<float>(std::cos(ax)),
                          static_cast<float>(std::sin(ay)), static_cast<float>(std::cos(ay))};
      for (int c = 0; c < 4; ++c) p[c * hw + y * w + x] = v[c];
    }
  }
  for (int i = 1; i < n; ++i) std::copy_n(p.data(), 4 * hw, p.data() + i * 4 * hw);
  return p;
}

Tensor<float> signed_messages(const std::vector<Message>& messages, int k) {
  Tensor<float> t({static_cast<int>(messages.size()), k});
  for (std::size_t i = 0; i < messages.size(); ++i) {
    if (messages[i].size() != k) {
      throw ValidationError("message has " + std::to_string(messages[i].size()) + " bits, codec expects " +
                            std::to_string(k));
    }
    for (int j = 0; j < k; ++j) t[i * k + j] = messages[i].bits()[j] ? 1.0f : -1.0f;
  }
  return t;
}

}  // namespace

WatermarkCodec::WatermarkCodec(CodecConfig config, std::uint64_t seed) : config_(config) {
  if (config.k < 8) throw ValidationError("codec needs k >= 8");
  Rng rng(seed);
  const int h = config.hidden;
  nn::add_conv(encoder_, rng, "enc.conv1", 3 + 4, h, 3);
  nn::add_dense(encoder_, rng, "enc.msg", config.k, 2 * h);
  nn::add_conv(encoder_, rng, "enc.conv2", h, h, 3);
  nn::add_conv(encoder_, rng, "enc.conv3", h, 3, 3);
  nn::add_conv(decoder_, rng, "dec.conv1", 3, h, 3);
  nn::add_conv(decoder_, rng, "dec.conv2", h, h, 3);
  nn::add_conv(decoder_, rng, "dec.conv3", h, h, 3);
  nn::add_dense(decoder_, rng, "dec.head", h * 16, config.k);
}

WatermarkCodec::WatermarkCodec(CodecConfig config, nn::ParamStore<float> encoder, nn::ParamStore<float> decoder,
                               bool frozen)
    : config_(config), encoder_(std::move(encoder)), decoder_(std::move(decoder)) {
  const WatermarkCodec reference(config, 0);
  auto check = [](const nn::ParamStore<float>& want, const nn::ParamStore<float>& got) {
    if (want.items().size() != got.items().size()) throw FormatError("codec parameter set has unexpected entries");
    for (const auto& [name, v] : want.items()) {
      if (!got.contains(name) || got.get(name).shape() != v.shape()) {
        throw FormatError("codec parameter '" + name + "' missing or misshapen");
      }
    }
  };
  check(reference.encoder_, encoder_);
  check(reference.decoder_, decoder_);
  if (frozen) freeze();
}

void WatermarkCodec::freeze() {
  encoder_.freeze();
  decoder_.freeze();
  frozen_ = true;
}

Var<float> WatermarkCodec::encode(const Var<float>& images, const std::vector<Message>& messages) const {
  using namespace ag;
  const int n = images.dim(0), hh = images.dim(2), ww = images.dim(3);
  if (static_cast<int>(messages.size()) != n) throw ValidationError("encode: one message per image");
  auto m = constant(signed_messages(messages, config_.k));
  auto x = concat1(images, constant(position_channels(n, hh, ww)));
  auto h = nn::conv(encoder_, "enc.conv1", x);
  h = relu(film(h, nn::dense(encoder_, "enc.msg", m)));
  h = relu(nn::conv(encoder_, "enc.conv2", h));
  auto r = tanh(nn::conv(encoder_, "enc.conv3", h));
  return clamp(add(images, scale(r, static_cast<float>(config_.residual_scale))), -1.0f, 1.0f);
}

Tensor<float> WatermarkCodec::encode(const Tensor<float>& images, const Message& m) const {
  ag::NoGradGuard ng;
  return encode(ag::constant(images), std::vector<Message>(images.dim(0), m)).value();
}

Var<float> WatermarkCodec::logits(const Var<float>& images) const {
  using namespace ag;
  if (images.value().rank() != 4 || images.dim(1) != 3) {
    throw ValidationError("decoder expects [N, 3, H, W] images, got " + shape_str(images.shape()));
  }
  auto h = relu(nn::conv(decoder_, "dec.conv1", images, 2));
  h = relu(nn::conv(decoder_, "dec.conv2", h, 2));
  h = relu(nn::conv(decoder_, "dec.conv3", h, 2));
  if (h.dim(2) != 4 || h.dim(3) != 4) throw ValidationError("decoder expects 32x32 images");
  return nn::dense(decoder_, "dec.head", reshape(h, {h.dim(0), h.dim(1) * 16}));
}

checkpoint::Checkpoint WatermarkCodec::to_checkpoint() const {
  checkpoint::Checkpoint ck;
  ck.meta = {{"kind", "watermark_codec"}, {"config", config_.to_json()}, {"frozen", frozen_},
             {"decoder_hash", decoder_hash()}};
  ck.add_params("encoder", encoder_);
  ck.add_params("decoder", decoder_);
  return ck;
}

WatermarkCodec WatermarkCodec::from_checkpoint(const checkpoint::Checkpoint& ck) {
  try {
    if (ck.meta.at("kind").get<std::string>() != "watermark_codec") throw FormatError("not a watermark codec checkpoint");
    return WatermarkCodec(CodecConfig::from_json(ck.meta.at("config")), ck.params("encoder"), ck.params("decoder"),
                          ck.meta.at("frozen").get<bool>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed codec header: ") + e.what());
  }
}

void WatermarkCodec::save(const std::filesystem::path& path) const { checkpoint::save(path, to_checkpoint()); }

WatermarkCodec WatermarkCodec::load(const std::filesystem::path& path) {
  return from_checkpoint(checkpoint::load(path));
}

std::vector<int> threshold_bits(std::span<const float> logits) {
  std::vector<int> bits(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) bits[i] = logits[i] > 0.0f ? 1 : 0;
  return bits;
}

Extraction extract_bits(const BitDecoder<float>& decoder, const Tensor<float>& images) {
  ag::NoGradGuard ng;
  Extraction ex;
  ex.logits = decoder.decode(ag::constant(images)).value();
  const int n = ex.logits.dim(0), k = ex.logits.dim(1);
  for (int i = 0; i < n; ++i) ex.bits.push_back(threshold_bits(ex.logits.span().subspan(i * k, k)));
  return ex;
}

double bit_accuracy(std::span<const int> bits, const Message& m) {
  if (static_cast<int>(bits.size()) != m.size()) throw ValidationError("bit count differs from message length");
  int ok = 0;
  for (int i = 0; i < m.size(); ++i) ok += bits[i] == m.bits()[i];
  return static_cast<double>(ok) / m.size();
}

Verification verify(const BitDecoder<float>& decoder, const Tensor<float>& image, const Message& m, double threshold) {
  if (!decoder.frozen()) throw ValidationError("verify requires a frozen watermark decoder");
  if (m.size() != decoder.bits()) throw ValidationError("message length differs from decoder width");
  Tensor<float> batch = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (batch.dim(0) != 1) throw ValidationError("verify takes one image");
  const auto ex = extract_bits(decoder, batch);
  Verification v;
  v.bit_accuracy = bit_accuracy(ex.bits[0], m);
  v.present = v.bit_accuracy >= threshold;
  return v;
}

namespace {

std::vector<Message> random_messages(Rng& rng, int n, int k) {
  std::vector<Message> out;
  for (int i = 0; i < n; ++i) {
    std::vector<int> bits(k);
    for (int& b : bits) b = rng.uniform() < 0.5 ? 0 : 1;
    out.emplace_back(std::move(bits));
  }
  return out;
}

Tensor<float> message_targets(const std::vector<Message>& ms) {
  const int k = ms.front().size();
  Tensor<float> t({static_cast<int>(ms.size()), k});
  for (std::size_t i = 0; i < ms.size(); ++i) {
    for (int j = 0; j < k; ++j) t[i * k + j] = static_cast<float>(ms[i].bits()[j]);
  }
  return t;
}

}  // namespace

WatermarkCodec pretrain_codec(const synthdata::Corpus& corpus, int k, std::uint64_t seed,
                              const CodecTrainOptions& opt, std::ostream* log) {
  using namespace ag;
  if (corpus.size() < k) {
    throw ValidationError("codec corpus has " + std::to_string(corpus.size()) + " images; need at least k = " +
                          std::to_string(k));
  }
  CodecConfig cfg;
  cfg.k = k;
  WatermarkCodec codec(cfg, mix_seed(seed, 0xC0DEC));
  nn::ParamStore<float> joint;
  for (auto* ps : {&codec.encoder_params(), &codec.decoder_params()}) {
    for (auto& [name, v] : ps->items()) joint.share(name, v);
  }
  nn::Adam<float> adam(joint, {opt.lr});
  Rng rng(mix_seed(seed, 1));
  const int B = opt.batch;
  for (int step = 0; step < opt.steps; ++step) {
    std::vector<int> idx(B);
    for (int& i : idx) i = rng.uniform_int(0, corpus.size() - 1);
    auto x = constant(corpus.gather(idx));
    const auto msgs = random_messages(rng, B, k);
    auto enc = codec.encode(x, msgs);

    std::vector<int> dx(B), dy(B);
    std::vector<float> gain(B), offset(B);
    Tensor<float> noise(x.shape());
    const std::size_t per = noise.stride0();
    for (int i = 0; i < B; ++i) {
      dx[i] = rng.uniform_int(-2, 2);
      dy[i] = rng.uniform_int(-2, 2);
      const double s = rng.uniform(0.9, 1.1);
      gain[i] = static_cast<float>(s);
      offset[i] = static_cast<float>(s - 1.0);
      const double sigma = rng.uniform(0.0, 0.05);
      for (std::size_t j = 0; j < per; ++j) noise[i * per + j] = static_cast<float>(sigma * rng.normal());
    }
    auto d = translate(enc, dx, dy);
    d = per_sample_affine<float>(d, gain, constant(Tensor<float>(x.shape(), 1.0f)), offset);
    d = add(d, constant(std::move(noise)));
    auto bce = bce_with_logits(codec.decode(d), message_targets(msgs));
    auto img = mse(enc, x);
    // The image term ramps in; from the start it would shrink the residual
    // before the decoder has learned to read anything.
    const double ramp = opt.mse_ramp_steps > 0 ? std::min(1.0, static_cast<double>(step) / opt.mse_ramp_steps) : 1.0;
    auto loss = add(bce, scale(img, static_cast<float>(opt.mse_weight * ramp)));
    joint.zero_grad();
    backward(loss);
    adam.step();
    if (log && (step % 100 == 0 || step + 1 == opt.steps)) {
      *log << nlohmann::json{{"stage", "codec"}, {"step", step}, {"loss", loss.item()}, {"bce", bce.item()},
                             {"mse", img.item()}}
                  .dump()
           << "\n";
    }
  }
  codec.freeze();
  return codec;
}

CodecMetrics evaluate_codec(const WatermarkCodec& codec, const Tensor<float>& images, std::uint64_t seed) {
  ag::NoGradGuard ng;
  Rng rng(seed);
  const int n = images.dim(0), k = codec.bits();
  const auto msgs = random_messages(rng, n, k);
  const Tensor<float> enc = codec.encode(ag::constant(images), msgs).value();
  Tensor<float> noisy = enc;
  for (auto& v : noisy.vec()) v += static_cast<float>(0.05 * rng.normal());
  const auto clean = extract_bits(codec, enc);
  const auto dist = extract_bits(codec, noisy);
  CodecMetrics m;
  for (int i = 0; i < n; ++i) {
    m.clean_bit_accuracy += bit_accuracy(clean.bits[i], msgs[i]) / n;
    m.noisy_bit_accuracy += bit_accuracy(dist.bits[i], msgs[i]) / n;
  }
  double s = 0;
  for (std::size_t j = 0; j < enc.size(); ++j) s += std::abs(enc[j] - images[j]);
  m.mean_abs_perturbation = s / static_cast<double>(enc.size());
  return m;
}

template <typename T>
ProbeDecoder<T>::ProbeDecoder(int k, std::uint64_t seed) : k_(k) {
  Rng rng(seed);
  nn::add_dense(params_, rng, "dense", 48, k);
  params_.freeze();
}

template <typename T>
Var<T> ProbeDecoder<T>::logits(const Var<T>& images) const {
  if (images.value().stride0() != 48) throw ValidationError("probe decoder expects 3x4x4 images");
  return nn::dense(params_, "dense", ag::reshape(images, {images.dim(0), 48}));
}

template class ProbeDecoder<float>;
template class ProbeDecoder<double>;

}  // namespace idguard::watermark
