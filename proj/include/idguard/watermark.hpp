#pragma once

// Learned k-bit image watermark: an encoder that adds a bounded residual
// carrying the message, and a decoder that reads the bits back. The decoder is
// trained jointly with the encoder under random distortions and then frozen.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "idguard/autograd.hpp"
#include "idguard/checkpoint.hpp"
#include "idguard/nn.hpp"

namespace idguard::synthdata {
struct Corpus;
}

namespace idguard::watermark {

using ag::Var;

inline constexpr double kPresenceThreshold = 0.85;

class Message {
 public:
  Message() = default;
  explicit Message(std::vector<int> bits);
  /// A string of '0'/'1' characters, at least 8 long.
  static Message parse(std::string_view s);
  /// Uniform random bits from a seed.
  static Message random(int k, std::uint64_t seed);

  [[nodiscard]] int size() const { return static_cast<int>(bits_.size()); }
  [[nodiscard]] const std::vector<int>& bits() const { return bits_; }
  [[nodiscard]] std::string str() const;
  /// [n, k] target tensor with the message repeated per row.
  template <typename T>
  [[nodiscard]] Tensor<T> targets(int n) const;
  bool operator==(const Message&) const = default;

 private:
  std::vector<int> bits_;
};

/// Anything that maps images to k bit logits. Counts its invocations so callers
/// can prove a code path never touched it.
template <typename T>
class BitDecoder {
 public:
  virtual ~BitDecoder() = default;
  [[nodiscard]] Var<T> decode(const Var<T>& images) const {
    ++calls_;
    return logits(images);
  }
  [[nodiscard]] virtual int bits() const = 0;
  [[nodiscard]] virtual bool frozen() const = 0;
  [[nodiscard]] long calls() const { return calls_; }

 protected:
  [[nodiscard]] virtual Var<T> logits(const Var<T>& images) const = 0;

 private:
  mutable long calls_ = 0;
};

struct CodecConfig {
  int k = 32;
  int hidden = 32;
  double residual_scale = 0.1;

  [[nodiscard]] nlohmann::json to_json() const;
  static CodecConfig from_json(const nlohmann::json& j);
};

class WatermarkCodec final : public BitDecoder<float> {
 public:
  WatermarkCodec(CodecConfig config, std::uint64_t seed);
  WatermarkCodec(CodecConfig config, nn::ParamStore<float> encoder, nn::ParamStore<float> decoder, bool frozen);

  /// x + scale * tanh(residual(x, m)), clamped to [-1, 1]. One message per row.
  [[nodiscard]] Var<float> encode(const Var<float>& images, const std::vector<Message>& messages) const;
  [[nodiscard]] Tensor<float> encode(const Tensor<float>& images, const Message& m) const;

  [[nodiscard]] int bits() const override { return config_.k; }
  [[nodiscard]] bool frozen() const override { return frozen_; }
  /// Freezes the decoder (and encoder); there is no way back.
  void freeze();

  [[nodiscard]] const CodecConfig& config() const { return config_; }
  nn::ParamStore<float>& encoder_params() { return encoder_; }
  nn::ParamStore<float>& decoder_params() { return decoder_; }
  [[nodiscard]] const nn::ParamStore<float>& decoder_params() const { return decoder_; }
  [[nodiscard]] std::string decoder_hash() const { return nn::fingerprint(decoder_); }

  [[nodiscard]] checkpoint::Checkpoint to_checkpoint() const;
  static WatermarkCodec from_checkpoint(const checkpoint::Checkpoint& ck);
  void save(const std::filesystem::path& path) const;
  static WatermarkCodec load(const std::filesystem::path& path);

 protected:
  [[nodiscard]] Var<float> logits(const Var<float>& images) const override;

 private:
  CodecConfig config_;
  nn::ParamStore<float> encoder_;
  nn::ParamStore<float> decoder_;
  bool frozen_ = false;
};

struct Extraction {
  Tensor<float> logits;        // [N, k]
  std::vector<std::vector<int>> bits;  // bits[i][j] = logits > 0
};

/// Thresholds logits at zero; ties decode to 0.
std::vector<int> threshold_bits(std::span<const float> logits);
Extraction extract_bits(const BitDecoder<float>& decoder, const Tensor<float>& images);

struct Verification {
  double bit_accuracy = 0;
  bool present = false;
};

double bit_accuracy(std::span<const int> bits, const Message& m);
/// Requires a frozen decoder.
Verification verify(const BitDecoder<float>& decoder, const Tensor<float>& image, const Message& m,
                    double threshold = kPresenceThreshold);

struct CodecTrainOptions {
  int steps = 3000;
  int batch = 32;
  double lr = 1e-3;
  double mse_weight = 0.5;
  int mse_ramp_steps = 600;
};

/// Joint encoder/decoder training with noise, translation, and brightness
/// distortions between encoder and decoder. Returns an unfrozen codec.
WatermarkCodec pretrain_codec(const synthdata::Corpus& corpus, int k, std::uint64_t seed,
                              const CodecTrainOptions& opt = {}, std::ostream* log = nullptr);

struct CodecMetrics {
  double clean_bit_accuracy = 0;
  double noisy_bit_accuracy = 0;  // additive Gaussian noise, sigma 0.05
  double mean_abs_perturbation = 0;
};

/// Held-out measurement with fresh random messages per image.
CodecMetrics evaluate_codec(const WatermarkCodec& codec, const Tensor<float>& images, std::uint64_t seed);

/// A tiny frozen linear decoder over 3x4x4 images, for exhaustive gradient checks.
template <typename T>
class ProbeDecoder final : public BitDecoder<T> {
 public:
  ProbeDecoder(int k, std::uint64_t seed);
  [[nodiscard]] int bits() const override { return k_; }
  [[nodiscard]] bool frozen() const override { return true; }
  [[nodiscard]] const nn::ParamStore<T>& params() const { return params_; }

 protected:
  [[nodiscard]] Var<T> logits(const Var<T>& images) const override;

 private:
  int k_;
  nn::ParamStore<T> params_;
};

}  // namespace idguard::watermark
