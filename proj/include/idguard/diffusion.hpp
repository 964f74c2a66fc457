#pragma once

// Pixel-space conditional DDPM: noise schedule, forward noising, the
// conditional U-Net noise predictor, one-step x0 estimation, and ancestral
// sampling.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"

#include "idguard/autograd.hpp"
#include "idguard/conditioning.hpp"
#include "idguard/nn.hpp"

namespace idguard::diffusion {

using ag::Var;
using conditioning::Prompt;

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1] for t in [1, T]
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative product of alpha

  /// alpha_bar at timestep t in [0, T]; t = 0 is the virtual entry 1.
  [[nodiscard]] double ab(int t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }
  [[nodiscard]] double beta_at(int t) const { return beta.at(t - 1); }
  [[nodiscard]] double alpha_at(int t) const { return alpha.at(t - 1); }
  void check_timestep(int t) const;

  [[nodiscard]] nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

  double beta_start = 0;
  double beta_end = 0;
};

/// Linear betas, endpoints inclusive.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

/// sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise, per sample.
template <typename T>
Var<T> forward_diffuse(const Var<T>& x0, std::span<const int> t, const Var<T>& noise,
                       const NoiseSchedule& schedule);

/// (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t), clamped to [-1.5, 1.5] unless
/// `clamp` is false.
template <typename T>
Var<T> estimate_x0(const Var<T>& x_t, std::span<const int> t, const Var<T>& eps_hat,
                   const NoiseSchedule& schedule, bool clamp = true);

inline constexpr double kX0Clamp = 1.5;

/// Sinusoidal timestep features: [N, dim].
template <typename T>
Tensor<T> timestep_embedding(std::span<const int> t, int dim);

/// Anything that predicts noise from (x_t, t, conditioning vector).
template <typename T>
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  [[nodiscard]] virtual Var<T> embed(const std::vector<Prompt>& prompts) const = 0;
  [[nodiscard]] virtual Var<T> predict_noise(const Var<T>& x_t, std::span<const int> t,
                                             const Var<T>& cond) const = 0;
  [[nodiscard]] virtual int cond_dim() const = 0;
  virtual nn::ParamStore<T>& params() = 0;
  [[nodiscard]] virtual const nn::ParamStore<T>& params() const = 0;

  /// Convenience: predict with every sample under the same prompt.
  [[nodiscard]] Var<T> predict_noise(const Var<T>& x_t, std::span<const int> t, const Prompt& prompt) const {
    return predict_noise(x_t, t, embed(std::vector<Prompt>(static_cast<std::size_t>(x_t.dim(0)), prompt)));
  }
};

struct DenoiserConfig {
  int image_size = 32;
  int channels = 3;
  int base_width = 16;  // level widths: base, 2*base, 4*base
  int cond_dim = 64;
  int time_dim = 64;
  int emb_dim = 64;
  int vocab_size = 10;

  [[nodiscard]] nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Small conditional U-Net: two downsampling levels, residual blocks with
/// group norm, and the (timestep, prompt) embedding injected into every block
/// as a learned per-channel scale and shift. The prompt embedding table
/// ("embed.weight") is part of the parameter set.
template <typename T>
class DenoiserModel final : public NoisePredictor<T> {
 public:
  DenoiserModel(DenoiserConfig config, std::uint64_t seed);
  DenoiserModel(DenoiserConfig config, nn::ParamStore<T> params);

  [[nodiscard]] Var<T> embed(const std::vector<Prompt>& prompts) const override;
  [[nodiscard]] Var<T> predict_noise(const Var<T>& x_t, std::span<const int> t,
                                     const Var<T>& cond) const override;
  using NoisePredictor<T>::predict_noise;
  [[nodiscard]] int cond_dim() const override { return config_.cond_dim; }
  nn::ParamStore<T>& params() override { return params_; }
  [[nodiscard]] const nn::ParamStore<T>& params() const override { return params_; }

  [[nodiscard]] const DenoiserConfig& config() const { return config_; }
  [[nodiscard]] std::size_t param_count() const { return params_.scalar_count(); }

  template <typename U>
  [[nodiscard]] DenoiserModel<U> cast() const {
    return DenoiserModel<U>(config_, params_.template cast<U>());
  }

 private:
  Var<T> resblock(const std::string& name, const Var<T>& x, const Var<T>& emb) const;

  DenoiserConfig config_;
  nn::ParamStore<T> params_;
};

/// A ~90-parameter conditional noise predictor on 3x4x4 images, small enough
/// for exhaustive finite-difference gradient checks.
template <typename T>
class ProbeDenoiser final : public NoisePredictor<T> {
 public:
  ProbeDenoiser(int vocab_size, std::uint64_t seed);

  [[nodiscard]] Var<T> embed(const std::vector<Prompt>& prompts) const override;
  [[nodiscard]] Var<T> predict_noise(const Var<T>& x_t, std::span<const int> t,
                                     const Var<T>& cond) const override;
  using NoisePredictor<T>::predict_noise;
  [[nodiscard]] int cond_dim() const override { return 3; }
  nn::ParamStore<T>& params() override { return params_; }
  [[nodiscard]] const nn::ParamStore<T>& params() const override { return params_; }

 private:
  nn::ParamStore<T> params_;
};

/// Reverse-time ancestral sampling from t = T down to 1 with the posterior
/// variance; no noise is added at the last step. Sample i draws all of its
/// noise from its own stream seeded by seeds[i], so results do not depend on
/// how samples are batched. With `clip_x0 > 0` each step forms the posterior
/// mean from the x0 estimate clamped to [-clip_x0, clip_x0]; with 0 it uses the
/// plain noise-form mean.
template <typename T>
Tensor<T> ancestral_sample(const std::function<Tensor<T>(const Tensor<T>&, int)>& eps_fn,
                           const NoiseSchedule& schedule, std::vector<int> sample_shape,
                           std::span<const std::uint64_t> seeds, double clip_x0 = 0.0);

/// Per-sample stream seeds for sample indices [first, first + n).
std::vector<std::uint64_t> sample_seeds(std::uint64_t seed, int first, int n);

/// Generates n images for one prompt, clamped to [-1, 1]. Inference only;
/// x0 estimates are clipped to the pixel range at every step.
Tensor<float> sample(const DenoiserModel<float>& model, const Prompt& prompt,
                     const NoiseSchedule& schedule, int n, std::uint64_t seed, int batch = 64);

}  // namespace idguard::diffusion
