#include "idguard/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "idguard/errors.hpp"
#include "idguard/rng.hpp"

namespace idguard::diffusion {

void NoiseSchedule::check_timestep(int t) const {
  if (t < 1 || t > T) {
    throw ValidationError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ValidationError("schedule needs T >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ValidationError("schedule requires 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  long double prod = 1.0L;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= static_cast<long double>(s.alpha[i]);
    s.alpha_bar[i] = static_cast<double>(prod);
  }
  return s;
}

namespace {

template <typename T>
void check_batch(const Var<T>& x, std::span<const int> t, const NoiseSchedule& s) {
  if (x.value().rank() < 1 || static_cast<int>(t.size()) != x.dim(0)) {
    throw ValidationError("one timestep per sample required");
  }
  for (int ti : t) s.check_timestep(ti);
}

}  // namespace

template <typename T>
Var<T> forward_diffuse(const Var<T>& x0, std::span<const int> t, const Var<T>& noise, const NoiseSchedule& schedule) {
  check_batch(x0, t, schedule);
  if (x0.shape() != noise.shape()) {
    throw ValidationError("forward_diffuse: noise shape " + shape_str(noise.shape()) + " vs image " + shape_str(x0.shape()));
  }
  std::vector<T> ca(t.size()), cb(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    ca[i] = static_cast<T>(std::sqrt(schedule.ab(t[i])));
    cb[i] = static_cast<T>(std::sqrt(1.0 - schedule.ab(t[i])));
  }
  return ag::per_sample_affine<T>(x0, ca, noise, cb);
}

template <typename T>
Var<T> estimate_x0(const Var<T>& x_t, std::span<const int> t, const Var<T>& eps_hat, const NoiseSchedule& schedule,
                   bool clamp) {
  check_batch(x_t, t, schedule);
  if (x_t.shape() != eps_hat.shape()) throw ValidationError("estimate_x0: shape mismatch");
  std::vector<T> ca(t.size()), cb(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double ab = schedule.ab(t[i]);
    ca[i] = static_cast<T>(1.0 / std::sqrt(ab));
    cb[i] = static_cast<T>(-std::sqrt(1.0 - ab) / std::sqrt(ab));
  }
  auto x0 = ag::per_sample_affine<T>(x_t, ca, eps_hat, cb);
  return clamp ? ag::clamp(x0, static_cast<T>(-kX0Clamp), static_cast<T>(kX0Clamp)) : x0;
}

template <typename T>
Tensor<T> timestep_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  Tensor<T> out({static_cast<int>(t.size()), dim});
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / std::max(1, half));
      out[i * dim + j] = static_cast<T>(std::sin(t[i] * freq));
      out[i * dim + half + j] = static_cast<T>(std::cos(t[i] * freq));
    }
  }
  return out;
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"image_size", image_size}, {"channels", channels}, {"base_width", base_width}, {"cond_dim", cond_dim},
          {"time_dim", time_dim},     {"emb_dim", emb_dim},   {"vocab_size", vocab_size}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.cond_dim = j.at("cond_dim").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.emb_dim = j.at("emb_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  return c;
}

namespace {

template <typename T>
void add_resblock(nn::ParamStore<T>& ps, Rng& rng, const std::string& name, int width, int emb_dim) {
  nn::add_norm(ps, name + ".norm1", width);
  nn::add_conv(ps, rng, name + ".conv1", width, width, 3);
  nn::add_dense(ps, rng, name + ".film", emb_dim, 2 * width, /*zero=*/true);
  nn::add_norm(ps, name + ".norm2", width);
  nn::add_conv(ps, rng, name + ".conv2", width, width, 3);
}

}  // namespace

template <typename T>
DenoiserModel<T>::DenoiserModel(DenoiserConfig config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  const int w0 = config.base_width, w1 = 2 * w0, w2 = 4 * w0;
  Tensor<T> table({config.vocab_size, config.cond_dim});
  for (auto& v : table.vec()) v = static_cast<T>(rng.normal());
  params_.add("embed.weight", std::move(table));
  nn::add_dense(params_, rng, "emb.0", config.time_dim + config.cond_dim, config.emb_dim);
  nn::add_dense(params_, rng, "emb.1", config.emb_dim, config.emb_dim);
  nn::add_conv(params_, rng, "conv_in", config.channels, w0, 3);
  add_resblock(params_, rng, "down0", w0, config.emb_dim);
  nn::add_conv(params_, rng, "down0.pool", w0, w1, 3);
  add_resblock(params_, rng, "down1", w1, config.emb_dim);
  nn::add_conv(params_, rng, "down1.pool", w1, w2, 3);
  add_resblock(params_, rng, "mid", w2, config.emb_dim);
  nn::add_conv(params_, rng, "up1.proj", w2, w1, 3);
  add_resblock(params_, rng, "up1", w1, config.emb_dim);
  nn::add_conv(params_, rng, "up0.proj", w1, w0, 3);
  add_resblock(params_, rng, "up0", w0, config.emb_dim);
  nn::add_norm(params_, "out.norm", w0);
  nn::add_conv(params_, rng, "conv_out", w0, config.channels, 3);
}

template <typename T>
DenoiserModel<T>::DenoiserModel(DenoiserConfig config, nn::ParamStore<T> params)
    : config_(config), params_(std::move(params)) {
  DenoiserModel<T> reference(config, 0);
  for (const auto& [name, v] : reference.params().items()) {
    if (!params_.contains(name) || params_.get(name).shape() != v.shape()) {
      throw FormatError("denoiser parameter '" + name + "' missing or misshapen");
    }
  }
  if (params_.items().size() != reference.params().items().size()) {
    throw FormatError("denoiser parameter set has unexpected entries");
  }
}

template <typename T>
Var<T> DenoiserModel<T>::embed(const std::vector<Prompt>& prompts) const {
  return conditioning::embed_prompts(params_.get("embed.weight"), prompts);
}

template <typename T>
Var<T> DenoiserModel<T>::resblock(const std::string& name, const Var<T>& x, const Var<T>& emb) const {
  using namespace ag;
  auto h = nn::conv(params_, name + ".conv1", silu(nn::norm(params_, name + ".norm1", x)));
  // scale and shift after the norm, where the norm cannot undo them
  h = film(nn::norm(params_, name + ".norm2", h), nn::dense(params_, name + ".film", emb));
  h = nn::conv(params_, name + ".conv2", silu(h));
  return add(x, h);
}

template <typename T>
Var<T> DenoiserModel<T>::predict_noise(const Var<T>& x_t, std::span<const int> t, const Var<T>& cond) const {
  using namespace ag;
  const auto& c = config_;
  if (x_t.value().rank() != 4 || x_t.dim(1) != c.channels || x_t.dim(2) != c.image_size || x_t.dim(3) != c.image_size) {
    throw ValidationError("predict_noise: image shape " + shape_str(x_t.shape()) + " does not match model");
  }
  if (cond.value().rank() != 2 || cond.dim(0) != x_t.dim(0) || cond.dim(1) != c.cond_dim) {
    throw ValidationError("predict_noise: conditioning " + shape_str(cond.shape()) + " but model expects width " +
                          std::to_string(c.cond_dim));
  }
  if (static_cast<int>(t.size()) != x_t.dim(0)) throw ValidationError("predict_noise: one timestep per sample");

  auto temb = constant(timestep_embedding<T>(t, c.time_dim));
  auto emb = silu(nn::dense(params_, "emb.0", concat1(temb, cond)));
  emb = silu(nn::dense(params_, "emb.1", emb));

  auto h0 = resblock("down0", nn::conv(params_, "conv_in", x_t), emb);
  auto h1 = resblock("down1", nn::conv(params_, "down0.pool", h0, 2), emb);
  auto h2 = resblock("mid", nn::conv(params_, "down1.pool", h1, 2), emb);
  auto u1 = resblock("up1", add(upsample2(nn::conv(params_, "up1.proj", h2)), h1), emb);
  auto u0 = resblock("up0", add(upsample2(nn::conv(params_, "up0.proj", u1)), h0), emb);
  return nn::conv(params_, "conv_out", silu(nn::norm(params_, "out.norm", u0)));
}

template <typename T>
ProbeDenoiser<T>::ProbeDenoiser(int vocab_size, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> table({vocab_size, 3});
  for (auto& v : table.vec()) v = static_cast<T>(0.5 * rng.normal());
  params_.add("embed.weight", std::move(table));
  nn::add_conv(params_, rng, "conv_a", 3, 3, 1);
  nn::add_dense(params_, rng, "film", 2 + 3, 6);
  nn::add_conv(params_, rng, "conv_b", 3, 3, 1);
}

template <typename T>
Var<T> ProbeDenoiser<T>::embed(const std::vector<Prompt>& prompts) const {
  return conditioning::embed_prompts(params_.get("embed.weight"), prompts);
}

template <typename T>
Var<T> ProbeDenoiser<T>::predict_noise(const Var<T>& x_t, std::span<const int> t, const Var<T>& cond) const {
  using namespace ag;
  if (cond.value().rank() != 2 || cond.dim(1) != 3) throw ValidationError("probe: conditioning width must be 3");
  auto temb = constant(timestep_embedding<T>(t, 2));
  auto ss = nn::dense(params_, "film", concat1(temb, cond));
  auto h = silu(film(nn::conv(params_, "conv_a", x_t), ss));
  return nn::conv(params_, "conv_b", h);
}

template <typename T>
Tensor<T> ancestral_sample(const std::function<Tensor<T>(const Tensor<T>&, int)>& eps_fn,
                           const NoiseSchedule& schedule, std::vector<int> sample_shape,
                           std::span<const std::uint64_t> seeds, double clip_x0) {
  const int n = static_cast<int>(seeds.size());
  std::vector<int> shape{n};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor<T> x(shape);
  const std::size_t per = x.stride0();
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (int i = 0; i < n; ++i) {
    rngs.emplace_back(seeds[i]);
    for (std::size_t j = 0; j < per; ++j) x[i * per + j] = static_cast<T>(rngs[i].normal());
  }
  for (int t = schedule.T; t >= 1; --t) {
    const Tensor<T> eps = eps_fn(x, t);
    const double beta = schedule.beta_at(t);
    const double c1 = 1.0 / std::sqrt(schedule.alpha_at(t));
    const double c2 = beta / std::sqrt(1.0 - schedule.ab(t));
    const double sigma = t > 1 ? std::sqrt(beta * (1.0 - schedule.ab(t - 1)) / (1.0 - schedule.ab(t))) : 0.0;
    // posterior mean as a blend of the x0 estimate and x_t
    const double ab = schedule.ab(t), ab_prev = schedule.ab(t - 1);
    const double k0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double kt = std::sqrt(schedule.alpha_at(t)) * (1.0 - ab_prev) / (1.0 - ab);
    for (int i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < per; ++j) {
        const std::size_t k = i * per + j;
        const double xk = static_cast<double>(x[k]);
        double v;
        if (clip_x0 > 0) {
          const double x0 = (xk - std::sqrt(1.0 - ab) * static_cast<double>(eps[k])) / std::sqrt(ab);
          v = k0 * std::clamp(x0, -clip_x0, clip_x0) + kt * xk;
        } else {
          v = c1 * (xk - c2 * static_cast<double>(eps[k]));
        }
        if (t > 1) v += sigma * rngs[i].normal();
        x[k] = static_cast<T>(v);
      }
    }
  }
  return x;
}

std::vector<std::uint64_t> sample_seeds(std::uint64_t seed, int first, int n) {
  std::vector<std::uint64_t> out(n);
  for (int i = 0; i < n; ++i) out[i] = mix_seed(seed, static_cast<std::uint64_t>(first + i));
  return out;
}

Tensor<float> sample(const DenoiserModel<float>& model, const Prompt& prompt, const NoiseSchedule& schedule, int n,
                     std::uint64_t seed, int batch) {
  ag::NoGradGuard no_grad;
  const auto& c = model.config();
  Tensor<float> out({n, c.channels, c.image_size, c.image_size});
  const std::size_t per = out.stride0();
  for (int first = 0; first < n; first += batch) {
    const int m = std::min(batch, n - first);
    const auto cond = model.embed(std::vector<Prompt>(m, prompt));
    const auto seeds = sample_seeds(seed, first, m);
    auto eps_fn = [&](const Tensor<float>& x, int t) {
      std::vector<int> ts(m, t);
      return model.predict_noise(ag::constant(x), ts, cond).value();
    };
    Tensor<float> imgs =
        ancestral_sample<float>(eps_fn, schedule, {c.channels, c.image_size, c.image_size}, seeds, 1.0);
    for (std::size_t k = 0; k < imgs.size(); ++k) {
      out[first * per + k] = std::clamp(imgs[k], -1.0f, 1.0f);
    }
  }
  return out;
}

template Var<float> forward_diffuse<float>(const Var<float>&, std::span<const int>, const Var<float>&, const NoiseSchedule&);
template Var<double> forward_diffuse<double>(const Var<double>&, std::span<const int>, const Var<double>&, const NoiseSchedule&);
template Var<float> estimate_x0<float>(const Var<float>&, std::span<const int>, const Var<float>&, const NoiseSchedule&, bool);
template Var<double> estimate_x0<double>(const Var<double>&, std::span<const int>, const Var<double>&, const NoiseSchedule&, bool);
template Tensor<float> timestep_embedding<float>(std::span<const int>, int);
template Tensor<double> timestep_embedding<double>(std::span<const int>, int);
template class DenoiserModel<float>;
template class DenoiserModel<double>;
template class ProbeDenoiser<float>;
template class ProbeDenoiser<double>;
template Tensor<float> ancestral_sample<float>(const std::function<Tensor<float>(const Tensor<float>&, int)>&,
                                               const NoiseSchedule&, std::vector<int>, std::span<const std::uint64_t>, double);
template Tensor<double> ancestral_sample<double>(const std::function<Tensor<double>(const Tensor<double>&, int)>&,
                                                 const NoiseSchedule&, std::vector<int>, std::span<const std::uint64_t>, double);

}  // namespace idguard::diffusion
