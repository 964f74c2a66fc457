#pragma once

// Named parameter storage, layer helpers, and the Adam optimizer.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "idguard/autograd.hpp"
#include "idguard/rng.hpp"

namespace idguard::nn {

using ag::Var;

/// Ordered collection of named trainable tensors. Copies are deep.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Var<T>& add(const std::string& name, Tensor<T> init);
  /// Registers an existing parameter without copying; both stores then update it.
  Var<T>& share(const std::string& name, const Var<T>& v);
  [[nodiscard]] const Var<T>& get(const std::string& name) const;
  Var<T>& get(const std::string& name);
  [[nodiscard]] bool contains(const std::string& name) const { return index_.count(name) > 0; }

  [[nodiscard]] const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Var<T>>>& items() { return items_; }

  [[nodiscard]] std::size_t scalar_count() const;
  void zero_grad();

  /// Frozen stores refuse optimizer construction and never record gradients.
  void freeze();
  [[nodiscard]] bool frozen() const { return frozen_; }

  template <typename U>
  [[nodiscard]] ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, v] : items_) out.add(name, v.value().template cast<U>());
    if (frozen_) out.freeze();
    return out;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
  std::map<std::string, std::size_t> index_;
  bool frozen_ = false;
};

/// FNV-1a over names, shapes, and raw bytes; used to prove frozen weights are untouched.
template <typename T>
std::string fingerprint(const ParamStore<T>& store);

// Registration helpers. Weights use a uniform(+-1/sqrt(fan_in)) init.
template <typename T>
void add_conv(ParamStore<T>& ps, Rng& rng, const std::string& name, int cin, int cout, int k,
              bool zero = false);
template <typename T>
void add_dense(ParamStore<T>& ps, Rng& rng, const std::string& name, int in, int out,
               bool zero = false);
template <typename T>
void add_norm(ParamStore<T>& ps, const std::string& name, int channels);

template <typename T>
Var<T> conv(const ParamStore<T>& ps, const std::string& name, const Var<T>& x, int stride = 1);
template <typename T>
Var<T> dense(const ParamStore<T>& ps, const std::string& name, const Var<T>& x);
template <typename T>
Var<T> norm(const ParamStore<T>& ps, const std::string& name, const Var<T>& x);

/// Groups used by `norm`: at most 8, dividing the channel count.
int norm_groups(int channels);

/// First-order adaptive-moment optimizer, beta = (0.9, 0.999), eps = 1e-8.
template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(ParamStore<T>& params, Options opt);

  /// Parameters with no recorded gradient are treated as having zero gradient.
  void step();
  void set_lr(double lr) { opt_.lr = lr; }
  [[nodiscard]] long steps_taken() const { return t_; }

  // Moments are exposed for checkpointing.
  [[nodiscard]] const std::vector<Tensor<T>>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void restore(std::vector<Tensor<T>> m, std::vector<Tensor<T>> v, long t);

 private:
  ParamStore<T>* params_;
  Options opt_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  long t_ = 0;
};

}  // namespace idguard::nn
