#include "idguard/nn.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "idguard/errors.hpp"

namespace idguard::nn {

template <typename T>
ParamStore<T>::ParamStore(const ParamStore& other) : index_(other.index_), frozen_(other.frozen_) {
  items_.reserve(other.items_.size());
  for (const auto& [name, v] : other.items_) {
    items_.emplace_back(name, Var<T>(v.value(), v.requires_grad()));
  }
}

template <typename T>
ParamStore<T>& ParamStore<T>::operator=(const ParamStore& other) {
  if (this != &other) {
    ParamStore copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
Var<T>& ParamStore<T>::add(const std::string& name, Tensor<T> init) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, Var<T>(std::move(init), !frozen_));
  return items_.back().second;
}

template <typename T>
Var<T>& ParamStore<T>::share(const std::string& name, const Var<T>& v) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, v);
  return items_.back().second;
}

template <typename T>
const Var<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return items_[it->second].second;
}

template <typename T>
Var<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return items_[it->second].second;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : items_) n += v.value().size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, v] : items_) v.zero_grad();
}

template <typename T>
void ParamStore<T>::freeze() {
  frozen_ = true;
  for (auto& [name, v] : items_) {
    v.set_requires_grad(false);
    v.zero_grad();
  }
}

template <typename T>
std::string fingerprint(const ParamStore<T>& store) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, v] : store.items()) {
    feed(name.data(), name.size());
    for (int d : v.shape()) feed(&d, sizeof d);
    feed(v.value().data(), v.value().size() * sizeof(T));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
void add_conv(ParamStore<T>& ps, Rng& rng, const std::string& name, int cin, int cout, int k, bool zero) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  Tensor<T> w({cout, cin, k, k});
  Tensor<T> b({cout});
  if (!zero) {
    for (auto& v : w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : b.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", std::move(b));
}

template <typename T>
void add_dense(ParamStore<T>& ps, Rng& rng, const std::string& name, int in, int out, bool zero) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor<T> w({out, in});
  Tensor<T> b({out});
  if (!zero) {
    for (auto& v : w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : b.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", std::move(b));
}

template <typename T>
void add_norm(ParamStore<T>& ps, const std::string& name, int channels) {
  ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
  ps.add(name + ".beta", Tensor<T>({channels}, T(0)));
}

int norm_groups(int channels) {
  int g = 8;
  while (g > 1 && channels % g) --g;
  return g;
}

template <typename T>
Var<T> conv(const ParamStore<T>& ps, const std::string& name, const Var<T>& x, int stride) {
  const auto& w = ps.get(name + ".weight");
  return ag::conv2d(x, w, ps.get(name + ".bias"), stride, w.dim(2) / 2);
}

template <typename T>
Var<T> dense(const ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return ag::linear(x, ps.get(name + ".weight"), ps.get(name + ".bias"));
}

template <typename T>
Var<T> norm(const ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return ag::group_norm(x, ps.get(name + ".gamma"), ps.get(name + ".beta"), norm_groups(x.dim(1)));
}

template <typename T>
Adam<T>::Adam(ParamStore<T>& params, Options opt) : params_(&params), opt_(opt) {
  if (params.frozen()) throw ValidationError("refusing to optimize a frozen parameter store");
  for (const auto& [name, v] : params.items()) {
    m_.emplace_back(v.shape());
    v_.emplace_back(v.shape());
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
  const T step = static_cast<T>(opt_.lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(opt_.eps);
  auto& items = params_->items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i].second;
    if (!p.requires_grad()) continue;
    const Tensor<T>& g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    T* w = p.mutable_value().data();
    for (std::size_t j = 0; j < m.size(); ++j) {
      const T gj = g.empty() ? T(0) : g[j];
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      w[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

template <typename T>
void Adam<T>::restore(std::vector<Tensor<T>> m, std::vector<Tensor<T>> v, long t) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw FormatError("optimizer state size mismatch");
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i].shape() != m_[i].shape() || v[i].shape() != v_[i].shape()) {
      throw FormatError("optimizer moment shape mismatch for " + params_->items()[i].first);
    }
  }
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

#define IDGUARD_INSTANTIATE_NN(T)                                                                   \
  template class ParamStore<T>;                                                                     \
  template class Adam<T>;                                                                           \
  template std::string fingerprint<T>(const ParamStore<T>&);                                        \
  template void add_conv<T>(ParamStore<T>&, Rng&, const std::string&, int, int, int, bool);         \
  template void add_dense<T>(ParamStore<T>&, Rng&, const std::string&, int, int, bool);             \
  template void add_norm<T>(ParamStore<T>&, const std::string&, int);                               \
  template Var<T> conv<T>(const ParamStore<T>&, const std::string&, const Var<T>&, int);            \
  template Var<T> dense<T>(const ParamStore<T>&, const std::string&, const Var<T>&);                \
  template Var<T> norm<T>(const ParamStore<T>&, const std::string&, const Var<T>&);

IDGUARD_INSTANTIATE_NN(float)
IDGUARD_INSTANTIATE_NN(double)

}  // namespace idguard::nn
