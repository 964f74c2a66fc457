#include "idguard/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "idguard/kernels.hpp"

namespace idguard::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

void require_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }
}

void require_rank(const std::vector<int>& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) +
                                ", got " + shape_str(s));
  }
}

// Builds the output Var. The graph edge is recorded only if some parent needs a
// gradient and gradient mode is on.
template <typename T, typename Fn>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> parents, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& p : parents) {
        if (p.defined()) node->parents.push_back(p.node());
      }
      node->backward = std::forward<Fn>(fn);
    }
  }
  return Var<T>(std::move(node));
}

template <typename T>
Node<T>* want(const Var<T>& v) {
  return v.requires_grad() ? v.node().get() : nullptr;
}

template <typename T>
T sigmoid_scalar(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad);
  }
  // Interior gradients are not needed after propagation; leaves keep theirs.
  for (Node<T>* node : order) {
    if (node->backward) node->grad = Tensor<T>();
  }
}

template <typename T>
Var<T> stop_gradient(const Var<T>& a) {
  return Var<T>(a.value(), false);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return make_op<T>(std::move(out), {a, b}, [na = want(a), nb = want(b)](const Tensor<T>& g) {
    for (Node<T>* n : {na, nb}) {
      if (!n) continue;
      auto& gr = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return make_op<T>(std::move(out), {a, b}, [na = want(a), nb = want(b)](const Tensor<T>& g) {
    if (na) {
      auto& gr = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i];
    }
    if (nb) {
      auto& gr = nb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gr[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return make_op<T>(std::move(out), {a, b},
                    [na = want(a), nb = want(b), av = a.node(), bv = b.node()](const Tensor<T>& g) {
                      if (na) {
                        auto& gr = na->ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i] * bv->value[i];
                      }
                      if (nb) {
                        auto& gr = nb->ensure_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i] * av->value[i];
                      }
                    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make_op<T>(std::move(out), {a}, [na = want(a), s](const Tensor<T>& g) {
    auto& gr = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += s * g[i];
  });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v = std::clamp(v, lo, hi);
  return make_op<T>(std::move(out), {a}, [na = want(a), lo, hi](const Tensor<T>& g) {
    auto& gr = na->ensure_grad();
    const auto& x = na->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] >= lo && x[i] <= hi) gr[i] += g[i];
    }
  });
}

template <typename T>
Var<T> per_sample_affine(const Var<T>& a, std::span<const T> ca, const Var<T>& b,
                         std::span<const T> cb) {
  const int n = a.dim(0);
  if (static_cast<int>(ca.size()) != n) throw std::invalid_argument("per_sample_affine: coefficient count");
  if (b.defined()) {
    require_same_shape(a.shape(), b.shape(), "per_sample_affine");
    if (static_cast<int>(cb.size()) != n) throw std::invalid_argument("per_sample_affine: coefficient count");
  }
  const std::size_t s = a.value().stride0();
  Tensor<T> out(a.shape());
  for (int i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      T v = ca[i] * a.value()[i * s + j];
      if (b.defined()) v += cb[i] * b.value()[i * s + j];
      out[i * s + j] = v;
    }
  }
  std::vector<T> va(ca.begin(), ca.end()), vb(cb.begin(), cb.end());
  return make_op<T>(std::move(out), {a, b},
                    [na = want(a), nb = b.defined() ? want(b) : nullptr, va, vb, n, s](const Tensor<T>& g) {
                      if (na) {
                        auto& gr = na->ensure_grad();
                        for (int i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < s; ++j) gr[i * s + j] += va[i] * g[i * s + j];
                      }
                      if (nb) {
                        auto& gr = nb->ensure_grad();
                        for (int i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < s; ++j) gr[i * s + j] += vb[i] * g[i * s + j];
                      }
                    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::silu_forward(out.size(), a.value().data(), out.data());
  return make_op<T>(std::move(out), {a}, [na = want(a)](const Tensor<T>& g) {
    kernels::silu_backward(g.size(), na->value.data(), g.data(), na->ensure_grad().data());
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
  return make_op<T>(std::move(out), {a}, [na = want(a)](const Tensor<T>& g) {
    auto& gr = na->ensure_grad();
    const auto& x = na->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > T(0)) gr[i] += g[i];
    }
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v = std::tanh(v);
  auto saved = out;
  return make_op<T>(std::move(out), {a}, [na = want(a), y = std::move(saved)](const Tensor<T>& g) {
    auto& gr = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  kernels::sigmoid_forward(out.size(), a.value().data(), out.data());
  auto saved = out;
  return make_op<T>(std::move(out), {a}, [na = want(a), y = std::move(saved)](const Tensor<T>& g) {
    auto& gr = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.shape(), 2, "linear");
  require_rank(weight.shape(), 2, "linear weight");
  const int m = x.dim(0), k = x.dim(1), n = weight.dim(0);
  if (weight.dim(1) != k) {
    throw std::invalid_argument("linear: input width " + std::to_string(k) + " vs weight " +
                                shape_str(weight.shape()));
  }
  if (bias.defined() && bias.value().size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("linear: bias size");
  }
  Tensor<T> out({m, n});
  kernels::linear_forward(m, k, n, x.value().data(), weight.value().data(),
                          bias.defined() ? bias.value().data() : nullptr, out.data());
  return make_op<T>(std::move(out), {x, weight, bias},
                    [nx = want(x), nw = want(weight), nbias = bias.defined() ? want(bias) : nullptr,
                     xv = x.node(), wv = weight.node(), m, k, n](const Tensor<T>& g) {
                      Tensor<T> dx;
                      if (nx) dx = Tensor<T>({m, k});
                      kernels::linear_backward(m, k, n, xv->value.data(), wv->value.data(), g.data(),
                                               nx ? dx.data() : nullptr,
                                               nw ? nw->ensure_grad().data() : nullptr,
                                               nbias ? nbias->ensure_grad().data() : nullptr);
                      if (nx) {
                        auto& gr = nx->ensure_grad();
                        for (std::size_t i = 0; i < dx.size(); ++i) gr[i] += dx[i];
                      }
                    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  require_rank(x.shape(), 4, "conv2d");
  require_rank(weight.shape(), 4, "conv2d weight");
  kernels::ConvGeom geom{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, pad};
  if (weight.dim(1) != geom.cin || weight.dim(2) != weight.dim(3)) {
    throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) + " vs input " +
                                shape_str(x.shape()));
  }
  if (bias.defined() && bias.value().size() != static_cast<std::size_t>(geom.cout)) {
    throw std::invalid_argument("conv2d: bias size");
  }
  Tensor<T> out({geom.n, geom.cout, geom.hout(), geom.wout()});
  kernels::conv2d_forward(geom, x.value().data(), weight.value().data(),
                          bias.defined() ? bias.value().data() : nullptr, out.data());
  return make_op<T>(std::move(out), {x, weight, bias},
                    [nx = want(x), nw = want(weight), nbias = bias.defined() ? want(bias) : nullptr,
                     xv = x.node(), wv = weight.node(), geom](const Tensor<T>& g) {
                      Tensor<T> dx;
                      if (nx) dx = Tensor<T>(xv->value.shape());
                      kernels::conv2d_backward(geom, xv->value.data(), wv->value.data(), g.data(),
                                               nx ? dx.data() : nullptr,
                                               nw ? nw->ensure_grad().data() : nullptr,
                                               nbias ? nbias->ensure_grad().data() : nullptr);
                      if (nx) {
                        auto& gr = nx->ensure_grad();
                        for (std::size_t i = 0; i < dx.size(); ++i) gr[i] += dx[i];
                      }
                    });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
  require_rank(x.shape(), 4, "group_norm");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups <= 0 || c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c)) {
    throw std::invalid_argument("group_norm: affine size");
  }
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(static_cast<std::size_t>(n) * groups);
  Tensor<T> out(x.shape());
  kernels::group_norm_forward(n, c, hw, groups, eps, x.value().data(), gamma.value().data(), beta.value().data(),
                              out.data(), xhat.data(), rstd.data());
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [nx = want(x), ng = want(gamma), nb = want(beta), gv = gamma.node(), xhat = std::move(xhat),
                     rstd = std::move(rstd), n, c, hw, groups](const Tensor<T>& g) {
                      kernels::group_norm_backward(n, c, hw, groups, xhat.data(), rstd.data(), gv->value.data(),
                                                   g.data(), nx ? nx->ensure_grad().data() : nullptr,
                                                   ng ? ng->ensure_grad().data() : nullptr,
                                                   nb ? nb->ensure_grad().data() : nullptr);
                    });
}

template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& ss) {
  require_rank(x.shape(), 4, "film");
  require_rank(ss.shape(), 2, "film params");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (ss.dim(0) != n || ss.dim(1) != 2 * c) {
    throw std::invalid_argument("film: params " + shape_str(ss.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  const T* ps = ss.value().data();
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T sc = T(1) + ps[i * 2 * c + ch];
      const T sh = ps[i * 2 * c + c + ch];
      const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
      for (int j = 0; j < hw; ++j) out[base + j] = px[base + j] * sc + sh;
    }
  }
  return make_op<T>(std::move(out), {x, ss},
                    [nx = want(x), ns = want(ss), xv = x.node(), sv = ss.node(), n, c, hw](const Tensor<T>& g) {
                      const T* px = xv->value.data();
                      const T* ps = sv->value.data();
                      T* gx = nx ? nx->ensure_grad().data() : nullptr;
                      T* gs = ns ? ns->ensure_grad().data() : nullptr;
                      for (int i = 0; i < n; ++i) {
                        for (int ch = 0; ch < c; ++ch) {
                          const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                          const T sc = T(1) + ps[i * 2 * c + ch];
                          T dsc = 0, dsh = 0;
                          for (int j = 0; j < hw; ++j) {
                            if (gx) gx[base + j] += g[base + j] * sc;
                            dsc += g[base + j] * px[base + j];
                            dsh += g[base + j];
                          }
                          if (gs) {
                            gs[i * 2 * c + ch] += dsc;
                            gs[i * 2 * c + c + ch] += dsh;
                          }
                        }
                      }
                    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {a}, [na = want(a)](const Tensor<T>& g) {
    auto& gr = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i];
  });
}

template <typename T>
Var<T> upsample2(const Var<T>& x) {
  require_rank(x.shape(), 4, "upsample2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  const T* px = x.value().data();
  T* po = out.data();
  const std::size_t rows = static_cast<std::size_t>(n) * c * h;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = px + r * w;
    T* d0 = po + r * 4 * w;
    for (int j = 0; j < w; ++j) d0[2 * j] = d0[2 * j + 1] = src[j];
    std::copy(d0, d0 + 2 * w, d0 + 2 * w);
  }
  return make_op<T>(std::move(out), {x}, [nx = want(x), rows, w](const Tensor<T>& g) {
    T* gr = nx->ensure_grad().data();
    const T* pg = g.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* s0 = pg + r * 4 * w;
      const T* s1 = s0 + 2 * w;
      for (int j = 0; j < w; ++j) gr[r * w + j] += s0[2 * j] + s0[2 * j + 1] + s1[2 * j] + s1[2 * j + 1];
    }
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require_rank(x.shape(), 4, "avg_pool2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2: odd spatial size");
  const int ho = h / 2, wo = w / 2;
  Tensor<T> out({n, c, ho, wo});
  const T* px = x.value().data();
  for (int p = 0; p < n * c; ++p) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        const std::size_t b = (static_cast<std::size_t>(p) * h + 2 * y) * w + 2 * xx;
        out[(static_cast<std::size_t>(p) * ho + y) * wo + xx] = T(0.25) * (px[b] + px[b + 1] + px[b + w] + px[b + w + 1]);
      }
    }
  }
  return make_op<T>(std::move(out), {x}, [nx = want(x), n, c, h, w, ho, wo](const Tensor<T>& g) {
    auto& gr = nx->ensure_grad();
    for (int p = 0; p < n * c; ++p) {
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx) {
          const T d = T(0.25) * g[(static_cast<std::size_t>(p) * ho + y) * wo + xx];
          const std::size_t b = (static_cast<std::size_t>(p) * h + 2 * y) * w + 2 * xx;
          gr[b] += d;
          gr[b + 1] += d;
          gr[b + w] += d;
          gr[b + w + 1] += d;
        }
      }
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  const T* px = x.value().data();
  for (int p = 0; p < n * c; ++p) {
    T s = 0;
    for (int j = 0; j < hw; ++j) s += px[static_cast<std::size_t>(p) * hw + j];
    out[p] = s / static_cast<T>(hw);
  }
  return make_op<T>(std::move(out), {x}, [nx = want(x), n, c, hw](const Tensor<T>& g) {
    auto& gr = nx->ensure_grad();
    for (int p = 0; p < n * c; ++p) {
      const T d = g[p] / static_cast<T>(hw);
      for (int j = 0; j < hw; ++j) gr[static_cast<std::size_t>(p) * hw + j] += d;
    }
  });
}

template <typename T>
Var<T> concat1(const Var<T>& a, const Var<T>& b) {
  if (a.value().rank() < 2 || a.value().rank() != b.value().rank() || a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("concat1: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  for (std::size_t d = 2; d < a.value().rank(); ++d) {
    if (a.dim(d) != b.dim(d)) throw std::invalid_argument("concat1: trailing dimensions differ");
  }
  auto shape = a.shape();
  shape[1] += b.dim(1);
  const int n = a.dim(0);
  const std::size_t sa = a.value().stride0(), sb = b.value().stride0();
  Tensor<T> out(shape);
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * sa, sa, out.data() + i * (sa + sb));
    std::copy_n(b.value().data() + i * sb, sb, out.data() + i * (sa + sb) + sa);
  }
  return make_op<T>(std::move(out), {a, b}, [na = want(a), nb = want(b), n, sa, sb](const Tensor<T>& g) {
    for (int i = 0; i < n; ++i) {
      if (na) {
        auto& gr = na->ensure_grad();
        for (std::size_t j = 0; j < sa; ++j) gr[i * sa + j] += g[i * (sa + sb) + j];
      }
      if (nb) {
        auto& gr = nb->ensure_grad();
        for (std::size_t j = 0; j < sb; ++j) gr[i * sb + j] += g[i * (sa + sb) + sa + j];
      }
    }
  });
}

template <typename T>
Var<T> broadcast_spatial(const Var<T>& m, int h, int w) {
  require_rank(m.shape(), 2, "broadcast_spatial");
  const int n = m.dim(0), k = m.dim(1), hw = h * w;
  Tensor<T> out({n, k, h, w});
  for (int p = 0; p < n * k; ++p) {
    std::fill_n(out.data() + static_cast<std::size_t>(p) * hw, hw, m.value()[p]);
  }
  return make_op<T>(std::move(out), {m}, [nm = want(m), n, k, hw](const Tensor<T>& g) {
    auto& gr = nm->ensure_grad();
    for (int p = 0; p < n * k; ++p) {
      T s = 0;
      for (int j = 0; j < hw; ++j) s += g[static_cast<std::size_t>(p) * hw + j];
      gr[p] += s;
    }
  });
}

template <typename T>
Var<T> translate(const Var<T>& x, std::span<const int> dx, std::span<const int> dy) {
  require_rank(x.shape(), 4, "translate");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (static_cast<int>(dx.size()) != n || static_cast<int>(dy.size()) != n) {
    throw std::invalid_argument("translate: offset count");
  }
  std::vector<int> ox(dx.begin(), dx.end()), oy(dy.begin(), dy.end());
  // out[y, x] = in[y - dy, x - dx]
  auto for_each_pair = [=](auto&& fn) {
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = y - oy[i];
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx - ox[i];
            if (sx < 0 || sx >= w) continue;
            fn(base + static_cast<std::size_t>(y) * w + xx, base + static_cast<std::size_t>(sy) * w + sx);
          }
        }
      }
    }
  };
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  for_each_pair([&](std::size_t dst, std::size_t src) { out[dst] = px[src]; });
  return make_op<T>(std::move(out), {x}, [nx = want(x), for_each_pair](const Tensor<T>& g) {
    auto& gr = nx->ensure_grad();
    for_each_pair([&](std::size_t dst, std::size_t src) { gr[src] += g[dst]; });
  });
}

template <typename T>
Var<T> embed_bag(const Var<T>& table, const std::vector<std::vector<int>>& bags) {
  require_rank(table.shape(), 2, "embed_bag");
  const int v = table.dim(0), d = table.dim(1), n = static_cast<int>(bags.size());
  Tensor<T> out({n, d});
  for (int i = 0; i < n; ++i) {
    for (int id : bags[i]) {
      if (id < 0 || id >= v) throw std::invalid_argument("embed_bag: token id " + std::to_string(id) + " out of range");
      for (int j = 0; j < d; ++j) out[i * d + j] += table.value()[static_cast<std::size_t>(id) * d + j];
    }
  }
  return make_op<T>(std::move(out), {table}, [nt = want(table), bags, d](const Tensor<T>& g) {
    auto& gr = nt->ensure_grad();
    for (std::size_t i = 0; i < bags.size(); ++i) {
      for (int id : bags[i]) {
        for (int j = 0; j < d; ++j) gr[static_cast<std::size_t>(id) * d + j] += g[i * d + j];
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().vec()) s += v;
  return make_op<T>(Tensor<T>::scalar(s), {a}, [na = want(a)](const Tensor<T>& g) {
    auto& gr = na->ensure_grad();
    for (auto& v : gr.vec()) v += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  const std::size_t n = a.value().size();
  Tensor<T> diff(a.shape());
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = a.value()[i] - b.value()[i];
    s += diff[i] * diff[i];
  }
  s /= static_cast<T>(n);
  return make_op<T>(Tensor<T>::scalar(s), {a, b},
                    [na = want(a), nb = want(b), diff = std::move(diff), n](const Tensor<T>& g) {
                      const T k = T(2) * g[0] / static_cast<T>(n);
                      if (na) {
                        auto& gr = na->ensure_grad();
                        for (std::size_t i = 0; i < n; ++i) gr[i] += k * diff[i];
                      }
                      if (nb) {
                        auto& gr = nb->ensure_grad();
                        for (std::size_t i = 0; i < n; ++i) gr[i] -= k * diff[i];
                      }
                    });
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
  require_same_shape(logits.shape(), targets.shape(), "bce_with_logits");
  const std::size_t n = logits.value().size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits.value()[i];
    s += std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  s /= static_cast<T>(n);
  return make_op<T>(Tensor<T>::scalar(s), {logits}, [nl = want(logits), targets, n](const Tensor<T>& g) {
    auto& gr = nl->ensure_grad();
    const T k = g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) gr[i] += k * (sigmoid_scalar(nl->value[i]) - targets[i]);
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw std::invalid_argument("softmax_cross_entropy: label count");
  Tensor<T> prob({n, c});
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const T* z = logits.value().data() + i * c;
    const T zmax = *std::max_element(z, z + c);
    T denom = 0;
    for (int j = 0; j < c; ++j) denom += std::exp(z[j] - zmax);
    for (int j = 0; j < c; ++j) prob[i * c + j] = std::exp(z[j] - zmax) / denom;
    loss += -(z[labels[i]] - zmax - std::log(denom));
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op<T>(Tensor<T>::scalar(loss), {logits},
                    [nl = want(logits), prob = std::move(prob), lab = std::move(lab), n, c](const Tensor<T>& g) {
                      auto& gr = nl->ensure_grad();
                      const T k = g[0] / static_cast<T>(n);
                      for (int i = 0; i < n; ++i) {
                        for (int j = 0; j < c; ++j) {
                          gr[i * c + j] += k * (prob[i * c + j] - (j == lab[i] ? T(1) : T(0)));
                        }
                      }
                    });
}

#define IDGUARD_INSTANTIATE_AG(T)                                                                       \
  template void backward<T>(const Var<T>&);                                                             \
  template Var<T> stop_gradient<T>(const Var<T>&);                                                      \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> scale<T>(const Var<T>&, T);                                                           \
  template Var<T> clamp<T>(const Var<T>&, T, T);                                                        \
  template Var<T> per_sample_affine<T>(const Var<T>&, std::span<const T>, const Var<T>&,                \
                                       std::span<const T>);                                             \
  template Var<T> silu<T>(const Var<T>&);                                                               \
  template Var<T> relu<T>(const Var<T>&);                                                               \
  template Var<T> tanh<T>(const Var<T>&);                                                               \
  template Var<T> sigmoid<T>(const Var<T>&);                                                            \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                     \
  template Var<T> group_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, T);                   \
  template Var<T> film<T>(const Var<T>&, const Var<T>&);                                                \
  template Var<T> reshape<T>(const Var<T>&, std::vector<int>);                                          \
  template Var<T> upsample2<T>(const Var<T>&);                                                          \
  template Var<T> avg_pool2<T>(const Var<T>&);                                                          \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                                    \
  template Var<T> concat1<T>(const Var<T>&, const Var<T>&);                                             \
  template Var<T> broadcast_spatial<T>(const Var<T>&, int, int);                                        \
  template Var<T> translate<T>(const Var<T>&, std::span<const int>, std::span<const int>);              \
  template Var<T> embed_bag<T>(const Var<T>&, const std::vector<std::vector<int>>&);                    \
  template Var<T> sum<T>(const Var<T>&);                                                                \
  template Var<T> mean<T>(const Var<T>&);                                                               \
  template Var<T> mse<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> bce_with_logits<T>(const Var<T>&, const Tensor<T>&);                                  \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const int>);

IDGUARD_INSTANTIATE_AG(float)
IDGUARD_INSTANTIATE_AG(double)

}  // namespace idguard::ag
