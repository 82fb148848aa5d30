#include "murag/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace murag {

namespace {

thread_local Tape* g_active_tape = nullptr;

template <typename T>
using Node = detail::TensorNode<T>;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
  }
}

bool tracking(std::initializer_list<bool> flags) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(flags.begin(), flags.end(), [](bool r) { return r; });
}

template <typename T>
NodePtr<T> make_node(const char* op, Shape shape, std::vector<T> value) {
  check_finite(op, value);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

template <typename T>
BasicTensor<T> attach(NodePtr<T> node, std::function<void(std::span<const T>)> backward) {
  node->requires_grad = true;
  node->backward = std::move(backward);
  node->tape = g_active_tape;
  g_active_tape->record(node);
  return BasicTensor<T>(std::move(node));
}

template <typename T>
void require_rank(const char* op, const BasicTensor<T>& t, std::size_t rank) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor");
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return from(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_string(shape) + " needs " + std::to_string(shape_size(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto node = make_node<T>("tensor", std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return from({}, {value});
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("dim: axis " + std::to_string(axis) + " out of range for " +
                                           shape_string(shape()));
  return node_->shape[axis];
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (node_->backward) throw std::logic_error("mutable_data: tensor is a recorded intermediate");
  return node_->value;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  node_->grad.assign(node_->value.size(), T{0});
}

template <typename T>
T BasicTensor<T>::item() const {
  if (size() != 1) throw DimensionError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->value[0];
}

template <typename T>
T BasicTensor<T>::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at: expected rank 2, got " + shape_string(shape()));
  return node_->value.at(row * node_->shape[1] + col);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from(node_->shape, node_->value);
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::NodeBase> node) { nodes_.push_back(std::move(node)); }

template <typename T>
void Tape::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " +
                         (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  auto* node = loss.node();
  if (node->tape != this) throw std::logic_error("backward: loss was not produced under this tape");
  node->grad_buffer()[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    (*it)->propagate();
    (*it)->release_grad();
  }
}

TapePause::TapePause() : saved_(g_active_tape) { g_active_tape = nullptr; }

TapePause::~TapePause() { g_active_tape = saved_; }

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  auto node = make_node("matmul", {m, n}, std::move(out));
  if (!tracking({a.requires_grad(), b.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return attach<T>(node, [an, bn, m, k, n](std::span<const T> g) {
    ConstMatMap<T> grad(g.data(), m, n);
    if (an->requires_grad) {
      MatMap<T>(an->grad_buffer().data(), m, k).noalias() += grad * ConstMatMap<T>(bn->value.data(), k, n).transpose();
    }
    if (bn->requires_grad) {
      MatMap<T>(bn->grad_buffer().data(), k, n).noalias() += ConstMatMap<T>(an->value.data(), m, k).transpose() * grad;
    }
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), n, m) = ConstMatMap<T>(a.data().data(), m, n).transpose();
  auto node = make_node("transpose", {n, m}, std::move(out));
  if (!tracking({a.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr();
  return attach<T>(node, [an, m, n](std::span<const T> g) {
    MatMap<T>(an->grad_buffer().data(), m, n) += ConstMatMap<T>(g.data(), n, m).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto node = make_node("add", a.shape(), std::move(out));
  if (!tracking({a.requires_grad(), b.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return attach<T>(node, [an, bn](std::span<const T> g) {
    for (const auto& n : {an, bn}) {
      if (!n->requires_grad) continue;
      auto dst = n->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  auto node = make_node("sub", a.shape(), std::move(out));
  if (!tracking({a.requires_grad(), b.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return attach<T>(node, [an, bn](std::span<const T> g) {
    if (an->requires_grad) {
      auto dst = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (bn->requires_grad) {
      auto dst = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto node = make_node("mul", a.shape(), std::move(out));
  if (!tracking({a.requires_grad(), b.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return attach<T>(node, [an, bn](std::span<const T> g) {
    if (an->requires_grad) {
      auto dst = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto dst = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * an->value[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto node = make_node("scale", a.shape(), std::move(out));
  if (!tracking({a.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr();
  return attach<T>(node, [an, factor](std::span<const T> g) {
    auto dst = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor;
  });
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  require_rank("add_bias", bias, 1);
  if (x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match last axis of " +
                         shape_string(x.shape()));
  }
  const std::size_t n = bias.dim(0);
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  std::vector<T> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b[j];
  auto node = make_node("add_bias", x.shape(), std::move(out));
  if (!tracking({x.requires_grad(), bias.requires_grad()})) return BasicTensor<T>(node);
  auto xn = x.node_ptr(), bn = bias.node_ptr();
  return attach<T>(node, [xn, bn, rows, n](std::span<const T> g) {
    if (xn->requires_grad) {
      auto dst = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (bn->requires_grad) {
      auto dst = bn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) dst[j] += g[r * n + j];
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total{0};
  for (T v : a.data()) total += v;
  auto node = make_node<T>("sum", {}, {total});
  if (!tracking({a.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr();
  return attach<T>(node, [an](std::span<const T> g) {
    for (auto& d : an->grad_buffer()) d += g[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kBeta = T(0.044715);
  std::vector<T> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  auto node = make_node("gelu", a.shape(), std::move(out));
  if (!tracking({a.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr();
  return attach<T>(node, [an](std::span<const T> g) {
    auto dst = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = an->value[i];
      const T th = std::tanh(kAlpha * (v + kBeta * v * v * v));
      const T dinner = kAlpha * (T(1) + T(3) * kBeta * v * v);
      dst[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dinner);
    }
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  auto node = make_node("reshape", std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (!tracking({a.requires_grad()})) return BasicTensor<T>(node);
  auto an = a.node_ptr();
  return attach<T>(node, [an](std::span<const T> g) {
    auto dst = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Normalizers

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<T> out(x.size());
  auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = o * len * inner + c;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) peak = std::max(peak, in[base + j * inner]);
      T total{0};
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(in[base + j * inner] - peak);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  auto node = make_node("softmax", s, std::move(out));
  if (!tracking({x.requires_grad()})) return BasicTensor<T>(node);
  auto xn = x.node_ptr();
  auto* self = node.get();
  return attach<T>(node, [xn, self, outer, inner, len](std::span<const T> g) {
    auto dst = xn->grad_buffer();
    const auto& y = self->value;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t c = 0; c < inner; ++c) {
        const std::size_t base = o * len * inner + c;
        T dot{0};
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t at = base + j * inner;
          dst[at] += y[at] * (g[at] - dot);
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, T eps) {
  require_rank("layer_norm", gain, 1);
  require_rank("layer_norm", bias, 1);
  if (x.rank() == 0 || x.shape().back() != gain.dim(0) || gain.dim(0) != bias.dim(0)) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match last axis of " + shape_string(x.shape()));
  }
  const std::size_t n = gain.dim(0);
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  std::vector<T> out(x.size());
  auto normalized = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  auto in = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * n;
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T xh = (row[j] - mu) * rs;
      (*normalized)[r * n + j] = xh;
      out[r * n + j] = xh * gv[j] + bv[j];
    }
  }
  auto node = make_node("layer_norm", x.shape(), std::move(out));
  if (!tracking({x.requires_grad(), gain.requires_grad(), bias.requires_grad()})) return BasicTensor<T>(node);
  auto xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr();
  return attach<T>(node, [xn, gn, bn, normalized, inv_std, rows, n](std::span<const T> g) {
    const auto& xh = *normalized;
    if (gn->requires_grad) {
      auto dst = gn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) dst[j] += g[r * n + j] * xh[r * n + j];
    }
    if (bn->requires_grad) {
      auto dst = bn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) dst[j] += g[r * n + j];
    }
    if (xn->requires_grad) {
      auto dst = xn->grad_buffer();
      const auto& gv = gn->value;
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_d{0}, mean_dx{0};
        for (std::size_t j = 0; j < n; ++j) {
          const T d = g[r * n + j] * gv[j];
          mean_d += d;
          mean_dx += d * xh[r * n + j];
        }
        mean_d /= static_cast<T>(n);
        mean_dx /= static_cast<T>(n);
        const T rs = (*inv_std)[r];
        for (std::size_t j = 0; j < n; ++j) {
          const T d = g[r * n + j] * gv[j];
          dst[r * n + j] += rs * (d - mean_d - xh[r * n + j] * mean_dx);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                             std::int32_t ignore_id) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  std::vector<std::vector<std::size_t>> as_sets(rows);
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0," +
                           std::to_string(vocab) + ")");
    }
    as_sets[r].push_back(static_cast<std::size_t>(targets[r]));
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: every position is ignored");

  std::vector<std::size_t> kept;
  for (std::size_t r = 0; r < rows; ++r)
    if (!as_sets[r].empty()) kept.push_back(r);
  auto probs = std::make_shared<std::vector<T>>(kept.size() * vocab);
  auto in = logits.data();
  T total{0};
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const T* row = in.data() + kept[i] * vocab;
    const T peak = *std::max_element(row, row + vocab);
    T z{0};
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - peak);
    const T lse = peak + std::log(z);
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[i * vocab + j] = std::exp(row[j] - lse);
    total += lse - row[as_sets[kept[i]][0]];
  }
  const T count = static_cast<T>(kept.size());
  auto node = make_node<T>("cross_entropy", {}, {total / count});
  if (!tracking({logits.requires_grad()})) return BasicTensor<T>(node);
  auto ln = logits.node_ptr();
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return attach<T>(node, [ln, probs, kept, tgt, vocab, count](std::span<const T> g) {
    auto dst = ln->grad_buffer();
    const T w = g[0] / count;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const std::size_t r = kept[i];
      for (std::size_t j = 0; j < vocab; ++j) dst[r * vocab + j] += w * (*probs)[i * vocab + j];
      dst[r * vocab + static_cast<std::size_t>(tgt[r])] -= w;
    }
  });
}

template <typename T>
BasicTensor<T> multi_target_cross_entropy(const BasicTensor<T>& logits,
                                          const std::vector<std::vector<std::size_t>>& targets) {
  require_rank("multi_target_cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != rows || rows == 0) {
    throw DimensionError("multi_target_cross_entropy: " + std::to_string(targets.size()) +
                         " target sets for logits " + shape_string(logits.shape()));
  }
  for (const auto& set : targets) {
    if (set.empty()) throw std::invalid_argument("multi_target_cross_entropy: row without targets");
    for (auto t : set)
      if (t >= cols) throw DimensionError("multi_target_cross_entropy: target index out of range");
  }
  auto probs = std::make_shared<std::vector<T>>(rows * cols);
  auto in = logits.data();
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * cols;
    const T peak = *std::max_element(row, row + cols);
    T z{0};
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - peak);
    const T lse = peak + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) (*probs)[r * cols + j] = std::exp(row[j] - lse);
    T picked{0};
    for (auto t : targets[r]) picked += row[t];
    total += lse - picked / static_cast<T>(targets[r].size());
  }
  auto node = make_node<T>("multi_target_cross_entropy", {}, {total / static_cast<T>(rows)});
  if (!tracking({logits.requires_grad()})) return BasicTensor<T>(node);
  auto ln = logits.node_ptr();
  return attach<T>(node, [ln, probs, targets, rows, cols](std::span<const T> g) {
    auto dst = ln->grad_buffer();
    const T w = g[0] / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) dst[r * cols + j] += w * (*probs)[r * cols + j];
      const T share = w / static_cast<T>(targets[r].size());
      for (auto t : targets[r]) dst[r * cols + t] -= share;
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids) {
  require_rank("embedding", table, 2);
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  std::vector<T> out(ids.size() * width);
  auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                           std::to_string(vocab));
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[i] * width), width, out.begin() + i * width);
  }
  auto node = make_node("embedding", {ids.size(), width}, std::move(out));
  if (!tracking({table.requires_grad()})) return BasicTensor<T>(node);
  auto tn = table.node_ptr();
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return attach<T>(node, [tn, idx, width](std::span<const T> g) {
    auto dst = tn->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) dst[static_cast<std::size_t>(idx[i]) * width + j] += g[i * width + j];
  });
}

template <typename T>
BasicTensor<T> concat_rows(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t width = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
  std::size_t rows = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.dim(1) != width) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    rows += p.dim(0);
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<T> out;
  out.reserve(rows * width);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  auto node = make_node("concat_rows", {rows, width}, std::move(out));
  if (!tracking({any_grad})) return BasicTensor<T>(node);
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return attach<T>(node, [nodes](std::span<const T> g) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->value.size();
      if (n->requires_grad) {
        auto dst = n->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) dst[i] += g[offset + i];
      }
      offset += len;
    }
  });
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank("slice_rows", x, 2);
  if (begin > end || end > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_string(x.shape()));
  }
  const std::size_t width = x.dim(1);
  std::vector<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * width),
                     x.data().begin() + static_cast<std::ptrdiff_t>(end * width));
  auto node = make_node("slice_rows", {end - begin, width}, std::move(out));
  if (!tracking({x.requires_grad()})) return BasicTensor<T>(node);
  auto xn = x.node_ptr();
  return attach<T>(node, [xn, begin, width](std::span<const T> g) {
    auto dst = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dst[begin * width + i] += g[i];
  });
}

template <typename T>
BasicTensor<T> bias_lookup(const BasicTensor<T>& table, std::span<const std::int32_t> buckets, std::size_t rows,
                           std::size_t cols) {
  require_rank("bias_lookup", table, 2);
  if (buckets.size() != rows * cols) throw DimensionError("bias_lookup: bucket grid size mismatch");
  const std::size_t nb = table.dim(0), heads = table.dim(1);
  std::vector<T> out(heads * rows * cols);
  auto src = table.data();
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (buckets[i] < 0 || static_cast<std::size_t>(buckets[i]) >= nb) {
      throw DimensionError("bias_lookup: bucket " + std::to_string(buckets[i]) + " out of range");
    }
    for (std::size_t h = 0; h < heads; ++h)
      out[h * rows * cols + i] = src[static_cast<std::size_t>(buckets[i]) * heads + h];
  }
  auto node = make_node("bias_lookup", {heads, rows, cols}, std::move(out));
  if (!tracking({table.requires_grad()})) return BasicTensor<T>(node);
  auto tn = table.node_ptr();
  std::vector<std::int32_t> idx(buckets.begin(), buckets.end());
  return attach<T>(node, [tn, idx, heads, rows, cols](std::span<const T> g) {
    auto dst = tn->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t h = 0; h < heads; ++h)
        dst[static_cast<std::size_t>(idx[i]) * heads + h] += g[h * rows * cols + i];
  });
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         const BasicTensor<T>& bias, const AttentionOptions& options) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_rank("attention", v, 2);
  const std::size_t n = q.dim(0), m = k.dim(0), width = q.dim(1), heads = options.heads;
  if (k.dim(1) != width || v.dim(1) != width || v.dim(0) != m) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) + ", v " +
                         shape_string(v.shape()) + " are inconsistent");
  }
  if (heads == 0 || width % heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (m == 0) throw DimensionError("attention: no keys");
  if (options.causal && n != m) throw DimensionError("attention: causal mask needs square attention");
  if (bias.defined() && bias.shape() != Shape{heads, n, m}) {
    throw DimensionError("attention: bias " + shape_string(bias.shape()) + " should be " +
                         shape_string({heads, n, m}));
  }
  const std::size_t dh = width / heads;
  const T factor = T{1} / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(heads * n * m);
  std::vector<T> out(n * width);
  const T* bias_data = bias.defined() ? bias.data().data() : nullptr;
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));

  for (std::size_t h = 0; h < heads; ++h) {
    ConstStridedMap<T> qh(q.data().data() + h * dh, n, dh, stride);
    ConstStridedMap<T> kh(k.data().data() + h * dh, m, dh, stride);
    ConstStridedMap<T> vh(v.data().data() + h * dh, m, dh, stride);
    MatMap<T> ph(probs->data() + h * n * m, n, m);
    ph.noalias() = (qh * kh.transpose()) * factor;
    for (std::size_t i = 0; i < n; ++i) {
      T* row = probs->data() + h * n * m + i * m;
      if (bias_data != nullptr) {
        const T* brow = bias_data + h * n * m + i * m;
        for (std::size_t j = 0; j < m; ++j) row[j] += brow[j];
      }
      const std::size_t visible = options.causal ? i + 1 : m;
      const T peak = *std::max_element(row, row + visible);
      T total{0};
      for (std::size_t j = 0; j < visible; ++j) {
        row[j] = std::exp(row[j] - peak);
        total += row[j];
      }
      for (std::size_t j = 0; j < visible; ++j) row[j] /= total;
      for (std::size_t j = visible; j < m; ++j) row[j] = T{0};
    }
    StridedMap<T>(out.data() + h * dh, n, dh, stride).noalias() = ph * vh;
  }
  if (options.probe != nullptr) {
    options.probe->heads = heads;
    options.probe->queries = n;
    options.probe->keys = m;
    options.probe->weights.assign(probs->begin(), probs->end());
  }

  auto node = make_node("attention", {n, width}, std::move(out));
  const bool bias_grad = bias.defined() && bias.requires_grad();
  if (!tracking({q.requires_grad(), k.requires_grad(), v.requires_grad(), bias_grad})) {
    return BasicTensor<T>(node);
  }
  auto qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return attach<T>(node, [qn, kn, vn, bn, probs, n, m, width, heads, dh, factor](std::span<const T> g) {
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
    RowMat<T> dp(n, m);
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> go(g.data() + h * dh, n, dh, stride);
      ConstStridedMap<T> qh(qn->value.data() + h * dh, n, dh, stride);
      ConstStridedMap<T> kh(kn->value.data() + h * dh, m, dh, stride);
      ConstStridedMap<T> vh(vn->value.data() + h * dh, m, dh, stride);
      ConstMatMap<T> ph(probs->data() + h * n * m, n, m);
      if (vn->requires_grad) {
        StridedMap<T>(vn->grad_buffer().data() + h * dh, m, dh, stride).noalias() += ph.transpose() * go;
      }
      dp.noalias() = go * vh.transpose();
      for (std::size_t i = 0; i < n; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < m; ++j) dot += dp(i, j) * ph(i, j);
        for (std::size_t j = 0; j < m; ++j) dp(i, j) = ph(i, j) * (dp(i, j) - dot);
      }
      if (bn && bn->requires_grad) {
        MatMap<T>(bn->grad_buffer().data() + h * n * m, n, m) += dp;
      }
      if (qn->requires_grad) {
        StridedMap<T>(qn->grad_buffer().data() + h * dh, n, dh, stride).noalias() += (dp * kh) * factor;
      }
      if (kn->requires_grad) {
        StridedMap<T>(kn->grad_buffer().data() + h * dh, m, dh, stride).noalias() += (dp.transpose() * qh) * factor;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Instantiations

#define MURAG_INSTANTIATE(T)                                                                                \
  template class BasicTensor<T>;                                                                            \
  template void Tape::backward<T>(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                  \
  template BasicTensor<T> add_bias(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                      \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T); \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                            \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>, std::int32_t); \
  template BasicTensor<T> multi_target_cross_entropy(const BasicTensor<T>&,                                 \
                                                     const std::vector<std::vector<std::size_t>>&);         \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const std::int32_t>);                  \
  template BasicTensor<T> concat_rows(std::span<const BasicTensor<T>>);                                     \
  template BasicTensor<T> slice_rows(const BasicTensor<T>&, std::size_t, std::size_t);                      \
  template BasicTensor<T> bias_lookup(const BasicTensor<T>&, std::span<const std::int32_t>, std::size_t,    \
                                      std::size_t);                                                         \
  template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,    \
                                    const BasicTensor<T>&, const AttentionOptions&);

MURAG_INSTANTIATE(float)
MURAG_INSTANTIATE(double)

#undef MURAG_INSTANTIATE

}  // namespace murag
