#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A BasicTensor is a cheap handle onto a shared node. Operations create new
// nodes; when a Tape is active on the calling thread and any input requires
// gradients, the result is recorded on that tape together with a closure that
// pushes its gradient back into its inputs. Tape::backward walks the records
// in reverse creation order, which is a valid reverse topological order.
//
// Two precisions are instantiated: float (training) and double (verification).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace murag {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

namespace detail {

struct NodeBase {
  virtual ~NodeBase() = default;
  virtual void propagate() = 0;
  virtual void release_grad() = 0;
  const Tape* tape = nullptr;
};

template <typename T>
struct TensorNode final : NodeBase {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::function<void(std::span<const T>)> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad;
  }
  void propagate() override {
    if (backward && !grad.empty()) backward(grad);
  }
  void release_grad() override {
    if (backward) std::vector<T>().swap(grad);
  }
};

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<detail::TensorNode<T>> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static BasicTensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Only valid on leaves; mutating a recorded intermediate would corrupt its tape.
  std::span<T> mutable_data();
  std::span<const T> grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad();

  T item() const;
  T at(std::size_t row, std::size_t col) const;
  BasicTensor detach() const;

  detail::TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Records differentiable operations executed on the owning thread while alive.
// Tapes nest: constructing one hides the previous until it is destroyed.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::shared_ptr<detail::NodeBase> node);
  std::size_t size() const { return nodes_.size(); }

  // Accumulates dLoss/dParam into every reachable leaf that requires grad.
  // Intermediate gradients are released afterwards, so calling backward again
  // adds a second copy of the leaf gradients.
  template <typename T>
  void backward(const BasicTensor<T>& loss);

 private:
  std::vector<std::shared_ptr<detail::NodeBase>> nodes_;
  Tape* previous_;
};

// Suspends recording on this thread, e.g. for retrieval scoring inside a step.
class TapePause {
 public:
  TapePause();
  ~TapePause();
  TapePause(const TapePause&) = delete;
  TapePause& operator=(const TapePause&) = delete;

 private:
  Tape* saved_;
};

// Filled by attention() when requested: weights[h][i][j], row-major.
struct AttentionMap {
  std::size_t heads = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<double> weights;
};

template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
// x[..., n] + bias[n], broadcast over leading axes.
template <typename T> BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);
// tanh approximation
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                          T eps);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);

// Mean of -log softmax(logits[b])[targets[b]] over rows whose target != ignore_id.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                             std::int32_t ignore_id);
// Row b contributes -mean_{p in targets[b]} log softmax(logits[b])[p]; rows are averaged.
template <typename T>
BasicTensor<T> multi_target_cross_entropy(const BasicTensor<T>& logits,
                                          const std::vector<std::vector<std::size_t>>& targets);

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids);
template <typename T> BasicTensor<T> concat_rows(std::span<const BasicTensor<T>> parts);
template <typename T> BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t end);

// table[buckets, heads] gathered into [heads, rows, cols] by bucket index (row-major rows x cols).
template <typename T>
BasicTensor<T> bias_lookup(const BasicTensor<T>& table, std::span<const std::int32_t> buckets,
                           std::size_t rows, std::size_t cols);

struct AttentionOptions {
  std::size_t heads = 1;
  bool causal = false;  // query i sees keys j <= i
  AttentionMap* probe = nullptr;
};

// Multi-head scaled dot-product attention on [n, D] queries and [m, D] keys/values.
// bias, when defined, is [heads, n, m] and added to the scaled logits.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         const BasicTensor<T>& bias, const AttentionOptions& options);

}  // namespace murag
