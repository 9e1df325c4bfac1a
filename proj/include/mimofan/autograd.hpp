#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "mimofan/kernels.hpp"
#include "mimofan/tensor.hpp"

namespace mimofan {

/// 32-bit tapes train; 64-bit tapes are used for finite-difference verification.
enum class Precision { train32, verify64 };

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records differentiable operations in execution order and replays them in
/// reverse to propagate gradients.
///
/// Node ids are assigned in creation order, which is a topological order of the
/// computation graph. Parameters enter through parameter(); each backward()
/// call adds d(loss)/d(param) into the bound tensor's grad buffer, so callers
/// must zero parameter gradients explicitly between steps.
template <typename Scalar>
class Tape {
 public:
  using Array = typename Tensor<Scalar>::Array;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  static constexpr Precision precision =
      std::is_same_v<Scalar, double> ? Precision::verify64 : Precision::train32;

  struct Node {
    std::string op;
    Tensor<Scalar> value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    Tensor<Scalar>* parameter = nullptr;
    BackwardFn backward;
    std::optional<Array> grad;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient (images, labels).
  Var<Scalar> constant(Tensor<Scalar> value);
  /// Leaf whose gradient is kept on the tape; read it back with grad().
  Var<Scalar> variable(Tensor<Scalar> value);
  /// Leaf bound to an external tensor. Registering the same tensor twice returns the same node.
  Var<Scalar> parameter(Tensor<Scalar>& param);

  Var<Scalar> record(std::string op, Tensor<Scalar> value, std::vector<std::size_t> inputs,
                     BackwardFn backward);

  void backward(const Var<Scalar>& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor<Scalar>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.has_value(); }
  const Array& grad(std::size_t id) const;
  /// Gradient buffer of node `id`, zero-initialised on first use.
  Array& grad_accumulator(std::size_t id);

  /// When set, every recorded value is checked for NaN/Inf. On by default for verify64.
  void set_check_finite(bool check) { check_finite_ = check; }
  bool check_finite() const { return check_finite_; }

 private:
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor<Scalar>*, std::size_t> parameters_;
  bool check_finite_ = precision == Precision::verify64;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}

// Differentiable counterparts of the kernels in kernels.hpp. All inputs must live on the same tape.

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Var<Scalar>& bias,
                   int stride = 1, int pad = 0);

template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> upsample2_bilinear(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts);

template <typename Scalar>
Var<Scalar> softmax_channels(const Var<Scalar>& logits);

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormState<Scalar> state, Mode mode);

/// Sum of all elements as a (1,1,1,1) tensor.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& input);

/// Inner product with a constant tensor of the same shape, as a (1,1,1,1) tensor.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& input, const Tensor<Scalar>& coefficients);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mimofan
