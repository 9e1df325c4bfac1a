#include "mimofan/autograd.hpp"

#include <memory>

namespace mimofan {

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Tensor<Scalar> value) {
  return record("constant", std::move(value), {}, nullptr);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::variable(Tensor<Scalar> value) {
  Node node;
  node.op = "variable";
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::parameter(Tensor<Scalar>& param) {
  if (auto it = parameters_.find(&param); it != parameters_.end()) {
    return Var<Scalar>(this, it->second);
  }
  Node node;
  node.op = "parameter";
  node.value = param;
  node.value.clear_grad();
  node.requires_grad = true;
  node.parameter = &param;
  nodes_.push_back(std::move(node));
  parameters_.emplace(&param, nodes_.size() - 1);
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(std::string op, Tensor<Scalar> value,
                                 std::vector<std::size_t> inputs, BackwardFn backward) {
  if (check_finite_ && !value.all_finite()) {
    throw NumericError(op + ": produced a non-finite value");
  }
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  for (std::size_t id : inputs) {
    if (id >= nodes_.size()) throw ContractError(node.op + ": input is not on this tape");
    node.requires_grad = node.requires_grad || nodes_[id].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss was not produced on this tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + loss.shape().str());
  }
  for (auto& node : nodes_) node.grad.reset();
  grad_accumulator(loss.id()).setOnes();
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.grad || !node.requires_grad) continue;
    if (node.backward) node.backward(*this, i);
    if (node.parameter != nullptr) node.parameter->grad() += *node.grad;
  }
}

template <typename Scalar>
const typename Tape<Scalar>::Array& Tape<Scalar>::grad(std::size_t id) const {
  const Node& node = nodes_.at(id);
  if (!node.grad) throw ContractError("tape: node '" + node.op + "' holds no gradient");
  return *node.grad;
}

template <typename Scalar>
typename Tape<Scalar>::Array& Tape<Scalar>::grad_accumulator(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.grad) node.grad = Array::Zero(static_cast<Eigen::Index>(node.value.size()));
  return *node.grad;
}

namespace {

template <typename Scalar>
Tape<Scalar>& common_tape(std::initializer_list<const Var<Scalar>*> vars, const char* op) {
  Tape<Scalar>* tape = (*vars.begin())->tape();
  for (const auto* v : vars) {
    if (!v->valid() || v->tape() != tape) throw ContractError(std::string(op) + ": operands on different tapes");
  }
  return *tape;
}

// Wraps a gradient buffer as a tensor view for kernels that take tensors.
template <typename Scalar>
Tensor<Scalar> grad_tensor(const Tape<Scalar>& tape, std::size_t id) {
  return Tensor<Scalar>(tape.value(id).shape(), tape.grad(id));
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Var<Scalar>& bias,
                   int stride, int pad) {
  Tape<Scalar>& tape = common_tape({&input, &kernel, &bias}, "conv2d");
  Tensor<Scalar> out = conv2d(input.value(), kernel.value(), bias.value(), stride, pad);
  const std::size_t x = input.id(), k = kernel.id(), b = bias.id();
  return tape.record("conv2d", std::move(out), {x, k, b},
                     [x, k, b, stride, pad](Tape<Scalar>& t, std::size_t self) {
                       const Tensor<Scalar> dout = grad_tensor(t, self);
                       conv2d_backward(t.value(x), t.value(k), dout, stride, pad,
                                       t.requires_grad(x) ? &t.grad_accumulator(x) : nullptr,
                                       t.requires_grad(k) ? &t.grad_accumulator(k) : nullptr,
                                       t.requires_grad(b) ? &t.grad_accumulator(b) : nullptr);
                     });
}

template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& input) {
  Tape<Scalar>& tape = *input.tape();
  const std::size_t x = input.id();
  return tape.record("avg_pool2", avg_pool2(input.value()), {x}, [x](Tape<Scalar>& t, std::size_t self) {
    avg_pool2_backward(grad_tensor(t, self), t.value(x).shape(), t.grad_accumulator(x));
  });
}

template <typename Scalar>
Var<Scalar> upsample2_bilinear(const Var<Scalar>& input) {
  Tape<Scalar>& tape = *input.tape();
  const std::size_t x = input.id();
  return tape.record("upsample2_bilinear", upsample2_bilinear(input.value()), {x},
                     [x](Tape<Scalar>& t, std::size_t self) {
                       upsample2_bilinear_backward(grad_tensor(t, self), t.value(x).shape(),
                                                   t.grad_accumulator(x));
                     });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& input) {
  Tape<Scalar>& tape = *input.tape();
  const std::size_t x = input.id();
  return tape.record("relu", relu(input.value()), {x}, [x](Tape<Scalar>& t, std::size_t self) {
    const auto& out = t.value(self).data();
    t.grad_accumulator(x) += (out > Scalar(0)).select(t.grad(self), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& tape = common_tape({&a, &b}, "add");
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("add", add(a.value(), b.value()), {ia, ib},
                     [ia, ib](Tape<Scalar>& t, std::size_t self) {
                       if (t.requires_grad(ia)) t.grad_accumulator(ia) += t.grad(self);
                       if (t.requires_grad(ib)) t.grad_accumulator(ib) += t.grad(self);
                     });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tape<Scalar>& tape = *a.tape();
  const std::size_t x = a.id();
  return tape.record("scale", scale(a.value(), factor), {x}, [x, factor](Tape<Scalar>& t, std::size_t self) {
    t.grad_accumulator(x) += factor * t.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  Tape<Scalar>& tape = *parts.front().tape();
  std::vector<const Tensor<Scalar>*> values;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw ContractError("concat_channels: operands on different tapes");
    values.push_back(&p.value());
    ids.push_back(p.id());
  }
  Tensor<Scalar> out = concat_channels(values);
  return tape.record("concat_channels", std::move(out), ids, [ids](Tape<Scalar>& t, std::size_t self) {
    const Shape& s = t.value(self).shape();
    const auto& g = t.grad(self);
    std::size_t channel = 0;
    for (std::size_t id : ids) {
      const std::size_t c = t.value(id).shape().c;
      if (t.requires_grad(id)) {
        auto& dst = t.grad_accumulator(id);
        const std::size_t block = c * s.plane();
        for (std::size_t n = 0; n < s.n; ++n) {
          dst.segment(static_cast<Eigen::Index>(n * block), static_cast<Eigen::Index>(block)) +=
              g.segment(static_cast<Eigen::Index>((n * s.c + channel) * s.plane()),
                        static_cast<Eigen::Index>(block));
        }
      }
      channel += c;
    }
  });
}

template <typename Scalar>
Var<Scalar> softmax_channels(const Var<Scalar>& logits) {
  Tape<Scalar>& tape = *logits.tape();
  const std::size_t x = logits.id();
  return tape.record("softmax_channels", softmax_channels(logits.value()), {x},
                     [x](Tape<Scalar>& t, std::size_t self) {
                       softmax_channels_backward(t.value(self), grad_tensor(t, self), t.grad_accumulator(x));
                     });
}

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormState<Scalar> state, Mode mode) {
  Tape<Scalar>& tape = common_tape({&input, &gamma, &beta}, "batch_norm");
  auto cache = std::make_shared<BatchNormCache<Scalar>>();
  Tensor<Scalar> out = batch_norm(input.value(), gamma.value(), beta.value(), state, mode, cache.get());
  const std::size_t x = input.id(), g = gamma.id(), b = beta.id();
  return tape.record("batch_norm", std::move(out), {x, g, b},
                     [x, g, b, mode, cache](Tape<Scalar>& t, std::size_t self) {
                       batch_norm_backward(*cache, t.value(g), grad_tensor(t, self), mode,
                                           t.requires_grad(x) ? &t.grad_accumulator(x) : nullptr,
                                           t.requires_grad(g) ? &t.grad_accumulator(g) : nullptr,
                                           t.requires_grad(b) ? &t.grad_accumulator(b) : nullptr);
                     });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& input) {
  Tape<Scalar>& tape = *input.tape();
  const std::size_t x = input.id();
  Tensor<Scalar> out(Shape{}, input.value().sum());
  return tape.record("sum", std::move(out), {x}, [x](Tape<Scalar>& t, std::size_t self) {
    t.grad_accumulator(x) += t.grad(self)[0];
  });
}

template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& input, const Tensor<Scalar>& coefficients) {
  require_same_shape("weighted_sum", input.shape(), coefficients.shape());
  Tape<Scalar>& tape = *input.tape();
  const std::size_t x = input.id();
  Tensor<Scalar> out(Shape{}, (input.value().data() * coefficients.data()).sum());
  return tape.record("weighted_sum", std::move(out), {x},
                     [x, coefficients](Tape<Scalar>& t, std::size_t self) {
                       t.grad_accumulator(x) += t.grad(self)[0] * coefficients.data();
                     });
}

template class Tape<float>;
template class Tape<double>;

#define MIMOFAN_INSTANTIATE_AD(S)                                                           \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, int, int);            \
  template Var<S> avg_pool2(const Var<S>&);                                                 \
  template Var<S> upsample2_bilinear(const Var<S>&);                                        \
  template Var<S> relu(const Var<S>&);                                                      \
  template Var<S> add(const Var<S>&, const Var<S>&);                                        \
  template Var<S> scale(const Var<S>&, S);                                                  \
  template Var<S> concat_channels(const std::vector<Var<S>>&);                              \
  template Var<S> softmax_channels(const Var<S>&);                                          \
  template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormState<S>, \
                             Mode);                                                         \
  template Var<S> sum(const Var<S>&);                                                       \
  template Var<S> weighted_sum(const Var<S>&, const Tensor<S>&);

MIMOFAN_INSTANTIATE_AD(float)
MIMOFAN_INSTANTIATE_AD(double)

#undef MIMOFAN_INSTANTIATE_AD

}  // namespace mimofan
