#pragma once

#include "exfusion/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace exfusion {

/// How the optimizer treats a named tensor.
enum class ParamKind {
	Weight, ///< trainable, weight decay applies
	NoDecay, ///< trainable, never decayed (biases, norms, fusion weights)
	Buffer ///< model state updated outside the optimizer (memory banks)
};

template<typename T>
struct Parameter {
	std::string name;
	Tensor<T> value;
	Tensor<T> grad; ///< empty until the first backward pass touches it
	ParamKind kind = ParamKind::Weight;
	bool frozen = false;

	bool trainable() const noexcept { return kind != ParamKind::Buffer && !frozen; }
	void zero_grad() {
		if (!grad.empty())
			grad.fill(T(0));
	}
};

template<typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template<typename T>
class Var {
public:
	Var() = default;
	Var(Tape<T> *tape, std::size_t id) :
			tape_(tape), id_(id) {
	}

	Tape<T> &tape() const { return *tape_; }
	std::size_t id() const noexcept { return id_; }
	const Tensor<T> &value() const;
	const Shape &shape() const { return value().shape(); }
	bool requires_grad() const;
	/// Gradient after Tape::backward; zeros when the value was unreachable.
	Tensor<T> grad() const;
	explicit operator bool() const noexcept { return tape_ != nullptr; }

private:
	Tape<T> *tape_ = nullptr;
	std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Values are appended in evaluation order, so
/// every node's inputs precede it and a single reverse sweep visits each
/// node once.
template<typename T>
class Tape {
public:
	using value_type = T;
	using BackwardFn = std::function<void(Tape &tape, std::size_t self)>;

	Tape() = default;
	Tape(const Tape &) = delete;
	Tape &operator=(const Tape &) = delete;

	/// Value that never receives a gradient.
	Var<T> constant(Tensor<T> value);
	/// Free-standing input that collects a gradient.
	Var<T> leaf(Tensor<T> value, bool requires_grad = true);
	/// Leaf bound to a parameter; backward() accumulates into param.grad.
	/// Each parameter is recorded once per tape.
	Var<T> param(Parameter<T> &p);

	/// Appends an op result. `fn` runs during backward when the result has a gradient.
	Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, const char *op_name);

	/// Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse. Parameter
	/// gradients accumulate across calls; node gradients are recomputed each call.
	void backward(const Var<T> &loss);

	std::size_t size() const noexcept { return nodes_.size(); }
	const Tensor<T> &value(std::size_t id) const { return nodes_[id].value; }
	bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
	/// Gradient buffer for node `id`, allocated as zeros on first use.
	Tensor<T> &grad_buffer(std::size_t id);
	bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
	const Tensor<T> &grad(std::size_t id) const { return nodes_[id].grad; }

private:
	struct Node {
		Tensor<T> value;
		Tensor<T> grad;
		bool requires_grad = false;
		BackwardFn backward;
		Parameter<T> *param = nullptr;
	};

	Var<T> push(Node node);

	std::deque<Node> nodes_;
	std::unordered_map<const Parameter<T> *, std::size_t> param_ids_;
};

template<typename T>
const Tensor<T> &Var<T>::value() const {
	return tape_->value(id_);
}

template<typename T>
bool Var<T>::requires_grad() const {
	return tape_->requires_grad(id_);
}

template<typename T>
Tensor<T> Var<T>::grad() const {
	if (tape_->has_grad(id_))
		return tape_->grad(id_);
	return Tensor<T>(value().shape());
}

extern template class Tape<float>;
extern template class Tape<double>;

} // namespace exfusion
