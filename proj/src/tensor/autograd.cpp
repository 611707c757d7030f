#include "exfusion/autograd.hpp"

namespace exfusion {

template<typename T>
Var<T> Tape<T>::push(Node node) {
	nodes_.push_back(std::move(node));
	return Var<T>(this, nodes_.size() - 1);
}

template<typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
	require_finite(value, "constant");
	Node n;
	n.value = std::move(value);
	return push(std::move(n));
}

template<typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
	require_finite(value, "leaf");
	Node n;
	n.value = std::move(value);
	n.requires_grad = requires_grad;
	return push(std::move(n));
}

template<typename T>
Var<T> Tape<T>::param(Parameter<T> &p) {
	if (auto it = param_ids_.find(&p); it != param_ids_.end())
		return Var<T>(this, it->second);
	require_finite(p.value, "parameter " + p.name);
	Node n;
	n.value = p.value;
	n.requires_grad = p.kind != ParamKind::Buffer;
	n.param = &p;
	Var<T> v = push(std::move(n));
	param_ids_.emplace(&p, v.id());
	return v;
}

template<typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, const char *op_name) {
	require_finite(value, std::string("output of ") + op_name);
	Node n;
	n.value = std::move(value);
	for (std::size_t id : inputs)
		if (nodes_[id].requires_grad)
			n.requires_grad = true;
	if (n.requires_grad)
		n.backward = std::move(fn);
	return push(std::move(n));
}

template<typename T>
Tensor<T> &Tape<T>::grad_buffer(std::size_t id) {
	Node &n = nodes_[id];
	if (n.grad.empty())
		n.grad = Tensor<T>(n.value.shape());
	return n.grad;
}

template<typename T>
void Tape<T>::backward(const Var<T> &loss) {
	if (&loss.tape() != this)
		throw std::invalid_argument("backward: loss belongs to another tape");
	if (loss.value().size() != 1)
		throw DimensionError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
	for (Node &n : nodes_)
		n.grad = Tensor<T>();
	grad_buffer(loss.id()).fill(T(1));

	for (std::size_t id = loss.id() + 1; id-- > 0;) {
		Node &n = nodes_[id];
		if (!n.requires_grad || n.grad.empty())
			continue;
		if (n.backward)
			n.backward(*this, id);
		if (n.param != nullptr) {
			Parameter<T> &p = *n.param;
			if (p.grad.empty())
				p.grad = Tensor<T>(p.value.shape());
			for (std::size_t i = 0; i < n.grad.size(); i++)
				p.grad[i] += n.grad[i];
		}
	}
}

template class Tape<float>;
template class Tape<double>;

} // namespace exfusion
