#include "exfusion/tensor.hpp"

#include <cstring>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace exfusion {

std::size_t numel(const Shape &shape) {
	std::size_t n = 1;
	for (std::size_t d : shape)
		n *= d;
	return n;
}

std::string to_string(const Shape &shape) {
	std::ostringstream ss;
	ss << '[';
	for (std::size_t i = 0; i < shape.size(); i++) {
		if (i > 0)
			ss << ", ";
		ss << shape[i];
	}
	ss << ']';
	return ss.str();
}

template<typename T>
Tensor<T>::Tensor(Shape shape, T fill) :
		shape_(std::move(shape)) {
	for (std::size_t d : shape_)
		if (d == 0)
			throw DimensionError("tensor dims must be positive, got " + to_string(shape_));
	data_.assign(numel(shape_), fill);
}

template<typename T>
Tensor<T>::Tensor(Shape shape, std::span<const T> values) :
		Tensor(std::move(shape)) {
	if (values.size() != data_.size())
		throw DimensionError("shape " + to_string(shape_) + " needs " + std::to_string(data_.size()) + " values, got "
				+ std::to_string(values.size()));
	std::copy(values.begin(), values.end(), data_.begin());
}

template<typename T>
Tensor<T>::Tensor(Shape shape, std::initializer_list<T> values) :
		Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {
}

template<typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
	if (axis >= shape_.size())
		throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
	return shape_[axis];
}

template<typename T>
T Tensor<T>::item() const {
	if (data_.size() != 1)
		throw DimensionError("item() needs a single-element tensor, got shape " + to_string(shape_));
	return data_[0];
}

template<typename T>
bool Tensor<T>::all_finite() const noexcept {
	// exponent bits all set means Inf or NaN; integer form so the loop vectorizes
	using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
	constexpr Bits exponent = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
	Bits bad = 0;
	for (T v : data_) {
		Bits b;
		std::memcpy(&b, &v, sizeof b);
		bad |= Bits((b & exponent) == exponent);
	}
	return bad == 0;
}

template<typename T>
void Tensor<T>::fill(T value) noexcept {
	std::fill(data_.begin(), data_.end(), value);
}

template<typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
	if (numel(shape) != data_.size())
		throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
	Tensor out;
	out.shape_ = std::move(shape);
	out.data_ = data_;
	return out;
}

template<typename T>
void require_finite(const Tensor<T> &t, const std::string &what) {
	if (!t.all_finite())
		throw NonFiniteError("non-finite value in " + what + " (shape " + to_string(t.shape()) + ")");
}

template class Tensor<float>;
template class Tensor<double>;
template void require_finite(const Tensor<float> &, const std::string &);
template void require_finite(const Tensor<double> &, const std::string &);

} // namespace exfusion
