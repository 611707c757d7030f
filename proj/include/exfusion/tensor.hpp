#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace exfusion {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape &shape);
std::string to_string(const Shape &shape);

/// Thrown when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or Inf reaches a tape boundary.
class NonFiniteError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// 64-byte aligned storage so vectorized kernels see the same alignment on every run.
template<typename T>
struct AlignedAllocator {
	using value_type = T;
	static constexpr std::size_t alignment = 64;

	AlignedAllocator() noexcept = default;
	template<typename U>
	AlignedAllocator(const AlignedAllocator<U> &) noexcept {}

	T *allocate(std::size_t n) {
		if (n == 0)
			return nullptr;
		const std::size_t bytes = ((n * sizeof(T) + alignment - 1) / alignment) * alignment;
		void *p = std::aligned_alloc(alignment, bytes);
		if (p == nullptr)
			throw std::bad_alloc();
		return static_cast<T *>(p);
	}
	void deallocate(T *p, std::size_t) noexcept { std::free(p); }

	template<typename U>
	bool operator==(const AlignedAllocator<U> &) const noexcept {
		return true;
	}
};

/// Dense row-major N-dimensional array. Rank 0 is a scalar holding one value.
template<typename T>
class Tensor {
public:
	using value_type = T;
	using Storage = std::vector<T, AlignedAllocator<T>>;

	Tensor() = default;
	explicit Tensor(Shape shape, T fill = T(0));
	Tensor(Shape shape, std::span<const T> values);
	Tensor(Shape shape, std::initializer_list<T> values);

	static Tensor scalar(T value) { return Tensor(Shape{}, value); }

	const Shape &shape() const noexcept { return shape_; }
	std::size_t rank() const noexcept { return shape_.size(); }
	std::size_t size() const noexcept { return data_.size(); }
	std::size_t dim(std::size_t axis) const;
	bool empty() const noexcept { return data_.empty(); }

	std::span<T> data() noexcept { return {data_.data(), data_.size()}; }
	std::span<const T> data() const noexcept { return {data_.data(), data_.size()}; }
	T *raw() noexcept { return data_.data(); }
	const T *raw() const noexcept { return data_.data(); }

	T &operator[](std::size_t i) noexcept { return data_[i]; }
	const T &operator[](std::size_t i) const noexcept { return data_[i]; }

	/// Value of a single-element tensor.
	T item() const;
	bool all_finite() const noexcept;
	void fill(T value) noexcept;
	/// Same data under a new shape with equal element count.
	Tensor reshaped(Shape shape) const;

	template<typename U>
	Tensor<U> cast() const {
		Tensor<U> out(shape_);
		for (std::size_t i = 0; i < data_.size(); i++)
			out[i] = static_cast<U>(data_[i]);
		return out;
	}

	bool operator==(const Tensor &other) const { return shape_ == other.shape_ && data_ == other.data_; }

private:
	Shape shape_;
	Storage data_;
};

/// Throws NonFiniteError naming `what` if any element is NaN or Inf.
template<typename T>
void require_finite(const Tensor<T> &t, const std::string &what);

extern template class Tensor<float>;
extern template class Tensor<double>;

} // namespace exfusion
