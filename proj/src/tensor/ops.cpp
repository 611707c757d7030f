#include "exfusion/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>

namespace exfusion {

namespace {

template<typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template<typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template<typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template<typename T>
void same_tape(const Var<T> &a, const Var<T> &b, const char *op) {
	if (&a.tape() != &b.tape())
		throw std::invalid_argument(std::string(op) + ": operands are on different tapes");
}

std::size_t product(const Shape &s, std::size_t from, std::size_t to) {
	std::size_t n = 1;
	for (std::size_t i = from; i < to; i++)
		n *= s[i];
	return n;
}

// Maps every output element of a broadcast to the flat index of one operand.
std::vector<std::size_t> broadcast_index(const Shape &operand, const Shape &out) {
	const std::size_t rank = out.size();
	const std::size_t offset = rank - operand.size();
	std::vector<std::size_t> stride(rank, 0);
	std::size_t s = 1;
	for (std::size_t i = operand.size(); i-- > 0;) {
		if (operand[i] != 1)
			stride[i + offset] = s;
		s *= operand[i];
	}
	const std::size_t n = numel(out);
	std::vector<std::size_t> index(n);
	std::vector<std::size_t> counter(rank, 0);
	std::size_t flat = 0;
	for (std::size_t i = 0; i < n; i++) {
		index[i] = flat;
		for (std::size_t ax = rank; ax-- > 0;) {
			counter[ax]++;
			flat += stride[ax];
			if (counter[ax] < out[ax])
				break;
			flat -= stride[ax] * counter[ax];
			counter[ax] = 0;
		}
	}
	return index;
}

bool is_trailing_suffix(const Shape &small, const Shape &big) {
	if (small.size() > big.size())
		return false;
	return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Operand layout relative to the broadcast output.
enum class Layout { Same, Suffix, General };

struct Broadcast {
	Shape out;
	Layout layout_a = Layout::Same;
	Layout layout_b = Layout::Same;
	std::vector<std::size_t> index_a;
	std::vector<std::size_t> index_b;
	std::size_t size_a = 0;
	std::size_t size_b = 0;

	std::size_t ia(std::size_t i) const {
		switch (layout_a) {
			case Layout::Same: return i;
			case Layout::Suffix: return i % size_a;
			default: return index_a[i];
		}
	}
	std::size_t ib(std::size_t i) const {
		switch (layout_b) {
			case Layout::Same: return i;
			case Layout::Suffix: return i % size_b;
			default: return index_b[i];
		}
	}
};

Layout classify(const Shape &operand, const Shape &out) {
	if (operand == out)
		return Layout::Same;
	if (is_trailing_suffix(operand, out))
		return Layout::Suffix;
	return Layout::General;
}

std::shared_ptr<Broadcast> make_broadcast(const Shape &a, const Shape &b) {
	auto bc = std::make_shared<Broadcast>();
	bc->out = broadcast_shape(a, b);
	bc->size_a = numel(a);
	bc->size_b = numel(b);
	bc->layout_a = classify(a, bc->out);
	bc->layout_b = classify(b, bc->out);
	if (bc->layout_a == Layout::General)
		bc->index_a = broadcast_index(a, bc->out);
	if (bc->layout_b == Layout::General)
		bc->index_b = broadcast_index(b, bc->out);
	return bc;
}

} // namespace

Shape broadcast_shape(const Shape &a, const Shape &b) {
	const std::size_t rank = std::max(a.size(), b.size());
	Shape out(rank);
	for (std::size_t i = 0; i < rank; i++) {
		const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
		const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
		if (da != db && da != 1 && db != 1)
			throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
		out[i] = std::max(da, db);
	}
	return out;
}

template<typename T>
Var<T> matmul(const Var<T> &a, const Var<T> &b) {
	same_tape(a, b, "matmul");
	const Shape &sa = a.shape();
	const Shape &sb = b.shape();
	if (sa.size() < 2 || sb.size() < 2)
		throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(sa) + " and " + to_string(sb));
	const std::size_t m = sa[sa.size() - 2], k = sa.back();
	const std::size_t kb = sb[sb.size() - 2], n = sb.back();
	if (k != kb)
		throw DimensionError("matmul inner dims differ: " + to_string(sa) + " x " + to_string(sb));
	const Shape batch_a(sa.begin(), sa.end() - 2);
	const Shape batch_b(sb.begin(), sb.end() - 2);

	enum class Mode { FlatA, BroadcastA, Batched };
	Mode mode;
	Shape out_shape;
	std::size_t batch = 1;
	if (batch_b.empty()) {
		mode = Mode::FlatA;
		out_shape = batch_a;
		batch = numel(batch_a);
	} else if (batch_a.empty()) {
		mode = Mode::BroadcastA;
		out_shape = batch_b;
		batch = numel(batch_b);
	} else if (batch_a == batch_b) {
		mode = Mode::Batched;
		out_shape = batch_a;
		batch = numel(batch_a);
	} else {
		throw DimensionError("matmul batch dims differ: " + to_string(sa) + " x " + to_string(sb));
	}
	out_shape.push_back(m);
	out_shape.push_back(n);

	Tensor<T> out(out_shape);
	const Tensor<T> &va = a.value();
	const Tensor<T> &vb = b.value();
	if (mode == Mode::FlatA) {
		MutMap<T>(out.raw(), batch * m, n).noalias() = ConstMap<T>(va.raw(), batch * m, k) * ConstMap<T>(vb.raw(), k, n);
	} else {
		for (std::size_t i = 0; i < batch; i++) {
			const T *pa = mode == Mode::BroadcastA ? va.raw() : va.raw() + i * m * k;
			MutMap<T>(out.raw() + i * m * n, m, n).noalias() = ConstMap<T>(pa, m, k) * ConstMap<T>(vb.raw() + i * k * n, k, n);
		}
	}

	const std::size_t ida = a.id(), idb = b.id();
	return a.tape().record(std::move(out), {ida, idb}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		const Tensor<T> &A = tape.value(ida);
		const Tensor<T> &B = tape.value(idb);
		if (mode == Mode::FlatA) {
			ConstMap<T> G(g.raw(), batch * m, n);
			if (tape.requires_grad(ida))
				MutMap<T>(tape.grad_buffer(ida).raw(), batch * m, k).noalias() += G * ConstMap<T>(B.raw(), k, n).transpose();
			if (tape.requires_grad(idb))
				MutMap<T>(tape.grad_buffer(idb).raw(), k, n).noalias() += ConstMap<T>(A.raw(), batch * m, k).transpose() * G;
			return;
		}
		for (std::size_t i = 0; i < batch; i++) {
			ConstMap<T> G(g.raw() + i * m * n, m, n);
			const std::size_t off_a = mode == Mode::BroadcastA ? 0 : i * m * k;
			if (tape.requires_grad(ida))
				MutMap<T>(tape.grad_buffer(ida).raw() + off_a, m, k).noalias() += G * ConstMap<T>(B.raw() + i * k * n, k, n).transpose();
			if (tape.requires_grad(idb))
				MutMap<T>(tape.grad_buffer(idb).raw() + i * k * n, k, n).noalias() += ConstMap<T>(A.raw() + off_a, m, k).transpose() * G;
		}
	}, "matmul");
}

namespace {

enum class Binary { Add, Sub, Mul };

template<typename T>
Var<T> binary(const Var<T> &a, const Var<T> &b, Binary op, const char *name) {
	same_tape(a, b, name);
	auto bc = make_broadcast(a.shape(), b.shape());
	const Tensor<T> &va = a.value();
	const Tensor<T> &vb = b.value();
	Tensor<T> out(bc->out);
	const std::size_t n = out.size();
	auto apply = [&](auto f) {
		if (bc->layout_a == Layout::Same && bc->layout_b == Layout::Same) {
			for (std::size_t i = 0; i < n; i++)
				out[i] = f(va[i], vb[i]);
		} else if (bc->layout_a == Layout::Same && bc->layout_b == Layout::Suffix && bc->size_b > 0) {
			// rows of a against one repeated b, the bias/gain case
			const std::size_t m = bc->size_b;
			for (std::size_t r = 0; r < n; r += m)
				for (std::size_t j = 0; j < m; j++)
					out[r + j] = f(va[r + j], vb[j]);
		} else {
			for (std::size_t i = 0; i < n; i++)
				out[i] = f(va[bc->ia(i)], vb[bc->ib(i)]);
		}
	};
	switch (op) {
		case Binary::Add: apply([](T x, T y) { return x + y; }); break;
		case Binary::Sub: apply([](T x, T y) { return x - y; }); break;
		case Binary::Mul: apply([](T x, T y) { return x * y; }); break;
	}
	const std::size_t ida = a.id(), idb = b.id();
	return a.tape().record(std::move(out), {ida, idb}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		if (bc->layout_a == Layout::Same && bc->layout_b == Layout::Same) {
			const T sign = op == Binary::Sub ? T(-1) : T(1);
			if (tape.requires_grad(ida)) {
				Tensor<T> &ga = tape.grad_buffer(ida);
				if (op == Binary::Mul) {
					const Tensor<T> &B = tape.value(idb);
					for (std::size_t i = 0; i < n; i++)
						ga[i] += g[i] * B[i];
				} else {
					for (std::size_t i = 0; i < n; i++)
						ga[i] += g[i];
				}
			}
			if (tape.requires_grad(idb)) {
				Tensor<T> &gb = tape.grad_buffer(idb);
				if (op == Binary::Mul) {
					const Tensor<T> &A = tape.value(ida);
					for (std::size_t i = 0; i < n; i++)
						gb[i] += g[i] * A[i];
				} else {
					for (std::size_t i = 0; i < n; i++)
						gb[i] += sign * g[i];
				}
			}
			return;
		}
		if (tape.requires_grad(ida)) {
			Tensor<T> &ga = tape.grad_buffer(ida);
			if (op == Binary::Mul) {
				const Tensor<T> &B = tape.value(idb);
				for (std::size_t i = 0; i < n; i++)
					ga[bc->ia(i)] += g[i] * B[bc->ib(i)];
			} else {
				for (std::size_t i = 0; i < n; i++)
					ga[bc->ia(i)] += g[i];
			}
		}
		if (tape.requires_grad(idb)) {
			Tensor<T> &gb = tape.grad_buffer(idb);
			if (op == Binary::Mul) {
				const Tensor<T> &A = tape.value(ida);
				for (std::size_t i = 0; i < n; i++)
					gb[bc->ib(i)] += g[i] * A[bc->ia(i)];
			} else if (op == Binary::Sub) {
				for (std::size_t i = 0; i < n; i++)
					gb[bc->ib(i)] -= g[i];
			} else {
				for (std::size_t i = 0; i < n; i++)
					gb[bc->ib(i)] += g[i];
			}
		}
	}, name);
}

} // namespace

template<typename T>
Var<T> add(const Var<T> &a, const Var<T> &b) {
	return binary(a, b, Binary::Add, "add");
}

template<typename T>
Var<T> sub(const Var<T> &a, const Var<T> &b) {
	return binary(a, b, Binary::Sub, "sub");
}

template<typename T>
Var<T> mul(const Var<T> &a, const Var<T> &b) {
	return binary(a, b, Binary::Mul, "mul");
}

template<typename T>
Var<T> scale(const Var<T> &a, std::type_identity_t<T> s) {
	const Tensor<T> &va = a.value();
	Tensor<T> out(va.shape());
	for (std::size_t i = 0; i < va.size(); i++)
		out[i] = va[i] * s;
	const std::size_t ida = a.id();
	return a.tape().record(std::move(out), {ida}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		Tensor<T> &ga = tape.grad_buffer(ida);
		for (std::size_t i = 0; i < g.size(); i++)
			ga[i] += g[i] * s;
	}, "scale");
}

template<typename T>
Var<T> gelu(const Var<T> &a) {
	const Tensor<T> &va = a.value();
	Tensor<T> out(va.shape());
	const auto n = Eigen::Index(va.size());
	const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> x(va.raw(), n);
	Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(out.raw(), n) = x * (T(0.5) * (T(1) + (x * T(1 / std::numbers::sqrt2)).erf()));
	const std::size_t ida = a.id();
	return a.tape().record(std::move(out), {ida}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		const Tensor<T> &xv = tape.value(ida);
		Tensor<T> &ga = tape.grad_buffer(ida);
		const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> x(xv.raw(), n), gm(g.raw(), n);
		const T inv_sqrt_2pi = T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
		// d/dx x Phi(x) = Phi(x) + x phi(x)
		Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(ga.raw(), n) +=
				gm * (T(0.5) * (T(1) + (x * T(1 / std::numbers::sqrt2)).erf()) + x * (T(-0.5) * x.square()).exp() * inv_sqrt_2pi);
	}, "gelu");
}

template<typename T>
Var<T> softmax(const Var<T> &a, std::size_t axis) {
	const Shape &s = a.shape();
	if (axis >= s.size())
		throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " + to_string(s));
	const std::size_t outer = product(s, 0, axis), n = s[axis], inner = product(s, axis + 1, s.size());
	const Tensor<T> &va = a.value();
	Tensor<T> out(s);
	for (std::size_t o = 0; o < outer; o++)
		for (std::size_t in = 0; in < inner; in++) {
			const std::size_t base = o * n * inner + in;
			T mx = va[base];
			for (std::size_t j = 1; j < n; j++)
				mx = std::max(mx, va[base + j * inner]);
			T total = 0;
			for (std::size_t j = 0; j < n; j++) {
				const T e = std::exp(va[base + j * inner] - mx);
				out[base + j * inner] = e;
				total += e;
			}
			for (std::size_t j = 0; j < n; j++)
				out[base + j * inner] /= total;
		}
	const std::size_t ida = a.id();
	return a.tape().record(std::move(out), {ida}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		const Tensor<T> &y = tape.value(self);
		Tensor<T> &ga = tape.grad_buffer(ida);
		for (std::size_t o = 0; o < outer; o++)
			for (std::size_t in = 0; in < inner; in++) {
				const std::size_t base = o * n * inner + in;
				T dot = 0;
				for (std::size_t j = 0; j < n; j++)
					dot += g[base + j * inner] * y[base + j * inner];
				for (std::size_t j = 0; j < n; j++) {
					const std::size_t idx = base + j * inner;
					ga[idx] += y[idx] * (g[idx] - dot);
				}
			}
	}, "softmax");
}

template<typename T>
Var<T> causal_softmax(const Var<T> &a) {
	const Shape &s = a.shape();
	if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2])
		throw DimensionError("causal_softmax needs [..., L, L], got " + to_string(s));
	const std::size_t L = s.back();
	const std::size_t mats = numel(s) / (L * L);
	const Tensor<T> &va = a.value();
	Tensor<T> out(s);
	for (std::size_t mtx = 0; mtx < mats; mtx++)
		for (std::size_t i = 0; i < L; i++) {
			const std::size_t row = (mtx * L + i) * L;
			T mx = va[row];
			for (std::size_t j = 1; j <= i; j++)
				mx = std::max(mx, va[row + j]);
			T total = 0;
			for (std::size_t j = 0; j <= i; j++) {
				const T e = std::exp(va[row + j] - mx);
				out[row + j] = e;
				total += e;
			}
			for (std::size_t j = 0; j <= i; j++)
				out[row + j] /= total;
		}
	const std::size_t ida = a.id();
	return a.tape().record(std::move(out), {ida}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		const Tensor<T> &y = tape.value(self);
		Tensor<T> &ga = tape.grad_buffer(ida);
		for (std::size_t mtx = 0; mtx < mats; mtx++)
			for (std::size_t i = 0; i < L; i++) {
				const std::size_t row = (mtx * L + i) * L;
				T dot = 0;
				for (std::size_t j = 0; j <= i; j++)
					dot += g[row + j] * y[row + j];
				for (std::size_t j = 0; j <= i; j++)
					ga[row + j] += y[row + j] * (g[row + j] - dot);
			}
	}, "causal_softmax");
}

template<typename T>
Var<T> layernorm(const Var<T> &a, const Var<T> &gain, const Var<T> &bias, std::type_identity_t<T> eps) {
	same_tape(a, gain, "layernorm");
	same_tape(a, bias, "layernorm");
	if (!(eps > T(0)))
		throw std::invalid_argument("layernorm eps must be positive");
	const Shape &s = a.shape();
	const std::size_t d = s.back();
	if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
		throw DimensionError("layernorm affine params must be [" + std::to_string(d) + "], got " + to_string(gain.shape())
				+ " and " + to_string(bias.shape()));
	const std::size_t rows = numel(s) / d;
	const Tensor<T> &x = a.value();
	const Tensor<T> &gv = gain.value();
	const Tensor<T> &bv = bias.value();
	auto xhat = std::make_shared<Tensor<T>>(s);
	auto rstd = std::make_shared<std::vector<T>>(rows);
	Tensor<T> out(s);
	for (std::size_t r = 0; r < rows; r++) {
		const T *row = x.raw() + r * d;
		T mu = 0;
		for (std::size_t j = 0; j < d; j++)
			mu += row[j];
		mu /= T(d);
		T var = 0;
		for (std::size_t j = 0; j < d; j++)
			var += (row[j] - mu) * (row[j] - mu);
		var /= T(d);
		const T inv = T(1) / std::sqrt(var + eps);
		(*rstd)[r] = inv;
		for (std::size_t j = 0; j < d; j++) {
			const T h = (row[j] - mu) * inv;
			(*xhat)[r * d + j] = h;
			out[r * d + j] = h * gv[j] + bv[j];
		}
	}
	const std::size_t ida = a.id(), idg = gain.id(), idb = bias.id();
	return a.tape().record(std::move(out), {ida, idg, idb}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		const Tensor<T> &gv = tape.value(idg);
		if (tape.requires_grad(idg)) {
			Tensor<T> &gg = tape.grad_buffer(idg);
			for (std::size_t r = 0; r < rows; r++)
				for (std::size_t j = 0; j < d; j++)
					gg[j] += g[r * d + j] * (*xhat)[r * d + j];
		}
		if (tape.requires_grad(idb)) {
			Tensor<T> &gb = tape.grad_buffer(idb);
			for (std::size_t r = 0; r < rows; r++)
				for (std::size_t j = 0; j < d; j++)
					gb[j] += g[r * d + j];
		}
		if (tape.requires_grad(ida)) {
			Tensor<T> &ga = tape.grad_buffer(ida);
			for (std::size_t r = 0; r < rows; r++) {
				T mean_dh = 0, mean_dh_h = 0;
				for (std::size_t j = 0; j < d; j++) {
					const T dh = g[r * d + j] * gv[j];
					mean_dh += dh;
					mean_dh_h += dh * (*xhat)[r * d + j];
				}
				mean_dh /= T(d);
				mean_dh_h /= T(d);
				for (std::size_t j = 0; j < d; j++) {
					const T dh = g[r * d + j] * gv[j];
					ga[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
				}
			}
		}
	}, "layernorm");
}

template<typename T>
Var<T> cross_entropy(const Var<T> &logits, std::span<const std::int32_t> targets) {
	const Shape &s = logits.shape();
	if (s.size() != 2)
		throw DimensionError("cross_entropy needs [B, C] logits, got " + to_string(s));
	const std::size_t B = s[0], C = s[1];
	if (targets.size() != B)
		throw DimensionError("cross_entropy got " + std::to_string(targets.size()) + " targets for " + std::to_string(B) + " rows");
	for (std::int32_t t : targets)
		if (t < 0 || static_cast<std::size_t>(t) >= C)
			throw std::out_of_range("cross_entropy target " + std::to_string(t) + " outside [0, " + std::to_string(C) + ")");
	const Tensor<T> &x = logits.value();
	auto probs = std::make_shared<Tensor<T>>(s);
	double total = 0;
	for (std::size_t r = 0; r < B; r++) {
		const T *row = x.raw() + r * C;
		T mx = row[0];
		for (std::size_t j = 1; j < C; j++)
			mx = std::max(mx, row[j]);
		T z = 0;
		for (std::size_t j = 0; j < C; j++) {
			const T e = std::exp(row[j] - mx);
			(*probs)[r * C + j] = e;
			z += e;
		}
		for (std::size_t j = 0; j < C; j++)
			(*probs)[r * C + j] /= z;
		total += static_cast<double>(mx + std::log(z) - row[targets[r]]);
	}
	std::vector<std::int32_t> tgt(targets.begin(), targets.end());
	const std::size_t idx = logits.id();
	return logits.tape().record(Tensor<T>::scalar(static_cast<T>(total / double(B))), {idx},
			[=, tgt = std::move(tgt)](Tape<T> &tape, std::size_t self) {
				const T g = tape.grad(self)[0] / T(B);
				Tensor<T> &gx = tape.grad_buffer(idx);
				for (std::size_t r = 0; r < B; r++)
					for (std::size_t j = 0; j < C; j++) {
						const T p = (*probs)[r * C + j] - (static_cast<std::size_t>(tgt[r]) == j ? T(1) : T(0));
						gx[r * C + j] += g * p;
					}
			}, "cross_entropy");
}

template<typename T>
Var<T> sum(const Var<T> &a) {
	double total = 0;
	for (T v : a.value().data())
		total += static_cast<double>(v);
	const std::size_t ida = a.id();
	return a.tape().record(Tensor<T>::scalar(static_cast<T>(total)), {ida}, [=](Tape<T> &tape, std::size_t self) {
		const T g = tape.grad(self)[0];
		Tensor<T> &ga = tape.grad_buffer(ida);
		for (std::size_t i = 0; i < ga.size(); i++)
			ga[i] += g;
	}, "sum");
}

template<typename T>
Var<T> mean(const Var<T> &a) {
	return scale(sum(a), T(1) / T(a.value().size()));
}

template<typename T>
Var<T> mean_axis(const Var<T> &a, std::size_t axis) {
	const Shape &s = a.shape();
	if (axis >= s.size())
		throw DimensionError("mean_axis " + std::to_string(axis) + " out of range for " + to_string(s));
	const std::size_t outer = product(s, 0, axis), n = s[axis], inner = product(s, axis + 1, s.size());
	Shape out_shape;
	for (std::size_t i = 0; i < s.size(); i++)
		if (i != axis)
			out_shape.push_back(s[i]);
	const Tensor<T> &va = a.value();
	Tensor<T> out(out_shape);
	for (std::size_t o = 0; o < outer; o++)
		for (std::size_t in = 0; in < inner; in++) {
			T acc = 0;
			for (std::size_t j = 0; j < n; j++)
				acc += va[(o * n + j) * inner + in];
			out[o * inner + in] = acc / T(n);
		}
	const std::size_t ida = a.id();
	return a.tape().record(std::move(out), {ida}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		Tensor<T> &ga = tape.grad_buffer(ida);
		for (std::size_t o = 0; o < outer; o++)
			for (std::size_t in = 0; in < inner; in++) {
				const T gi = g[o * inner + in] / T(n);
				for (std::size_t j = 0; j < n; j++)
					ga[(o * n + j) * inner + in] += gi;
			}
	}, "mean_axis");
}

template<typename T>
Var<T> reshape(const Var<T> &a, Shape shape) {
	Tensor<T> out = a.value().reshaped(std::move(shape));
	const std::size_t ida = a.id();
	return a.tape().record(std::move(out), {ida}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		Tensor<T> &ga = tape.grad_buffer(ida);
		for (std::size_t i = 0; i < g.size(); i++)
			ga[i] += g[i];
	}, "reshape");
}

template<typename T>
Var<T> permute(const Var<T> &a, const std::vector<std::size_t> &perm) {
	const Shape &s = a.shape();
	const std::size_t rank = s.size();
	if (perm.size() != rank)
		throw DimensionError("permute order has " + std::to_string(perm.size()) + " axes for shape " + to_string(s));
	std::vector<bool> seen(rank, false);
	for (std::size_t p : perm) {
		if (p >= rank || seen[p])
			throw DimensionError("invalid permutation for shape " + to_string(s));
		seen[p] = true;
	}
	std::vector<std::size_t> in_stride(rank);
	std::size_t st = 1;
	for (std::size_t i = rank; i-- > 0;) {
		in_stride[i] = st;
		st *= s[i];
	}
	Shape out_shape(rank);
	std::vector<std::size_t> stride(rank);
	for (std::size_t i = 0; i < rank; i++) {
		out_shape[i] = s[perm[i]];
		stride[i] = in_stride[perm[i]];
	}
	auto source = std::make_shared<std::vector<std::size_t>>(numel(s));
	{
		std::vector<std::size_t> counter(rank, 0);
		std::size_t flat = 0;
		for (std::size_t i = 0; i < source->size(); i++) {
			(*source)[i] = flat;
			for (std::size_t ax = rank; ax-- > 0;) {
				counter[ax]++;
				flat += stride[ax];
				if (counter[ax] < out_shape[ax])
					break;
				flat -= stride[ax] * counter[ax];
				counter[ax] = 0;
			}
		}
	}
	const Tensor<T> &va = a.value();
	Tensor<T> out(out_shape);
	for (std::size_t i = 0; i < out.size(); i++)
		out[i] = va[(*source)[i]];
	const std::size_t ida = a.id();
	return a.tape().record(std::move(out), {ida}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		Tensor<T> &ga = tape.grad_buffer(ida);
		for (std::size_t i = 0; i < g.size(); i++)
			ga[(*source)[i]] += g[i];
	}, "permute");
}

template<typename T>
Var<T> gather_rows(const Var<T> &table, std::span<const std::int32_t> indices) {
	const Shape &s = table.shape();
	if (s.size() != 2)
		throw DimensionError("gather_rows needs a 2-D table, got " + to_string(s));
	const std::size_t rows = s[0], d = s[1];
	for (std::int32_t i : indices)
		if (i < 0 || static_cast<std::size_t>(i) >= rows)
			throw std::out_of_range("row index " + std::to_string(i) + " outside [0, " + std::to_string(rows) + ")");
	const Tensor<T> &v = table.value();
	Tensor<T> out(Shape{indices.size(), d});
	for (std::size_t r = 0; r < indices.size(); r++)
		std::copy_n(v.raw() + static_cast<std::size_t>(indices[r]) * d, d, out.raw() + r * d);
	std::vector<std::int32_t> idx(indices.begin(), indices.end());
	const std::size_t idt = table.id();
	return table.tape().record(std::move(out), {idt}, [=, idx = std::move(idx)](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		Tensor<T> &gt = tape.grad_buffer(idt);
		for (std::size_t r = 0; r < idx.size(); r++)
			for (std::size_t j = 0; j < d; j++)
				gt[static_cast<std::size_t>(idx[r]) * d + j] += g[r * d + j];
	}, "gather_rows");
}

template<typename T>
Var<T> scatter_rows(const Var<T> &src, std::span<const std::int32_t> indices, std::size_t rows) {
	const Shape &s = src.shape();
	if (s.size() != 2 || s[0] != indices.size())
		throw DimensionError("scatter_rows needs [" + std::to_string(indices.size()) + ", D] source, got " + to_string(s));
	const std::size_t d = s[1];
	for (std::int32_t i : indices)
		if (i < 0 || static_cast<std::size_t>(i) >= rows)
			throw std::out_of_range("row index " + std::to_string(i) + " outside [0, " + std::to_string(rows) + ")");
	const Tensor<T> &v = src.value();
	Tensor<T> out(Shape{rows, d});
	for (std::size_t r = 0; r < indices.size(); r++)
		for (std::size_t j = 0; j < d; j++)
			out[static_cast<std::size_t>(indices[r]) * d + j] += v[r * d + j];
	std::vector<std::int32_t> idx(indices.begin(), indices.end());
	const std::size_t ids = src.id();
	return src.tape().record(std::move(out), {ids}, [=, idx = std::move(idx)](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		Tensor<T> &gs = tape.grad_buffer(ids);
		for (std::size_t r = 0; r < idx.size(); r++)
			for (std::size_t j = 0; j < d; j++)
				gs[r * d + j] += g[static_cast<std::size_t>(idx[r]) * d + j];
	}, "scatter_rows");
}

template<typename T>
Var<T> gather_column(const Var<T> &a, std::span<const std::int32_t> rows, std::size_t col) {
	const Shape &s = a.shape();
	if (s.size() != 2 || col >= s[1])
		throw DimensionError("gather_column " + std::to_string(col) + " invalid for shape " + to_string(s));
	const std::size_t n = s[1];
	for (std::int32_t r : rows)
		if (r < 0 || static_cast<std::size_t>(r) >= s[0])
			throw std::out_of_range("row index " + std::to_string(r) + " outside [0, " + std::to_string(s[0]) + ")");
	const Tensor<T> &v = a.value();
	Tensor<T> out(Shape{rows.size(), 1});
	for (std::size_t i = 0; i < rows.size(); i++)
		out[i] = v[static_cast<std::size_t>(rows[i]) * n + col];
	std::vector<std::int32_t> idx(rows.begin(), rows.end());
	const std::size_t ida = a.id();
	return a.tape().record(std::move(out), {ida}, [=, idx = std::move(idx)](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		Tensor<T> &ga = tape.grad_buffer(ida);
		for (std::size_t i = 0; i < idx.size(); i++)
			ga[static_cast<std::size_t>(idx[i]) * n + col] += g[i];
	}, "gather_column");
}

template<typename T>
Var<T> linear(const Var<T> &x, const Var<T> &w, const Var<T> &b) {
	return add(matmul(x, w), b);
}

#define EXFUSION_INSTANTIATE_OPS(T) \
	template Var<T> matmul(const Var<T> &, const Var<T> &); \
	template Var<T> add(const Var<T> &, const Var<T> &); \
	template Var<T> sub(const Var<T> &, const Var<T> &); \
	template Var<T> mul(const Var<T> &, const Var<T> &); \
	template Var<T> scale(const Var<T> &, std::type_identity_t<T>); \
	template Var<T> gelu(const Var<T> &); \
	template Var<T> softmax(const Var<T> &, std::size_t); \
	template Var<T> causal_softmax(const Var<T> &); \
	template Var<T> layernorm(const Var<T> &, const Var<T> &, const Var<T> &, std::type_identity_t<T>); \
	template Var<T> cross_entropy(const Var<T> &, std::span<const std::int32_t>); \
	template Var<T> sum(const Var<T> &); \
	template Var<T> mean(const Var<T> &); \
	template Var<T> mean_axis(const Var<T> &, std::size_t); \
	template Var<T> reshape(const Var<T> &, Shape); \
	template Var<T> permute(const Var<T> &, const std::vector<std::size_t> &); \
	template Var<T> gather_rows(const Var<T> &, std::span<const std::int32_t>); \
	template Var<T> scatter_rows(const Var<T> &, std::span<const std::int32_t>, std::size_t); \
	template Var<T> gather_column(const Var<T> &, std::span<const std::int32_t>, std::size_t); \
	template Var<T> linear(const Var<T> &, const Var<T> &, const Var<T> &);

EXFUSION_INSTANTIATE_OPS(float)
EXFUSION_INSTANTIATE_OPS(double)

} // namespace exfusion
