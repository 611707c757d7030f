#pragma once

#include "exfusion/ops.hpp"
#include "exfusion/parameter_store.hpp"

#include <cstdint>
#include <string>

namespace exfusion {

/// Standard deviation used for every weight matrix at initialization.
inline constexpr double kInitStd = 0.02;

/// Weight [in, out] plus bias [out], owned by a ParameterStore.
template<typename T>
struct AffineParams {
	Parameter<T> *weight = nullptr;
	Parameter<T> *bias = nullptr;
};

/// Affine layer already on a tape.
template<typename T>
struct AffineVars {
	Var<T> weight;
	Var<T> bias;
};

template<typename T>
struct AttentionParams {
	AffineParams<T> query, key, value, output;
};

template<typename T>
struct DenseFFNParams {
	AffineParams<T> up, down;
};

template<typename T>
AffineVars<T> bind(Tape<T> &tape, const AffineParams<T> &p) {
	return {tape.param(*p.weight), tape.param(*p.bias)};
}

/// Normal(0, std) values drawn from the stream for (seed, key, index).
template<typename T>
Tensor<T> normal_init(const Shape &shape, std::uint64_t seed, const std::string &key, std::uint64_t index, double std);

/// Registers `<name>.weight` and `<name>.bias`. The weight stream is keyed on
/// `init_key` (defaults to the weight name) and `index`.
template<typename T>
AffineParams<T> add_affine(ParameterStore<T> &store, const std::string &name, std::size_t in, std::size_t out, std::uint64_t seed,
		const std::string &init_key = {}, std::uint64_t index = 0);

template<typename T>
struct AttentionResult {
	Var<T> output; ///< [B, L, D]
	Var<T> weights; ///< [B, heads, L, L], rows sum to 1
};

/// Multi-head scaled dot-product self-attention with output projection.
template<typename T>
AttentionResult<T> attention_forward(const Var<T> &x, const AttentionParams<T> &p, std::size_t heads, bool causal);

/// down(GELU(up(h))).
template<typename T>
Var<T> ffn_forward(const Var<T> &h, const AffineVars<T> &up, const AffineVars<T> &down);

template<typename T>
Var<T> ffn_forward(const Var<T> &h, const DenseFFNParams<T> &p) {
	Tape<T> &tape = h.tape();
	return ffn_forward(h, bind(tape, p.up), bind(tape, p.down));
}

} // namespace exfusion
