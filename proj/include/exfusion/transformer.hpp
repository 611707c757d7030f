#pragma once

#include "exfusion/fusion.hpp"
#include "exfusion/model_spec.hpp"
#include "exfusion/moe.hpp"
#include "exfusion/nn.hpp"

#include <cstdint>
#include <variant>
#include <vector>

namespace exfusion {

inline constexpr double kLayerNormEps = 1e-5;

/// Row-major [batch, seq] token ids with their targets: one class per row for
/// classification, the next token at every position for language modeling.
struct TokenBatch {
	std::size_t batch = 0;
	std::size_t seq = 0;
	std::vector<std::int32_t> tokens;
	std::vector<std::int32_t> targets;
};

template<typename T>
using FfnSlot = std::variant<DenseFFNParams<T>, TopKMoELayer<T>, ExFusionLayer<T>>;

template<typename T>
struct BlockParams {
	Parameter<T> *ln1_gain = nullptr;
	Parameter<T> *ln1_bias = nullptr;
	AttentionParams<T> attention;
	Parameter<T> *ln2_gain = nullptr;
	Parameter<T> *ln2_bias = nullptr;
	FfnSlot<T> ffn;
};

/// Pre-norm Transformer encoder with learned positions. Classification heads
/// read the mean-pooled final representation; LM heads use causal attention
/// and emit logits at every position.
template<typename T>
class Transformer {
public:
	explicit Transformer(ModelSpec spec);
	Transformer(Transformer &&) noexcept = default;
	Transformer &operator=(Transformer &&) noexcept = default;

	const ModelSpec &spec() const noexcept { return spec_; }
	ParameterStore<T> &parameters() noexcept { return store_; }
	const ParameterStore<T> &parameters() const noexcept { return store_; }
	const BlockParams<T> &block(std::size_t layer) const { return blocks_.at(layer); }
	std::size_t parameter_count() const { return store_.parameter_count(); }

	/// Logits: [B, classes] or [B, L, vocab].
	Var<T> forward(Tape<T> &tape, const TokenBatch &batch, const ForwardContext &ctx = {});
	/// x + attn(ln(x)), then + ffn(ln(.)). x: [B, L, D].
	Var<T> block_forward(const Var<T> &x, std::size_t layer, const ForwardContext &ctx);
	/// Mean cross-entropy of the batch targets.
	Var<T> loss(Tape<T> &tape, const TokenBatch &batch, const ForwardContext &ctx = {});
	/// Eval-mode logits without keeping a tape around.
	Tensor<T> logits(const TokenBatch &batch);

private:
	ModelSpec spec_;
	ParameterStore<T> store_;
	Parameter<T> *token_table_ = nullptr;
	Parameter<T> *position_table_ = nullptr;
	std::vector<BlockParams<T>> blocks_;
	Parameter<T> *final_gain_ = nullptr;
	Parameter<T> *final_bias_ = nullptr;
	AffineParams<T> head_;
};

/// Replaces every ExFusion FFN slot with its fused dense FFN and drops routers,
/// banks and individual experts. The result is a Dense-variant model.
template<typename T>
Transformer<T> collapse_to_dense(const Transformer<T> &source);

/// Same architecture and values in another precision.
template<typename To, typename From>
Transformer<To> cast_model(const Transformer<From> &source);

/// Copies every tensor of `source` into the same-named tensor of `target`.
/// Throws if the two models do not have identical tensor names and shapes.
template<typename T>
void copy_parameters(const Transformer<T> &source, Transformer<T> &target);

extern template class Transformer<float>;
extern template class Transformer<double>;

} // namespace exfusion
