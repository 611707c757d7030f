#include "exfusion/transformer.hpp"

#include <numeric>

namespace exfusion {

namespace {

template<typename T>
Parameter<T> *add_norm(ParameterStore<T> &store, const std::string &name, std::size_t d, bool gain) {
	return &store.add(name + (gain ? ".gain" : ".bias"), Tensor<T>(Shape{d}, gain ? T(1) : T(0)), ParamKind::NoDecay);
}

} // namespace

template<typename T>
Transformer<T>::Transformer(ModelSpec spec) :
		spec_(std::move(spec)) {
	spec_.validate();
	const std::size_t D = spec_.dim, H = spec_.hidden();
	const std::uint64_t seed = spec_.seed;
	token_table_ = &store_.add("embed.token.weight", normal_init<T>({spec_.vocab, D}, seed, "embed.token.weight", 0, kInitStd),
			ParamKind::Weight);
	position_table_ = &store_.add("embed.position.weight",
			normal_init<T>({spec_.max_seq_len, D}, seed, "embed.position.weight", 0, kInitStd), ParamKind::Weight);

	for (std::size_t l = 0; l < spec_.depth; l++) {
		const std::string p = "layers." + std::to_string(l);
		BlockParams<T> b;
		b.ln1_gain = add_norm(store_, p + ".ln1", D, true);
		b.ln1_bias = add_norm(store_, p + ".ln1", D, false);
		b.attention.query = add_affine(store_, p + ".attn.query", D, D, seed);
		b.attention.key = add_affine(store_, p + ".attn.key", D, D, seed);
		b.attention.value = add_affine(store_, p + ".attn.value", D, D, seed);
		b.attention.output = add_affine(store_, p + ".attn.output", D, D, seed);
		b.ln2_gain = add_norm(store_, p + ".ln2", D, true);
		b.ln2_bias = add_norm(store_, p + ".ln2", D, false);
		const std::string ffn = p + ".ffn";
		if (!spec_.is_replaced(l)) {
			b.ffn = DenseFFNParams<T>{add_affine(store_, ffn + ".up", D, H, seed), add_affine(store_, ffn + ".down", H, D, seed)};
		} else if (spec_.ffn_variant == FfnVariant::TopKMoE) {
			b.ffn = add_topk_moe(store_, p + ".moe", ffn, D, H, spec_.num_experts, spec_.top_k, seed,
					spec_.expert_init == ExpertInit::Replicate);
		} else {
			b.ffn = add_exfusion_layer(store_, ffn, ffn, spec_);
		}
		blocks_.push_back(std::move(b));
	}
	final_gain_ = add_norm(store_, "final_ln", D, true);
	final_bias_ = add_norm(store_, "final_ln", D, false);
	head_ = add_affine(store_, "head", D, spec_.output_dim(), seed);
}

template<typename T>
Var<T> Transformer<T>::block_forward(const Var<T> &x, std::size_t layer, const ForwardContext &ctx) {
	const BlockParams<T> &b = blocks_.at(layer);
	Tape<T> &tape = x.tape();
	const T eps = static_cast<T>(kLayerNormEps);
	const bool causal = spec_.head == HeadKind::LanguageModel;
	Var<T> attn_in = layernorm(x, tape.param(*b.ln1_gain), tape.param(*b.ln1_bias), eps);
	Var<T> h = add(x, attention_forward(attn_in, b.attention, spec_.heads, causal).output);
	Var<T> ffn_in = layernorm(h, tape.param(*b.ln2_gain), tape.param(*b.ln2_bias), eps);
	Var<T> ffn_out = std::visit(
			[&](const auto &slot) -> Var<T> {
				using S = std::decay_t<decltype(slot)>;
				if constexpr (std::is_same_v<S, DenseFFNParams<T>>)
					return ffn_forward(ffn_in, slot);
				else if constexpr (std::is_same_v<S, TopKMoELayer<T>>)
					return topk_moe_forward(ffn_in, slot);
				else
					return exfusion_forward(ffn_in, slot, ctx);
			},
			b.ffn);
	return add(h, ffn_out);
}

template<typename T>
Var<T> Transformer<T>::forward(Tape<T> &tape, const TokenBatch &batch, const ForwardContext &ctx) {
	const std::size_t B = batch.batch, L = batch.seq, D = spec_.dim;
	if (B == 0 || L == 0 || batch.tokens.size() != B * L)
		throw DimensionError("token batch must hold batch*seq ids, got " + std::to_string(batch.tokens.size()) + " for [" + std::to_string(B)
				+ ", " + std::to_string(L) + "]");
	if (L > spec_.max_seq_len)
		throw DimensionError("sequence length " + std::to_string(L) + " exceeds max_seq_len " + std::to_string(spec_.max_seq_len));
	for (std::int32_t t : batch.tokens)
		if (t < 0 || static_cast<std::size_t>(t) >= spec_.vocab)
			throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(spec_.vocab));

	std::vector<std::int32_t> positions(L);
	std::iota(positions.begin(), positions.end(), 0);
	Var<T> tok = reshape(gather_rows(tape.param(*token_table_), batch.tokens), {B, L, D});
	Var<T> x = add(tok, gather_rows(tape.param(*position_table_), positions));
	for (std::size_t l = 0; l < spec_.depth; l++)
		x = block_forward(x, l, ctx);
	Var<T> h = layernorm(x, tape.param(*final_gain_), tape.param(*final_bias_), static_cast<T>(kLayerNormEps));
	if (spec_.head == HeadKind::Classification)
		h = mean_axis(h, 1);
	return linear(h, tape.param(*head_.weight), tape.param(*head_.bias));
}

template<typename T>
Var<T> Transformer<T>::loss(Tape<T> &tape, const TokenBatch &batch, const ForwardContext &ctx) {
	Var<T> logits = forward(tape, batch, ctx);
	if (spec_.head == HeadKind::LanguageModel)
		logits = reshape(logits, {batch.batch * batch.seq, spec_.vocab});
	return cross_entropy(logits, batch.targets);
}

template<typename T>
Tensor<T> Transformer<T>::logits(const TokenBatch &batch) {
	Tape<T> tape;
	return forward(tape, batch, ForwardContext{false, false}).value();
}

template<typename T>
void copy_parameters(const Transformer<T> &source, Transformer<T> &target) {
	if (source.parameters().size() != target.parameters().size())
		throw std::invalid_argument("models differ in tensor count");
	for (const auto &p : source.parameters()) {
		Parameter<T> &dst = target.parameters().at(p->name);
		if (dst.value.shape() != p->value.shape())
			throw DimensionError("tensor " + p->name + " has shape " + to_string(p->value.shape()) + " vs " + to_string(dst.value.shape()));
		dst.value = p->value;
	}
}

template<typename T>
Transformer<T> collapse_to_dense(const Transformer<T> &source) {
	const ModelSpec &src = source.spec();
	if (src.ffn_variant == FfnVariant::TopKMoE && !src.replaced_layers.empty())
		throw std::invalid_argument("top-k MoE models cannot be collapsed to a dense model");
	ModelSpec spec = src;
	spec.ffn_variant = FfnVariant::Dense;
	spec.replaced_layers.clear();
	Transformer<T> dense(spec);

	for (auto &p : dense.parameters())
		if (const Parameter<T> *s = source.parameters().find(p->name))
			p->value = s->value;
	for (std::size_t l = 0; l < src.depth; l++) {
		const auto *layer = std::get_if<ExFusionLayer<T>>(&source.block(l).ffn);
		if (layer == nullptr)
			continue;
		auto [up, down] = collapse_layer(*layer);
		const auto &slot = std::get<DenseFFNParams<T>>(dense.block(l).ffn);
		slot.up.weight->value = std::move(up.weight);
		slot.up.bias->value = std::move(up.bias);
		slot.down.weight->value = std::move(down.weight);
		slot.down.bias->value = std::move(down.bias);
	}
	return dense;
}

template<typename To, typename From>
Transformer<To> cast_model(const Transformer<From> &source) {
	Transformer<To> out(source.spec());
	for (const auto &p : source.parameters()) {
		Parameter<To> &dst = out.parameters().at(p->name);
		dst.value = p->value.template cast<To>();
		dst.frozen = p->frozen;
	}
	return out;
}

template class Transformer<float>;
template class Transformer<double>;
template void copy_parameters(const Transformer<float> &, Transformer<float> &);
template void copy_parameters(const Transformer<double> &, Transformer<double> &);
template Transformer<float> collapse_to_dense(const Transformer<float> &);
template Transformer<double> collapse_to_dense(const Transformer<double> &);
template Transformer<double> cast_model<double, float>(const Transformer<float> &);
template Transformer<float> cast_model<float, double>(const Transformer<double> &);
template Transformer<float> cast_model<float, float>(const Transformer<float> &);
template Transformer<double> cast_model<double, double>(const Transformer<double> &);

} // namespace exfusion
