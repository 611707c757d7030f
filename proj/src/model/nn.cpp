#include "exfusion/nn.hpp"

#include "exfusion/rng.hpp"

#include <cmath>

namespace exfusion {

template<typename T>
Tensor<T> normal_init(const Shape &shape, std::uint64_t seed, const std::string &key, std::uint64_t index, double std) {
	auto rng = derive_rng(seed, key, index);
	std::normal_distribution<double> dist(0.0, std);
	Tensor<T> t(shape);
	for (T &v : t.data())
		v = static_cast<T>(dist(rng));
	return t;
}

template<typename T>
AffineParams<T> add_affine(ParameterStore<T> &store, const std::string &name, std::size_t in, std::size_t out, std::uint64_t seed,
		const std::string &init_key, std::uint64_t index) {
	const std::string weight_name = name + ".weight";
	AffineParams<T> p;
	p.weight = &store.add(weight_name, normal_init<T>({in, out}, seed, init_key.empty() ? weight_name : init_key, index, kInitStd),
			ParamKind::Weight);
	p.bias = &store.add(name + ".bias", Tensor<T>(Shape{out}), ParamKind::NoDecay);
	return p;
}

template<typename T>
AttentionResult<T> attention_forward(const Var<T> &x, const AttentionParams<T> &p, std::size_t heads, bool causal) {
	const Shape &s = x.shape();
	if (s.size() != 3)
		throw DimensionError("attention expects [B, L, D], got " + to_string(s));
	const std::size_t B = s[0], L = s[1], D = s[2];
	if (heads == 0 || D % heads != 0)
		throw DimensionError("attention width " + std::to_string(D) + " not divisible by " + std::to_string(heads) + " heads");
	if (p.query.weight->value.shape() != Shape{D, D})
		throw DimensionError("attention weights " + to_string(p.query.weight->value.shape()) + " do not match input " + to_string(s));
	const std::size_t dh = D / heads;
	Tape<T> &tape = x.tape();

	auto split_heads = [&](const Var<T> &t) { return permute(reshape(t, {B, L, heads, dh}), {0, 2, 1, 3}); };
	Var<T> q = split_heads(linear(x, tape.param(*p.query.weight), tape.param(*p.query.bias)));
	Var<T> k = split_heads(linear(x, tape.param(*p.key.weight), tape.param(*p.key.bias)));
	Var<T> v = split_heads(linear(x, tape.param(*p.value.weight), tape.param(*p.value.bias)));

	Var<T> scores = scale(matmul(q, permute(k, {0, 1, 3, 2})), T(1) / std::sqrt(T(dh)));
	Var<T> weights = causal ? causal_softmax(scores) : softmax(scores, 3);
	Var<T> context = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), {B, L, D});
	Var<T> out = linear(context, tape.param(*p.output.weight), tape.param(*p.output.bias));
	return {out, weights};
}

template<typename T>
Var<T> ffn_forward(const Var<T> &h, const AffineVars<T> &up, const AffineVars<T> &down) {
	return linear(gelu(linear(h, up.weight, up.bias)), down.weight, down.bias);
}

#define EXFUSION_INSTANTIATE_NN(T) \
	template Tensor<T> normal_init<T>(const Shape &, std::uint64_t, const std::string &, std::uint64_t, double); \
	template AffineParams<T> add_affine<T>(ParameterStore<T> &, const std::string &, std::size_t, std::size_t, std::uint64_t, \
			const std::string &, std::uint64_t); \
	template AttentionResult<T> attention_forward(const Var<T> &, const AttentionParams<T> &, std::size_t, bool); \
	template Var<T> ffn_forward(const Var<T> &, const AffineVars<T> &, const AffineVars<T> &);

EXFUSION_INSTANTIATE_NN(float)
EXFUSION_INSTANTIATE_NN(double)

} // namespace exfusion
