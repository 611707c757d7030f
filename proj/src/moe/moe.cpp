#include "exfusion/moe.hpp"

#include <algorithm>
#include <numeric>

namespace exfusion {

template<typename T>
Var<T> route(const Var<T> &x, const AffineParams<T> &router) {
	Tape<T> &tape = x.tape();
	Var<T> logits = linear(x, tape.param(*router.weight), tape.param(*router.bias));
	return softmax(logits, logits.shape().size() - 1);
}

template<typename T>
std::vector<std::vector<std::int32_t>> select_topk(const Tensor<T> &gates, std::size_t k) {
	if (gates.rank() != 2)
		throw DimensionError("select_topk expects [tokens, N], got " + to_string(gates.shape()));
	const std::size_t tokens = gates.dim(0), n = gates.dim(1);
	if (k < 1 || k > n)
		throw std::invalid_argument("top_k must be in [1, " + std::to_string(n) + "]");
	std::vector<std::vector<std::int32_t>> picks(tokens);
	std::vector<std::int32_t> order(n);
	for (std::size_t t = 0; t < tokens; t++) {
		const T *row = gates.raw() + t * n;
		std::iota(order.begin(), order.end(), 0);
		std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), [row](std::int32_t a, std::int32_t b) {
			return row[a] > row[b] || (row[a] == row[b] && a < b);
		});
		picks[t].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
	}
	return picks;
}

template<typename T>
Var<T> topk_moe_forward(const Var<T> &x, const TopKMoELayer<T> &layer) {
	const Shape in_shape = x.shape();
	const std::size_t D = in_shape.back();
	const std::size_t tokens = numel(in_shape) / D;
	const std::size_t n = layer.experts.size();
	Var<T> flat = reshape(x, {tokens, D});
	Var<T> gates = route(flat, layer.router);
	const auto picks = select_topk(gates.value(), layer.top_k);

	std::vector<std::vector<std::int32_t>> rows(n);
	for (std::size_t t = 0; t < tokens; t++)
		for (std::int32_t e : picks[t])
			rows[static_cast<std::size_t>(e)].push_back(static_cast<std::int32_t>(t));

	Var<T> out;
	for (std::size_t e = 0; e < n; e++) {
		if (rows[e].empty())
			continue;
		Var<T> routed = gather_rows(flat, rows[e]);
		Var<T> weighted = mul(ffn_forward(routed, layer.experts[e]), gather_column(gates, rows[e], e));
		Var<T> placed = scatter_rows(weighted, rows[e], tokens);
		out = out ? add(out, placed) : placed;
	}
	return reshape(out, in_shape);
}

template<typename T>
TopKMoELayer<T> add_topk_moe(ParameterStore<T> &store, const std::string &prefix, const std::string &init_prefix, std::size_t dim,
		std::size_t hidden, std::size_t num_experts, std::size_t top_k, std::uint64_t seed, bool replicate) {
	TopKMoELayer<T> layer;
	layer.top_k = top_k;
	layer.router = add_affine(store, prefix + ".router", dim, num_experts, seed);
	for (std::size_t e = 0; e < num_experts; e++) {
		const std::string name = prefix + ".experts." + std::to_string(e);
		const std::uint64_t index = replicate ? 0 : e;
		DenseFFNParams<T> ffn;
		ffn.up = add_affine(store, name + ".up", dim, hidden, seed, init_prefix + ".up.weight", index);
		ffn.down = add_affine(store, name + ".down", hidden, dim, seed, init_prefix + ".down.weight", index);
		layer.experts.push_back(ffn);
	}
	return layer;
}

#define EXFUSION_INSTANTIATE_MOE(T) \
	template Var<T> route(const Var<T> &, const AffineParams<T> &); \
	template std::vector<std::vector<std::int32_t>> select_topk(const Tensor<T> &, std::size_t); \
	template Var<T> topk_moe_forward(const Var<T> &, const TopKMoELayer<T> &); \
	template TopKMoELayer<T> add_topk_moe<T>(ParameterStore<T> &, const std::string &, const std::string &, std::size_t, std::size_t, \
			std::size_t, std::size_t, std::uint64_t, bool);

EXFUSION_INSTANTIATE_MOE(float)
EXFUSION_INSTANTIATE_MOE(double)

} // namespace exfusion
