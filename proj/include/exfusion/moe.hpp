#pragma once

#include "exfusion/nn.hpp"

#include <cstdint>
#include <vector>

namespace exfusion {

/// Sparse top-k mixture-of-experts FFN: each token is processed by the k
/// experts with the largest router probability, weighted by that probability.
template<typename T>
struct TopKMoELayer {
	std::vector<DenseFFNParams<T>> experts;
	AffineParams<T> router; ///< weight [D, N]
	std::size_t top_k = 1;
};

/// Per-token expert distribution softmax(x W_g + b_g) over the last axis.
template<typename T>
Var<T> route(const Var<T> &x, const AffineParams<T> &router);

/// Indices of the k largest entries of each row of a [tokens, N] matrix,
/// ordered by descending value; ties go to the lower index.
template<typename T>
std::vector<std::vector<std::int32_t>> select_topk(const Tensor<T> &gates, std::size_t k);

/// x: [..., D]. Non-capacity-limited; every token reaches exactly k experts.
template<typename T>
Var<T> topk_moe_forward(const Var<T> &x, const TopKMoELayer<T> &layer);

/// Registers N experts and a router under `prefix`. Expert i's matrices are
/// drawn from the streams keyed on `init_prefix` and index i, so expert 0
/// matches a dense FFN registered under `init_prefix`.
template<typename T>
TopKMoELayer<T> add_topk_moe(ParameterStore<T> &store, const std::string &prefix, const std::string &init_prefix, std::size_t dim,
		std::size_t hidden, std::size_t num_experts, std::size_t top_k, std::uint64_t seed, bool replicate);

} // namespace exfusion
