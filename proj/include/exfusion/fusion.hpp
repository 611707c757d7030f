#pragma once

#include "exfusion/model_spec.hpp"
#include "exfusion/nn.hpp"

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

namespace exfusion {

/// N affine experts of identical shape occupying one FFN position, stored
/// stacked: weight [N, in, out], bias [N, out].
template<typename T>
struct ExpertSet {
	Parameter<T> *weight = nullptr;
	Parameter<T> *bias = nullptr;

	std::size_t size() const { return weight->value.dim(0); }
};

template<typename T>
struct AffineTensors {
	Tensor<T> weight;
	Tensor<T> bias;
};

/// Uniform 1/N weights; nothing to learn or store.
struct StaticWeights {};

/// N learnable weights shared by the up- and down-projection sets.
template<typename T>
struct DynamicWeights {
	Parameter<T> *weights = nullptr;
};

/// Router plus a non-learnable bank holding the moving average of the
/// router's batch-mean expert distribution. With a shared router, the up and
/// down members alias the same router and bank.
template<typename T>
struct MemoryBank {
	AffineParams<T> up_router;
	AffineParams<T> down_router;
	Parameter<T> *up_bank = nullptr;
	Parameter<T> *down_bank = nullptr;
	double momentum = 0.95;
	BankOrder order = BankOrder::UpdateThenFuse;
	bool shared = true;
};

template<typename T>
using FusionState = std::variant<StaticWeights, DynamicWeights<T>, MemoryBank<T>>;

/// FFN slot whose up- and down-projections are each a fused expert set.
template<typename T>
struct ExFusionLayer {
	ExpertSet<T> up;
	ExpertSet<T> down;
	FusionState<T> state;
};

struct ForwardContext {
	bool training = false;
	/// When false, a training forward computes the updated bank but leaves the stored bank untouched.
	bool commit_state = true;
};

/// Parameter-space fusion of stacked experts: weight = sum_i w_i W_i,
/// bias = sum_i w_i b_i. Differentiable in the experts and in `weights`.
template<typename T>
AffineVars<T> fuse(const Var<T> &stacked_weight, const Var<T> &stacked_bias, const Var<T> &weights);

/// Same fusion on plain tensors, accumulated in expert order.
template<typename T>
AffineTensors<T> fuse(const Tensor<T> &stacked_weight, const Tensor<T> &stacked_bias, std::span<const T> weights);

template<typename T>
AffineVars<T> fuse(const ExpertSet<T> &set, const Var<T> &weights) {
	Tape<T> &tape = weights.tape();
	return fuse(tape.param(*set.weight), tape.param(*set.bias), weights);
}

/// Uniform-average fusion of both sets, then a standard FFN pass.
template<typename T>
Var<T> exfusion_sw_forward(const Var<T> &x, const ExpertSet<T> &up, const ExpertSet<T> &down);

/// Fusion of both sets with one shared weight vector.
template<typename T>
Var<T> exfusion_dw_forward(const Var<T> &x, const ExpertSet<T> &up, const ExpertSet<T> &down, const Var<T> &weights);

/// Per-token router softmax averaged over every token of the batch: one
/// weight per expert, summing to 1. x: [..., D].
template<typename T>
Var<T> mb_router_weights(const Var<T> &x, const AffineParams<T> &router);

/// Moving-average step m_i <- delta * m_i + (1 - delta) * w_i.
template<typename T>
std::vector<T> mb_update(std::span<const T> bank, std::span<const T> weights, double delta);

/// Tape form of mb_update: the stored bank enters as a constant, the fresh
/// weights keep their gradient path.
template<typename T>
Var<T> mb_update(const Tensor<T> &bank, const Var<T> &weights, double delta);

template<typename T>
Var<T> exfusion_mb_forward(const Var<T> &x, const ExpertSet<T> &up, const ExpertSet<T> &down, const MemoryBank<T> &state,
		const ForwardContext &ctx);

/// Dispatches on the layer's fusion state.
template<typename T>
Var<T> exfusion_forward(const Var<T> &x, const ExFusionLayer<T> &layer, const ForwardContext &ctx);

enum class ExpertPosition { Up, Down };

/// Weights the layer would use for its set at `position` outside training:
/// 1/N, the learned vector, or the stored bank.
template<typename T>
std::vector<T> current_fusion_weights(const ExFusionLayer<T> &layer, ExpertPosition position);

/// The dense FFN equivalent of the layer in eval mode.
template<typename T>
std::pair<AffineTensors<T>, AffineTensors<T>> collapse_layer(const ExFusionLayer<T> &layer);

/// Registers an ExFusion FFN slot under `prefix`. Expert i draws its matrices
/// from the streams a dense FFN under `init_prefix` would use, at index i
/// (index 0 for every expert when `replicate` is set).
template<typename T>
ExFusionLayer<T> add_exfusion_layer(ParameterStore<T> &store, const std::string &prefix, const std::string &init_prefix,
		const ModelSpec &spec);

struct VarianceReport {
	std::size_t k = 0;
	std::size_t trials = 0;
	double sigma = 0;
	double bias = 0;
	double empirical_var = 0; ///< sample variance of the k-average across trials
	double predicted_var = 0; ///< sigma^2 / k
	double empirical_mean = 0;
	double mean_tolerance = 0; ///< 3 sigma / sqrt(k * trials)
};

/// Monte-Carlo check that averaging k i.i.d. errors b + N(0, sigma^2) keeps
/// the bias and divides the variance by k.
VarianceReport variance_reduction_demo(std::size_t k, double sigma, std::size_t trials, std::uint64_t seed, double bias = 0.5);

} // namespace exfusion
