#include "exfusion/fusion.hpp"

#include "exfusion/moe.hpp"

#include <cmath>
#include <random>

namespace exfusion {

namespace {

template<typename T>
Tensor<T> uniform_weights(std::size_t n) {
	return Tensor<T>(Shape{n}, T(1) / T(n));
}

template<typename T>
ExpertSet<T> add_expert_set(ParameterStore<T> &store, const std::string &name, const std::string &init_key, std::size_t in,
		std::size_t out, const ModelSpec &spec) {
	const std::size_t n = spec.num_experts;
	Tensor<T> weight(Shape{n, in, out});
	for (std::size_t i = 0; i < n; i++) {
		const std::uint64_t index = spec.expert_init == ExpertInit::Replicate ? 0 : i;
		Tensor<T> slice = normal_init<T>({in, out}, spec.seed, init_key, index, kInitStd);
		std::copy(slice.data().begin(), slice.data().end(), weight.raw() + i * in * out);
	}
	ExpertSet<T> set;
	set.weight = &store.add(name + ".experts.weight", std::move(weight), ParamKind::Weight);
	set.bias = &store.add(name + ".experts.bias", Tensor<T>(Shape{n, out}), ParamKind::NoDecay);
	return set;
}

/// sum_i w_i S[i] over the leading axis of `stack`, accumulated in expert
/// order. Avoids materializing reshaped copies of the stack.
template<typename T>
Var<T> weighted_stack_sum(const Var<T> &stack, const Var<T> &weights) {
	const Tensor<T> &s = stack.value();
	const Tensor<T> &w = weights.value();
	const std::size_t n = w.size(), m = s.size() / n;
	Tensor<T> out(Shape(s.shape().begin() + 1, s.shape().end()));
	for (std::size_t i = 0; i < n; i++) {
		const T *si = s.raw() + i * m;
		for (std::size_t j = 0; j < m; j++)
			out[j] += w[i] * si[j];
	}
	const std::size_t ids = stack.id(), idw = weights.id();
	return stack.tape().record(std::move(out), {ids, idw}, [=](Tape<T> &tape, std::size_t self) {
		const Tensor<T> &g = tape.grad(self);
		const Tensor<T> &wv = tape.value(idw);
		if (tape.requires_grad(ids)) {
			Tensor<T> &gs = tape.grad_buffer(ids);
			for (std::size_t i = 0; i < n; i++) {
				T *gi = gs.raw() + i * m;
				for (std::size_t j = 0; j < m; j++)
					gi[j] += wv[i] * g[j];
			}
		}
		if (tape.requires_grad(idw)) {
			const Tensor<T> &sv = tape.value(ids);
			Tensor<T> &gw = tape.grad_buffer(idw);
			for (std::size_t i = 0; i < n; i++) {
				const T *si = sv.raw() + i * m;
				double acc = 0;
				for (std::size_t j = 0; j < m; j++)
					acc += double(si[j]) * double(g[j]);
				gw[i] += T(acc);
			}
		}
	}, "weighted_stack_sum");
}

} // namespace

template<typename T>
AffineVars<T> fuse(const Var<T> &stacked_weight, const Var<T> &stacked_bias, const Var<T> &weights) {
	const Shape &sw = stacked_weight.shape();
	const Shape &sb = stacked_bias.shape();
	if (weights.shape().size() != 1)
		throw DimensionError("fusion weights must be a vector, got " + to_string(weights.shape()));
	const std::size_t n = weights.shape()[0];
	if (sw.size() != 3 || sw[0] != n)
		throw DimensionError("expert weights " + to_string(sw) + " do not match " + std::to_string(n) + " fusion weights");
	if (sb.size() != 2 || sb[0] != n || sb[1] != sw[2])
		throw DimensionError("expert biases " + to_string(sb) + " do not match expert weights " + to_string(sw));
	return {weighted_stack_sum(stacked_weight, weights), weighted_stack_sum(stacked_bias, weights)};
}

template<typename T>
AffineTensors<T> fuse(const Tensor<T> &stacked_weight, const Tensor<T> &stacked_bias, std::span<const T> weights) {
	const Shape &sw = stacked_weight.shape();
	const Shape &sb = stacked_bias.shape();
	const std::size_t n = weights.size();
	if (sw.size() != 3 || sw[0] != n)
		throw DimensionError("expert weights " + to_string(sw) + " do not match " + std::to_string(n) + " fusion weights");
	if (sb.size() != 2 || sb[0] != n || sb[1] != sw[2])
		throw DimensionError("expert biases " + to_string(sb) + " do not match expert weights " + to_string(sw));
	for (T w : weights)
		if (!std::isfinite(w))
			throw NonFiniteError("non-finite fusion weight");
	const std::size_t in = sw[1], out = sw[2];
	AffineTensors<T> fused{Tensor<T>(Shape{in, out}), Tensor<T>(Shape{out})};
	for (std::size_t i = 0; i < n; i++) {
		const T *wi = stacked_weight.raw() + i * in * out;
		for (std::size_t j = 0; j < in * out; j++)
			fused.weight[j] += weights[i] * wi[j];
		const T *bi = stacked_bias.raw() + i * out;
		for (std::size_t j = 0; j < out; j++)
			fused.bias[j] += weights[i] * bi[j];
	}
	return fused;
}

template<typename T>
Var<T> exfusion_sw_forward(const Var<T> &x, const ExpertSet<T> &up, const ExpertSet<T> &down) {
	Var<T> w = x.tape().constant(uniform_weights<T>(up.size()));
	return ffn_forward(x, fuse(up, w), fuse(down, w));
}

template<typename T>
Var<T> exfusion_dw_forward(const Var<T> &x, const ExpertSet<T> &up, const ExpertSet<T> &down, const Var<T> &weights) {
	return ffn_forward(x, fuse(up, weights), fuse(down, weights));
}

template<typename T>
Var<T> mb_router_weights(const Var<T> &x, const AffineParams<T> &router) {
	const Shape &s = x.shape();
	if (s.empty() || numel(s) / s.back() == 0)
		throw DimensionError("router weights need a non-empty batch");
	const std::size_t D = s.back();
	return mean_axis(route(reshape(x, {numel(s) / D, D}), router), 0);
}

template<typename T>
std::vector<T> mb_update(std::span<const T> bank, std::span<const T> weights, double delta) {
	if (!(delta >= 0.0 && delta < 1.0))
		throw std::invalid_argument("momentum must satisfy 0 <= delta < 1, got " + std::to_string(delta));
	if (bank.size() != weights.size())
		throw DimensionError("bank has " + std::to_string(bank.size()) + " entries, weights have " + std::to_string(weights.size()));
	const T keep = static_cast<T>(delta);
	const T fresh = static_cast<T>(1.0 - delta);
	std::vector<T> out(bank.size());
	for (std::size_t i = 0; i < bank.size(); i++) {
		const T history = keep * bank[i];
		const T current = fresh * weights[i];
		out[i] = history + current;
	}
	return out;
}

template<typename T>
Var<T> mb_update(const Tensor<T> &bank, const Var<T> &weights, double delta) {
	if (!(delta >= 0.0 && delta < 1.0))
		throw std::invalid_argument("momentum must satisfy 0 <= delta < 1, got " + std::to_string(delta));
	if (bank.shape() != weights.shape())
		throw DimensionError("bank " + to_string(bank.shape()) + " does not match weights " + to_string(weights.shape()));
	const T keep = static_cast<T>(delta);
	Tensor<T> history(bank.shape());
	for (std::size_t i = 0; i < bank.size(); i++)
		history[i] = keep * bank[i];
	return add(weights.tape().constant(std::move(history)), scale(weights, static_cast<T>(1.0 - delta)));
}

template<typename T>
Var<T> exfusion_mb_forward(const Var<T> &x, const ExpertSet<T> &up, const ExpertSet<T> &down, const MemoryBank<T> &state,
		const ForwardContext &ctx) {
	Tape<T> &tape = x.tape();
	if (!ctx.training) {
		Var<T> m_up = tape.constant(state.up_bank->value);
		Var<T> m_down = state.shared ? m_up : tape.constant(state.down_bank->value);
		return ffn_forward(x, fuse(up, m_up), fuse(down, m_down));
	}

	auto step = [&](const AffineParams<T> &router, Parameter<T> &bank) -> Var<T> {
		Var<T> stored = tape.constant(bank.value);
		Var<T> updated = mb_update(bank.value, mb_router_weights(x, router), state.momentum);
		if (ctx.commit_state)
			bank.value = updated.value();
		return state.order == BankOrder::UpdateThenFuse ? updated : stored;
	};
	Var<T> m_up = step(state.up_router, *state.up_bank);
	Var<T> m_down = state.shared ? m_up : step(state.down_router, *state.down_bank);
	return ffn_forward(x, fuse(up, m_up), fuse(down, m_down));
}

template<typename T>
Var<T> exfusion_forward(const Var<T> &x, const ExFusionLayer<T> &layer, const ForwardContext &ctx) {
	return std::visit(
			[&](const auto &state) -> Var<T> {
				using S = std::decay_t<decltype(state)>;
				if constexpr (std::is_same_v<S, StaticWeights>)
					return exfusion_sw_forward(x, layer.up, layer.down);
				else if constexpr (std::is_same_v<S, DynamicWeights<T>>)
					return exfusion_dw_forward(x, layer.up, layer.down, x.tape().param(*state.weights));
				else
					return exfusion_mb_forward(x, layer.up, layer.down, state, ctx);
			},
			layer.state);
}

template<typename T>
std::vector<T> current_fusion_weights(const ExFusionLayer<T> &layer, ExpertPosition position) {
	return std::visit(
			[&](const auto &state) -> std::vector<T> {
				using S = std::decay_t<decltype(state)>;
				if constexpr (std::is_same_v<S, StaticWeights>) {
					const Tensor<T> w = uniform_weights<T>(layer.up.size());
					return {w.data().begin(), w.data().end()};
				} else if constexpr (std::is_same_v<S, DynamicWeights<T>>) {
					return {state.weights->value.data().begin(), state.weights->value.data().end()};
				} else {
					const Parameter<T> *bank = position == ExpertPosition::Up ? state.up_bank : state.down_bank;
					return {bank->value.data().begin(), bank->value.data().end()};
				}
			},
			layer.state);
}

template<typename T>
std::pair<AffineTensors<T>, AffineTensors<T>> collapse_layer(const ExFusionLayer<T> &layer) {
	const std::vector<T> w_up = current_fusion_weights(layer, ExpertPosition::Up);
	const std::vector<T> w_down = current_fusion_weights(layer, ExpertPosition::Down);
	return {fuse(layer.up.weight->value, layer.up.bias->value, std::span<const T>(w_up)),
			fuse(layer.down.weight->value, layer.down.bias->value, std::span<const T>(w_down))};
}

template<typename T>
ExFusionLayer<T> add_exfusion_layer(ParameterStore<T> &store, const std::string &prefix, const std::string &init_prefix,
		const ModelSpec &spec) {
	if (!is_exfusion(spec.ffn_variant))
		throw std::invalid_argument("add_exfusion_layer needs an ExFusion variant, got " + std::string(to_string(spec.ffn_variant)));
	const std::size_t D = spec.dim, H = spec.hidden(), n = spec.num_experts;
	ExFusionLayer<T> layer;
	layer.up = add_expert_set(store, prefix + ".up", init_prefix + ".up.weight", D, H, spec);
	layer.down = add_expert_set(store, prefix + ".down", init_prefix + ".down.weight", H, D, spec);
	switch (spec.ffn_variant) {
		case FfnVariant::ExFusionSW:
			layer.state = StaticWeights{};
			break;
		case FfnVariant::ExFusionDW: {
			Parameter<T> &w = store.add(prefix + ".fusion_weights", uniform_weights<T>(n), ParamKind::NoDecay);
			w.frozen = spec.freeze_fusion_weights;
			layer.state = DynamicWeights<T>{&w};
			break;
		}
		default: {
			MemoryBank<T> mb;
			mb.momentum = spec.momentum;
			mb.order = spec.bank_order;
			mb.shared = spec.shared_router;
			if (spec.shared_router) {
				mb.up_router = add_affine(store, prefix + ".router", D, n, spec.seed);
				mb.down_router = mb.up_router;
				mb.up_bank = &store.add(prefix + ".bank", Tensor<T>(Shape{n}), ParamKind::Buffer);
				mb.down_bank = mb.up_bank;
			} else {
				mb.up_router = add_affine(store, prefix + ".up.router", D, n, spec.seed);
				mb.down_router = add_affine(store, prefix + ".down.router", D, n, spec.seed);
				mb.up_bank = &store.add(prefix + ".up.bank", Tensor<T>(Shape{n}), ParamKind::Buffer);
				mb.down_bank = &store.add(prefix + ".down.bank", Tensor<T>(Shape{n}), ParamKind::Buffer);
			}
			layer.state = mb;
			break;
		}
	}
	return layer;
}

VarianceReport variance_reduction_demo(std::size_t k, double sigma, std::size_t trials, std::uint64_t seed, double bias) {
	if (k < 1)
		throw std::invalid_argument("k must be >= 1");
	if (trials < 1)
		throw std::invalid_argument("trials must be >= 1");
	std::mt19937_64 rng(seed);
	std::normal_distribution<double> noise(0.0, sigma);
	VarianceReport r;
	r.k = k;
	r.trials = trials;
	r.sigma = sigma;
	r.bias = bias;
	r.predicted_var = sigma * sigma / double(k);
	r.mean_tolerance = 3.0 * sigma / std::sqrt(double(k) * double(trials));
	// Welford over the per-trial averages.
	double mean = 0, m2 = 0;
	for (std::size_t t = 0; t < trials; t++) {
		double acc = 0;
		for (std::size_t i = 0; i < k; i++)
			acc += bias + noise(rng);
		const double y = acc / double(k);
		const double d = y - mean;
		mean += d / double(t + 1);
		m2 += d * (y - mean);
	}
	r.empirical_mean = mean;
	r.empirical_var = trials > 1 ? m2 / double(trials - 1) : 0.0;
	return r;
}

#define EXFUSION_INSTANTIATE_FUSION(T) \
	template AffineVars<T> fuse(const Var<T> &, const Var<T> &, const Var<T> &); \
	template AffineTensors<T> fuse(const Tensor<T> &, const Tensor<T> &, std::span<const T>); \
	template Var<T> exfusion_sw_forward(const Var<T> &, const ExpertSet<T> &, const ExpertSet<T> &); \
	template Var<T> exfusion_dw_forward(const Var<T> &, const ExpertSet<T> &, const ExpertSet<T> &, const Var<T> &); \
	template Var<T> mb_router_weights(const Var<T> &, const AffineParams<T> &); \
	template std::vector<T> mb_update(std::span<const T>, std::span<const T>, double); \
	template Var<T> mb_update(const Tensor<T> &, const Var<T> &, double); \
	template Var<T> exfusion_mb_forward(const Var<T> &, const ExpertSet<T> &, const ExpertSet<T> &, const MemoryBank<T> &, \
			const ForwardContext &); \
	template Var<T> exfusion_forward(const Var<T> &, const ExFusionLayer<T> &, const ForwardContext &); \
	template std::vector<T> current_fusion_weights(const ExFusionLayer<T> &, ExpertPosition); \
	template std::pair<AffineTensors<T>, AffineTensors<T>> collapse_layer(const ExFusionLayer<T> &); \
	template ExFusionLayer<T> add_exfusion_layer<T>(ParameterStore<T> &, const std::string &, const std::string &, const ModelSpec &);

EXFUSION_INSTANTIATE_FUSION(float)
EXFUSION_INSTANTIATE_FUSION(double)

} // namespace exfusion
