#include "exfusion/optimizer.hpp"

#include "exfusion/model_spec.hpp"

#include <cmath>
#include <numbers>

namespace exfusion {

void AdamWConfig::validate() const {
	if (!(beta1 >= 0 && beta1 < 1))
		throw ConfigError("beta1", "must be in [0, 1)");
	if (!(beta2 >= 0 && beta2 < 1))
		throw ConfigError("beta2", "must be in [0, 1)");
	if (!(eps > 0))
		throw ConfigError("eps", "must be positive");
	if (!(weight_decay >= 0))
		throw ConfigError("weight_decay", "must be non-negative");
	if (!(clip_norm >= 0))
		throw ConfigError("clip_norm", "must be non-negative (0 disables clipping)");
}

template<typename T>
AdamW<T>::AdamW(AdamWConfig config) : config_(config) {
	config_.validate();
}

template<typename T>
StepReport AdamW<T>::step(ParameterStore<T> &params, double lr) {
	StepReport report;
	double sq = 0;
	for (const auto &p : params) {
		if (!p->trainable() || p->grad.empty())
			continue;
		if (p->grad.shape() != p->value.shape())
			throw DimensionError("gradient of " + p->name + " has shape " + to_string(p->grad.shape()) + ", parameter has " +
					to_string(p->value.shape()));
		for (T g : p->grad.data())
			sq += double(g) * double(g);
	}
	report.grad_norm = std::sqrt(sq);
	if (!std::isfinite(report.grad_norm)) {
		report.skipped_reason = "non-finite gradient norm";
		return report;
	}
	const double clip = config_.clip_norm > 0 && report.grad_norm > config_.clip_norm ? config_.clip_norm / report.grad_norm : 1.0;

	step_++;
	const double b1 = config_.beta1, b2 = config_.beta2;
	const double bc1 = 1 - std::pow(b1, double(step_));
	const double bc2 = 1 - std::pow(b2, double(step_));
	for (auto &p : params) {
		if (!p->trainable())
			continue;
		auto [it, fresh] = moments_.try_emplace(p->name);
		Moments &mo = it->second;
		if (fresh || mo.m.shape() != p->value.shape()) {
			mo.m = Tensor<T>(p->value.shape());
			mo.v = Tensor<T>(p->value.shape());
		}
		const double decay = p->kind == ParamKind::Weight ? 1 - lr * config_.weight_decay : 1.0;
		T *w = p->value.raw();
		T *m = mo.m.raw();
		T *v = mo.v.raw();
		if (p->grad.empty())
			p->grad = Tensor<T>(p->value.shape());
		const T *g = p->grad.raw();
		for (std::size_t i = 0; i < p->value.size(); i++) {
			const double gi = double(g[i]) * clip;
			const double mi = b1 * double(m[i]) + (1 - b1) * gi;
			const double vi = b2 * double(v[i]) + (1 - b2) * gi * gi;
			m[i] = T(mi);
			v[i] = T(vi);
			const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + config_.eps);
			w[i] = T(double(w[i]) * decay - update);
		}
	}
	report.applied = true;
	return report;
}

template class AdamW<float>;
template class AdamW<double>;

void Schedule::validate() const {
	if (warmup_steps > total_steps)
		throw ConfigError("warmup_steps", "must not exceed total steps");
	if (!(base_lr > 0))
		throw ConfigError("lr", "must be positive");
	if (!(min_lr >= 0 && min_lr <= base_lr))
		throw ConfigError("min_lr", "must be in [0, lr]");
}

double Schedule::lr_at(std::size_t step) const {
	if (step > total_steps)
		throw std::out_of_range("step " + std::to_string(step) + " beyond schedule of " + std::to_string(total_steps) + " steps");
	if (step < warmup_steps)
		return base_lr * double(step) / double(warmup_steps);
	const std::size_t span = total_steps - warmup_steps;
	if (span == 0)
		return base_lr;
	const double progress = double(step - warmup_steps) / double(span);
	return min_lr + 0.5 * (base_lr - min_lr) * (1 + std::cos(std::numbers::pi * progress));
}

} // namespace exfusion
