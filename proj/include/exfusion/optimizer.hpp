#pragma once

#include "exfusion/parameter_store.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace exfusion {

struct AdamWConfig {
	double beta1 = 0.9;
	double beta2 = 0.999;
	double eps = 1e-8;
	double weight_decay = 0.05;
	/// Global gradient-norm bound; 0 disables clipping.
	double clip_norm = 1.0;

	void validate() const;
};

struct StepReport {
	bool applied = false;
	double grad_norm = 0; ///< before clipping
	std::string skipped_reason;
};

/// AdamW with decoupled weight decay and bias correction. Decay applies to
/// ParamKind::Weight only; buffers and frozen parameters are never touched.
template<typename T>
class AdamW {
public:
	struct Moments {
		Tensor<T> m;
		Tensor<T> v;
	};

	explicit AdamW(AdamWConfig config = {});

	/// One update at learning rate `lr`. Missing gradients count as zero. A
	/// non-finite gradient norm skips the update and leaves all state alone.
	StepReport step(ParameterStore<T> &params, double lr);

	const AdamWConfig &config() const noexcept { return config_; }
	std::uint64_t step_count() const noexcept { return step_; }
	void set_step_count(std::uint64_t s) noexcept { step_ = s; }
	std::map<std::string, Moments> &moments() noexcept { return moments_; }
	const std::map<std::string, Moments> &moments() const noexcept { return moments_; }

private:
	AdamWConfig config_;
	std::uint64_t step_ = 0;
	std::map<std::string, Moments> moments_;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

/// Linear warmup from 0 to base_lr, then cosine decay to min_lr at total_steps.
struct Schedule {
	std::size_t warmup_steps = 0;
	std::size_t total_steps = 0;
	double base_lr = 1e-3;
	double min_lr = 0;

	void validate() const;
	/// Throws std::out_of_range outside [0, total_steps].
	double lr_at(std::size_t step) const;
};

} // namespace exfusion
