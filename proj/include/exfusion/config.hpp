#pragma once

#include "exfusion/model_spec.hpp"
#include "exfusion/optimizer.hpp"
#include "exfusion/tasks.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace exfusion {

enum class Precision { F32, F64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view s);

struct TrainOptions {
	std::size_t steps = 5000;
	std::size_t warmup_steps = 500;
	double lr = 1e-3;
	double min_lr = 1e-5;
	AdamWConfig adam;
	std::size_t log_interval = 100;
	std::size_t checkpoint_interval = 1000; ///< 0: initial and final checkpoints only
	/// Halt after this step as if interrupted, leaving a checkpoint; 0 runs to `steps`.
	std::size_t stop_after = 0;

	void validate() const;
	Schedule schedule() const { return {warmup_steps, steps, lr, min_lr}; }
};

struct BenchOptions {
	std::size_t steps = 20;
	std::size_t warmup = 3;
	std::vector<FfnVariant> variants{FfnVariant::Dense, FfnVariant::TopKMoE, FfnVariant::ExFusionSW, FfnVariant::ExFusionDW,
			FfnVariant::ExFusionMB};

	void validate() const;
};

/// Everything a run needs. The model's vocab, classes, head and sequence
/// length are derived from the task by resolve().
struct RunConfig {
	ModelSpec model;
	TaskSpec task;
	TrainOptions train;
	BenchOptions bench;
	std::uint64_t seed = 0;
	bool deterministic = true;
	Precision dtype = Precision::F32;
	std::string out_dir = "runs/default";

	/// Copies task-derived fields into the model spec, then validates everything.
	void resolve();
};

/// INI text with sections [model], [task], [train], [bench]. Unknown sections
/// or keys are rejected with a ConfigError naming them. The result is resolved.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path &path);

/// Round-trips through parse_config.
std::string to_ini(const RunConfig &config);

} // namespace exfusion
