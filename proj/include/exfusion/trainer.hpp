#pragma once

#include "exfusion/checkpoint.hpp"
#include "exfusion/config.hpp"
#include "exfusion/optimizer.hpp"
#include "exfusion/tasks.hpp"
#include "exfusion/transformer.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace exfusion {

inline constexpr const char *kMetricsHeader = "step,epoch,lr,train_loss,val_metric,step_ms";

/// Every tensor of the model (parameters and banks) under its own name.
template<typename T>
void store_model(Checkpoint &ck, const Transformer<T> &model);
/// Loads every model tensor; missing names or shape mismatches throw CheckpointError.
template<typename T>
void restore_model(const Checkpoint &ck, Transformer<T> &model);

/// Config embedded in a checkpoint by the trainer or exporter.
RunConfig checkpoint_config(const Checkpoint &ck);
Precision checkpoint_precision(const Checkpoint &ck);

/// Model checkpoint with the metadata every command relies on.
template<typename T>
Checkpoint make_model_checkpoint(const Transformer<T> &model, const RunConfig &config, std::uint64_t step);

/// Rebuilds the model stored in `ck` in precision T.
template<typename T>
Transformer<T> load_model(const Checkpoint &ck);

std::string checkpoint_filename(std::uint64_t step);

struct RunResult {
	std::uint64_t final_step = 0;
	double last_train_loss = 0;
	EvalResult final_eval;
	double mean_step_ms = 0;
	std::size_t skipped_steps = 0;
	std::vector<std::filesystem::path> checkpoints;
	std::filesystem::path metrics;
};

template<typename T>
class Trainer {
public:
	explicit Trainer(RunConfig config);

	/// Continues from a trainer checkpoint: parameters, banks, optimizer moments and step.
	void resume(const Checkpoint &ck);

	/// One optimization step on `batch` at schedule position `step`. Returns the batch loss.
	double train_step(const TokenBatch &batch, std::uint64_t step);

	/// Trains to config.train.steps (or stop_after), writing metrics and
	/// checkpoints into config.out_dir.
	RunResult run();

	Checkpoint checkpoint() const;

	const RunConfig &config() const noexcept { return config_; }
	Transformer<T> &model() noexcept { return model_; }
	AdamW<T> &optimizer() noexcept { return optimizer_; }
	const Task &task() const noexcept { return *task_; }
	std::uint64_t step() const noexcept { return step_; }
	const StepReport &last_report() const noexcept { return last_report_; }

private:
	RunConfig config_;
	Transformer<T> model_;
	AdamW<T> optimizer_;
	std::unique_ptr<Task> task_;
	std::uint64_t step_ = 0;
	double loss_sum_ = 0; ///< train losses since the last metrics row
	std::uint64_t loss_count_ = 0;
	StepReport last_report_;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

/// Creates the output directory, then runs (or resumes) in the configured precision.
RunResult train_loop(const RunConfig &config, const std::optional<std::filesystem::path> &resume_from = std::nullopt);

} // namespace exfusion
