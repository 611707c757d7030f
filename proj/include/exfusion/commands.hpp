#pragma once

#include "exfusion/config.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace exfusion {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2, kExitVerification = 3 };

/// Flags shared by every command; unset fields keep the config's value.
struct CommandOptions {
	std::optional<std::uint64_t> seed = std::nullopt;
	std::optional<bool> deterministic = std::nullopt;
	std::optional<Precision> dtype = std::nullopt;
	std::optional<std::string> out = std::nullopt;
	bool force = false;
	std::optional<std::filesystem::path> resume = std::nullopt;
	std::optional<std::filesystem::path> config = std::nullopt; ///< eval: task to score on
};

/// Loads the config and applies command-line overrides, then re-resolves.
RunConfig effective_config(const std::filesystem::path &path, const CommandOptions &opts);

int cmd_train(const std::filesystem::path &config_path, const CommandOptions &opts, std::ostream &out, std::ostream &err);
int cmd_export(const std::filesystem::path &ckpt_path, const std::filesystem::path &out_path, const CommandOptions &opts,
		std::ostream &out, std::ostream &err);
int cmd_verify(const std::string &suite, const CommandOptions &opts, std::ostream &out, std::ostream &err);
int cmd_bench(const std::filesystem::path &config_path, const CommandOptions &opts, std::ostream &out, std::ostream &err);
int cmd_eval(const std::filesystem::path &ckpt_path, const CommandOptions &opts, std::ostream &out, std::ostream &err);

// Library forms used by the commands and the acceptance suite.

struct CheckResult {
	std::string name;
	double value = 0;
	double threshold = 0;
	bool passed = false;
};

struct SuiteResult {
	std::string name;
	std::vector<CheckResult> checks;
	bool passed() const;
};

inline const std::vector<std::string> kVerifySuites{"fusion", "gradients", "ema", "variance", "export"};

/// Runs one named suite ("all" is not accepted here). `dtype` restricts the
/// precisions checked; both when unset.
SuiteResult run_verify_suite(const std::string &suite, std::uint64_t seed, std::optional<Precision> dtype);

/// {"passed": bool, "suites": [{"name", "passed", "checks": [...]}]}
std::string verify_summary_json(const std::vector<SuiteResult> &suites);

struct BenchRow {
	FfnVariant variant = FfnVariant::Dense;
	double median_ms = 0;
	double overhead = 0; ///< median_ms / dense median_ms
};

/// Median train-step time per variant at the config's model spec. Dense is
/// always timed first; top-k uses the config's top_k.
std::vector<BenchRow> run_bench(const RunConfig &config);
std::string format_bench_table(const RunConfig &config, const std::vector<BenchRow> &rows);

struct ExportReport {
	std::size_t params_before = 0;
	std::size_t params_after = 0;
	std::size_t dense_baseline = 0;
	double max_logit_deviation = 0;
	bool already_dense = false;
};

/// Collapses the checkpoint at `ckpt_path` into a dense checkpoint at
/// `out_path` and measures logit deviation on a fixed probe batch.
ExportReport export_checkpoint(const std::filesystem::path &ckpt_path, const std::filesystem::path &out_path);

} // namespace exfusion
