#include "exfusion/commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <malloc.h>

using namespace exfusion;

int main(int argc, char **argv) {
	// keep large tensors on the heap; fresh mmaps page-fault on every step
	mallopt(M_MMAP_THRESHOLD, 1 << 30);
	mallopt(M_TRIM_THRESHOLD, 1 << 30);
	CLI::App app{"Train, export, verify and benchmark fused-expert Transformers"};
	app.require_subcommand(1);

	CommandOptions opts;
	std::uint64_t seed = 0;
	bool deterministic = false, nondeterministic = false;
	std::string dtype, out;
	auto *seed_opt = app.add_option("--seed", seed, "Override the configured seed");
	app.add_flag("--deterministic", deterministic, "Deterministic mode (default): no prefetch, step_ms written as 0");
	app.add_flag("--no-deterministic", nondeterministic, "Prefetch batches and record step times");
	auto *dtype_opt = app.add_option("--dtype", dtype, "Precision")->check(CLI::IsMember({"f32", "f64"}));
	auto *out_opt = app.add_option("--out", out, "Output directory (train) or file (export)");
	app.add_flag("--force", opts.force, "Overwrite existing outputs");

	std::string config_path, ckpt_path, resume_path, suite = "all";

	auto *train = app.add_subcommand("train", "Train a model from a config file");
	train->add_option("--config", config_path, "INI config")->required()->check(CLI::ExistingFile);
	train->add_option("--resume", resume_path, "Continue from a trainer checkpoint")->check(CLI::ExistingFile);

	auto *exp = app.add_subcommand("export", "Collapse a checkpoint into a dense model");
	exp->add_option("checkpoint", ckpt_path, "Source checkpoint")->required()->check(CLI::ExistingFile);

	auto *verify = app.add_subcommand("verify", "Run property suites; prints a JSON summary");
	verify->add_option("suite", suite, "Suite to run")->check(CLI::IsMember({"fusion", "gradients", "ema", "variance", "export", "all"}));

	auto *bench = app.add_subcommand("bench", "Time train steps of every variant");
	bench->add_option("--config", config_path, "INI config")->required()->check(CLI::ExistingFile);

	auto *eval = app.add_subcommand("eval", "Score a checkpoint on its task or another config's task");
	eval->add_option("checkpoint", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
	eval->add_option("--config", config_path, "Config whose task to evaluate on")->check(CLI::ExistingFile);

	try {
		app.parse(argc, argv);
	} catch (const CLI::ParseError &e) {
		const int code = app.exit(e);
		return code == 0 ? kExitOk : kExitValidation;
	}

	if (*seed_opt)
		opts.seed = seed;
	if (deterministic && nondeterministic) {
		std::cerr << "error: --deterministic and --no-deterministic are exclusive\n";
		return kExitValidation;
	}
	if (deterministic || nondeterministic)
		opts.deterministic = deterministic;
	if (*dtype_opt)
		opts.dtype = parse_precision(dtype);
	if (*out_opt)
		opts.out = out;
	if (!resume_path.empty())
		opts.resume = resume_path;
	if (!config_path.empty())
		opts.config = config_path;

	if (*train)
		return cmd_train(config_path, opts, std::cout, std::cerr);
	if (*exp) {
		if (!opts.out) {
			std::cerr << "error: export needs --out <file>\n";
			return kExitValidation;
		}
		return cmd_export(ckpt_path, *opts.out, opts, std::cout, std::cerr);
	}
	if (*verify)
		return cmd_verify(suite, opts, std::cout, std::cerr);
	if (*bench)
		return cmd_bench(config_path, opts, std::cout, std::cerr);
	return cmd_eval(ckpt_path, opts, std::cout, std::cerr);
}
