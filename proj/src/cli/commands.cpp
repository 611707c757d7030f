#include "exfusion/commands.hpp"
#include "exfusion/rng.hpp"
#include "exfusion/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ostream>
#include <random>

namespace exfusion {

namespace fs = std::filesystem;

namespace {

template<typename Fn>
int guarded(std::ostream &err, Fn &&fn) {
	try {
		return fn();
	} catch (const ConfigError &e) {
		err << "error: " << e.what() << '\n';
		return kExitValidation;
	} catch (const std::invalid_argument &e) {
		err << "error: " << e.what() << '\n';
		return kExitValidation;
	} catch (const std::exception &e) {
		err << "error: " << e.what() << '\n';
		return kExitRuntime;
	}
}

std::string fixed(double v, int digits) {
	char buf[64];
	std::snprintf(buf, sizeof buf, "%.*f", digits, v);
	return buf;
}

std::string sci(double v) {
	char buf[64];
	std::snprintf(buf, sizeof buf, "%.3e", v);
	return buf;
}

/// Fixed token batch for export deviation checks.
TokenBatch probe_batch(const ModelSpec &spec) {
	std::mt19937_64 rng = derive_rng(spec.seed, "export.probe");
	std::uniform_int_distribution<std::int32_t> tok(0, std::int32_t(spec.vocab) - 1);
	TokenBatch b{8, std::min<std::size_t>(spec.max_seq_len, 16), {}, {}};
	for (std::size_t i = 0; i < b.batch * b.seq; i++)
		b.tokens.push_back(tok(rng));
	return b;
}

template<typename T>
ExportReport export_in(const Checkpoint &ck, const fs::path &out_path) {
	const RunConfig config = checkpoint_config(ck);
	Transformer<T> model = load_model<T>(ck);
	ExportReport r;
	r.params_before = model.parameter_count();
	r.dense_baseline = dense_parameter_count(model.spec());
	Transformer<T> dense = collapse_to_dense(model);
	r.params_after = dense.parameter_count();
	const TokenBatch probe = probe_batch(model.spec());
	const Tensor<T> a = model.logits(probe), b = dense.logits(probe);
	for (std::size_t i = 0; i < a.size(); i++)
		r.max_logit_deviation = std::max(r.max_logit_deviation, std::abs(double(a[i]) - double(b[i])));
	make_model_checkpoint(dense, config, std::uint64_t(ck.meta_int("step"))).save(out_path);
	return r;
}

template<typename T>
std::vector<BenchRow> bench_in(const RunConfig &config) {
	std::vector<FfnVariant> variants{FfnVariant::Dense};
	for (FfnVariant v : config.bench.variants)
		if (v != FfnVariant::Dense)
			variants.push_back(v);

	std::vector<std::unique_ptr<Trainer<T>>> trainers;
	for (FfnVariant v : variants) {
		RunConfig c = config;
		c.model.ffn_variant = v;
		if (c.model.replaced_layers.empty())
			c.model.replace_all_layers();
		trainers.push_back(std::make_unique<Trainer<T>>(c));
	}
	const std::size_t total = config.bench.warmup + config.bench.steps;
	std::vector<TokenBatch> batches;
	for (std::size_t s = 1; s <= total; s++)
		batches.push_back(trainers[0]->task().train_batch(s));

	// round-robin over variants so drift in machine load hits all of them alike
	std::vector<std::vector<double>> times(variants.size());
	for (std::size_t s = 0; s < total; s++)
		for (std::size_t i = 0; i < variants.size(); i++) {
			const auto t0 = std::chrono::steady_clock::now();
			trainers[i]->train_step(batches[s], std::min<std::uint64_t>(s + 1, config.train.steps));
			const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
			if (s >= config.bench.warmup)
				times[i].push_back(ms);
		}

	std::vector<BenchRow> rows;
	for (std::size_t i = 0; i < variants.size(); i++) {
		auto &t = times[i];
		std::sort(t.begin(), t.end());
		const std::size_t n = t.size();
		const double median = n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
		rows.push_back({variants[i], median, 0});
	}
	for (auto &r : rows)
		r.overhead = r.median_ms / rows[0].median_ms;
	return rows;
}

template<typename T>
EvalResult eval_in(const Checkpoint &ck, const RunConfig &task_config) {
	Transformer<T> model = load_model<T>(ck);
	const auto task = make_task(task_config.task, task_config.seed);
	return evaluate(model, task->val_batches());
}

void check_task_fits(const ModelSpec &m, const TaskSpec &t) {
	if (t.head() != m.head)
		throw ConfigError("task.kind", "checkpoint model has a " + std::string(to_string(m.head)) + " head, task needs " +
				std::string(to_string(t.head())));
	if (t.model_vocab() != m.vocab)
		throw ConfigError("task.vocab", "task vocabulary " + std::to_string(t.model_vocab()) + " differs from the model's " + std::to_string(m.vocab));
	if (t.model_classes() != m.classes)
		throw ConfigError("task.classes", "task has " + std::to_string(t.model_classes()) + " classes, the model " + std::to_string(m.classes));
	if (t.seq_len > m.max_seq_len)
		throw ConfigError("task.seq_len", "task sequences of " + std::to_string(t.seq_len) + " exceed the model's maximum " +
				std::to_string(m.max_seq_len));
}

} // namespace

RunConfig effective_config(const fs::path &path, const CommandOptions &opts) {
	RunConfig c = load_config(path);
	if (opts.seed)
		c.seed = *opts.seed;
	if (opts.deterministic)
		c.deterministic = *opts.deterministic;
	if (opts.dtype)
		c.dtype = *opts.dtype;
	if (opts.out)
		c.out_dir = *opts.out;
	c.resolve();
	return c;
}

int cmd_train(const fs::path &config_path, const CommandOptions &opts, std::ostream &out, std::ostream &err) {
	return guarded(err, [&] {
		const RunConfig c = effective_config(config_path, opts);
		const fs::path dir = c.out_dir;
		if (fs::exists(dir) && !fs::is_empty(dir) && !opts.resume) {
			if (!opts.force)
				throw ConfigError("out", "output directory " + dir.string() + " is not empty; pass --force to overwrite");
			for (const auto &e : fs::directory_iterator(dir)) {
				const std::string name = e.path().filename().string();
				if (name.starts_with("ckpt_") && name.ends_with(".bin"))
					fs::remove(e.path());
			}
		}
		const RunResult r = train_loop(c, opts.resume);
		out << "trained " << to_string(c.model.ffn_variant) << " to step " << r.final_step << "; val "
			<< (c.model.head == HeadKind::LanguageModel ? "perplexity " : "accuracy ") << fixed(r.final_eval.metric(c.model.head), 4)
			<< ", loss " << fixed(r.final_eval.loss, 4);
		if (r.skipped_steps)
			out << "; " << r.skipped_steps << " steps skipped on non-finite gradients";
		out << '\n' << "artifacts in " << dir.string() << '\n';
		return int(kExitOk);
	});
}

ExportReport export_checkpoint(const fs::path &ckpt_path, const fs::path &out_path) {
	const Checkpoint ck = Checkpoint::load(ckpt_path);
	const RunConfig config = checkpoint_config(ck);
	if (!is_exfusion(config.model.ffn_variant) || config.model.replaced_layers.empty()) {
		if (config.model.ffn_variant == FfnVariant::TopKMoE && !config.model.replaced_layers.empty())
			throw ConfigError("ffn_variant", "top-k MoE checkpoints cannot be collapsed to a dense model");
		ExportReport r;
		r.already_dense = true;
		return r;
	}
	return checkpoint_precision(ck) == Precision::F64 ? export_in<double>(ck, out_path) : export_in<float>(ck, out_path);
}

int cmd_export(const fs::path &ckpt_path, const fs::path &out_path, const CommandOptions &opts, std::ostream &out, std::ostream &err) {
	return guarded(err, [&] {
		if (fs::exists(out_path) && !opts.force)
			throw ConfigError("out", out_path.string() + " exists; pass --force to overwrite");
		const ExportReport r = export_checkpoint(ckpt_path, out_path);
		if (r.already_dense) {
			err << "warning: " << ckpt_path.string() << " already holds a dense model; nothing exported\n";
			return int(kExitOk);
		}
		const double tol = checkpoint_precision(Checkpoint::load(out_path)) == Precision::F64 ? 1e-10 : 1e-5;
		out << "params before " << r.params_before << ", after " << r.params_after << " (dense baseline " << r.dense_baseline << ")\n"
			<< "max logit deviation " << sci(r.max_logit_deviation) << '\n'
			<< "wrote " << out_path.string() << '\n';
		if (r.params_after != r.dense_baseline || !(r.max_logit_deviation < tol)) {
			err << "error: exported model does not reproduce the source (tolerance " << sci(tol) << ")\n";
			return int(kExitVerification);
		}
		return int(kExitOk);
	});
}

int cmd_verify(const std::string &suite, const CommandOptions &opts, std::ostream &out, std::ostream &err) {
	return guarded(err, [&] {
		const std::vector<std::string> names = suite == "all" ? kVerifySuites : std::vector<std::string>{suite};
		std::vector<SuiteResult> results;
		for (const auto &n : names)
			results.push_back(run_verify_suite(n, opts.seed.value_or(0), opts.dtype));
		out << verify_summary_json(results) << '\n';
		const bool ok = std::all_of(results.begin(), results.end(), [](const SuiteResult &r) { return r.passed(); });
		return int(ok ? kExitOk : kExitVerification);
	});
}

std::vector<BenchRow> run_bench(const RunConfig &config) {
	return config.dtype == Precision::F64 ? bench_in<double>(config) : bench_in<float>(config);
}

std::string format_bench_table(const RunConfig &config, const std::vector<BenchRow> &rows) {
	std::string s = "variant       median_ms  overhead\n";
	for (const auto &r : rows) {
		char buf[128];
		std::snprintf(buf, sizeof buf, "%-12s  %9.3f  x%.2f\n", std::string(to_string(r.variant)).c_str(), r.median_ms, r.overhead);
		s += buf;
	}
	s += "(" + std::to_string(config.bench.steps) + " timed steps after " + std::to_string(config.bench.warmup) + " warmup, N=" +
		 std::to_string(config.model.num_experts) + ", top_k=" + std::to_string(config.model.top_k) + ")\n";
	return s;
}

int cmd_bench(const fs::path &config_path, const CommandOptions &opts, std::ostream &out, std::ostream &err) {
	return guarded(err, [&] {
		const RunConfig c = effective_config(config_path, opts);
		out << format_bench_table(c, run_bench(c));
		return int(kExitOk);
	});
}

int cmd_eval(const fs::path &ckpt_path, const CommandOptions &opts, std::ostream &out, std::ostream &err) {
	return guarded(err, [&] {
		const Checkpoint ck = Checkpoint::load(ckpt_path);
		const RunConfig stored = checkpoint_config(ck);
		RunConfig task_config = opts.config ? load_config(*opts.config) : stored;
		if (opts.seed)
			task_config.seed = *opts.seed;
		check_task_fits(stored.model, task_config.task);
		const Precision p = opts.dtype.value_or(checkpoint_precision(ck));
		const EvalResult r = p == Precision::F64 ? eval_in<double>(ck, task_config) : eval_in<float>(ck, task_config);
		if (stored.model.head == HeadKind::LanguageModel)
			out << "perplexity " << fixed(r.perplexity, 6) << '\n';
		else
			out << "accuracy " << fixed(r.accuracy, 6) << '\n';
		out << "loss " << fixed(r.loss, 6) << '\n';
		return int(kExitOk);
	});
}

} // namespace exfusion
