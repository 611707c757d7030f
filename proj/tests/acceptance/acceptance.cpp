// End-to-end acceptance checks, one output line per criterion. Criterion 8 is
// reported but never fails the run.

#include "exfusion/commands.hpp"
#include "exfusion/fusion.hpp"
#include "exfusion/ops.hpp"
#include "exfusion/trainer.hpp"

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <malloc.h>
#include <set>
#include <sstream>
#include <unistd.h>

using namespace exfusion;
using namespace exfusion::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
	bool passed = false;
	std::string detail;
};

struct Scratch {
	fs::path root = fs::temp_directory_path() / ("exfusion_acceptance_" + std::to_string(::getpid()));
	Scratch() {
		fs::remove_all(root);
		fs::create_directories(root);
	}
	~Scratch() {
		std::error_code ec;
		fs::remove_all(root, ec);
	}
	fs::path operator/(const std::string &s) const { return root / s; }
};

std::string slurp(const fs::path &p) {
	std::ifstream in(p, std::ios::binary);
	std::ostringstream ss;
	ss << in.rdbuf();
	return ss.str();
}

std::string fmt(const char *f, auto... args) {
	char buf[512];
	std::snprintf(buf, sizeof buf, f, args...);
	return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
	return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunConfig cluster_run(FfnVariant v, const fs::path &out, std::size_t steps, std::uint64_t seed = 3) {
	RunConfig c;
	c.model.depth = 2;
	c.model.dim = 32;
	c.model.heads = 2;
	c.model.expansion = 2;
	c.model.ffn_variant = v;
	c.model.num_experts = 4;
	c.model.top_k = 1;
	c.model.replace_all_layers();
	c.task.seq_len = 8;
	c.task.batch_size = 16;
	c.task.train_size = 1024;
	c.task.val_size = 128;
	c.train.steps = steps;
	c.train.warmup_steps = steps / 10;
	c.train.lr = 3e-3;
	c.train.min_lr = 1e-4;
	c.train.log_interval = 10;
	c.train.checkpoint_interval = 50;
	c.seed = seed;
	c.out_dir = out.string();
	c.resolve();
	return c;
}

// 1: param-space fusion against the weighted sum of per-expert outputs.
template<typename T>
double fusion_identity(std::size_t triples, std::uint64_t seed) {
	std::mt19937_64 rng(seed);
	std::uniform_int_distribution<std::size_t> dim(1, 16), count(1, 8), rows(1, 5);
	std::uniform_real_distribution<double> u(-1, 1);
	double worst = 0;
	for (std::size_t t = 0; t < triples; t++) {
		const std::size_t n = count(rng), in = dim(rng), out = dim(rng), r = rows(rng);
		ParameterStore<T> store;
		ExpertSet<T> set{&store.add("w", as<T>(random_tensor({n, in, out}, rng)), ParamKind::Weight),
				&store.add("b", as<T>(random_tensor({n, out}, rng)), ParamKind::NoDecay)};
		Tensor<T> w({n});
		double total = 0;
		for (std::size_t i = 0; i < n; i++)
			total += double(w[i] = T(t % 2 ? u(rng) : std::abs(u(rng))));
		if (t % 2 == 0)
			for (std::size_t i = 0; i < n; i++)
				w[i] = T(double(w[i]) / total);
		const Tensor<T> x = as<T>(random_tensor({r, in}, rng));

		Tape<T> tape;
		const AffineVars<T> fused = fuse(set, tape.constant(w));
		const Tensor<T> y = linear(tape.constant(x), fused.weight, fused.bias).value();
		for (std::size_t i = 0; i < r; i++)
			for (std::size_t o = 0; o < out; o++) {
				T ref = 0;
				for (std::size_t e = 0; e < n; e++) {
					T ye = set.bias->value[e * out + o];
					for (std::size_t k = 0; k < in; k++)
						ye += x[i * in + k] * set.weight->value[(e * in + k) * out + o];
					ref += w[e] * ye;
				}
				worst = std::max(worst, std::abs(double(y[i * out + o]) - double(ref)));
			}
	}
	return worst;
}

Outcome criterion1() {
	const auto t0 = std::chrono::steady_clock::now();
	const double d64 = fusion_identity<double>(250, 1), d32 = fusion_identity<float>(250, 2);
	const double secs = seconds_since(t0);
	return {d64 < 1e-10 && d32 < 1e-5 && secs < 60,
			fmt("250 triples per dtype; f64 max %.2e (< 1e-10), f32 max %.2e (< 1e-5); %.1f s", d64, d32, secs)};
}

Outcome criterion2(const Scratch &tmp) {
	const auto t0 = std::chrono::steady_clock::now();
	RunConfig c;
	c.model.depth = 4;
	c.model.dim = 128;
	c.model.heads = 4;
	c.model.ffn_variant = FfnVariant::ExFusionMB;
	c.model.num_experts = 4;
	c.model.momentum = 0.95;
	c.model.replace_all_layers();
	c.task.kind = TaskKind::CharLM;
	c.task.seq_len = 64;
	c.task.batch_size = 16;
	c.train.steps = 500;
	c.train.warmup_steps = 50;
	c.train.log_interval = 100;
	c.train.checkpoint_interval = 0;
	c.seed = 5;
	c.out_dir = (tmp / "c2").string();
	c.resolve();
	const RunResult run = train_loop(c);
	const fs::path dense_path = tmp / "c2_dense.bin";
	export_checkpoint(run.checkpoints.back(), dense_path);

	Transformer<float> source = load_model<float>(Checkpoint::load(run.checkpoints.back()));
	Transformer<float> dense = load_model<float>(Checkpoint::load(dense_path));
	const auto task = make_task(c.task, 777);
	double worst = 0;
	for (std::uint64_t b = 0; b < 16; b++) {
		const TokenBatch batch = task->train_batch(1000 + b);
		const Tensor<float> a = source.logits(batch), d = dense.logits(batch);
		for (std::size_t i = 0; i < a.size(); i++)
			worst = std::max(worst, std::abs(double(a[i]) - double(d[i])));
	}
	ModelSpec baseline_spec = c.model;
	baseline_spec.ffn_variant = FfnVariant::Dense;
	const std::size_t baseline = Transformer<float>(baseline_spec).parameter_count();
	const double secs = seconds_since(t0);
	// the bank must actually have moved for the check to mean anything
	const float bank = source.parameters().at("layers.0.ffn.bank").value[0];
	return {worst < 1e-5 && dense.parameter_count() == baseline && secs < 600 && bank != 0,
			fmt("500-step mb run; 16 batches max |dlogit| %.2e (< 1e-5); params %zu exported vs %zu dense (source %zu); %.0f s", worst,
					dense.parameter_count(), baseline, source.parameter_count(), secs)};
}

Outcome criterion3() {
	const auto t0 = std::chrono::steady_clock::now();
	double w32 = 0, w64 = 0;
	for (FfnVariant v : {FfnVariant::ExFusionSW, FfnVariant::ExFusionDW, FfnVariant::ExFusionMB})
		for (std::uint64_t seed = 1; seed <= 5; seed++) {
			ModelSpec spec = tiny_spec(v, seed % 2 ? HeadKind::LanguageModel : HeadKind::Classification, seed);
			spec.max_seq_len = 8;
			const TokenBatch batch = random_batch(spec, 2, 4, seed * 13);
			Transformer<double> m64(spec);
			perturb_parameters(m64, seed);
			w64 = std::max(w64, model_grad_error(m64, batch, true));
			Transformer<float> m32 = cast_model<float>(m64);
			w32 = std::max(w32, model_grad_error(m32, batch, true));
		}
	const double secs = seconds_since(t0);
	return {w32 < 1e-4 && w64 < 1e-8 && secs < 300,
			fmt("depth 2, D 8, sw/dw/mb x 5 seeds; max rel err f32 %.2e (< 1e-4), f64 %.2e (< 1e-8); %.1f s", w32, w64, secs)};
}

Outcome criterion4() {
	std::mt19937_64 rng(41);
	std::uniform_real_distribution<double> u(0, 1), dd(0.5, 0.999);
	double worst = 0, worst_sum = 0;
	for (double delta : {0.95, 0.99, dd(rng)}) {
		const std::size_t n = 4;
		std::vector<double> bank(n, 0.0);
		std::vector<std::vector<double>> ws;
		for (std::size_t t = 1; t <= 10000; t++) {
			std::vector<double> w(n);
			double s = 0;
			for (double &x : w)
				s += x = u(rng);
			for (double &x : w)
				x /= s;
			ws.push_back(w);
			bank = mb_update<double>(bank, w, delta);
			if (t > 20 && t % 500 != 0)
				continue;
			double total = 0;
			for (std::size_t i = 0; i < n; i++) {
				double closed = 0;
				for (std::size_t k = 1; k <= t; k++)
					closed += (1 - delta) * std::pow(delta, double(t - k)) * ws[k - 1][i];
				worst = std::max(worst, std::abs(bank[i] - closed));
				total += bank[i];
			}
			worst_sum = std::max(worst_sum, std::abs(total - (1 - std::pow(delta, double(t)))));
		}
	}
	return {worst < 1e-10 && worst_sum < 1e-8,
			fmt("3 momenta x 10000 steps; max |incremental - closed form| %.2e (< 1e-10), max |sum m - (1 - d^t)| %.2e (< 1e-8)", worst,
					worst_sum)};
}

Outcome criterion5() {
	const auto t0 = std::chrono::steady_clock::now();
	bool ok = true;
	std::string detail;
	for (std::size_t k : {1, 2, 4, 8}) {
		const VarianceReport r = variance_reduction_demo(k, 1.0, 100000, 100 + k, 0.5);
		const double rel = std::abs(r.empirical_var / (1.0 / double(k)) - 1);
		const double tol = 3.0 / std::sqrt(double(k) * 100000.0);
		const double bias_err = std::abs(r.empirical_mean - 0.5);
		ok = ok && rel < 0.05 && bias_err < tol;
		detail += fmt("k=%zu var %.4f vs %.4f, mean %.4f; ", k, r.empirical_var, 1.0 / double(k), r.empirical_mean);
	}
	const double secs = seconds_since(t0);
	return {ok && secs < 60, detail + fmt("bias 0.5, 1e5 trials; %.1f s", secs)};
}

Outcome criterion6(const Scratch &tmp) {
	RunConfig dw = cluster_run(FfnVariant::ExFusionDW, tmp / "c6_dw", 200);
	dw.model.freeze_fusion_weights = true;
	const RunConfig sw = cluster_run(FfnVariant::ExFusionSW, tmp / "c6_sw", 200);
	train_loop(dw);
	train_loop(sw);
	const bool same_fused = slurp(tmp / "c6_dw" / "metrics.csv") == slurp(tmp / "c6_sw" / "metrics.csv");

	RunConfig one = cluster_run(FfnVariant::ExFusionSW, tmp / "c6_n1", 200);
	one.model.num_experts = 1;
	const RunConfig dense = cluster_run(FfnVariant::Dense, tmp / "c6_dense", 200);
	train_loop(one);
	train_loop(dense);
	const bool same_dense = slurp(tmp / "c6_n1" / "metrics.csv") == slurp(tmp / "c6_dense" / "metrics.csv");
	const bool nonempty = slurp(tmp / "c6_sw" / "metrics.csv").size() > 100;
	return {same_fused && same_dense && nonempty, fmt("200 deterministic steps; frozen uniform dw == sw metrics: %s; N=1 sw == dense metrics: %s",
														  same_fused ? "identical" : "DIFFER", same_dense ? "identical" : "DIFFER")};
}

Outcome criterion7() {
	RunConfig c;
	c.model.depth = 4;
	c.model.dim = 128;
	c.model.heads = 4;
	c.model.num_experts = 4;
	c.model.top_k = 1;
	c.model.replace_all_layers();
	c.task.kind = TaskKind::CharLM;
	c.task.seq_len = 64;
	c.task.batch_size = 16;
	c.train.steps = 100;
	c.train.warmup_steps = 10;
	c.bench.steps = 60;
	c.bench.warmup = 5;
	c.resolve();
	const auto rows = run_bench(c);
	double topk = 0;
	for (const auto &r : rows)
		if (r.variant == FfnVariant::TopKMoE)
			topk = r.median_ms;
	bool ok = topk > 0;
	std::string detail;
	for (const auto &r : rows) {
		detail += fmt("%s x%.3f; ", std::string(to_string(r.variant)).c_str(), r.overhead);
		if (is_exfusion(r.variant))
			ok = ok && r.overhead <= 1.30 && r.median_ms < topk;
	}
	return {ok, detail + "every ExFusion variant must be <= x1.30 and below topk_moe"};
}

Outcome criterion8(const Scratch &tmp) {
	auto final_loss = [&](FfnVariant v, std::uint64_t seed) {
		RunConfig c;
		c.model.depth = 2;
		c.model.dim = 64;
		c.model.heads = 4;
		c.model.ffn_variant = v;
		c.model.num_experts = 4;
		c.model.momentum = 0.95;
		c.model.replace_all_layers();
		c.task.kind = TaskKind::CharLM;
		c.task.seq_len = 32;
		c.task.batch_size = 16;
		c.train.steps = 5000;
		c.train.warmup_steps = 250;
		c.train.log_interval = 500;
		c.train.checkpoint_interval = 0;
		c.seed = seed;
		c.out_dir = (tmp / ("c8_" + std::string(to_string(v)) + std::to_string(seed))).string();
		c.resolve();
		return train_loop(c).final_eval.loss;
	};
	double dense = 0, mb = 0;
	std::string per_seed;
	for (std::uint64_t seed = 1; seed <= 3; seed++) {
		const double d = final_loss(FfnVariant::Dense, seed), m = final_loss(FfnVariant::ExFusionMB, seed);
		dense += d / 3;
		mb += m / 3;
		per_seed += fmt(" [seed %llu dense %.4f mb %.4f]", (unsigned long long)seed, d, m);
	}
	return {mb <= dense + 0.01, fmt("5000 CharLM steps x 3 seeds; mean final val loss dense %.4f, mb %.4f (mb - dense %+.4f nats, allowed +0.01);",
										 dense, mb, mb - dense) +
										per_seed};
}

Outcome criterion9(const Scratch &tmp) {
	bool ok = true;
	std::string detail;
	for (FfnVariant v : {FfnVariant::Dense, FfnVariant::TopKMoE, FfnVariant::ExFusionSW, FfnVariant::ExFusionDW, FfnVariant::ExFusionMB}) {
		const std::string name(to_string(v));
		RunConfig full = cluster_run(v, tmp / ("c9_full_" + name), 60);
		train_loop(full);
		RunConfig part = cluster_run(v, tmp / ("c9_part_" + name), 60);
		part.train.stop_after = 27;
		train_loop(part);
		part.train.stop_after = 0;
		train_loop(part, fs::path(part.out_dir) / checkpoint_filename(27));
		const bool same = slurp(fs::path(full.out_dir) / "metrics.csv") == slurp(fs::path(part.out_dir) / "metrics.csv");
		ok = ok && same;
		detail += (detail.empty() ? "" : ", ") + name + (same ? " identical" : " DIFFERS");
	}
	return {ok, "resume at step 27 of 60: " + detail};
}

} // namespace

int main(int argc, char **argv) {
	// keep large tensors on the heap; fresh mmaps page-fault on every step
	mallopt(M_MMAP_THRESHOLD, 1 << 30);
	mallopt(M_TRIM_THRESHOLD, 1 << 30);
	std::set<int> only;
	for (int i = 1; i < argc; i++)
		only.insert(std::atoi(argv[i]));
	Scratch tmp;
	const std::vector<std::pair<const char *, std::function<Outcome()>>> criteria{
			{"fusion identity", criterion1},
			{"collapse faithfulness", [&] { return criterion2(tmp); }},
			{"gradient correctness", criterion3},
			{"EMA exactness", criterion4},
			{"variance reduction", criterion5},
			{"variant degeneracy", [&] { return criterion6(tmp); }},
			{"training-overhead trend", criterion7},
			{"quality trend (soft)", [&] { return criterion8(tmp); }},
			{"determinism/resume", [&] { return criterion9(tmp); }},
	};
	int failures = 0;
	for (std::size_t i = 0; i < criteria.size(); i++) {
		const int id = int(i) + 1;
		if (!only.empty() && !only.contains(id))
			continue;
		Outcome o;
		try {
			o = criteria[i].second();
		} catch (const std::exception &e) {
			o = {false, std::string("threw: ") + e.what()};
		}
		const bool soft = id == 8;
		const char *verdict = o.passed ? "PASS" : soft ? "SOFT-MISS" : "FAIL";
		std::cout << "criterion " << id << " " << criteria[i].first << ": " << verdict << " - " << o.detail << std::endl;
		if (!o.passed && !soft)
			failures++;
	}
	return failures == 0 ? 0 : 1;
}
