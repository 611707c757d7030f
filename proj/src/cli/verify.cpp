#include "exfusion/commands.hpp"
#include "exfusion/fusion.hpp"
#include "exfusion/ops.hpp"
#include "exfusion/rng.hpp"
#include "exfusion/transformer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <random>

namespace exfusion {

bool SuiteResult::passed() const {
	return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult &c) { return c.passed; });
}

namespace {

CheckResult below(std::string name, double value, double threshold) {
	return {std::move(name), value, threshold, std::isfinite(value) && value < threshold};
}

template<typename T>
constexpr const char *tag() {
	return std::is_same_v<T, float> ? "f32" : "f64";
}

template<typename T>
Tensor<T> uniform(const Shape &shape, std::mt19937_64 &rng, double lo = -1, double hi = 1) {
	std::uniform_real_distribution<double> d(lo, hi);
	Tensor<T> t(shape);
	for (T &v : t.data())
		v = T(d(rng));
	return t;
}

/// Random point on the probability simplex.
std::vector<double> simplex(std::size_t n, std::mt19937_64 &rng) {
	std::exponential_distribution<double> e(1.0);
	std::vector<double> w(n);
	double s = 0;
	for (double &v : w)
		s += v = e(rng);
	for (double &v : w)
		v /= s;
	return w;
}

/// Parameter-space fusion on the tape versus the weighted sum of the experts'
/// individual outputs, over random shapes, weights and inputs.
template<typename T>
double fusion_deviation(std::uint64_t seed, std::size_t trials) {
	std::mt19937_64 rng = derive_rng(seed, "verify.fusion", std::is_same_v<T, float> ? 32 : 64);
	std::uniform_int_distribution<std::size_t> size(1, 12), experts(1, 8), rows(1, 6);
	double worst = 0;
	for (std::size_t trial = 0; trial < trials; trial++) {
		const std::size_t n = experts(rng), in = size(rng), out = size(rng), r = rows(rng);
		const Tensor<T> w = uniform<T>({n, in, out}, rng), b = uniform<T>({n, out}, rng), x = uniform<T>({r, in}, rng);
		const std::vector<double> mix = simplex(n, rng);
		Tensor<T> weights({n});
		for (std::size_t i = 0; i < n; i++)
			weights[i] = T(mix[i]);

		Tape<T> tape;
		const AffineVars<T> f = fuse(tape.constant(w), tape.constant(b), tape.constant(weights));
		const Tensor<T> &y = linear(tape.constant(x), f.weight, f.bias).value();

		for (std::size_t i = 0; i < r; i++)
			for (std::size_t o = 0; o < out; o++) {
				T ref = 0;
				for (std::size_t e = 0; e < n; e++) {
					T ye = b[e * out + o];
					for (std::size_t k = 0; k < in; k++)
						ye += x[i * in + k] * w[(e * in + k) * out + o];
					ref += weights[e] * ye;
				}
				worst = std::max(worst, std::abs(double(y[i * out + o]) - double(ref)));
			}
	}
	return worst;
}

template<typename T>
void perturb(Transformer<T> &model, std::uint64_t seed) {
	std::mt19937_64 rng = derive_rng(seed, "verify.perturb");
	std::uniform_real_distribution<double> noise(-0.3, 0.3);
	for (auto &p : model.parameters()) {
		if (p->kind == ParamKind::Buffer) {
			const std::vector<double> m = simplex(p->value.size(), rng);
			for (std::size_t i = 0; i < m.size(); i++)
				p->value[i] = T(0.9 * m[i]);
			continue;
		}
		for (T &v : p->value.data())
			v = T(v + noise(rng));
	}
}

TokenBatch random_batch(const ModelSpec &spec, std::size_t batch, std::size_t seq, std::uint64_t seed) {
	std::mt19937_64 rng = derive_rng(seed, "verify.batch");
	std::uniform_int_distribution<std::int32_t> tok(0, std::int32_t(spec.vocab) - 1);
	TokenBatch b{batch, seq, {}, {}};
	for (std::size_t i = 0; i < batch * seq; i++)
		b.tokens.push_back(tok(rng));
	if (spec.head == HeadKind::LanguageModel) {
		for (std::size_t i = 0; i < batch * seq; i++)
			b.targets.push_back(tok(rng));
	} else {
		std::uniform_int_distribution<std::int32_t> cls(0, std::int32_t(spec.classes) - 1);
		for (std::size_t i = 0; i < batch; i++)
			b.targets.push_back(cls(rng));
	}
	return b;
}

ModelSpec tiny_spec(FfnVariant variant, HeadKind head, std::size_t dim, std::uint64_t seed) {
	ModelSpec s;
	s.depth = 2;
	s.dim = dim;
	s.heads = 2;
	s.expansion = 2;
	s.vocab = 8;
	s.classes = 3;
	s.max_seq_len = 8;
	s.head = head;
	s.ffn_variant = variant;
	s.num_experts = 3;
	s.seed = seed;
	s.replace_all_layers();
	s.validate();
	return s;
}

/// Worst mixed relative error |a - n| / max(1, |a|, |n|) between the model's
/// analytic loss gradient and f64 central differences, over every trainable
/// tensor. Memory banks are not committed during the check.
template<typename T>
double model_gradient_error(Transformer<T> &model, const TokenBatch &batch) {
	const ForwardContext ctx{true, false};
	const double h = std::is_same_v<T, float> ? 1e-3 : 1e-5;
	model.parameters().zero_grad();
	{
		Tape<T> tape;
		tape.backward(model.loss(tape, batch, ctx));
	}
	Transformer<double> twin = cast_model<double>(model);
	auto loss = [&] {
		Tape<double> t;
		return twin.loss(t, batch, ctx).value().item();
	};
	double worst = 0;
	for (const auto &p : model.parameters()) {
		if (!p->trainable())
			continue;
		Parameter<double> &q = twin.parameters().at(p->name);
		for (std::size_t j = 0; j < q.value.size(); j++) {
			const double x0 = q.value[j];
			q.value[j] = x0 + h;
			const double fp = loss();
			q.value[j] = x0 - h;
			const double fm = loss();
			q.value[j] = x0;
			const double a = p->grad.empty() ? 0.0 : double(p->grad[j]), n = (fp - fm) / (2 * h);
			worst = std::max(worst, std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)}));
		}
	}
	return worst;
}

template<typename T>
void gradient_checks(SuiteResult &r, std::uint64_t seed) {
	const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-8;
	for (FfnVariant v : {FfnVariant::ExFusionSW, FfnVariant::ExFusionDW, FfnVariant::ExFusionMB}) {
		double worst = 0;
		for (std::uint64_t s = seed; s < seed + 2; s++)
			for (HeadKind head : {HeadKind::Classification, HeadKind::LanguageModel}) {
				const ModelSpec spec = tiny_spec(v, head, 8, s);
				Transformer<T> model(spec);
				perturb(model, s);
				worst = std::max(worst, model_gradient_error(model, random_batch(spec, 2, 4, s)));
			}
		r.checks.push_back(below(std::string(to_string(v)) + "_" + tag<T>() + "_max_rel_err", worst, tol));
	}
}

/// Collapse of a model whose banks have moved through several committed
/// training steps; logits compared in eval mode.
template<typename T>
void export_checks(SuiteResult &r, std::uint64_t seed) {
	const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-10;
	for (FfnVariant v : {FfnVariant::ExFusionSW, FfnVariant::ExFusionDW, FfnVariant::ExFusionMB}) {
		const ModelSpec spec = tiny_spec(v, HeadKind::LanguageModel, 16, seed);
		Transformer<T> model(spec);
		perturb(model, seed);
		for (std::uint64_t s = 0; s < 5; s++) {
			Tape<T> tape;
			model.forward(tape, random_batch(spec, 4, 8, seed * 31 + s), {true, true});
		}
		Transformer<T> dense = collapse_to_dense(model);
		const TokenBatch probe = random_batch(spec, 4, 8, seed + 1000);
		const Tensor<T> a = model.logits(probe), b = dense.logits(probe);
		double dev = 0;
		for (std::size_t i = 0; i < a.size(); i++)
			dev = std::max(dev, std::abs(double(a[i]) - double(b[i])));
		const std::string name = std::string(to_string(v)) + "_" + tag<T>();
		r.checks.push_back(below(name + "_max_logit_dev", dev, tol));
		const double extra = std::abs(double(dense.parameter_count()) - double(dense_parameter_count(spec)));
		r.checks.push_back({name + "_param_count_excess", extra, 0, extra == 0});
	}
}

template<typename Fn>
void for_dtypes(std::optional<Precision> dtype, Fn &&fn) {
	if (!dtype || *dtype == Precision::F32)
		fn(float{});
	if (!dtype || *dtype == Precision::F64)
		fn(double{});
}

} // namespace

SuiteResult run_verify_suite(const std::string &suite, std::uint64_t seed, std::optional<Precision> dtype) {
	SuiteResult r{suite, {}};
	if (suite == "fusion") {
		for_dtypes(dtype, [&]<typename T>(T) {
			r.checks.push_back(
					below(std::string("max_dev_") + tag<T>(), fusion_deviation<T>(seed, 250), std::is_same_v<T, float> ? 1e-5 : 1e-10));
		});
	} else if (suite == "gradients") {
		for_dtypes(dtype, [&]<typename T>(T) { gradient_checks<T>(r, seed); });
	} else if (suite == "ema") {
		std::mt19937_64 rng = derive_rng(seed, "verify.ema");
		std::uniform_real_distribution<double> delta_dist(0.5, 0.999);
		double worst = 0, worst_sum = 0;
		for (int run = 0; run < 3; run++) {
			const std::size_t n = 4 + std::size_t(run);
			const double delta = run == 0 ? 0.95 : delta_dist(rng);
			std::vector<double> bank(n, 0.0);
			std::vector<std::vector<double>> history;
			for (std::size_t t = 1; t <= 10000; t++) {
				history.push_back(simplex(n, rng));
				bank = mb_update<double>(bank, history.back(), delta);
				if (t % 1000 != 0 && t > 10)
					continue;
				double total = 0;
				for (std::size_t i = 0; i < n; i++) {
					// m_t = (1 - delta) sum_s delta^(t - s) w_s
					double closed = 0;
					for (std::size_t s = 1; s <= t; s++)
						closed += std::pow(delta, double(t - s)) * history[s - 1][i];
					closed *= 1 - delta;
					worst = std::max(worst, std::abs(bank[i] - closed));
					total += bank[i];
				}
				worst_sum = std::max(worst_sum, std::abs(total - (1 - std::pow(delta, double(t)))));
			}
		}
		r.checks.push_back(below("incremental_vs_closed_form", worst, 1e-10));
		r.checks.push_back(below("bank_sum_vs_1_minus_delta_pow_t", worst_sum, 1e-8));
	} else if (suite == "variance") {
		for (std::size_t k : {1, 2, 4, 8}) {
			const VarianceReport v = variance_reduction_demo(k, 1.0, 100000, seed + k);
			r.checks.push_back(below("k" + std::to_string(k) + "_var_rel_err", std::abs(v.empirical_var / v.predicted_var - 1), 0.05));
			r.checks.push_back(below("k" + std::to_string(k) + "_mean_minus_bias", std::abs(v.empirical_mean - v.bias), v.mean_tolerance));
		}
	} else if (suite == "export") {
		for_dtypes(dtype, [&]<typename T>(T) { export_checks<T>(r, seed); });
	} else {
		throw ConfigError("suite", "unknown suite '" + suite + "'; expected fusion, gradients, ema, variance, export or all");
	}
	return r;
}

std::string verify_summary_json(const std::vector<SuiteResult> &suites) {
	nlohmann::json j;
	bool all = true;
	j["suites"] = nlohmann::json::array();
	for (const auto &s : suites) {
		nlohmann::json js{{"name", s.name}, {"passed", s.passed()}, {"checks", nlohmann::json::array()}};
		for (const auto &c : s.checks)
			js["checks"].push_back({{"name", c.name}, {"value", c.value}, {"threshold", c.threshold}, {"passed", c.passed}});
		all = all && s.passed();
		j["suites"].push_back(std::move(js));
	}
	j["passed"] = all;
	return j.dump(2);
}

} // namespace exfusion
