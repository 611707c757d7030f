#include "exfusion/tasks.hpp"

#include "exfusion/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace exfusion {

std::string_view to_string(TaskKind k) {
	return k == TaskKind::CharLM ? "char_lm" : "synthetic_cluster";
}

TaskKind parse_task_kind(std::string_view s) {
	if (s == "synthetic_cluster")
		return TaskKind::SyntheticCluster;
	if (s == "char_lm")
		return TaskKind::CharLM;
	throw ConfigError("kind", "expected synthetic_cluster or char_lm, got '" + std::string(s) + "'");
}

void TaskSpec::validate() const {
	if (seq_len < 1)
		throw ConfigError("seq_len", "must be >= 1");
	if (batch_size < 1)
		throw ConfigError("batch_size", "must be >= 1");
	if (kind == TaskKind::SyntheticCluster) {
		if (classes < 2)
			throw ConfigError("classes", "must be >= 2");
		if (vocab < 2)
			throw ConfigError("vocab", "must be >= 2");
		if (!(noise >= 0) || !std::isfinite(noise))
			throw ConfigError("noise", "must be finite and non-negative");
		if (train_size < 1)
			throw ConfigError("train_size", "must be >= 1");
		if (val_size < 1)
			throw ConfigError("val_size", "must be >= 1");
	} else {
		if (!(val_fraction > 0 && val_fraction < 1))
			throw ConfigError("val_fraction", "must be in (0, 1)");
		if (max_val_windows < 1)
			throw ConfigError("max_val_windows", "must be >= 1");
	}
}

std::vector<std::int32_t> encode_ascii(std::string_view text) {
	std::vector<std::int32_t> ids;
	ids.reserve(text.size());
	for (char c : text) {
		const auto u = static_cast<unsigned char>(c);
		ids.push_back(u < 128 ? std::int32_t(u) : std::int32_t('?'));
	}
	return ids;
}

std::vector<std::vector<double>> cluster_centers(const TaskSpec &spec, std::uint64_t seed) {
	auto rng = derive_rng(seed, "task.centers", 0);
	std::uniform_real_distribution<double> pos(0.0, double(spec.vocab - 1));
	std::vector<std::vector<double>> centers(spec.classes, std::vector<double>(spec.seq_len));
	for (auto &c : centers)
		for (double &v : c)
			v = pos(rng);
	return centers;
}

namespace {

std::vector<TokenBatch> split_rows(const std::vector<std::int32_t> &tokens, const std::vector<std::int32_t> &targets, std::size_t rows,
		std::size_t seq, std::size_t targets_per_row, std::size_t batch_size) {
	std::vector<TokenBatch> out;
	for (std::size_t r0 = 0; r0 < rows; r0 += batch_size) {
		const std::size_t n = std::min(batch_size, rows - r0);
		TokenBatch b;
		b.batch = n;
		b.seq = seq;
		b.tokens.assign(tokens.begin() + std::ptrdiff_t(r0 * seq), tokens.begin() + std::ptrdiff_t((r0 + n) * seq));
		b.targets.assign(targets.begin() + std::ptrdiff_t(r0 * targets_per_row), targets.begin() + std::ptrdiff_t((r0 + n) * targets_per_row));
		out.push_back(std::move(b));
	}
	return out;
}

class SyntheticClusterTask final : public Task {
public:
	SyntheticClusterTask(TaskSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
		centers_ = cluster_centers(spec_, seed_);
		std::set<std::vector<std::int32_t>> seen;
		for (std::size_t i = 0; i < spec_.train_size; i++) {
			auto [row, label] = sample("task.train", i);
			seen.insert(row);
			train_tokens_.insert(train_tokens_.end(), row.begin(), row.end());
			train_labels_.push_back(label);
		}
		// val rows that collide with a training sequence are redrawn so the splits stay disjoint
		std::vector<std::int32_t> tokens, labels;
		for (std::size_t i = 0, draw = 0; i < spec_.val_size; draw++) {
			if (draw > 100 * spec_.val_size)
				throw std::runtime_error("cannot draw a validation set disjoint from training data; raise noise or seq_len");
			auto [row, label] = sample("task.val", draw);
			if (seen.contains(row))
				continue;
			tokens.insert(tokens.end(), row.begin(), row.end());
			labels.push_back(label);
			i++;
		}
		val_ = split_rows(tokens, labels, spec_.val_size, spec_.seq_len, 1, spec_.batch_size);
	}

	const TaskSpec &spec() const override { return spec_; }

	TokenBatch train_batch(std::uint64_t step) const override {
		auto rng = derive_rng(seed_, "task.batch", step);
		std::uniform_int_distribution<std::size_t> pick(0, spec_.train_size - 1);
		TokenBatch b;
		b.batch = spec_.batch_size;
		b.seq = spec_.seq_len;
		for (std::size_t r = 0; r < spec_.batch_size; r++) {
			const std::size_t i = pick(rng);
			b.tokens.insert(b.tokens.end(), train_tokens_.begin() + std::ptrdiff_t(i * spec_.seq_len),
					train_tokens_.begin() + std::ptrdiff_t((i + 1) * spec_.seq_len));
			b.targets.push_back(train_labels_[i]);
		}
		return b;
	}

	const std::vector<TokenBatch> &val_batches() const override { return val_; }

	double epoch(std::uint64_t step) const override { return double(step) * double(spec_.batch_size) / double(spec_.train_size); }

private:
	std::pair<std::vector<std::int32_t>, std::int32_t> sample(const char *stream, std::size_t index) const {
		auto rng = derive_rng(seed_, stream, index);
		std::uniform_int_distribution<std::int32_t> cls(0, std::int32_t(spec_.classes) - 1);
		std::normal_distribution<double> noise(0.0, 1.0);
		const std::int32_t label = cls(rng);
		std::vector<std::int32_t> row(spec_.seq_len);
		const double top = double(spec_.vocab - 1);
		for (std::size_t t = 0; t < spec_.seq_len; t++) {
			const double v = centers_[std::size_t(label)][t] + spec_.noise * noise(rng);
			row[t] = std::int32_t(std::clamp(std::round(v), 0.0, top));
		}
		return {std::move(row), label};
	}

	TaskSpec spec_;
	std::uint64_t seed_;
	std::vector<std::vector<double>> centers_;
	std::vector<std::int32_t> train_tokens_, train_labels_;
	std::vector<TokenBatch> val_;
};

class CharLMTask final : public Task {
public:
	CharLMTask(TaskSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
		std::string text;
		if (spec_.text_path.empty()) {
			text = std::string(bundled_corpus());
		} else {
			std::ifstream in(spec_.text_path, std::ios::binary);
			if (!in)
				throw std::runtime_error("cannot read text file " + spec_.text_path);
			std::ostringstream ss;
			ss << in.rdbuf();
			text = ss.str();
		}
		const auto ids = encode_ascii(text);
		const auto split = std::size_t(double(ids.size()) * (1 - spec_.val_fraction));
		train_.assign(ids.begin(), ids.begin() + std::ptrdiff_t(split));
		const std::vector<std::int32_t> val(ids.begin() + std::ptrdiff_t(split), ids.end());
		const std::size_t L = spec_.seq_len;
		if (train_.size() < L + 1 || val.size() < L + 1)
			throw ConfigError("seq_len", "text too short for windows of " + std::to_string(L) + " characters in both splits");

		// non-overlapping windows over the held-out tail
		std::vector<std::int32_t> tokens, targets;
		std::size_t windows = 0;
		for (std::size_t s = 0; s + L + 1 <= val.size() && windows < spec_.max_val_windows; s += L, windows++) {
			tokens.insert(tokens.end(), val.begin() + std::ptrdiff_t(s), val.begin() + std::ptrdiff_t(s + L));
			targets.insert(targets.end(), val.begin() + std::ptrdiff_t(s + 1), val.begin() + std::ptrdiff_t(s + L + 1));
		}
		val_ = split_rows(tokens, targets, windows, L, L, spec_.batch_size);
	}

	const TaskSpec &spec() const override { return spec_; }

	TokenBatch train_batch(std::uint64_t step) const override {
		auto rng = derive_rng(seed_, "task.batch", step);
		const std::size_t L = spec_.seq_len;
		std::uniform_int_distribution<std::size_t> start(0, train_.size() - L - 1);
		TokenBatch b;
		b.batch = spec_.batch_size;
		b.seq = L;
		for (std::size_t r = 0; r < spec_.batch_size; r++) {
			const auto s = std::ptrdiff_t(start(rng));
			b.tokens.insert(b.tokens.end(), train_.begin() + s, train_.begin() + s + std::ptrdiff_t(L));
			b.targets.insert(b.targets.end(), train_.begin() + s + 1, train_.begin() + s + std::ptrdiff_t(L) + 1);
		}
		return b;
	}

	const std::vector<TokenBatch> &val_batches() const override { return val_; }

	double epoch(std::uint64_t step) const override {
		return double(step) * double(spec_.batch_size * spec_.seq_len) / double(train_.size());
	}

private:
	TaskSpec spec_;
	std::uint64_t seed_;
	std::vector<std::int32_t> train_;
	std::vector<TokenBatch> val_;
};

} // namespace

std::unique_ptr<Task> make_task(const TaskSpec &spec, std::uint64_t seed) {
	spec.validate();
	if (spec.kind == TaskKind::CharLM)
		return std::make_unique<CharLMTask>(spec, seed);
	return std::make_unique<SyntheticClusterTask>(spec, seed);
}

template<typename T>
EvalResult evaluate(Transformer<T> &model, const std::vector<TokenBatch> &batches) {
	double nll = 0;
	std::size_t count = 0, correct = 0;
	for (const auto &b : batches) {
		const Tensor<T> logits = model.logits(b);
		const std::size_t C = logits.shape().back();
		const std::size_t rows = logits.size() / C;
		for (std::size_t r = 0; r < rows; r++) {
			const T *z = logits.raw() + r * C;
			const std::size_t best = std::size_t(std::max_element(z, z + C) - z);
			double mx = double(z[best]), s = 0;
			for (std::size_t c = 0; c < C; c++)
				s += std::exp(double(z[c]) - mx);
			const auto target = std::size_t(b.targets[r]);
			nll += mx + std::log(s) - double(z[target]);
			correct += best == target;
			count++;
		}
	}
	EvalResult r;
	if (count == 0)
		return r;
	r.loss = nll / double(count);
	r.accuracy = double(correct) / double(count);
	r.perplexity = std::exp(r.loss);
	return r;
}

template EvalResult evaluate(Transformer<float> &, const std::vector<TokenBatch> &);
template EvalResult evaluate(Transformer<double> &, const std::vector<TokenBatch> &);

} // namespace exfusion
