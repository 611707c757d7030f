#include "exfusion/trainer.hpp"

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <sstream>

namespace exfusion {

namespace fs = std::filesystem;

template<typename T>
void store_model(Checkpoint &ck, const Transformer<T> &model) {
	for (const auto &p : model.parameters())
		ck.put(p->name, p->value);
}

template<typename T>
void restore_model(const Checkpoint &ck, Transformer<T> &model) {
	for (auto &p : model.parameters()) {
		if (!ck.contains(p->name))
			throw CheckpointError("checkpoint lacks tensor " + p->name);
		Tensor<T> v = ck.get<T>(p->name);
		if (v.shape() != p->value.shape())
			throw CheckpointError("tensor " + p->name + " has shape " + to_string(v.shape()) + ", model expects " + to_string(p->value.shape()));
		p->value = std::move(v);
	}
}

RunConfig checkpoint_config(const Checkpoint &ck) {
	return parse_config(ck.meta_string("config"));
}

Precision checkpoint_precision(const Checkpoint &ck) {
	return parse_precision(ck.meta_string("dtype"));
}

template<typename T>
constexpr Precision precision_of() {
	return std::is_same_v<T, float> ? Precision::F32 : Precision::F64;
}

template<typename T>
Checkpoint make_model_checkpoint(const Transformer<T> &model, const RunConfig &config, std::uint64_t step) {
	RunConfig c = config;
	c.model = model.spec();
	c.dtype = precision_of<T>();
	Checkpoint ck;
	store_model(ck, model);
	ck.put_meta_int("step", std::int64_t(step));
	ck.put_meta_real("delta", model.spec().momentum);
	ck.put_meta_string("variant", to_string(model.spec().ffn_variant));
	ck.put_meta_string("dtype", to_string(c.dtype));
	// data order is a pure function of (seed, step), so these two are the whole RNG state
	ck.put_meta_int("rng_seed", std::int64_t(c.seed));
	ck.put_meta_int("rng_step", std::int64_t(step));
	ck.put_meta_string("config", to_ini(c));
	return ck;
}

template<typename T>
Transformer<T> load_model(const Checkpoint &ck) {
	const RunConfig c = checkpoint_config(ck);
	if (checkpoint_precision(ck) != precision_of<T>()) {
		using Other = std::conditional_t<std::is_same_v<T, float>, double, float>;
		Transformer<Other> stored(c.model);
		restore_model(ck, stored);
		return cast_model<T>(stored);
	}
	Transformer<T> model(c.model);
	restore_model(ck, model);
	return model;
}

std::string checkpoint_filename(std::uint64_t step) {
	char buf[32];
	std::snprintf(buf, sizeof buf, "ckpt_%06" PRIu64 ".bin", step);
	return buf;
}

template<typename T>
Trainer<T>::Trainer(RunConfig config) :
		config_((config.resolve(), std::move(config))), model_(config_.model), optimizer_(config_.train.adam),
		task_(make_task(config_.task, config_.seed)) {
}

template<typename T>
void Trainer<T>::resume(const Checkpoint &ck) {
	const RunConfig stored = checkpoint_config(ck);
	if (stored.model.ffn_variant != config_.model.ffn_variant)
		throw CheckpointError("checkpoint variant " + std::string(to_string(stored.model.ffn_variant)) + " does not match the run's " +
				std::string(to_string(config_.model.ffn_variant)));
	restore_model(ck, model_);
	auto &moments = optimizer_.moments();
	moments.clear();
	for (const auto &p : model_.parameters()) {
		if (!ck.contains("optim/m/" + p->name))
			continue;
		moments[p->name] = {ck.get<T>("optim/m/" + p->name), ck.get<T>("optim/v/" + p->name)};
	}
	optimizer_.set_step_count(std::uint64_t(ck.meta_int("optimizer_step")));
	step_ = std::uint64_t(ck.meta_int("step"));
	loss_sum_ = ck.meta_real("loss_sum");
	loss_count_ = std::uint64_t(ck.meta_int("loss_count"));
}

template<typename T>
Checkpoint Trainer<T>::checkpoint() const {
	Checkpoint ck = make_model_checkpoint(model_, config_, step_);
	for (const auto &[name, mo] : optimizer_.moments()) {
		ck.put("optim/m/" + name, mo.m);
		ck.put("optim/v/" + name, mo.v);
	}
	ck.put_meta_int("optimizer_step", std::int64_t(optimizer_.step_count()));
	ck.put_meta_real("loss_sum", loss_sum_);
	ck.put_meta_int("loss_count", std::int64_t(loss_count_));
	return ck;
}

template<typename T>
double Trainer<T>::train_step(const TokenBatch &batch, std::uint64_t step) {
	model_.parameters().zero_grad();
	Tape<T> tape;
	double loss = 0;
	try {
		Var<T> l = model_.loss(tape, batch, {true, true});
		loss = double(l.value().item());
		tape.backward(l);
	} catch (const NonFiniteError &e) {
		throw NonFiniteError("training aborted at step " + std::to_string(step) + ": " + e.what());
	}
	last_report_ = optimizer_.step(model_.parameters(), config_.train.schedule().lr_at(step));
	return loss;
}

namespace {

std::string metrics_row(std::uint64_t step, double epoch, double lr, double loss, double metric, double step_ms) {
	char buf[256];
	std::snprintf(buf, sizeof buf, "%" PRIu64 ",%.4f,%.6e,%.6f,%.6f,%.3f", step, epoch, lr, loss, metric, step_ms);
	return buf;
}

/// Keeps the header and every row up to `step`; creates the file if needed.
void prepare_metrics(const fs::path &path, std::uint64_t step) {
	std::vector<std::string> keep{kMetricsHeader};
	if (std::ifstream in(path); in) {
		std::string line;
		std::getline(in, line);
		while (std::getline(in, line)) {
			if (line.empty())
				continue;
			if (std::stoull(line.substr(0, line.find(','))) > step)
				break;
			keep.push_back(line);
		}
	}
	std::ofstream out(path, std::ios::binary | std::ios::trunc);
	if (!out)
		throw std::runtime_error("cannot write metrics file " + path.string());
	for (const auto &l : keep)
		out << l << '\n';
}

} // namespace

template<typename T>
RunResult Trainer<T>::run() {
	const fs::path dir = config_.out_dir;
	fs::create_directories(dir);
	RunResult result;
	result.metrics = dir / "metrics.csv";
	{
		std::ofstream cfg(dir / "resolved_config.ini", std::ios::binary | std::ios::trunc);
		if (!cfg)
			throw std::runtime_error("cannot write " + (dir / "resolved_config.ini").string());
		cfg << to_ini(config_);
	}
	prepare_metrics(result.metrics, step_);
	std::ofstream metrics(result.metrics, std::ios::binary | std::ios::app);

	auto save = [&] {
		const fs::path p = dir / checkpoint_filename(step_);
		checkpoint().save(p);
		result.checkpoints.push_back(p);
	};
	if (step_ == 0)
		save();

	const TrainOptions &opt = config_.train;
	const Schedule schedule = opt.schedule();
	const std::uint64_t last = opt.stop_after ? opt.stop_after : opt.steps;
	const bool prefetch = !config_.deterministic;
	std::future<TokenBatch> next;
	if (prefetch && step_ < last)
		next = std::async(std::launch::async, [this, s = step_ + 1] { return task_->train_batch(s); });

	bool evaluated = false;
	double interval_ms = 0, total_ms = 0;
	std::uint64_t interval_steps = 0, timed_steps = 0;
	while (step_ < last) {
		const std::uint64_t s = step_ + 1;
		TokenBatch batch = prefetch ? next.get() : task_->train_batch(s);
		if (prefetch && s < last)
			next = std::async(std::launch::async, [this, s] { return task_->train_batch(s + 1); });

		const auto t0 = std::chrono::steady_clock::now();
		const double loss = train_step(batch, s);
		const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
		step_ = s;
		if (!last_report_.applied)
			result.skipped_steps++;
		loss_sum_ += loss;
		loss_count_++;
		result.last_train_loss = loss;
		interval_ms += ms;
		interval_steps++;
		total_ms += ms;
		timed_steps++;

		if (s % opt.log_interval == 0 || s == opt.steps) {
			const EvalResult ev = evaluate(model_, task_->val_batches());
			result.final_eval = ev;
			evaluated = true;
			const double step_ms = config_.deterministic ? 0.0 : interval_ms / double(interval_steps);
			metrics << metrics_row(s, task_->epoch(s), schedule.lr_at(s), loss_sum_ / double(loss_count_), ev.metric(config_.model.head),
							   step_ms)
					<< '\n';
			metrics.flush();
			if (!metrics)
				throw std::runtime_error("write failed for " + result.metrics.string());
			loss_sum_ = 0;
			loss_count_ = 0;
			interval_ms = 0;
			interval_steps = 0;
		}
		if ((opt.checkpoint_interval && s % opt.checkpoint_interval == 0) || s == last)
			save();
	}
	if (!evaluated)
		result.final_eval = evaluate(model_, task_->val_batches());
	result.final_step = step_;
	result.mean_step_ms = timed_steps ? total_ms / double(timed_steps) : 0.0;
	return result;
}

template class Trainer<float>;
template class Trainer<double>;

#define EXFUSION_INSTANTIATE_IO(T) \
	template void store_model(Checkpoint &, const Transformer<T> &); \
	template void restore_model(const Checkpoint &, Transformer<T> &); \
	template Checkpoint make_model_checkpoint(const Transformer<T> &, const RunConfig &, std::uint64_t); \
	template Transformer<T> load_model(const Checkpoint &);

EXFUSION_INSTANTIATE_IO(float)
EXFUSION_INSTANTIATE_IO(double)

namespace {

template<typename T>
RunResult run_in(const RunConfig &config, const std::optional<fs::path> &resume_from) {
	Trainer<T> trainer(config);
	if (resume_from)
		trainer.resume(Checkpoint::load(*resume_from));
	return trainer.run();
}

} // namespace

RunResult train_loop(const RunConfig &config, const std::optional<fs::path> &resume_from) {
	if (config.dtype == Precision::F64)
		return run_in<double>(config, resume_from);
	return run_in<float>(config, resume_from);
}

} // namespace exfusion
