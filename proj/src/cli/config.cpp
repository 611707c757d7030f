#include "exfusion/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace exfusion {

std::string_view to_string(Precision p) {
	return p == Precision::F64 ? "f64" : "f32";
}

Precision parse_precision(std::string_view s) {
	if (s == "f32")
		return Precision::F32;
	if (s == "f64")
		return Precision::F64;
	throw ConfigError("dtype", "expected f32 or f64, got '" + std::string(s) + "'");
}

void TrainOptions::validate() const {
	if (log_interval < 1)
		throw ConfigError("log_interval", "must be >= 1");
	if (stop_after > steps)
		throw ConfigError("stop_after", "must not exceed steps");
	schedule().validate();
	adam.validate();
}

void BenchOptions::validate() const {
	if (steps < 1)
		throw ConfigError("bench.steps", "must be >= 1");
	if (variants.empty())
		throw ConfigError("bench.variants", "must name at least one variant");
}

void RunConfig::resolve() {
	task.validate();
	model.vocab = task.model_vocab();
	model.classes = task.model_classes();
	model.head = task.head();
	model.max_seq_len = task.seq_len;
	model.seed = seed;
	model.validate();
	train.validate();
	bench.validate();
	if (out_dir.empty())
		throw ConfigError("out", "must not be empty");
}

namespace {

std::string trim(std::string_view s) {
	const auto b = s.find_first_not_of(" \t\r");
	if (b == std::string_view::npos)
		return {};
	const auto e = s.find_last_not_of(" \t\r");
	return std::string(s.substr(b, e - b + 1));
}

std::size_t to_uint(const std::string &key, const std::string &v) {
	std::size_t out = 0;
	const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
	if (ec != std::errc() || p != v.data() + v.size())
		throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
	return out;
}

double to_real(const std::string &key, const std::string &v) {
	char *end = nullptr;
	errno = 0;
	const double d = std::strtod(v.c_str(), &end);
	if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(d))
		throw ConfigError(key, "expected a finite number, got '" + v + "'");
	return d;
}

bool to_bool(const std::string &key, const std::string &v) {
	if (v == "true" || v == "1" || v == "yes" || v == "on")
		return true;
	if (v == "false" || v == "0" || v == "no" || v == "off")
		return false;
	throw ConfigError(key, "expected true or false, got '" + v + "'");
}

template<typename F>
auto wrap(const std::string &key, F &&parse) {
	try {
		return parse();
	} catch (const ConfigError &e) {
		if (e.key() == key)
			throw;
		throw ConfigError(key, e.what());
	}
}

std::string fmt_real(double v) {
	char buf[32];
	std::snprintf(buf, sizeof buf, "%.17g", v);
	return buf;
}

using Setter = std::function<void(RunConfig &, const std::string &)>;

struct Pending {
	std::string replaced_layers = "all";
};

std::map<std::string, std::map<std::string, Setter>> setters(Pending &pending) {
	std::map<std::string, std::map<std::string, Setter>> s;
	auto &m = s["model"];
	m["depth"] = [](RunConfig &c, const std::string &v) { c.model.depth = to_uint("depth", v); };
	m["dim"] = [](RunConfig &c, const std::string &v) { c.model.dim = to_uint("dim", v); };
	m["heads"] = [](RunConfig &c, const std::string &v) { c.model.heads = to_uint("heads", v); };
	m["expansion"] = [](RunConfig &c, const std::string &v) { c.model.expansion = to_uint("expansion", v); };
	m["ffn_variant"] = [](RunConfig &c, const std::string &v) { c.model.ffn_variant = wrap("ffn_variant", [&] { return parse_ffn_variant(v); }); };
	m["num_experts"] = [](RunConfig &c, const std::string &v) { c.model.num_experts = to_uint("num_experts", v); };
	m["top_k"] = [](RunConfig &c, const std::string &v) { c.model.top_k = to_uint("top_k", v); };
	m["momentum"] = [](RunConfig &c, const std::string &v) { c.model.momentum = to_real("momentum", v); };
	m["replaced_layers"] = [&pending](RunConfig &, const std::string &v) { pending.replaced_layers = v; };
	m["shared_router"] = [](RunConfig &c, const std::string &v) { c.model.shared_router = to_bool("shared_router", v); };
	m["expert_init"] = [](RunConfig &c, const std::string &v) { c.model.expert_init = wrap("expert_init", [&] { return parse_expert_init(v); }); };
	m["bank_order"] = [](RunConfig &c, const std::string &v) { c.model.bank_order = wrap("bank_order", [&] { return parse_bank_order(v); }); };
	m["freeze_fusion_weights"] = [](RunConfig &c, const std::string &v) {
		c.model.freeze_fusion_weights = to_bool("freeze_fusion_weights", v);
	};

	auto &t = s["task"];
	t["kind"] = [](RunConfig &c, const std::string &v) { c.task.kind = parse_task_kind(v); };
	t["seq_len"] = [](RunConfig &c, const std::string &v) { c.task.seq_len = to_uint("seq_len", v); };
	t["batch_size"] = [](RunConfig &c, const std::string &v) { c.task.batch_size = to_uint("batch_size", v); };
	t["classes"] = [](RunConfig &c, const std::string &v) { c.task.classes = to_uint("classes", v); };
	t["vocab"] = [](RunConfig &c, const std::string &v) { c.task.vocab = to_uint("vocab", v); };
	t["noise"] = [](RunConfig &c, const std::string &v) { c.task.noise = to_real("noise", v); };
	t["train_size"] = [](RunConfig &c, const std::string &v) { c.task.train_size = to_uint("train_size", v); };
	t["val_size"] = [](RunConfig &c, const std::string &v) { c.task.val_size = to_uint("val_size", v); };
	t["text_path"] = [](RunConfig &c, const std::string &v) { c.task.text_path = v; };
	t["val_fraction"] = [](RunConfig &c, const std::string &v) { c.task.val_fraction = to_real("val_fraction", v); };
	t["max_val_windows"] = [](RunConfig &c, const std::string &v) { c.task.max_val_windows = to_uint("max_val_windows", v); };

	auto &r = s["train"];
	r["steps"] = [](RunConfig &c, const std::string &v) { c.train.steps = to_uint("steps", v); };
	r["warmup_steps"] = [](RunConfig &c, const std::string &v) { c.train.warmup_steps = to_uint("warmup_steps", v); };
	r["lr"] = [](RunConfig &c, const std::string &v) { c.train.lr = to_real("lr", v); };
	r["min_lr"] = [](RunConfig &c, const std::string &v) { c.train.min_lr = to_real("min_lr", v); };
	r["weight_decay"] = [](RunConfig &c, const std::string &v) { c.train.adam.weight_decay = to_real("weight_decay", v); };
	r["beta1"] = [](RunConfig &c, const std::string &v) { c.train.adam.beta1 = to_real("beta1", v); };
	r["beta2"] = [](RunConfig &c, const std::string &v) { c.train.adam.beta2 = to_real("beta2", v); };
	r["eps"] = [](RunConfig &c, const std::string &v) { c.train.adam.eps = to_real("eps", v); };
	r["clip_norm"] = [](RunConfig &c, const std::string &v) { c.train.adam.clip_norm = to_real("clip_norm", v); };
	r["log_interval"] = [](RunConfig &c, const std::string &v) { c.train.log_interval = to_uint("log_interval", v); };
	r["checkpoint_interval"] = [](RunConfig &c, const std::string &v) { c.train.checkpoint_interval = to_uint("checkpoint_interval", v); };
	r["stop_after"] = [](RunConfig &c, const std::string &v) { c.train.stop_after = to_uint("stop_after", v); };
	r["seed"] = [](RunConfig &c, const std::string &v) { c.seed = to_uint("seed", v); };
	r["deterministic"] = [](RunConfig &c, const std::string &v) { c.deterministic = to_bool("deterministic", v); };
	r["dtype"] = [](RunConfig &c, const std::string &v) { c.dtype = parse_precision(v); };
	r["out"] = [](RunConfig &c, const std::string &v) { c.out_dir = v; };

	auto &b = s["bench"];
	b["steps"] = [](RunConfig &c, const std::string &v) { c.bench.steps = to_uint("bench.steps", v); };
	b["warmup"] = [](RunConfig &c, const std::string &v) { c.bench.warmup = to_uint("bench.warmup", v); };
	b["variants"] = [](RunConfig &c, const std::string &v) {
		c.bench.variants.clear();
		std::stringstream ss(v);
		for (std::string item; std::getline(ss, item, ',');)
			c.bench.variants.push_back(wrap("bench.variants", [&] { return parse_ffn_variant(trim(item)); }));
	};
	return s;
}

std::set<std::size_t> parse_layers(const std::string &v, std::size_t depth) {
	std::set<std::size_t> out;
	if (v == "none")
		return out;
	if (v == "all") {
		for (std::size_t l = 0; l < depth; l++)
			out.insert(l);
		return out;
	}
	std::stringstream ss(v);
	for (std::string item; std::getline(ss, item, ',');) {
		const std::size_t l = to_uint("replaced_layers", trim(item));
		if (l >= depth)
			throw ConfigError("replaced_layers", "layer " + std::to_string(l) + " out of range for depth " + std::to_string(depth));
		out.insert(l);
	}
	return out;
}

std::string layers_string(const ModelSpec &m) {
	if (m.replaced_layers.empty())
		return "none";
	if (m.replaced_layers.size() == m.depth)
		return "all";
	std::string s;
	for (std::size_t l : m.replaced_layers)
		s += (s.empty() ? "" : ",") + std::to_string(l);
	return s;
}

} // namespace

RunConfig parse_config(std::string_view text) {
	namespace pt = boost::property_tree;
	pt::ptree tree;
	std::istringstream in{std::string(text)};
	try {
		pt::ini_parser::read_ini(in, tree);
	} catch (const pt::ini_parser_error &e) {
		throw ConfigError("config", std::string("line ") + std::to_string(e.line()) + ": " + e.message());
	}
	RunConfig config;
	Pending pending;
	const auto table = setters(pending);
	for (const auto &[section, body] : tree) {
		auto sec = table.find(section);
		if (!body.data().empty())
			throw ConfigError(section, "key outside any section");
		if (sec == table.end())
			throw ConfigError(section, "unknown section");
		for (const auto &[key, node] : body) {
			auto it = sec->second.find(key);
			if (it == sec->second.end())
				throw ConfigError(section + "." + key, "unknown key");
			it->second(config, trim(node.data()));
		}
	}
	config.model.replaced_layers = parse_layers(trim(pending.replaced_layers), config.model.depth);
	config.resolve();
	return config;
}

RunConfig load_config(const std::filesystem::path &path) {
	std::ifstream in(path);
	if (!in)
		throw ConfigError("config", "cannot read " + path.string());
	std::ostringstream ss;
	ss << in.rdbuf();
	return parse_config(ss.str());
}

std::string to_ini(const RunConfig &c) {
	std::ostringstream o;
	const ModelSpec &m = c.model;
	o << "[model]\n"
	  << "depth = " << m.depth << "\n"
	  << "dim = " << m.dim << "\n"
	  << "heads = " << m.heads << "\n"
	  << "expansion = " << m.expansion << "\n"
	  << "ffn_variant = " << to_string(m.ffn_variant) << "\n"
	  << "num_experts = " << m.num_experts << "\n"
	  << "top_k = " << m.top_k << "\n"
	  << "momentum = " << fmt_real(m.momentum) << "\n"
	  << "replaced_layers = " << layers_string(m) << "\n"
	  << "shared_router = " << (m.shared_router ? "true" : "false") << "\n"
	  << "expert_init = " << to_string(m.expert_init) << "\n"
	  << "bank_order = " << to_string(m.bank_order) << "\n"
	  << "freeze_fusion_weights = " << (m.freeze_fusion_weights ? "true" : "false") << "\n\n";
	const TaskSpec &t = c.task;
	o << "[task]\n"
	  << "kind = " << to_string(t.kind) << "\n"
	  << "seq_len = " << t.seq_len << "\n"
	  << "batch_size = " << t.batch_size << "\n"
	  << "classes = " << t.classes << "\n"
	  << "vocab = " << t.vocab << "\n"
	  << "noise = " << fmt_real(t.noise) << "\n"
	  << "train_size = " << t.train_size << "\n"
	  << "val_size = " << t.val_size << "\n";
	if (!t.text_path.empty())
		o << "text_path = " << t.text_path << "\n";
	o << "val_fraction = " << fmt_real(t.val_fraction) << "\n"
	  << "max_val_windows = " << t.max_val_windows << "\n\n";
	const TrainOptions &r = c.train;
	o << "[train]\n"
	  << "steps = " << r.steps << "\n"
	  << "warmup_steps = " << r.warmup_steps << "\n"
	  << "lr = " << fmt_real(r.lr) << "\n"
	  << "min_lr = " << fmt_real(r.min_lr) << "\n"
	  << "weight_decay = " << fmt_real(r.adam.weight_decay) << "\n"
	  << "beta1 = " << fmt_real(r.adam.beta1) << "\n"
	  << "beta2 = " << fmt_real(r.adam.beta2) << "\n"
	  << "eps = " << fmt_real(r.adam.eps) << "\n"
	  << "clip_norm = " << fmt_real(r.adam.clip_norm) << "\n"
	  << "log_interval = " << r.log_interval << "\n"
	  << "checkpoint_interval = " << r.checkpoint_interval << "\n"
	  << "stop_after = " << r.stop_after << "\n"
	  << "seed = " << c.seed << "\n"
	  << "deterministic = " << (c.deterministic ? "true" : "false") << "\n"
	  << "dtype = " << to_string(c.dtype) << "\n"
	  << "out = " << c.out_dir << "\n\n";
	o << "[bench]\n"
	  << "steps = " << c.bench.steps << "\n"
	  << "warmup = " << c.bench.warmup << "\n"
	  << "variants = ";
	for (std::size_t i = 0; i < c.bench.variants.size(); i++)
		o << (i ? "," : "") << to_string(c.bench.variants[i]);
	o << "\n";
	return o.str();
}

} // namespace exfusion
