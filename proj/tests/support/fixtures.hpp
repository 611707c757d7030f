#pragma once

#include "exfusion/transformer.hpp"

#include <random>

namespace exfusion::testing {

inline ModelSpec tiny_spec(FfnVariant variant, HeadKind head = HeadKind::Classification, std::uint64_t seed = 1) {
	ModelSpec s;
	s.depth = 2;
	s.dim = 8;
	s.heads = 2;
	s.expansion = 2;
	s.vocab = 11;
	s.classes = 3;
	s.max_seq_len = 6;
	s.head = head;
	s.ffn_variant = variant;
	s.num_experts = 3;
	s.top_k = 2;
	s.seed = seed;
	s.replace_all_layers();
	return s;
}

inline TokenBatch random_batch(const ModelSpec &spec, std::size_t batch, std::size_t seq, std::uint64_t seed) {
	std::mt19937_64 rng(seed);
	std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(spec.vocab) - 1);
	TokenBatch b;
	b.batch = batch;
	b.seq = seq;
	for (std::size_t i = 0; i < batch * seq; i++)
		b.tokens.push_back(tok(rng));
	if (spec.head == HeadKind::Classification) {
		std::uniform_int_distribution<std::int32_t> cls(0, static_cast<std::int32_t>(spec.classes) - 1);
		for (std::size_t i = 0; i < batch; i++)
			b.targets.push_back(cls(rng));
	} else {
		for (std::size_t i = 0; i < batch * seq; i++)
			b.targets.push_back(tok(rng));
	}
	return b;
}

/// Adds uniform noise to every tensor (buffers included, kept in [0, 1/N]) so
/// gradient checks see non-degenerate values.
template<typename T>
void perturb_parameters(Transformer<T> &model, std::uint64_t seed, double amplitude = 0.3) {
	std::mt19937_64 rng(seed);
	std::uniform_real_distribution<double> noise(-amplitude, amplitude);
	for (auto &p : model.parameters()) {
		if (p->kind == ParamKind::Buffer) {
			std::uniform_real_distribution<double> bank(0.0, 1.0 / double(p->value.size()));
			for (T &v : p->value.data())
				v = static_cast<T>(bank(rng));
			continue;
		}
		for (T &v : p->value.data())
			v = static_cast<T>(v + noise(rng));
	}
}

} // namespace exfusion::testing
