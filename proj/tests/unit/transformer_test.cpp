#include "exfusion/transformer.hpp"

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace exfusion;
using namespace exfusion::testing;

namespace {

template<typename T>
AttentionParams<T> attention_params(ParameterStore<T> &store, std::size_t d, std::uint64_t seed) {
	AttentionParams<T> p;
	p.query = add_affine(store, "q", d, d, seed);
	p.key = add_affine(store, "k", d, d, seed);
	p.value = add_affine(store, "v", d, d, seed);
	p.output = add_affine(store, "o", d, d, seed);
	for (auto &param : store) {
		std::mt19937_64 rng(seed + param->value.size());
		param->value = random_tensor(param->value.shape(), rng).template cast<T>();
	}
	return p;
}

} // namespace

TEST(Attention, SingleTokenReturnsProjectedValue) {
	ParameterStore<double> store;
	auto p = attention_params(store, 4, 3);
	std::mt19937_64 rng(1);
	Tape<double> tape;
	auto x = tape.leaf(random_tensor({1, 1, 4}, rng));
	auto out = attention_forward(x, p, 2, false);
	// v = x Wv + bv, out = v Wo + bo
	const auto &X = x.value();
	std::vector<double> v(4), expect(4);
	for (std::size_t j = 0; j < 4; j++) {
		v[j] = p.value.bias->value[j];
		for (std::size_t i = 0; i < 4; i++)
			v[j] += X[i] * p.value.weight->value[i * 4 + j];
	}
	for (std::size_t j = 0; j < 4; j++) {
		expect[j] = p.output.bias->value[j];
		for (std::size_t i = 0; i < 4; i++)
			expect[j] += v[i] * p.output.weight->value[i * 4 + j];
	}
	for (std::size_t j = 0; j < 4; j++)
		EXPECT_NEAR(out.output.value()[j], expect[j], 1e-12);
	for (double w : out.weights.value().data())
		EXPECT_EQ(w, 1.0);
}

TEST(Attention, IdenticalTokensGiveIdenticalOutputs) {
	ParameterStore<double> store;
	auto p = attention_params(store, 6, 5);
	std::mt19937_64 rng(2);
	Tensor<double> token = random_tensor({6}, rng);
	Tensor<double> x({1, 5, 6});
	for (std::size_t t = 0; t < 5; t++)
		std::copy(token.data().begin(), token.data().end(), x.raw() + t * 6);
	Tape<double> tape;
	auto out = attention_forward(tape.leaf(x), p, 3, false).output.value();
	for (std::size_t t = 1; t < 5; t++)
		for (std::size_t j = 0; j < 6; j++)
			EXPECT_NEAR(out[t * 6 + j], out[j], 1e-12);
}

TEST(Attention, WeightRowsSumToOne) {
	ParameterStore<float> store;
	auto p = attention_params(store, 8, 7);
	std::mt19937_64 rng(3);
	for (bool causal : {false, true}) {
		Tape<float> tape;
		auto w = attention_forward(tape.leaf(random_tensor({3, 5, 8}, rng, -2, 2).cast<float>()), p, 2, causal).weights;
		ASSERT_EQ(w.shape(), (Shape{3, 2, 5, 5}));
		for (std::size_t r = 0; r < 3 * 2 * 5; r++) {
			double total = 0;
			for (std::size_t j = 0; j < 5; j++)
				total += w.value()[r * 5 + j];
			EXPECT_NEAR(total, 1.0, 1e-6);
		}
	}
}

TEST(Attention, GradientCheck) {
	ParameterStore<double> store;
	auto p = attention_params(store, 4, 9);
	std::mt19937_64 rng(4);
	const double err = max_grad_error<double>({random_tensor({2, 3, 4}, rng)}, [&](auto &tape, const auto &v) {
		using U = typename std::remove_reference_t<decltype(tape)>::value_type;
		if constexpr (std::is_same_v<U, double>) {
			std::mt19937_64 r(1);
			auto y = attention_forward(v[0], p, 2, true).output;
			return sum(mul(y, tape.constant(random_tensor(y.shape(), r))));
		} else {
			return v[0];
		}
	});
	EXPECT_LT(err, 1e-8);
}

TEST(Ffn, ZeroWeightsGiveZero) {
	ParameterStore<float> store;
	DenseFFNParams<float> p{add_affine(store, "up", 4, 8, 0), add_affine(store, "down", 8, 4, 0)};
	p.up.weight->value.fill(0);
	p.down.weight->value.fill(0);
	std::mt19937_64 rng(0);
	Tape<float> tape;
	for (float v : ffn_forward(tape.leaf(random_tensor({2, 3, 4}, rng).cast<float>()), p).value().data())
		EXPECT_EQ(v, 0.0f);
}

TEST(Ffn, IdentityExpertsPassLargePositiveInputs) {
	ParameterStore<double> store;
	DenseFFNParams<double> p{add_affine(store, "up", 3, 3, 0), add_affine(store, "down", 3, 3, 0)};
	p.up.weight->value = Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
	p.down.weight->value = p.up.weight->value;
	Tape<double> tape;
	auto x = tape.leaf(Tensor<double>({1, 3}, {8, 12, 20}));
	auto y = ffn_forward(x, p).value();
	for (std::size_t j = 0; j < 3; j++)
		EXPECT_NEAR(y[j], x.value()[j], 1e-6);
}

TEST(Ffn, GradientCheckOverParameters) {
	for (std::uint64_t seed = 0; seed < 5; seed++) {
		std::mt19937_64 rng(seed);
		const double err = max_grad_error<double>(
				{random_tensor({5, 4}, rng), random_tensor({4, 6}, rng), random_tensor({6}, rng), random_tensor({6, 4}, rng), random_tensor({4}, rng)},
				[](auto &, const auto &v) { return sum(ffn_forward(v[0], {v[1], v[2]}, {v[3], v[4]})); });
		EXPECT_LT(err, 1e-8);
	}
}

TEST(Block, ZeroedSublayersAreIdentity) {
	ModelSpec spec = tiny_spec(FfnVariant::Dense);
	Transformer<double> model(spec);
	for (auto &p : model.parameters())
		if (p->name.rfind("layers.0.", 0) == 0)
			p->value.fill(0);
	std::mt19937_64 rng(5);
	Tape<double> tape;
	auto x = tape.leaf(random_tensor({2, 4, 8}, rng));
	auto y = model.block_forward(x, 0, {});
	EXPECT_TRUE(y.value() == x.value());
}

TEST(Model, DenseEqualsSingleExpertStaticFusionExactly) {
	for (HeadKind head : {HeadKind::Classification, HeadKind::LanguageModel}) {
		ModelSpec dense_spec = tiny_spec(FfnVariant::Dense, head, 42);
		ModelSpec sw_spec = tiny_spec(FfnVariant::ExFusionSW, head, 42);
		sw_spec.num_experts = 1;
		sw_spec.top_k = 1;
		Transformer<float> dense(dense_spec), sw(sw_spec);
		const TokenBatch batch = random_batch(dense_spec, 3, 5, 7);
		EXPECT_TRUE(dense.logits(batch) == sw.logits(batch));
	}
}

TEST(Model, NoReplacedLayersMatchesDenseForEveryVariant) {
	const ModelSpec dense_spec = tiny_spec(FfnVariant::Dense, HeadKind::LanguageModel, 9);
	Transformer<float> dense(dense_spec);
	const TokenBatch batch = random_batch(dense_spec, 2, 6, 3);
	const Tensor<float> reference = dense.logits(batch);
	for (FfnVariant v : {FfnVariant::TopKMoE, FfnVariant::ExFusionSW, FfnVariant::ExFusionDW, FfnVariant::ExFusionMB}) {
		ModelSpec spec = tiny_spec(v, HeadKind::LanguageModel, 9);
		spec.replaced_layers.clear();
		Transformer<float> model(spec);
		EXPECT_EQ(model.parameter_count(), dense.parameter_count());
		EXPECT_TRUE(model.logits(batch) == reference) << to_string(v);
	}
}

TEST(Model, ParameterAuditMatchesClosedForm) {
	for (HeadKind head : {HeadKind::Classification, HeadKind::LanguageModel}) {
		ModelSpec spec = tiny_spec(FfnVariant::Dense, head);
		EXPECT_EQ(Transformer<float>(spec).parameter_count(), dense_parameter_count(spec));
		spec.depth = 4;
		spec.dim = 128;
		spec.heads = 4;
		spec.expansion = 4;
		spec.vocab = 128;
		spec.max_seq_len = 64;
		EXPECT_EQ(Transformer<float>(spec).parameter_count(), dense_parameter_count(spec));
	}
}

TEST(Model, OutputShapesAndDeterminism) {
	const ModelSpec cls = tiny_spec(FfnVariant::ExFusionMB, HeadKind::Classification);
	const ModelSpec lm = tiny_spec(FfnVariant::ExFusionMB, HeadKind::LanguageModel);
	Transformer<float> a(cls), b(cls), c(lm);
	const TokenBatch batch = random_batch(cls, 4, 5, 1);
	EXPECT_EQ(a.logits(batch).shape(), (Shape{4, 3}));
	EXPECT_EQ(c.logits(random_batch(lm, 4, 5, 1)).shape(), (Shape{4, 5, 11}));
	EXPECT_TRUE(a.logits(batch) == b.logits(batch));
	EXPECT_TRUE(a.logits(batch) == a.logits(batch));
}

TEST(Model, OutOfVocabularyTokenThrows) {
	const ModelSpec spec = tiny_spec(FfnVariant::Dense);
	Transformer<float> model(spec);
	TokenBatch batch = random_batch(spec, 1, 3, 0);
	batch.tokens[1] = 11;
	EXPECT_THROW(model.logits(batch), std::out_of_range);
	batch = random_batch(spec, 1, 7, 0);
	EXPECT_THROW(model.logits(batch), DimensionError);
}

TEST(Model, InitialLossIsNearUniformPrediction) {
	ModelSpec spec = tiny_spec(FfnVariant::ExFusionSW);
	spec.classes = 10;
	Transformer<float> model(spec);
	const TokenBatch batch = random_batch(spec, 64, 6, 11);
	Tape<float> tape;
	const double loss = model.loss(tape, batch).value().item();
	EXPECT_NEAR(loss, std::log(10.0), 0.1 * std::log(10.0));
}

TEST(Model, CausalLogitsIgnoreFutureTokens) {
	for (FfnVariant v : {FfnVariant::Dense, FfnVariant::TopKMoE, FfnVariant::ExFusionDW, FfnVariant::ExFusionMB}) {
		const ModelSpec spec = tiny_spec(v, HeadKind::LanguageModel, 4);
		Transformer<double> model(spec);
		perturb_parameters(model, 8);
		TokenBatch batch = random_batch(spec, 1, 6, 2);
		const Tensor<double> before = model.logits(batch);
		batch.tokens[4] = (batch.tokens[4] + 1) % 11;
		batch.tokens[5] = (batch.tokens[5] + 3) % 11;
		const Tensor<double> after = model.logits(batch);
		for (std::size_t i = 0; i < 4 * 11; i++)
			EXPECT_EQ(before[i], after[i]) << to_string(v);
		double moved = 0;
		for (std::size_t i = 4 * 11; i < before.size(); i++)
			moved += std::abs(before[i] - after[i]);
		EXPECT_GT(moved, 0.0);
	}
}

TEST(Model, FullGradientCheckEveryVariant) {
	for (FfnVariant v : {FfnVariant::Dense, FfnVariant::TopKMoE, FfnVariant::ExFusionSW, FfnVariant::ExFusionDW, FfnVariant::ExFusionMB}) {
		for (HeadKind head : {HeadKind::Classification, HeadKind::LanguageModel}) {
			ModelSpec spec = tiny_spec(v, head, 3);
			Transformer<double> f64(spec);
			perturb_parameters(f64, 5);
			const TokenBatch batch = random_batch(spec, 2, 4, 6);
			EXPECT_LT(model_grad_error(f64, batch, true), 1e-8) << to_string(v);
			Transformer<float> f32 = cast_model<float>(f64);
			EXPECT_LT(model_grad_error(f32, batch, true), 1e-4) << to_string(v);
		}
	}
}
