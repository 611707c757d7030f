#include "exfusion/ops.hpp"

#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace exfusion;
using namespace exfusion::testing;

namespace {

template<typename T>
std::vector<T> values(const Var<T> &v) {
	return {v.value().data().begin(), v.value().data().end()};
}

// Weighted sum with fixed random weights, so every output element carries a
// distinct gradient.
template<typename U>
Var<U> project(const Var<U> &y, std::uint64_t seed) {
	std::mt19937_64 rng(seed);
	return sum(mul(y, y.tape().constant(as<U>(random_tensor(y.shape(), rng)))));
}

template<typename T>
class OpsTest : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(OpsTest, Precisions);

} // namespace

TEST(Matmul, IdentityAndProjector) {
	Tape<double> tape;
	auto eye = tape.leaf(Tensor<double>({2, 2}, {1, 0, 0, 1}));
	auto m = tape.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}));
	EXPECT_EQ(values(matmul(eye, m)), (std::vector<double>{1, 2, 3, 4}));
	auto proj = tape.leaf(Tensor<double>({2, 2}, {1, 0, 0, 0}));
	auto n = tape.leaf(Tensor<double>({2, 2}, {5, 6, 7, 8}));
	EXPECT_EQ(values(matmul(proj, n)), (std::vector<double>{5, 6, 0, 0}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
	Tape<float> tape;
	auto a = tape.leaf(Tensor<float>({3, 4}));
	auto b = tape.leaf(Tensor<float>({5, 2}));
	try {
		matmul(a, b);
		FAIL() << "expected DimensionError";
	} catch (const DimensionError &e) {
		EXPECT_NE(std::string(e.what()).find("[3, 4]"), std::string::npos);
		EXPECT_NE(std::string(e.what()).find("[5, 2]"), std::string::npos);
	}
}

TEST(Matmul, BatchedMatchesPerSliceProduct) {
	std::mt19937_64 rng(3);
	Tape<double> tape;
	auto a = tape.leaf(random_tensor({2, 3, 4}, rng));
	auto b = tape.leaf(random_tensor({2, 4, 5}, rng));
	auto c = matmul(a, b);
	ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
	for (std::size_t s = 0; s < 2; s++)
		for (std::size_t i = 0; i < 3; i++)
			for (std::size_t j = 0; j < 5; j++) {
				double ref = 0;
				for (std::size_t k = 0; k < 4; k++)
					ref += a.value()[(s * 3 + i) * 4 + k] * b.value()[(s * 4 + k) * 5 + j];
				EXPECT_NEAR(c.value()[(s * 3 + i) * 5 + j], ref, 1e-12);
			}
}

TYPED_TEST(OpsTest, MatmulSumGradientMatchesFiniteDifferences) {
	std::mt19937_64 rng(7);
	const double err = max_grad_error<TypeParam>({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
			[](auto &, const auto &v) { return sum(matmul(v[0], v[1])); });
	EXPECT_LT(err, grad_tolerance<TypeParam>());
}

TEST(Elementwise, AddScaleAndBiasBroadcast) {
	Tape<double> tape;
	auto a = tape.leaf(Tensor<double>({2}, {1, 2}));
	auto b = tape.leaf(Tensor<double>({2}, {3, 4}));
	EXPECT_EQ(values(add(a, b)), (std::vector<double>{4, 6}));
	EXPECT_EQ(values(scale(a, 0.5)), (std::vector<double>{0.5, 1.0}));
	auto zeros = tape.leaf(Tensor<double>({2, 3}));
	auto row = tape.leaf(Tensor<double>({3}, {1, 2, 3}));
	EXPECT_EQ(values(add(zeros, row)), (std::vector<double>{1, 2, 3, 1, 2, 3}));
}

TEST(Elementwise, NonBroadcastableShapesThrow) {
	Tape<float> tape;
	auto a = tape.leaf(Tensor<float>({2, 3}));
	auto b = tape.leaf(Tensor<float>({2}));
	EXPECT_THROW(add(a, b), DimensionError);
	EXPECT_THROW(mul(a, b), DimensionError);
}

TEST(Elementwise, BroadcastGradientSumsOverBroadcastAxes) {
	Tape<double> tape;
	auto x = tape.leaf(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
	auto bias = tape.leaf(Tensor<double>({3}, {0, 0, 0}));
	auto col = tape.leaf(Tensor<double>({2, 1}, {2, 3}));
	tape.backward(sum(mul(add(x, bias), col)));
	EXPECT_EQ(bias.grad().data()[0], 5.0);
	EXPECT_EQ(col.grad()[0], 6.0);
	EXPECT_EQ(col.grad()[1], 15.0);
}

TYPED_TEST(OpsTest, ElementwiseGradientsOverSeeds) {
	for (std::uint64_t seed = 0; seed < 100; seed++) {
		std::mt19937_64 rng(seed);
		const double err = max_grad_error<TypeParam>({random_tensor({2, 3}, rng), random_tensor({3}, rng), random_tensor({2, 1}, rng)},
				[seed](auto &, const auto &v) { return project(scale(sub(mul(add(v[0], v[1]), v[2]), v[1]), 0.7), seed); });
		ASSERT_LT(err, grad_tolerance<TypeParam>()) << "seed " << seed;
	}
}

TEST(Gelu, ZeroAsymptoteAndExactForm) {
	Tape<double> tape;
	auto x = tape.leaf(Tensor<double>({3}, {0.0, 10.0, -1.0}));
	auto y = values(gelu(x));
	EXPECT_EQ(y[0], 0.0);
	EXPECT_NEAR(y[1], 10.0, 1e-6);
	EXPECT_NEAR(y[2], -1.0 * 0.5 * (1.0 + std::erf(-1.0 / std::numbers::sqrt2)), 1e-15);
}

TYPED_TEST(OpsTest, GeluGradientAtPointSevenAndRandom) {
	EXPECT_LT(max_grad_error<TypeParam>({Tensor<double>({1}, {0.7})}, [](auto &, const auto &v) { return sum(gelu(v[0])); }),
			grad_tolerance<TypeParam>());
	for (std::uint64_t seed = 0; seed < 100; seed++) {
		std::mt19937_64 rng(seed);
		ASSERT_LT(max_grad_error<TypeParam>({random_tensor({6}, rng, -3, 3)}, [seed](auto &, const auto &v) { return project(gelu(v[0]), seed); }),
				grad_tolerance<TypeParam>());
	}
}

TEST(Softmax, UniformAndShiftInvariance) {
	Tape<double> tape;
	for (double v : values(softmax(tape.leaf(Tensor<double>({4})), 0)))
		EXPECT_DOUBLE_EQ(v, 0.25);
	for (double c : {-50.0, 0.0, 3.0, 700.0}) {
		auto y = values(softmax(tape.leaf(Tensor<double>({2}, {c, c + std::log(2.0)})), 0));
		EXPECT_NEAR(y[0], 1.0 / 3.0, 1e-12);
		EXPECT_NEAR(y[1], 2.0 / 3.0, 1e-12);
	}
}

TEST(Softmax, RowsSumToOneOnAnyAxis) {
	std::mt19937_64 rng(11);
	Tape<float> tape;
	auto x = tape.leaf(as<float>(random_tensor({3, 4, 5}, rng, -10, 10)));
	for (std::size_t axis = 0; axis < 3; axis++) {
		auto y = softmax(x, axis);
		const Shape &s = y.shape();
		const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? 5 : 20);
		const std::size_t outer = y.value().size() / (s[axis] * inner);
		for (std::size_t o = 0; o < outer; o++)
			for (std::size_t in = 0; in < inner; in++) {
				double total = 0;
				for (std::size_t j = 0; j < s[axis]; j++)
					total += y.value()[(o * s[axis] + j) * inner + in];
				EXPECT_NEAR(total, 1.0, 1e-6);
			}
	}
}

TYPED_TEST(OpsTest, SoftmaxJacobianVectorProduct) {
	for (std::uint64_t seed = 0; seed < 100; seed++) {
		std::mt19937_64 rng(seed);
		ASSERT_LT(max_grad_error<TypeParam>({random_tensor({3, 5}, rng, -2, 2)},
						  [seed](auto &, const auto &v) { return project(softmax(v[0], seed % 2), seed); }),
				grad_tolerance<TypeParam>());
	}
}

TYPED_TEST(OpsTest, CausalSoftmaxMasksFutureAndDifferentiates) {
	std::mt19937_64 rng(5);
	Tape<double> tape;
	auto y = causal_softmax(tape.leaf(random_tensor({2, 4, 4}, rng)));
	for (std::size_t m = 0; m < 2; m++)
		for (std::size_t i = 0; i < 4; i++) {
			double total = 0;
			for (std::size_t j = 0; j < 4; j++) {
				const double v = y.value()[(m * 4 + i) * 4 + j];
				if (j > i)
					EXPECT_EQ(v, 0.0);
				total += v;
			}
			EXPECT_NEAR(total, 1.0, 1e-12);
		}
	for (std::uint64_t seed = 0; seed < 100; seed++) {
		std::mt19937_64 r(seed);
		ASSERT_LT(max_grad_error<TypeParam>({random_tensor({1, 3, 3}, r, -2, 2)},
						  [seed](auto &, const auto &v) { return project(causal_softmax(v[0]), seed); }),
				grad_tolerance<TypeParam>());
	}
}

TEST(LayerNorm, ConstantRowMapsToBiasAndMeansMatch) {
	Tape<double> tape;
	auto gain = tape.leaf(Tensor<double>({4}, 1.0));
	auto zero = tape.leaf(Tensor<double>({4}, 0.0));
	for (double v : values(layernorm(tape.leaf(Tensor<double>({2, 4}, 3.5)), gain, zero, 1e-5)))
		EXPECT_EQ(v, 0.0);

	std::mt19937_64 rng(2);
	auto bias = tape.leaf(random_tensor({4}, rng));
	auto x = tape.leaf(random_tensor({3, 4}, rng, -5, 5));
	auto plain = layernorm(x, gain, zero, 1e-5);
	auto shifted = layernorm(x, gain, bias, 1e-5);
	for (std::size_t r = 0; r < 3; r++) {
		double mean = 0;
		for (std::size_t j = 0; j < 4; j++) {
			mean += plain.value()[r * 4 + j];
			EXPECT_NEAR(shifted.value()[r * 4 + j] - plain.value()[r * 4 + j], bias.value()[j], 1e-12);
		}
		EXPECT_LT(std::abs(mean / 4), 1e-6);
	}
}

TYPED_TEST(OpsTest, LayerNormGradient) {
	for (std::uint64_t seed = 0; seed < 100; seed++) {
		std::mt19937_64 rng(seed);
		ASSERT_LT(max_grad_error<TypeParam>({random_tensor({3, 5}, rng, -2, 2), random_tensor({5}, rng), random_tensor({5}, rng)},
						  [seed](auto &tape, const auto &v) {
							  using U = typename std::remove_reference_t<decltype(tape)>::value_type;
							  return project(layernorm(v[0], v[1], v[2], U(1e-5)), seed);
						  }),
				grad_tolerance<TypeParam>())
				<< "seed " << seed;
	}
}

TEST(CrossEntropy, UniformConfidentAndErrors) {
	Tape<double> tape;
	const std::vector<std::int32_t> zero{0};
	EXPECT_NEAR(cross_entropy(tape.leaf(Tensor<double>({1, 4})), zero).value().item(), std::log(4.0), 1e-12);
	EXPECT_LT(cross_entropy(tape.leaf(Tensor<double>({1, 4}, {10, 0, 0, 0})), zero).value().item(), 1e-3);
	const std::vector<std::int32_t> bad{4};
	EXPECT_THROW(cross_entropy(tape.leaf(Tensor<double>({1, 4})), bad), std::out_of_range);
}

TYPED_TEST(OpsTest, CrossEntropyGradient) {
	const std::vector<std::int32_t> targets{2, 0, 1};
	for (std::uint64_t seed = 0; seed < 100; seed++) {
		std::mt19937_64 rng(seed);
		ASSERT_LT(max_grad_error<TypeParam>({random_tensor({3, 4}, rng, -3, 3)},
						  [&](auto &, const auto &v) { return cross_entropy(v[0], targets); }),
				grad_tolerance<TypeParam>());
	}
}

TYPED_TEST(OpsTest, ShapeOpsGradients) {
	const std::vector<std::int32_t> rows{2, 0, 2};
	for (std::uint64_t seed = 0; seed < 100; seed++) {
		std::mt19937_64 rng(seed);
		ASSERT_LT(max_grad_error<TypeParam>({random_tensor({2, 3, 4}, rng), random_tensor({3, 4}, rng)},
						  [&](auto &, const auto &v) {
							  auto p = permute(reshape(v[0], {2, 3, 2, 2}), {3, 0, 2, 1});
							  auto g = gather_rows(v[1], rows);
							  auto s = scatter_rows(g, rows, 3);
							  auto c = gather_column(v[1], rows, 1);
							  return add(add(project(p, seed), project(mean_axis(s, 0), seed + 1)), project(mul(g, c), seed + 2));
						  }),
				grad_tolerance<TypeParam>());
	}
}

TEST(Backward, SumAndSquaredNorm) {
	std::mt19937_64 rng(1);
	Parameter<double> w{"w", random_tensor({5}, rng)};
	{
		Tape<double> tape;
		tape.backward(sum(tape.param(w)));
	}
	for (double g : w.grad.data())
		EXPECT_EQ(g, 1.0);
	w.zero_grad();
	{
		Tape<double> tape;
		auto v = tape.param(w);
		tape.backward(scale(sum(mul(v, v)), 0.5));
	}
	for (std::size_t i = 0; i < 5; i++)
		EXPECT_DOUBLE_EQ(w.grad[i], w.value[i]);
}

TEST(Backward, RepeatedCallsAccumulateIntoParameters) {
	Parameter<float> w{"w", Tensor<float>({3}, 2.0f)};
	Tape<float> tape;
	auto loss = sum(tape.param(w));
	tape.backward(loss);
	tape.backward(loss);
	for (float g : w.grad.data())
		EXPECT_EQ(g, 2.0f);
}

TEST(Backward, NonScalarLossThrows) {
	Tape<float> tape;
	auto x = tape.leaf(Tensor<float>({2}));
	EXPECT_THROW(tape.backward(x), DimensionError);
}

TYPED_TEST(OpsTest, TwoLayerMlpGradient) {
	for (std::uint64_t seed = 0; seed < 20; seed++) {
		std::mt19937_64 rng(seed);
		const std::vector<std::int32_t> targets{1, 0, 2, 1};
		ASSERT_LT(max_grad_error<TypeParam>({random_tensor({4, 3}, rng), random_tensor({3, 6}, rng), random_tensor({6}, rng),
														  random_tensor({6, 3}, rng), random_tensor({3}, rng)},
						  [&](auto &, const auto &v) { return cross_entropy(linear(gelu(linear(v[0], v[1], v[2])), v[3], v[4]), targets); }),
				grad_tolerance<TypeParam>());
	}
}

TEST(Tape, NonFiniteValuesRaise) {
	Tape<float> tape;
	Tensor<float> bad({2});
	bad[1] = std::numeric_limits<float>::infinity();
	EXPECT_THROW(tape.leaf(bad), NonFiniteError);
	auto big = tape.leaf(Tensor<float>({1}, 3e38f));
	EXPECT_THROW(scale(big, 10.0f), NonFiniteError);
}

TEST(Tape, DeterministicForwardAndBackward) {
	auto run = [] {
		std::mt19937_64 rng(9);
		Tape<float> tape;
		auto a = tape.leaf(as<float>(random_tensor({16, 32}, rng)));
		auto b = tape.leaf(as<float>(random_tensor({32, 8}, rng)));
		auto y = gelu(matmul(a, b));
		tape.backward(sum(mul(y, y)));
		return std::make_pair(y.value(), a.grad());
	};
	auto [y1, g1] = run();
	auto [y2, g2] = run();
	EXPECT_TRUE(y1 == y2);
	EXPECT_TRUE(g1 == g2);
}
