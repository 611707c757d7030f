#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

namespace exfusion {

/// Invalid configuration value. key() names the offending field.
class ConfigError : public std::invalid_argument {
public:
	ConfigError(std::string key, const std::string &reason) :
			std::invalid_argument(key + ": " + reason), key_(std::move(key)) {
	}
	const std::string &key() const noexcept { return key_; }

private:
	std::string key_;
};

enum class FfnVariant { Dense, TopKMoE, ExFusionSW, ExFusionDW, ExFusionMB };
enum class HeadKind { Classification, LanguageModel };
enum class ExpertInit { Independent, Replicate };
/// Memory-bank ordering within a training step.
enum class BankOrder { UpdateThenFuse, FuseThenUpdate };

std::string_view to_string(FfnVariant v);
std::string_view to_string(HeadKind h);
std::string_view to_string(ExpertInit e);
std::string_view to_string(BankOrder o);
FfnVariant parse_ffn_variant(std::string_view s);
HeadKind parse_head_kind(std::string_view s);
ExpertInit parse_expert_init(std::string_view s);
BankOrder parse_bank_order(std::string_view s);

bool is_exfusion(FfnVariant v) noexcept;

struct ModelSpec {
	std::size_t depth = 4;
	std::size_t dim = 128;
	std::size_t heads = 4;
	std::size_t expansion = 4;
	std::size_t vocab = 128;
	std::size_t classes = 0; ///< used by classification heads
	std::size_t max_seq_len = 64;
	HeadKind head = HeadKind::LanguageModel;
	FfnVariant ffn_variant = FfnVariant::Dense;
	std::size_t num_experts = 4;
	std::size_t top_k = 1;
	double momentum = 0.95;
	std::set<std::size_t> replaced_layers; ///< FFN slots using ffn_variant; others stay dense
	bool shared_router = true;
	ExpertInit expert_init = ExpertInit::Independent;
	BankOrder bank_order = BankOrder::UpdateThenFuse;
	bool freeze_fusion_weights = false;
	std::uint64_t seed = 0;

	/// Throws ConfigError naming the first invalid field.
	void validate() const;
	bool is_replaced(std::size_t layer) const { return ffn_variant != FfnVariant::Dense && replaced_layers.contains(layer); }
	std::size_t hidden() const noexcept { return dim * expansion; }
	std::size_t head_dim() const noexcept { return dim / heads; }
	std::size_t output_dim() const noexcept { return head == HeadKind::Classification ? classes : vocab; }
	void replace_all_layers();
};

/// Closed-form parameter count of the dense model with this spec's shape.
std::size_t dense_parameter_count(const ModelSpec &spec);

} // namespace exfusion
