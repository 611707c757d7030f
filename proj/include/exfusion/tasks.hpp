#pragma once

#include "exfusion/model_spec.hpp"
#include "exfusion/transformer.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace exfusion {

enum class TaskKind { SyntheticCluster, CharLM };

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

struct TaskSpec {
	TaskKind kind = TaskKind::SyntheticCluster;
	std::size_t seq_len = 8;
	std::size_t batch_size = 64;
	// SyntheticCluster
	std::size_t classes = 4;
	std::size_t vocab = 16;
	double noise = 1.0; ///< std of the per-token perturbation around a class center
	std::size_t train_size = 4096;
	std::size_t val_size = 512;
	// CharLM
	std::string text_path; ///< empty: bundled corpus
	double val_fraction = 0.1;
	std::size_t max_val_windows = 64;

	void validate() const;
	HeadKind head() const { return kind == TaskKind::CharLM ? HeadKind::LanguageModel : HeadKind::Classification; }
	/// Vocabulary the model must accept.
	std::size_t model_vocab() const { return kind == TaskKind::CharLM ? 128 : vocab; }
	std::size_t model_classes() const { return kind == TaskKind::CharLM ? 0 : classes; }
};

/// Public-domain English text used when no text file is configured.
std::string_view bundled_corpus();

/// Deterministic data source. Training batches are a pure function of
/// (seed, step), so resuming needs no data-order state.
class Task {
public:
	virtual ~Task() = default;
	virtual const TaskSpec &spec() const = 0;
	virtual TokenBatch train_batch(std::uint64_t step) const = 0;
	/// Fixed validation set, split into batches of at most batch_size rows.
	virtual const std::vector<TokenBatch> &val_batches() const = 0;
	/// Fractional pass count over the training data after `step` steps.
	virtual double epoch(std::uint64_t step) const = 0;
};

std::unique_ptr<Task> make_task(const TaskSpec &spec, std::uint64_t seed);

/// Class centers of the SyntheticCluster task: [classes][seq_len], values in [0, vocab - 1].
std::vector<std::vector<double>> cluster_centers(const TaskSpec &spec, std::uint64_t seed);

/// Maps text to ids in [0, 128); non-ASCII bytes become '?'.
std::vector<std::int32_t> encode_ascii(std::string_view text);

/// Validation metric: accuracy for classification, perplexity for LM.
struct EvalResult {
	double loss = 0; ///< mean cross-entropy over every target
	double accuracy = 0;
	double perplexity = 0;
	double metric(HeadKind head) const { return head == HeadKind::LanguageModel ? perplexity : accuracy; }
};

template<typename T>
EvalResult evaluate(Transformer<T> &model, const std::vector<TokenBatch> &batches);

} // namespace exfusion
