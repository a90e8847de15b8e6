#pragma once

// Next-token training loop and perplexity evaluation.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cprobe/gpt/gpt.h"

namespace cprobe {

struct TrainRunConfig {
  double lr = 3e-4;
  double weight_decay = 3e-2;
  std::size_t batch_size = 8;
  std::size_t steps = 1000;
  std::size_t eval_interval = 100;
  // Validation windows scored at every log point.
  std::size_t eval_windows = 16;
  // Tokens per training window; 0 means the model context (shortened to
  // fit a stream smaller than the context).
  std::size_t seq_len = 0;
  std::uint64_t seed = 0;
  // When set, best.ckpt (lowest validation loss) and last.ckpt go here.
  std::string checkpoint_dir;

  void validate() const;
};

struct TrainLogRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over the steps since the previous record
  std::optional<double> val_loss;
  std::size_t tokens_seen = 0;
  double wall_ms = 0.0;
};

struct TrainResult {
  std::vector<TrainLogRecord> log;
  std::optional<double> best_val_loss;
  std::size_t best_step = 0;
  // Per-step training losses, in order.
  std::vector<double> step_losses;
};

// Samples batch_size windows uniformly (with replacement) per step and
// minimizes next-token cross-entropy with AdamW at a constant rate. Throws
// DivergenceError on a non-finite loss, InputError when a stream is too
// short for one window.
TrainResult train_lm(GptModel& model, std::span<const std::int32_t> train_ids,
                     std::span<const std::int32_t> val_ids, const TrainRunConfig& config,
                     const std::function<void(const TrainLogRecord&)>& on_log = {});

// Mean next-token negative log-likelihood (nats) over `ids`, scoring each
// target once. Windows of up to context_length tokens start every `stride`
// tokens (0 means the context length, i.e. non-overlapping); the final
// partial window is included.
double mean_nll(const GptModel& model, std::span<const std::int32_t> ids, std::size_t stride = 0);

// exp(mean_nll). Throws InputError for streams shorter than two tokens.
double perplexity(const GptModel& model, std::span<const std::int32_t> ids, std::size_t stride = 0);

void write_train_log(const std::string& path, const std::vector<TrainLogRecord>& log);

}  // namespace cprobe
