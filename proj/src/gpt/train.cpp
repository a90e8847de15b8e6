#include "cprobe/gpt/train.h"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"
#include "cprobe/core/optim.h"

namespace cprobe {

namespace {

// Sum of -log softmax(row)[target] in double precision.
double nll_sum(const Tensor<float>& logits, std::span<const std::int32_t> targets) {
  const std::size_t v = logits.cols();
  double total = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto row = logits.data().subspan(r * v, v);
    double top = row[0];
    for (float x : row) top = std::max(top, static_cast<double>(x));
    double z = 0;
    for (float x : row) z += std::exp(static_cast<double>(x) - top);
    total += std::log(z) + top - row[targets[r]];
  }
  return total;
}

// Mean loss over up to `windows` evenly spaced validation windows.
double validation_loss(const GptModel& model, std::span<const std::int32_t> ids, std::size_t seq_len,
                       std::size_t windows) {
  NoGradGuard no_grad;
  const std::size_t span_len = seq_len + 1;
  const std::size_t last_start = ids.size() - span_len;
  windows = std::min(windows, last_start + 1);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < windows; ++w) {
    const std::size_t start = windows == 1 ? 0 : w * last_start / (windows - 1);
    const auto logits = model.forward(ids.subspan(start, seq_len));
    total += nll_sum(logits, ids.subspan(start + 1, seq_len));
    count += seq_len;
  }
  return total / static_cast<double>(count);
}

}  // namespace

void TrainRunConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (eval_interval == 0) throw ConfigError("eval interval must be at least 1");
}

TrainResult train_lm(GptModel& model, std::span<const std::int32_t> train_ids,
                     std::span<const std::int32_t> val_ids, const TrainRunConfig& config,
                     const std::function<void(const TrainLogRecord&)>& on_log) {
  config.validate();
  TrainResult result;
  if (config.steps == 0) return result;

  std::size_t seq_len = config.seq_len ? config.seq_len : model.config().context_length;
  if (!config.seq_len && train_ids.size() > 1) seq_len = std::min(seq_len, train_ids.size() - 1);
  if (seq_len > model.config().context_length) {
    throw ConfigError("training window of " + std::to_string(seq_len) + " exceeds the model context");
  }
  if (train_ids.size() < seq_len + 1) {
    throw InputError("training stream of " + std::to_string(train_ids.size()) +
                     " tokens is too short for one window of " + std::to_string(seq_len));
  }
  const bool have_val = val_ids.size() >= seq_len + 1;
  if (!config.checkpoint_dir.empty()) std::filesystem::create_directories(config.checkpoint_dir);

  AdamWState<float> opt;
  opt.lr = config.lr;
  opt.weight_decay = config.weight_decay;
  auto params = model.parameters();
  Rng window_rng(config.seed);
  Rng dropout_rng(config.seed ^ 0x9E3779B97F4A7C15ull);
  ForwardOptions train_mode;
  train_mode.training = true;
  train_mode.rng = &dropout_rng;

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::int32_t> inputs(config.batch_size * seq_len), targets(inputs.size());
  double loss_since_log = 0;
  std::size_t steps_since_log = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::size_t start = window_rng.below(train_ids.size() - seq_len);
      std::copy_n(train_ids.begin() + start, seq_len, inputs.begin() + b * seq_len);
      std::copy_n(train_ids.begin() + start + 1, seq_len, targets.begin() + b * seq_len);
    }
    zero_grads(params);
    auto loss = softmax_cross_entropy(model.forward_batch(inputs, seq_len, train_mode),
                                      std::span<const std::int32_t>(targets));
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw DivergenceError("non-finite training loss at step " + std::to_string(step) +
                            " (tokens seen " + std::to_string((step - 1) * inputs.size()) + ")");
    }
    loss.backward();
    adamw_step(params, opt);
    result.step_losses.push_back(value);
    loss_since_log += value;
    ++steps_since_log;

    if (step % config.eval_interval != 0 && step != config.steps) continue;
    TrainLogRecord rec;
    rec.step = step;
    rec.train_loss = loss_since_log / static_cast<double>(steps_since_log);
    rec.tokens_seen = step * inputs.size();
    if (have_val) {
      rec.val_loss = validation_loss(model, val_ids, seq_len, config.eval_windows);
      if (!std::isfinite(*rec.val_loss)) {
        throw DivergenceError("non-finite validation loss at step " + std::to_string(step));
      }
      if (!result.best_val_loss || *rec.val_loss < *result.best_val_loss) {
        result.best_val_loss = rec.val_loss;
        result.best_step = step;
        if (!config.checkpoint_dir.empty()) save_model(model, config.checkpoint_dir + "/best.ckpt");
      }
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    loss_since_log = 0;
    steps_since_log = 0;
    result.log.push_back(rec);
    if (on_log) on_log(rec);
  }
  if (!config.checkpoint_dir.empty()) {
    save_model(model, config.checkpoint_dir + "/last.ckpt");
    if (!have_val) save_model(model, config.checkpoint_dir + "/best.ckpt");
  }
  return result;
}

double mean_nll(const GptModel& model, std::span<const std::int32_t> ids, std::size_t stride) {
  if (ids.size() < 2) throw InputError("perplexity needs at least two tokens");
  const std::size_t ctx = model.config().context_length;
  if (stride == 0) stride = ctx;
  if (stride > ctx) throw ConfigError("perplexity stride exceeds the context length");
  NoGradGuard no_grad;
  const std::size_t n_targets = ids.size() - 1;
  double total = 0;
  std::size_t scored = 0;  // targets 1..scored are done
  for (std::size_t begin = 0; scored < n_targets; begin += stride) {
    const std::size_t end = std::min(begin + ctx, n_targets);  // inputs [begin, end)
    const auto logits = model.forward(ids.subspan(begin, end - begin));
    // Window row r predicts target begin + r + 1; skip rows already scored.
    const std::size_t first_row = scored - begin;
    const std::size_t v = logits.cols();
    std::vector<float> rows(logits.data().begin() + first_row * v, logits.data().end());
    Tensor<float> tail({end - begin - first_row, v}, std::move(rows));
    total += nll_sum(tail, ids.subspan(scored + 1, end - scored));
    scored = end;
  }
  return total / static_cast<double>(n_targets);
}

double perplexity(const GptModel& model, std::span<const std::int32_t> ids, std::size_t stride) {
  return std::exp(mean_nll(model, ids, stride));
}

void write_train_log(const std::string& path, const std::vector<TrainLogRecord>& log) {
  std::ostringstream out;
  for (const auto& r : log) {
    nlohmann::json j{{"step", r.step}, {"train_loss", r.train_loss}, {"tokens_seen", r.tokens_seen},
                     {"wall_ms", r.wall_ms}};
    j["val_loss"] = r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json(nullptr);
    out << j.dump() << '\n';
  }
  write_file_text(path, out.str());
}

}  // namespace cprobe
