#include "cprobe/sae/sae.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"
#include "cprobe/core/kernels.h"
#include "cprobe/core/optim.h"
#include "cprobe/core/rng.h"

namespace cprobe {

namespace {

constexpr char kMagic[8] = {'C', 'P', 'S', 'A', 'E', 'v', 'm', '\0'};
constexpr std::uint32_t kVersion = 1;
// Rows pushed through the dense path at once; bounds the latent buffer.
constexpr std::size_t kChunkRows = 1024;

void check_dim(const SaeModel& model, std::size_t got, const char* what) {
  if (got != model.config.input_dim) {
    throw DimensionError(std::string(what) + ": expected rows of " + std::to_string(model.config.input_dim) +
                         " values, got " + std::to_string(got));
  }
}

// Pre-activations → relu → top-k, in place on `z` ([n×h]).
void activate(const SaeModel& model, std::span<const float> rows, std::size_t n, std::vector<float>& z) {
  const std::size_t in = model.config.input_dim;
  const std::size_t h = model.config.resolved_hidden_dim();
  const std::size_t k = model.config.k;
  std::vector<float> x(rows.begin(), rows.end());
  if (!model.center.empty()) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < in; ++j) x[r * in + j] -= model.center[j];
  }
  z.assign(n * h, 0.0f);
  kernels::omp::matmul_nn(n, in, h, x.data(), model.params.w_enc.data().data(), z.data(), false);
  const auto b = model.params.b_enc.data();
  const auto rows_i = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * h >= kernels::kParallelGrain)
  for (std::int64_t r = 0; r < rows_i; ++r) {
    float* zr = z.data() + r * h;
    for (std::size_t j = 0; j < h; ++j) zr[j] = std::max(0.0f, zr[j] + b[j]);
    const auto keep = kernels::omp::top_k_indices(std::span<const float>(zr, h), k);
    std::vector<float> kept(k);
    for (std::size_t i = 0; i < k; ++i) kept[i] = zr[keep[i]];
    std::fill(zr, zr + h, 0.0f);
    for (std::size_t i = 0; i < k; ++i) zr[keep[i]] = kept[i];
  }
}

void decode_dense(const SaeModel& model, const std::vector<float>& z, std::size_t n, float* out) {
  const std::size_t in = model.config.input_dim;
  const std::size_t h = model.config.resolved_hidden_dim();
  kernels::omp::matmul_nn(n, h, in, z.data(), model.params.w_dec.data().data(), out, false);
  const auto b = model.params.b_dec.data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < in; ++j) {
      out[r * in + j] += b[j] + (model.center.empty() ? 0.0f : model.center[j]);
    }
  }
}

void check_set(const SaeConfig& config, const ActivationSet& set, const char* what) {
  if (set.rows() == 0) throw InputError(std::string(what) + " activation set is empty");
  if (set.dim != config.input_dim) {
    throw InputError(std::string(what) + " activations have dim " + std::to_string(set.dim) + ", SAE expects " +
                     std::to_string(config.input_dim));
  }
}

double reconstruction_mse(const SaeModel& model, const ActivationSet& set) {
  return evaluate_sae(model, set).mse;
}

}  // namespace

std::size_t SaeConfig::depth_scaled_hidden(std::uint32_t layer, std::size_t input_dim) {
  if (layer <= 2) return 3 * input_dim;
  if (layer <= 5) return 4 * input_dim;
  return 5 * input_dim;
}

void SaeConfig::validate() const {
  if (layer == 0) throw ConfigError("sae.layer is 1-based; got 0");
  if (input_dim == 0) throw ConfigError("sae.input_dim must be positive");
  const std::size_t h = resolved_hidden_dim();
  if (k < 1 || k > h) {
    throw ConfigError("sae.k=" + std::to_string(k) + " must lie in [1, " + std::to_string(h) + "]");
  }
  if (max_epochs == 0) throw ConfigError("sae.max_epochs must be positive");
  if (patience == 0) throw ConfigError("sae.patience must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("sae.lr must be positive");
  if (batch_size == 0) throw ConfigError("sae.batch_size must be positive");
}

std::vector<float> LatentCode::dense() const {
  std::vector<float> out(hidden_dim, 0.0f);
  for (std::size_t i = 0; i < indices.size(); ++i) out.at(indices[i]) = values[i];
  return out;
}

SaeModel SaeModel::initialize(const SaeConfig& config) {
  config.validate();
  const std::size_t in = config.input_dim, h = config.resolved_hidden_dim();
  Rng rng(config.seed);
  std::vector<float> dec(h * in), enc(in * h);
  for (std::size_t i = 0; i < h; ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < in; ++j) {
      const double v = rng.normal(0.0, 1.0);
      dec[i * in + j] = static_cast<float>(v);
      norm += v * v;
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(norm));
    for (std::size_t j = 0; j < in; ++j) dec[i * in + j] *= inv;
  }
  kernels::omp::transpose(h, in, dec.data(), enc.data());
  SaeModel m;
  m.config = config;
  m.params.w_enc = Tensor<float>({in, h}, std::move(enc), true);
  m.params.b_enc = Tensor<float>::zeros({h}, true);
  m.params.w_dec = Tensor<float>({h, in}, std::move(dec), true);
  m.params.b_dec = Tensor<float>::zeros({in}, true);
  return m;
}

LatentCode sae_encode(const SaeModel& model, std::span<const float> x) {
  check_dim(model, x.size(), "sae_encode");
  std::vector<float> z;
  activate(model, x, 1, z);
  LatentCode code;
  code.hidden_dim = z.size();
  // Recomputing the selection on the masked row keeps zero-valued slots
  // (fewer than k positive pre-activations) at the same indices.
  const auto keep = kernels::omp::top_k_indices(std::span<const float>(z), model.config.k);
  for (auto i : keep) {
    code.indices.push_back(static_cast<std::uint32_t>(i));
    code.values.push_back(z[i]);
  }
  return code;
}

std::vector<float> sae_decode(const SaeModel& model, const LatentCode& code) {
  const std::size_t h = model.config.resolved_hidden_dim();
  if (code.hidden_dim != h) {
    throw DimensionError("sae_decode: code has " + std::to_string(code.hidden_dim) + " latents, SAE has " +
                         std::to_string(h));
  }
  std::vector<float> out(model.config.input_dim);
  decode_dense(model, code.dense(), 1, out.data());
  return out;
}

std::vector<float> sae_encode_batch(const SaeModel& model, std::span<const float> rows, std::size_t n) {
  check_dim(model, n ? rows.size() / n : model.config.input_dim, "sae_encode_batch");
  if (rows.size() != n * model.config.input_dim) throw DimensionError("sae_encode_batch: ragged input");
  std::vector<float> z;
  activate(model, rows, n, z);
  return z;
}

std::vector<float> sae_reconstruct_batch(const SaeModel& model, std::span<const float> rows, std::size_t n) {
  const std::size_t in = model.config.input_dim;
  if (rows.size() != n * in) throw DimensionError("sae_reconstruct_batch: expected " + std::to_string(n * in) + " values");
  std::vector<float> out(n * in);
  std::vector<float> z;
  for (std::size_t begin = 0; begin < n; begin += kChunkRows) {
    const std::size_t m = std::min(kChunkRows, n - begin);
    activate(model, rows.subspan(begin * in, m * in), m, z);
    decode_dense(model, z, m, out.data() + begin * in);
  }
  return out;
}

bool EarlyStopping::update(double val_loss) {
  ++epochs_;
  if (!best_ || val_loss < *best_ - min_delta_) {
    best_ = val_loss;
    best_epoch_ = epochs_;
    stale_ = 0;
    last_improved_ = true;
  } else {
    ++stale_;
    last_improved_ = false;
  }
  return stale_ >= patience_;
}

SaeTrainResult train_sae(const SaeConfig& config, const ActivationSet& train, const ActivationSet& val,
                         const std::function<void(const SaeEpochRecord&)>& on_epoch) {
  config.validate();
  check_set(config, train, "training");
  check_set(config, val, "validation");
  const std::size_t in = config.input_dim;
  const std::size_t n = train.rows();

  SaeTrainResult result;
  SaeModel model = SaeModel::initialize(config);
  if (config.center) {
    model.center.assign(in, 0.0f);
    std::vector<double> acc(in, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < in; ++j) acc[j] += train.data[r * in + j];
    for (std::size_t j = 0; j < in; ++j) model.center[j] = static_cast<float>(acc[j] / static_cast<double>(n));
  }

  auto params = model.parameters();
  AdamWState<float> adam;
  adam.lr = config.lr;
  adam.weight_decay = 0.0;
  // Shuffling draws from a stream distinct from the initializer's.
  Rng rng(config.seed ^ 0x5AE5AE5AE5AE5AE5ULL);
  std::vector<std::size_t> order(n);
  // Patience counts min_delta improvements, but the returned weights are
  // those of the lowest validation MSE seen, however small the gain.
  std::vector<std::vector<float>> best_weights;
  double best_mse = INFINITY;
  EarlyStopping stopper(config.patience);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    double sq_sum = 0.0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t m = std::min(config.batch_size, n - begin);
      std::vector<float> x(m * in);
      for (std::size_t r = 0; r < m; ++r) {
        const auto row = train.row(order[begin + r]);
        for (std::size_t j = 0; j < in; ++j) {
          x[r * in + j] = row[j] - (model.center.empty() ? 0.0f : model.center[j]);
        }
      }
      const Tensor<float> xt({m, in}, std::move(x));
      auto loss = mse_loss(sae_reconstruct(model.params, sae_latents(model.params, xt, config.k)), xt);
      const double l = loss.item();
      if (!std::isfinite(l)) {
        throw DivergenceError("SAE layer " + std::to_string(config.layer) + ": non-finite loss in epoch " +
                              std::to_string(epoch));
      }
      sq_sum += l * static_cast<double>(m);
      zero_grads(params);
      loss.backward();
      adamw_step(params, adam);
    }

    SaeEpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = sq_sum / static_cast<double>(n);
    rec.val_mse = reconstruction_mse(model, val);
    if (!std::isfinite(rec.val_mse)) {
      throw DivergenceError("SAE layer " + std::to_string(config.layer) + ": non-finite validation loss in epoch " +
                            std::to_string(epoch));
    }
    const bool stop = stopper.update(rec.val_mse);
    rec.improved = stopper.last_improved();
    if (rec.val_mse < best_mse) {
      best_mse = rec.val_mse;
      result.best_epoch = epoch;
      best_weights.clear();
      for (const auto& p : params) best_weights.emplace_back(p.data().begin(), p.data().end());
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stop) {
      result.stopped_early = epoch < config.max_epochs;
      break;
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(best_weights[i].begin(), best_weights[i].end(), params[i].data().begin());
    params[i].zero_grad();
  }
  result.model = std::move(model);
  result.best_val_mse = best_mse;
  return result;
}

SaeMetrics reconstruction_metrics(std::span<const float> inputs, std::span<const float> recon, std::size_t dim) {
  if (dim == 0 || inputs.size() != recon.size() || inputs.size() % dim != 0) {
    throw DimensionError("reconstruction_metrics: inputs and reconstructions must both be rows × " +
                         std::to_string(dim));
  }
  SaeMetrics m;
  m.rows = inputs.size() / dim;
  if (m.rows == 0) throw InputError("reconstruction_metrics: no rows");
  double sq = 0.0, cos_sum = 0.0;
  std::size_t cos_rows = 0;
  for (std::size_t r = 0; r < m.rows; ++r) {
    double dot = 0, nx = 0, ny = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double x = inputs[r * dim + j], y = recon[r * dim + j];
      sq += (x - y) * (x - y);
      dot += x * y;
      nx += x * x;
      ny += y * y;
    }
    if (nx == 0.0 || ny == 0.0) {
      ++m.zero_norm_rows;
      continue;
    }
    cos_sum += dot / (std::sqrt(nx) * std::sqrt(ny));
    ++cos_rows;
  }
  m.mse = sq / static_cast<double>(inputs.size());
  if (cos_rows == 0) throw UndefinedMetricError("cosine similarity undefined: every row has a zero-norm side");
  m.cosine = cos_sum / static_cast<double>(cos_rows);
  return m;
}

SaeMetrics evaluate_sae(const SaeModel& model, const ActivationSet& set) {
  if (set.rows() == 0) throw InputError("cannot evaluate an SAE on an empty activation set");
  check_dim(model, set.dim, "evaluate_sae");
  const auto recon = sae_reconstruct_batch(model, set.data, set.rows());
  return reconstruction_metrics(set.data, recon, set.dim);
}

void save_sae(const SaeModel& model, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw InputError("cannot open " + path + " for writing");
  BinaryWriter w(file);
  const auto& c = model.config;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  w.u32(c.layer);
  w.u64(c.input_dim);
  w.u64(c.hidden_dim);
  w.u64(c.k);
  w.u64(c.max_epochs);
  w.u64(c.patience);
  w.f64(c.lr);
  w.u64(c.batch_size);
  w.u64(c.seed);
  w.u32(c.center ? 1 : 0);
  const std::pair<const char*, const Tensor<float>*> tensors[] = {
      {"w_enc", &model.params.w_enc}, {"b_enc", &model.params.b_enc},
      {"w_dec", &model.params.w_dec}, {"b_dec", &model.params.b_dec}};
  for (const auto& [name, t] : tensors) {
    w.string(name);
    w.u32(static_cast<std::uint32_t>(t->ndim()));
    for (auto e : t->shape()) w.u64(e);
    w.floats(t->data());
  }
  w.u64(model.center.size());
  w.floats(model.center);
  if (!file) throw InputError("failed writing " + path);
}

SaeModel load_sae(const std::string& path) {
  const auto image = read_file_bytes(path);
  BinaryReader r(image);
  char magic[sizeof(kMagic)];
  r.bytes(magic, sizeof(magic), "magic");
  if (!std::equal(magic, magic + sizeof(magic), kMagic)) {
    throw FormatError(path + ": bad magic; expected an SAE checkpoint", 0);
  }
  const auto version_at = r.offset();
  if (const auto v = r.u32("version"); v != kVersion) {
    throw FormatError(path + ": unsupported SAE checkpoint version " + std::to_string(v), version_at);
  }
  SaeConfig c;
  const auto config_at = r.offset();
  c.layer = r.u32("config.layer");
  c.input_dim = r.u64("config.input_dim");
  c.hidden_dim = r.u64("config.hidden_dim");
  c.k = r.u64("config.k");
  c.max_epochs = r.u64("config.max_epochs");
  c.patience = r.u64("config.patience");
  c.lr = r.f64("config.lr");
  c.batch_size = r.u64("config.batch_size");
  c.seed = r.u64("config.seed");
  c.center = r.u32("config.center") != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": invalid config: " + e.what(), config_at);
  }
  const std::size_t in = c.input_dim, h = c.resolved_hidden_dim();
  if (in > (1u << 20) || h > (1u << 22)) throw FormatError(path + ": implausible SAE dimensions", config_at);

  SaeModel m;
  m.config = c;
  const std::pair<const char*, Shape> expected[] = {{"w_enc", {in, h}}, {"b_enc", {h}}, {"w_dec", {h, in}}, {"b_dec", {in}}};
  Tensor<float>* slots[] = {&m.params.w_enc, &m.params.b_enc, &m.params.w_dec, &m.params.b_dec};
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& [want_name, want_shape] = expected[i];
    const auto at = r.offset();
    const auto name = r.string("tensor name", 64);
    if (name != want_name) throw FormatError(path + ": expected tensor " + want_name + ", found " + name, at);
    const auto shape_at = r.offset();
    const auto rank = r.u32("tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank && d < 8; ++d) shape.push_back(r.u64("tensor extent"));
    if (shape != want_shape) {
      throw FormatError(path + ": tensor " + name + " has shape " + shape_string(shape) + ", config implies " +
                            shape_string(want_shape),
                        shape_at);
    }
    std::vector<float> data(shape_numel(shape));
    r.floats(data, "tensor data");
    *slots[i] = Tensor<float>(shape, std::move(data), true);
  }
  const auto center_at = r.offset();
  const auto center_len = r.u64("center length");
  if (center_len != (c.center ? in : 0)) throw FormatError(path + ": center vector does not match the config", center_at);
  m.center.resize(center_len);
  r.floats(m.center, "center");
  if (r.remaining() != 0) {
    throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes", r.offset());
  }
  return m;
}

}  // namespace cprobe
