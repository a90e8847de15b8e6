#include "cprobe/gpt/gpt.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"

namespace cprobe {

namespace {

constexpr char kMagic[8] = {'C', 'P', 'G', 'P', 'T', 'v', 'm', '\0'};
constexpr std::uint32_t kVersion = 1;

// Visits every weight slot in checkpoint order.
template <typename Weights, typename F>
void for_each_slot(Weights& w, F&& f) {
  f("tok_emb.weight", w.tok_emb);
  f("pos_emb.weight", w.pos_emb);
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    auto& b = w.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f(p + "ln1.gain", b.ln1_gain);
    f(p + "ln1.bias", b.ln1_bias);
    f(p + "attn.query.weight", b.attn.w_query);
    f(p + "attn.query.bias", b.attn.b_query);
    f(p + "attn.key.weight", b.attn.w_key);
    f(p + "attn.key.bias", b.attn.b_key);
    f(p + "attn.value.weight", b.attn.w_value);
    f(p + "attn.value.bias", b.attn.b_value);
    f(p + "attn.out.weight", b.attn.w_out);
    f(p + "attn.out.bias", b.attn.b_out);
    f(p + "ln2.gain", b.ln2_gain);
    f(p + "ln2.bias", b.ln2_bias);
    f(p + "ff.fc1.weight", b.ff_w1);
    f(p + "ff.fc1.bias", b.ff_b1);
    f(p + "ff.fc2.weight", b.ff_w2);
    f(p + "ff.fc2.bias", b.ff_b2);
  }
  f("lnf.gain", w.lnf_gain);
  f("lnf.bias", w.lnf_bias);
  f("head.weight", w.head_w);
  f("head.bias", w.head_b);
}

GptWeights empty_weights(const GptConfig& c) {
  GptWeights w;
  w.blocks.resize(c.layers);
  return w;
}

GptWeights initial_weights(const GptConfig& c) {
  GptWeights w = empty_weights(c);
  const auto shapes = GptModel::parameter_shapes(c);
  Rng rng(c.seed);
  std::size_t i = 0;
  for_each_slot(w, [&](const std::string& name, Tensor<float>& t) {
    const Shape& shape = shapes[i++].second;
    std::vector<float> data(shape_numel(shape), 0.0f);
    if (name.ends_with(".gain")) {
      std::fill(data.begin(), data.end(), 1.0f);
    } else if (!name.ends_with(".bias")) {
      for (auto& v : data) v = static_cast<float>(rng.normal(0.0, kInitStddev));
    }
    t = Tensor<float>(shape, std::move(data), true);
  });
  return w;
}

Tensor<float> maybe_dropout(const Tensor<float>& x, double p, const ForwardOptions& o) {
  if (!o.training || p == 0.0) return x;
  if (!o.rng) throw ConfigError("training-mode forward with dropout needs a random generator");
  return dropout(x, p, *o.rng, true);
}

}  // namespace

void GptConfig::validate() const {
  if (vocab_size == 0 || embed_dim == 0 || layers == 0 || heads == 0 || context_length == 0) {
    throw ConfigError("model extents (vocab, embed_dim, layers, heads, context) must be positive");
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("dropout must lie in [0, 1), got " + std::to_string(dropout));
  }
}

std::vector<std::pair<std::string, Shape>> GptModel::parameter_shapes(const GptConfig& c) {
  const std::size_t d = c.embed_dim, v = c.vocab_size;
  std::vector<std::pair<std::string, Shape>> out;
  auto w = empty_weights(c);
  for_each_slot(w, [&](const std::string& name, Tensor<float>&) {
    Shape shape;
    if (name == "tok_emb.weight") {
      shape = {v, d};
    } else if (name == "pos_emb.weight") {
      shape = {c.context_length, d};
    } else if (name == "head.weight") {
      shape = {d, v};
    } else if (name == "head.bias") {
      shape = {v};
    } else if (name.ends_with("fc1.weight")) {
      shape = {d, 4 * d};
    } else if (name.ends_with("fc1.bias")) {
      shape = {4 * d};
    } else if (name.ends_with("fc2.weight")) {
      shape = {4 * d, d};
    } else if (name.ends_with(".weight")) {
      shape = {d, d};
    } else {
      shape = {d};
    }
    out.emplace_back(name, std::move(shape));
  });
  return out;
}

GptModel::GptModel(const GptConfig& config) : config_(config) {
  config_.validate();
  weights_ = initial_weights(config_);
}

GptModel::GptModel(const GptConfig& config, GptWeights weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  const auto shapes = parameter_shapes(config_);
  if (weights_.blocks.size() != config_.layers) {
    throw ConfigError("weights hold " + std::to_string(weights_.blocks.size()) + " blocks, config " +
                      std::to_string(config_.layers));
  }
  std::size_t i = 0;
  for_each_slot(weights_, [&](const std::string& name, Tensor<float>& t) {
    const Shape& want = shapes[i++].second;
    if (!t.defined() || t.shape() != want) {
      throw DimensionError(name + " should be " + shape_string(want) + ", got " +
                           (t.defined() ? shape_string(t.shape()) : std::string("nothing")));
    }
  });
}

std::vector<NamedTensor> GptModel::named_parameters() const {
  std::vector<NamedTensor> out;
  for_each_slot(weights_, [&](const std::string& name, const Tensor<float>& t) { out.emplace_back(name, t); });
  return out;
}

std::vector<Tensor<float>> GptModel::parameters() const {
  std::vector<Tensor<float>> out;
  for_each_slot(weights_, [&](const std::string&, const Tensor<float>& t) { out.push_back(t); });
  return out;
}

std::size_t GptModel::parameter_count() const {
  std::size_t n = 0;
  for_each_slot(weights_, [&](const std::string&, const Tensor<float>& t) { n += t.numel(); });
  return n;
}

GptModel GptModel::clone() const {
  GptWeights copy = empty_weights(config_);
  auto src = parameters();
  std::size_t i = 0;
  for_each_slot(copy, [&](const std::string&, Tensor<float>& t) {
    const auto& s = src[i++];
    t = Tensor<float>(s.shape(), std::vector<float>(s.data().begin(), s.data().end()), s.requires_grad());
  });
  return GptModel(config_, std::move(copy));
}

Tensor<float> GptModel::forward(std::span<const std::int32_t> ids, const ForwardOptions& options) const {
  return forward_batch(ids, ids.size(), options);
}

Tensor<float> GptModel::forward_batch(std::span<const std::int32_t> ids, std::size_t seq_len,
                                      const ForwardOptions& options) const {
  if (ids.empty() || seq_len == 0) throw InputError("forward needs at least one token");
  if (seq_len > config_.context_length) {
    throw LengthError("sequence of " + std::to_string(seq_len) + " tokens exceeds the context of " +
                      std::to_string(config_.context_length));
  }
  if (ids.size() % seq_len != 0) {
    throw DimensionError(std::to_string(ids.size()) + " ids do not form whole sequences of " +
                         std::to_string(seq_len));
  }
  std::vector<std::int32_t> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<std::int32_t>(i % seq_len);

  const auto& w = weights_;
  auto x = add(embedding(w.tok_emb, ids), embedding(w.pos_emb, std::span<const std::int32_t>(positions)));
  x = maybe_dropout(x, config_.dropout, options);
  if (options.trace) {
    options.trace->layers.clear();
    options.trace->attention.clear();
  }
  for (const auto& b : w.blocks) {
    Tensor<float> probs;
    auto h = layer_norm(x, b.ln1_gain, b.ln1_bias, kLayerNormEps);
    auto a = causal_self_attention(h, b.attn, config_.heads, seq_len,
                                   options.trace && options.capture_attention ? &probs : nullptr);
    x = add(x, maybe_dropout(a, config_.dropout, options));
    auto h2 = layer_norm(x, b.ln2_gain, b.ln2_bias, kLayerNormEps);
    auto f = linear(gelu(linear(h2, b.ff_w1, b.ff_b1)), b.ff_w2, b.ff_b2);
    x = add(x, maybe_dropout(f, config_.dropout, options));
    if (options.trace) {
      options.trace->layers.push_back(x);
      if (options.capture_attention) options.trace->attention.push_back(probs);
    }
  }
  return linear(layer_norm(x, w.lnf_gain, w.lnf_bias, kLayerNormEps), w.head_w, w.head_b);
}

std::vector<std::int32_t> generate(const GptModel& model, std::span<const std::int32_t> prompt,
                                   std::size_t max_new, double temperature, std::uint64_t seed) {
  if (prompt.empty()) throw InputError("generation needs a non-empty prompt");
  if (!(temperature >= 0.0)) throw ConfigError("temperature must be non-negative");
  const std::size_t ctx = model.config().context_length;
  if (prompt.size() + max_new > ctx) {
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(max_new) +
                      " new tokens exceeds the context of " + std::to_string(ctx));
  }
  NoGradGuard no_grad;
  Rng rng(seed);
  std::vector<std::int32_t> out(prompt.begin(), prompt.end());
  const std::size_t v = model.config().vocab_size;
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto logits = model.forward(out);
    const auto last = logits.data().subspan((out.size() - 1) * v, v);
    std::size_t pick = 0;
    if (temperature == 0.0) {
      pick = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
    } else {
      const double top = *std::max_element(last.begin(), last.end());
      std::vector<double> weights(v);
      double total = 0;
      for (std::size_t i = 0; i < v; ++i) {
        weights[i] = std::exp((static_cast<double>(last[i]) - top) / temperature);
        total += weights[i];
      }
      double u = rng.uniform() * total;
      pick = v - 1;
      for (std::size_t i = 0; i < v; ++i) {
        if (u < weights[i]) {
          pick = i;
          break;
        }
        u -= weights[i];
      }
    }
    out.push_back(static_cast<std::int32_t>(pick));
  }
  return out;
}

void save_model(const GptModel& model, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw InputError("cannot open " + path + " for writing");
  BinaryWriter w(file);
  const auto& c = model.config();
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  w.u64(c.vocab_size);
  w.u64(c.embed_dim);
  w.u64(c.layers);
  w.u64(c.heads);
  w.f64(c.dropout);
  w.u64(c.context_length);
  w.u64(c.seed);
  const auto params = model.named_parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.string(name);
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (auto e : t.shape()) w.u64(e);
    w.floats(t.data());
  }
  if (!file) throw InputError("failed writing " + path);
}

GptModel load_model(const std::string& path) {
  const auto image = read_file_bytes(path);
  BinaryReader r(image);
  char magic[sizeof(kMagic)];
  r.bytes(magic, sizeof(magic), "magic");
  if (!std::equal(magic, magic + sizeof(magic), kMagic)) {
    throw FormatError(path + ": bad magic; expected a model checkpoint", 0);
  }
  const auto version_at = r.offset();
  if (const auto version = r.u32("version"); version != kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version), version_at);
  }
  GptConfig c;
  const auto config_at = r.offset();
  c.vocab_size = r.u64("config.vocab_size");
  c.embed_dim = r.u64("config.embed_dim");
  c.layers = r.u64("config.layers");
  c.heads = r.u64("config.heads");
  c.dropout = r.f64("config.dropout");
  c.context_length = r.u64("config.context_length");
  c.seed = r.u64("config.seed");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": invalid config: " + e.what(), config_at);
  }
  if (c.layers > 4096) throw FormatError(path + ": implausible layer count", config_at);
  const auto expected = GptModel::parameter_shapes(c);
  const auto count_at = r.offset();
  if (r.u32("tensor count") != expected.size()) {
    throw FormatError(path + ": tensor count does not match the config", count_at);
  }
  GptWeights w = empty_weights(c);
  std::size_t i = 0;
  for_each_slot(w, [&](const std::string&, Tensor<float>& t) {
    const auto& [want_name, want_shape] = expected[i++];
    const auto at = r.offset();
    const auto name = r.string("tensor name", 1024);
    if (name != want_name) throw FormatError(path + ": expected tensor " + want_name + ", found " + name, at);
    const auto ndim_at = r.offset();
    if (r.u32("tensor rank") != want_shape.size()) {
      throw FormatError(path + ": rank mismatch for " + name, ndim_at);
    }
    for (auto e : want_shape) {
      const auto extent_at = r.offset();
      if (r.u64("tensor extent") != e) throw FormatError(path + ": shape mismatch for " + name, extent_at);
    }
    std::vector<float> data(shape_numel(want_shape));
    r.bytes(data.data(), data.size() * sizeof(float), name.c_str());
    t = Tensor<float>(want_shape, std::move(data), true);
  });
  if (r.remaining() != 0) throw FormatError(path + ": trailing bytes after the last tensor", r.offset());
  return GptModel(c, std::move(w));
}

}  // namespace cprobe
