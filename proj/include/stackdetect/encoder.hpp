#pragma once

// Small encoder-only transformers used as [CLS] feature extractors. The four
// variants differ structurally:
//   standard       absolute positions, independent layers
//   shared_layers  one set of layer weights applied n_layers times
//   reduced_width  a narrower standard encoder
//   relative_bias  no absolute positions; a learned per-head bias indexed by
//                  key-query offset is added to attention scores
// Layers are pre-norm: x += attn(ln1(x)); x += ffn(ln2(x)); then a final norm.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stackdetect/autograd.hpp"
#include "stackdetect/errors.hpp"
#include "stackdetect/matrix.hpp"
#include "stackdetect/tokenizer.hpp"

namespace stackdetect {

enum class EncoderVariant { standard, shared_layers, reduced_width, relative_bias };

inline std::string to_string(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::standard: return "standard";
    case EncoderVariant::shared_layers: return "shared_layers";
    case EncoderVariant::reduced_width: return "reduced_width";
    case EncoderVariant::relative_bias: return "relative_bias";
  }
  return "?";
}

inline EncoderVariant parse_variant(const std::string& s) {
  for (auto v : {EncoderVariant::standard, EncoderVariant::shared_layers, EncoderVariant::reduced_width,
                 EncoderVariant::relative_bias})
    if (to_string(v) == s) return v;
  throw ValidationError("unknown encoder variant '" + s + "'");
}

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::standard;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_len = 256;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;
  double ln_eps = 1e-5;

  void validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_len < 2 || vocab_size == 0) {
      throw ValidationError("encoder config has a zero dimension");
    }
    if (d_model % n_heads != 0) {
      throw ValidationError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                            std::to_string(n_heads));
    }
  }

  // reduced_width must be strictly narrower than the run's standard encoder.
  void validate_against_standard(std::size_t standard_d_model) const {
    if (variant == EncoderVariant::reduced_width && d_model >= standard_d_model) {
      throw ValidationError("reduced_width d_model " + std::to_string(d_model) +
                            " must be smaller than standard d_model " + std::to_string(standard_d_model));
    }
  }

  nlohmann::json to_json() const {
    return {{"variant", to_string(variant)}, {"d_model", d_model}, {"n_layers", n_layers},
            {"n_heads", n_heads},           {"d_ff", d_ff},       {"max_len", max_len},
            {"vocab_size", vocab_size},     {"seed", seed},       {"ln_eps", ln_eps}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.d_ff = j.at("d_ff");
    c.max_len = j.at("max_len");
    c.vocab_size = j.at("vocab_size");
    c.seed = j.at("seed");
    c.ln_eps = j.value("ln_eps", 1e-5);
    c.validate();
    return c;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Derives a variant's config from the run's standard config. reduced_width
// halves d_model and d_ff, halving heads only when needed for divisibility.
inline EncoderConfig variant_config(EncoderVariant v, const EncoderConfig& standard) {
  EncoderConfig c = standard;
  c.variant = v;
  if (v == EncoderVariant::reduced_width) {
    c.d_model = std::max<std::size_t>(1, standard.d_model / 2);
    c.d_ff = std::max<std::size_t>(1, standard.d_ff / 2);
    while (c.n_heads > 1 && c.d_model % c.n_heads != 0) c.n_heads /= 2;
  }
  c.validate();
  return c;
}

struct LayerParams {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, bq, wk, wv, bv, wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter w1, b1, w2, b2;

  void collect(ParameterRefs& out) {
    for (Parameter* p : {&ln1_gain, &ln1_bias, &wq, &bq, &wk, &wv, &bv, &wo, &bo, &ln2_gain, &ln2_bias, &w1,
                         &b1, &w2, &b2})
      out.push_back(p);
  }
};

struct EncoderParams {
  Parameter token_embedding;                 // [vocab_size x d_model]
  std::optional<Parameter> position_table;   // [max_len x d_model], absolute variants
  std::optional<Parameter> relative_bias;    // [n_heads x (2 max_len - 1)], relative_bias variant
  std::vector<LayerParams> layers;           // 1 entry for shared_layers
  Parameter final_gain, final_bias;

  ParameterRefs refs() {
    ParameterRefs out{&token_embedding};
    if (position_table) out.push_back(&*position_table);
    if (relative_bias) out.push_back(&*relative_bias);
    for (auto& l : layers) l.collect(out);
    out.push_back(&final_gain);
    out.push_back(&final_bias);
    return out;
  }

  std::vector<const Parameter*> refs() const {
    auto mutable_refs = const_cast<EncoderParams*>(this)->refs();
    return {mutable_refs.begin(), mutable_refs.end()};
  }
};

// Hidden states of a batch, flattened to [(batch * seq_len) x d_model];
// row b * seq_len + t holds token t of sequence b.
struct HiddenStates {
  Var states;
  std::size_t batch = 0;
  std::size_t seq_len = 0;

  std::size_t d_model() const { return states.cols(); }
  std::span<const double> at(std::size_t b, std::size_t t) const { return states.value().row(b * seq_len + t); }
};

class Encoder {
 public:
  Encoder() = default;

  explicit Encoder(EncoderConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    std::uint64_t stream = 0;
    auto init = [&](const std::string& name, std::size_t r, std::size_t c, InitScheme s) {
      return Parameter(name, seeded_init(r, c, s, derive_seed(cfg_.seed, stream++)));
    };
    const std::size_t d = cfg_.d_model, f = cfg_.d_ff;
    params_.token_embedding = Parameter(
        "embed.token", seeded_init(cfg_.vocab_size, d, InitScheme::uniform_fan_in, derive_seed(cfg_.seed, stream++), d));
    if (cfg_.variant == EncoderVariant::relative_bias) {
      params_.relative_bias = init("embed.relative_bias", cfg_.n_heads, 2 * cfg_.max_len - 1, InitScheme::zeros);
    } else {
      params_.position_table = Parameter("embed.position", seeded_init(cfg_.max_len, d, InitScheme::uniform_fan_in,
                                                                       derive_seed(cfg_.seed, stream++), d));
    }
    const std::size_t stored = cfg_.variant == EncoderVariant::shared_layers ? 1 : cfg_.n_layers;
    for (std::size_t l = 0; l < stored; ++l) {
      const std::string p =
          cfg_.variant == EncoderVariant::shared_layers ? std::string("shared.") : "layer" + std::to_string(l) + ".";
      LayerParams lp{
          init(p + "ln1.gain", 1, d, InitScheme::ones),     init(p + "ln1.bias", 1, d, InitScheme::zeros),
          init(p + "attn.wq", d, d, InitScheme::uniform_fan_in), init(p + "attn.bq", 1, d, InitScheme::zeros),
          init(p + "attn.wk", d, d, InitScheme::uniform_fan_in),
          init(p + "attn.wv", d, d, InitScheme::uniform_fan_in), init(p + "attn.bv", 1, d, InitScheme::zeros),
          init(p + "attn.wo", d, d, InitScheme::uniform_fan_in), init(p + "attn.bo", 1, d, InitScheme::zeros),
          init(p + "ln2.gain", 1, d, InitScheme::ones),     init(p + "ln2.bias", 1, d, InitScheme::zeros),
          init(p + "ffn.w1", d, f, InitScheme::uniform_fan_in),  init(p + "ffn.b1", 1, f, InitScheme::zeros),
          init(p + "ffn.w2", f, d, InitScheme::uniform_fan_in),  init(p + "ffn.b2", 1, d, InitScheme::zeros),
      };
      params_.layers.push_back(std::move(lp));
    }
    params_.final_gain = init("final_ln.gain", 1, d, InitScheme::ones);
    params_.final_bias = init("final_ln.bias", 1, d, InitScheme::zeros);
  }

  const EncoderConfig& config() const { return cfg_; }
  EncoderParams& params() { return params_; }
  const EncoderParams& params() const { return params_; }
  ParameterRefs parameters() { return params_.refs(); }
  std::size_t parameter_count() { return stackdetect::parameter_count(parameters()); }

  // All sequences in a batch share one padded length L <= max_len.
  // position_offset shifts the absolute position of token 0.
  HiddenStates forward(std::span<const TokenSequence> batch, std::size_t position_offset = 0) const {
    if (batch.empty()) throw ValidationError("encoder forward on empty batch");
    const std::size_t L = batch.front().ids.size();
    if (L == 0 || L + position_offset > cfg_.max_len) {
      throw ValidationError("sequence length " + std::to_string(L) + " (offset " + std::to_string(position_offset) +
                            ") exceeds encoder max_len " + std::to_string(cfg_.max_len));
    }
    const std::size_t B = batch.size();
    std::vector<std::size_t> ids, pos;
    std::vector<double> mask;
    ids.reserve(B * L);
    for (const auto& seq : batch) {
      if (seq.ids.size() != L) throw ValidationError("sequences in a batch must share one padded length");
      for (TokenId id : seq.ids) {
        if (id >= cfg_.vocab_size) {
          throw ValidationError("token id " + std::to_string(id) + " >= vocab_size " + std::to_string(cfg_.vocab_size));
        }
        ids.push_back(id);
      }
      auto m = attention_mask(seq);
      mask.insert(mask.end(), m.begin(), m.end());
      for (std::size_t t = 0; t < L; ++t) pos.push_back(position_offset + t);
    }

    Var x = embedding(params_.token_embedding.var(), ids);
    if (params_.position_table) x = add(x, embedding(params_.position_table->var(), pos));
    std::optional<Var> rel;
    if (params_.relative_bias) rel = params_.relative_bias->var();
    const AttentionShape shape{B, L, cfg_.n_heads, cfg_.max_len, position_offset};

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const LayerParams& p = params_.layers[params_.layers.size() == 1 ? 0 : l];
      Var a = layer_norm(x, p.ln1_gain.var(), p.ln1_bias.var(), cfg_.ln_eps);
      Var q = add_row(stackdetect::matmul(a, p.wq.var()), p.bq.var());
      Var k = stackdetect::matmul(a, p.wk.var());
      Var v = add_row(stackdetect::matmul(a, p.wv.var()), p.bv.var());
      Var att = multi_head_attention(q, k, v, mask, shape, rel);
      x = add(x, add_row(stackdetect::matmul(att, p.wo.var()), p.bo.var()));
      Var f = layer_norm(x, p.ln2_gain.var(), p.ln2_bias.var(), cfg_.ln_eps);
      Var h = gelu(add_row(stackdetect::matmul(f, p.w1.var()), p.b1.var()));
      x = add(x, add_row(stackdetect::matmul(h, p.w2.var()), p.b2.var()));
    }
    x = layer_norm(x, params_.final_gain.var(), params_.final_bias.var(), cfg_.ln_eps);
    return {x, B, L};
  }

  nlohmann::json checkpoint_json() const {
    nlohmann::json tensors = nlohmann::json::object();
    for (const Parameter* p : params_.refs()) tensors[p->name()] = tensor_json(p->value());
    return {{"version", 1}, {"config", cfg_.to_json()}, {"tensors", std::move(tensors)}};
  }

  static Encoder from_checkpoint(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != 1) throw SchemaError("unsupported encoder checkpoint version");
      Encoder enc(EncoderConfig::from_json(j.at("config")));
      const auto& tensors = j.at("tensors");
      for (Parameter* p : enc.params_.refs()) {
        if (!tensors.contains(p->name())) throw SchemaError("checkpoint missing tensor " + p->name());
        Matrix m = tensor_from_json(tensors.at(p->name()));
        if (!m.same_shape(p->value())) {
          throw DimensionError("checkpoint tensor " + p->name() + " has shape " + m.shape() + ", expected " +
                               p->value().shape());
        }
        p->value() = std::move(m);
      }
      if (tensors.size() != enc.params_.refs().size()) throw SchemaError("checkpoint has unexpected tensors");
      return enc;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("malformed encoder checkpoint: ") + e.what());
    }
  }

  static nlohmann::json tensor_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
  }

  static Matrix tensor_from_json(const nlohmann::json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
  }

 private:
  EncoderConfig cfg_;
  EncoderParams params_;
};

// Row at sequence position 0 of every batch element: [batch x d_model].
inline Var extract_cls(const HiddenStates& hidden) {
  if (hidden.batch == 0) throw ValidationError("extract_cls on empty hidden states");
  std::vector<std::size_t> rows(hidden.batch);
  for (std::size_t b = 0; b < hidden.batch; ++b) rows[b] = b * hidden.seq_len;
  return select_rows(hidden.states, rows);
}

}  // namespace stackdetect
