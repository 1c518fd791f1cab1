#include <gtest/gtest.h>

#include "stackdetect/encoder.hpp"
#include "stackdetect/gradcheck.hpp"

using namespace stackdetect;

namespace {

EncoderConfig tiny(EncoderVariant v, std::uint64_t seed = 1) {
  EncoderConfig c;
  c.variant = v;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_len = 16;
  c.vocab_size = 40;
  c.seed = seed;
  return c;
}

TokenSequence seq(std::vector<TokenId> content, std::size_t max_len, TokenId cls = 30, TokenId sep = 31,
                  TokenId pad = 32) {
  TokenSequence s;
  s.ids.push_back(cls);
  s.ids.insert(s.ids.end(), content.begin(), content.end());
  s.ids.push_back(sep);
  s.length = s.ids.size();
  s.ids.resize(max_len, pad);
  s.max_len = max_len;
  return s;
}

std::vector<double> cls_row(const Encoder& e, const TokenSequence& s, std::size_t offset = 0) {
  std::vector<TokenSequence> batch{s};
  auto h = e.forward(batch, offset);
  auto r = h.at(0, 0);
  return {r.begin(), r.end()};
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

const EncoderVariant kVariants[] = {EncoderVariant::standard, EncoderVariant::shared_layers,
                                    EncoderVariant::reduced_width, EncoderVariant::relative_bias};

}  // namespace

TEST(EncoderConfig, Validation) {
  EncoderConfig c = tiny(EncoderVariant::standard);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  EncoderConfig r = variant_config(EncoderVariant::reduced_width, tiny(EncoderVariant::standard));
  EXPECT_LT(r.d_model, 8u);
  EXPECT_NO_THROW(r.validate_against_standard(8));
  EXPECT_THROW(tiny(EncoderVariant::reduced_width).validate_against_standard(8), ValidationError);
  EXPECT_EQ(EncoderConfig::from_json(r.to_json()), r);
}

TEST(Encoder, OutputShape) {
  for (auto v : kVariants) {
    Encoder e(variant_config(v, tiny(EncoderVariant::standard)));
    std::vector<TokenSequence> batch{seq({1, 2, 3}, 10), seq({4}, 10), seq({}, 10)};
    auto h = e.forward(batch);
    EXPECT_EQ(h.batch, 3u);
    EXPECT_EQ(h.seq_len, 10u);
    EXPECT_EQ(h.states.rows(), 30u);
    EXPECT_EQ(h.d_model(), e.config().d_model);
    EXPECT_TRUE(h.states.value().all_finite());
  }
}

TEST(Encoder, SharedLayersParameterCountIndependentOfDepth) {
  EncoderConfig a = tiny(EncoderVariant::shared_layers), b = a;
  a.n_layers = 2;
  b.n_layers = 6;
  EXPECT_EQ(Encoder(a).parameter_count(), Encoder(b).parameter_count());
  EncoderConfig s = tiny(EncoderVariant::standard);
  s.n_layers = 6;
  EXPECT_GT(Encoder(s).parameter_count(), Encoder(b).parameter_count());
}

TEST(Encoder, RejectsOutOfVocabularyIds) {
  Encoder e(tiny(EncoderVariant::standard));
  std::vector<TokenSequence> batch{seq({39, 40}, 8)};
  EXPECT_THROW(e.forward(batch), ValidationError);
}

TEST(Encoder, PermutingContentTokensChangesCls) {
  for (auto v : {EncoderVariant::standard, EncoderVariant::relative_bias}) {
    EncoderConfig c = tiny(v);
    Encoder e(c);
    if (auto& rb = e.params().relative_bias) rb->value() = seeded_init(c.n_heads, 2 * c.max_len - 1, InitScheme::uniform_fan_in, 3, 1);
    auto a = cls_row(e, seq({1, 2, 3, 4}, 8));
    auto b = cls_row(e, seq({1, 4, 3, 2}, 8));
    EXPECT_GT(max_diff(a, b), 1e-6) << to_string(v);
  }
}

TEST(Encoder, PaddingDoesNotChangeCls) {
  for (auto v : kVariants) {
    Encoder e(variant_config(v, tiny(EncoderVariant::standard)));
    auto base = cls_row(e, seq({5, 6, 7}, 5));
    for (std::size_t len : {6u, 9u, 16u}) EXPECT_LT(max_diff(base, cls_row(e, seq({5, 6, 7}, len))), 1e-9);
  }
}

TEST(Encoder, ExtractClsPicksPositionZero) {
  Encoder e(tiny(EncoderVariant::standard));
  std::vector<TokenSequence> batch{seq({1, 2}, 6), seq({3}, 6)};
  auto h = e.forward(batch);
  Var cls = extract_cls(h);
  ASSERT_EQ(cls.rows(), 2u);
  ASSERT_EQ(cls.cols(), 8u);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(cls.value()(b, j), h.at(b, 0)[j]);
}

TEST(Encoder, ClsLossHasNoGradientOnOtherRows) {
  Encoder e(tiny(EncoderVariant::standard));
  std::vector<TokenSequence> batch{seq({1, 2, 3}, 6), seq({4, 5}, 6)};
  auto h = e.forward(batch);
  Var loss = softmax_cross_entropy(extract_cls(h), std::vector<int>{1, 3});
  loss.backward();
  const Matrix& g = h.states.grad();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t j = 0; j < 8; ++j) {
        if (t == 0) continue;
        EXPECT_EQ(g(b * 6 + t, j), 0.0);
      }
  double nonzero = 0;
  for (std::size_t j = 0; j < 8; ++j) nonzero += std::abs(g(0, j));
  EXPECT_GT(nonzero, 0.0);
}

TEST(Encoder, SharedLayersEqualsStandardWithTiedWeights) {
  EncoderConfig sc = tiny(EncoderVariant::shared_layers);
  sc.n_layers = 3;
  Encoder shared(sc);
  EncoderConfig stc = sc;
  stc.variant = EncoderVariant::standard;
  Encoder standard(stc);
  auto& sp = shared.params();
  auto& tp = standard.params();
  tp.token_embedding.value() = sp.token_embedding.value();
  tp.position_table->value() = sp.position_table->value();
  tp.final_gain.value() = sp.final_gain.value();
  tp.final_bias.value() = sp.final_bias.value();
  for (auto& layer : tp.layers) {
    ParameterRefs dst, src;
    layer.collect(dst);
    sp.layers[0].collect(src);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value() = src[i]->value();
  }
  std::vector<TokenSequence> batch{seq({1, 2, 3, 4}, 8), seq({7}, 8)};
  EXPECT_LT(max_abs_diff(shared.forward(batch).states.value(), standard.forward(batch).states.value()), 1e-12);
}

TEST(Encoder, RelativeBiasIsShiftInvariant) {
  EncoderConfig c = tiny(EncoderVariant::relative_bias);
  Encoder e(c);
  e.params().relative_bias->value() = seeded_init(c.n_heads, 2 * c.max_len - 1, InitScheme::uniform_fan_in, 5, 1);
  const TokenSequence s = seq({9}, 3);  // CLS, token, SEP
  auto base = cls_row(e, s, 0);
  for (std::size_t shift : {1u, 4u, 13u}) EXPECT_LT(max_diff(base, cls_row(e, s, shift)), 1e-12);

  // Absolute positions are not shift invariant.
  Encoder a(tiny(EncoderVariant::standard));
  EXPECT_GT(max_diff(cls_row(a, s, 0), cls_row(a, s, 4)), 1e-6);
}

TEST(Encoder, GradcheckAllParametersTinyConfig) {
  for (auto v : kVariants) {
    EncoderConfig c = variant_config(v, tiny(EncoderVariant::standard, 7));
    c.vocab_size = 12;
    Encoder e(c);
    if (auto& rb = e.params().relative_bias) rb->value() = seeded_init(c.n_heads, 2 * c.max_len - 1, InitScheme::uniform_fan_in, 8, 1);
    Parameter w("w", seeded_init(c.d_model, 2, InitScheme::uniform_fan_in, 9));
    std::vector<TokenSequence> batch{seq({1, 2, 3}, 6, 9, 10, 11), seq({4, 5}, 6, 9, 10, 11)};
    ParameterRefs params = e.parameters();
    params.push_back(&w);
    auto r = gradcheck(
        [&] { return softmax_cross_entropy(matmul(extract_cls(e.forward(batch)), w.var()), std::vector<int>{0, 1}); },
        params);
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(v) << " " << r.worst_param << "[" << r.worst_index << "] a=" << r.analytic
                                     << " n=" << r.numeric;
  }
}

TEST(Encoder, CheckpointRoundTrip) {
  for (auto v : kVariants) {
    Encoder e(variant_config(v, tiny(EncoderVariant::standard, 3)));
    const std::string dumped = e.checkpoint_json().dump();
    Encoder back = Encoder::from_checkpoint(nlohmann::json::parse(dumped));
    EXPECT_EQ(back.checkpoint_json().dump(), dumped);
    std::vector<TokenSequence> batch{seq({1, 2}, 6)};
    EXPECT_EQ(e.forward(batch).states.value(), back.forward(batch).states.value());
  }
  auto j = Encoder(tiny(EncoderVariant::standard)).checkpoint_json();
  j["tensors"].erase("embed.token");
  EXPECT_THROW(Encoder::from_checkpoint(j), SchemaError);
}
