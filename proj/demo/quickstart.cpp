// Trains a two-learner stacking ensemble on a small synthetic corpus and
// prints per-learner and ensemble test accuracy.
#include <cstdio>

#include "stackdetect/stackdetect.hpp"

using namespace stackdetect;

int main() {
  const Dataset corpus = synthetic::generate_benchmark(400, 1);
  const SplitBundle split = split_dataset(corpus, {}, 1);
  const Vocabulary vocab = train_bpe(texts_of(split.train), 128);

  EncoderConfig base;
  base.d_model = 16;
  base.n_layers = 1;
  base.n_heads = 2;
  base.d_ff = 32;
  base.max_len = 48;
  base.vocab_size = vocab.size();

  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 32;

  StackingEnsemble ens;
  std::uint64_t seed = 10;
  for (auto v : {EncoderVariant::standard, EncoderVariant::relative_bias}) {
    EncoderConfig ec = variant_config(v, base);
    ec.seed = seed++;
    WeakLearner l = make_learner(to_string(v), ec, LearnerMode::end_to_end, seed++);
    fine_tune_end_to_end(l, split.train, vocab, cfg);
    ens.learners.push_back(std::move(l));
  }

  const auto features = build_meta_features(ens.learners, texts_of(split.train), vocab, ens.feature_source);
  ens.meta = train_meta(features, labels_of(split.train), TrainConfig{}).regressor;

  const auto texts = texts_of(split.test);
  const auto labels = labels_of(split.test);
  for (const auto& l : ens.learners) {
    std::printf("%-14s %.3f\n", l.name.c_str(), evaluate(argmax_labels(predict_proba(l, texts, vocab)), labels));
  }
  std::printf("%-14s %.3f\n", "ensemble", evaluate(labels_of(ensemble_predict(ens, texts, vocab)), labels));
}
