#include "metasr/model.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "metasr/checkpoint.hpp"
#include "test_util.hpp"

namespace metasr {
namespace {

using testing::max_rel_error;
using testing::random_labels;
using testing::random_matrix;
using testing::tiny_encoder_config;

MultiHeadModel tiny_model(std::uint64_t seed, int alphabet = 2) {
  std::vector<std::string> symbols;
  for (int i = 0; i < alphabet; ++i) symbols.emplace_back(1, static_cast<char>('a' + i));
  return with_language(init_model(tiny_encoder_config(), seed), "xx", Alphabet(symbols), seed);
}

TEST(EncoderConfig, DefaultChainsAndValidates) {
  EncoderConfig cfg = default_encoder_config(8);
  EXPECT_EQ(cfg.hidden_dim, 64);
  EXPECT_EQ(cfg.subsample_stride, 2);
  ASSERT_EQ(cfg.layers.size(), 4u);
  EXPECT_EQ(cfg.layers[0].kind, LayerKind::kFrameStack);
  EXPECT_EQ(cfg.layers[3].kind, LayerKind::kRecurrentBidi);
  EXPECT_EQ(encoder_config_from_json(to_json(cfg)), cfg);

  EncoderConfig broken = cfg;
  broken.layers[1].input_dim = 7;
  EXPECT_THROW(broken.validate(), ConfigError);
  broken = cfg;
  broken.subsample_stride = 3;
  EXPECT_THROW(broken.validate(), ConfigError);
}

TEST(Encode, SubsamplesByStride) {
  MultiHeadModel m = init_model(default_encoder_config(4, 8, 2), 1);
  Rng rng(1);
  EXPECT_EQ(encode(m, random_matrix(10, 4, rng)).hidden.rows(), 5);
  EXPECT_EQ(encode(m, random_matrix(9, 4, rng)).hidden.rows(), 5);
  EXPECT_THROW(encode(m, random_matrix(9, 3, rng)), DimensionError);
}

TEST(Encode, ZeroParamsZeroInputGivesZeroHidden) {
  MultiHeadModel m = init_model(default_encoder_config(4, 8, 2), 1);
  m.encoder *= 0.0;
  EXPECT_TRUE(encode(m, Matrix::Zero(6, 4)).hidden.isZero(0.0));
}

TEST(Encode, Deterministic) {
  MultiHeadModel a = init_model(default_encoder_config(4, 8, 2), 42);
  MultiHeadModel b = init_model(default_encoder_config(4, 8, 2), 42);
  EXPECT_EQ(a.encoder, b.encoder);
  Rng rng(2);
  Matrix x = random_matrix(7, 4, rng);
  Matrix ha = encode(a, x).hidden;
  Matrix hb = encode(b, x).hidden;
  EXPECT_EQ(0, std::memcmp(ha.data(), hb.data(), sizeof(double) * ha.size()));
}

TEST(Init, UniformWithinFanInBound) {
  MultiHeadModel m = init_model(default_encoder_config(8), 3);
  const double r = 1.0 / std::sqrt(16.0);
  EXPECT_LE(m.encoder.at("enc.1.proj.W").cwiseAbs().maxCoeff(), r);
  EXPECT_GT(m.encoder.at("enc.1.proj.W").cwiseAbs().maxCoeff(), 0.5 * r);
}

TEST(HeadForward, ZeroHeadIsUniform) {
  MultiHeadModel m = tiny_model(1, 3);
  for (auto& [_, h] : m.heads) h *= 0.0;
  Rng rng(3);
  LogProbLattice lat = head_forward(m, "xx", random_matrix(5, 4, rng));
  EXPECT_LT((lat.log_probs.array() + std::log(4.0)).abs().maxCoeff(), 1e-15);
}

TEST(HeadForward, RowsNormalizedAndShiftInvariant) {
  MultiHeadModel m = tiny_model(2, 3);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix h = random_matrix(6, 4, rng, 3.0);
    LogProbLattice lat = head_forward(m, "xx", h);
    for (Eigen::Index t = 0; t < lat.frames(); ++t) EXPECT_NEAR(row_log_sum_exp(lat.log_probs.row(t)), 0.0, 1e-12);
  }
  Matrix logits = random_matrix(3, 4, rng);
  Matrix shifted = logits;
  shifted.row(1).array() += 17.5;
  EXPECT_LT((log_softmax(logits) - log_softmax(shifted)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(HeadForward, UnknownLanguage) {
  MultiHeadModel m = tiny_model(2);
  EXPECT_THROW(head_forward(m, "zz", Matrix::Zero(2, 4)), LookupError);
}

// End-to-end finite-difference check over every encoder and head parameter.
TEST(UtteranceLossAndGrads, MatchesFiniteDifferencesOverAllParameters) {
  for (int trial = 0; trial < 20; ++trial) {
    MultiHeadModel m = tiny_model(100 + trial, 2);
    Rng rng(200 + trial);
    Matrix x = random_matrix(6, 3, rng);
    LabelSequence c = random_labels(2, 2, rng);
    if (min_frames_for(c) > 3) c = {0, 1};
    LossAndGrads g = utterance_loss_and_grads(m, "xx", x, c);
    NamedParams flat = m.all_params();
    NamedParams fd = finite_diff_grad(
        [&](const NamedParams& q) {
          MultiHeadModel probe = m;
          probe.assign_all(q);
          return ctc_loss(predict(probe, "xx", x), c).loss;
        },
        flat, 1e-5);
    NamedParams analytic = g.grad_encoder.merged(g.grad_head);
    EXPECT_LT(max_rel_error(fd, analytic), 1e-5) << "trial " << trial;
  }
}

TEST(UtteranceLossAndGrads, IndependentOfOtherLanguages) {
  MultiHeadModel m = tiny_model(5);
  MultiHeadModel bigger = with_language(m, "yy", Alphabet({"p", "q", "r"}), 9);
  Rng rng(6);
  Matrix x = random_matrix(6, 3, rng);
  LossAndGrads a = utterance_loss_and_grads(m, "xx", x, {0, 1});
  LossAndGrads b = utterance_loss_and_grads(bigger, "xx", x, {0, 1});
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad_encoder, b.grad_encoder);
  EXPECT_EQ(a.grad_head, b.grad_head);
  // Only the language's own head receives a gradient.
  EXPECT_TRUE(b.grad_head.same_layout(bigger.head("xx")));
}

TEST(BatchLossAndGrads, DuplicatedUtteranceDoubles) {
  MultiHeadModel m = tiny_model(7);
  Rng rng(8);
  Utterance u{"u", random_matrix(6, 3, rng), {1, 0}};
  std::vector<Utterance> one{u};
  std::vector<Utterance> two{u, u};
  LossAndGrads g1 = batch_loss_and_grads(m, "xx", one);
  LossAndGrads g2 = batch_loss_and_grads(m, "xx", two);
  EXPECT_EQ(g2.loss, 2.0 * g1.loss);
  EXPECT_EQ(g2.grad_encoder, 2.0 * g1.grad_encoder);
  EXPECT_EQ(g2.grad_head, 2.0 * g1.grad_head);
}

TEST(UtteranceLossAndGrads, FeasibilityCheckedOnSubsampledLength) {
  MultiHeadModel m = tiny_model(9);
  Rng rng(10);
  // 5 frames -> 3 after stride 2; "aba" fits, "aab" needs 4.
  EXPECT_NO_THROW(utterance_loss_and_grads(m, "xx", random_matrix(5, 3, rng), {0, 1, 0}));
  EXPECT_THROW(utterance_loss_and_grads(m, "xx", random_matrix(5, 3, rng), {0, 0, 1}), InfeasibleError);
  std::vector<Utterance> batch{{"bad-utt", random_matrix(2, 3, rng), {0, 1}}};
  try {
    batch_loss_and_grads(m, "xx", batch);
    FAIL();
  } catch (const InfeasibleError& e) {
    EXPECT_NE(std::string(e.what()).find("bad-utt"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTrip) {
  MultiHeadModel m = with_language(tiny_model(11), "yy", Alphabet({"p", "q", "r"}), 12);
  const auto dir = std::filesystem::temp_directory_path() / "metasr_model_test";
  std::filesystem::create_directories(dir);
  const std::string stem = (dir / "ckpt").string();
  save_checkpoint(stem, m, {200, 7, "meta"});
  LoadedCheckpoint back = load_checkpoint(stem + ".params");
  EXPECT_EQ(back.model, m);
  EXPECT_EQ(back.info.pretrain_step, 200);
  EXPECT_EQ(back.info.seed, 7u);
  EXPECT_EQ(back.info.regime, "meta");
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace metasr
