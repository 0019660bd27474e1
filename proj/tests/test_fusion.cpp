#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "safe/trainer.hpp"

using namespace safe;

namespace {

struct Inputs {
  Tensor vision, event;
};

Inputs random_inputs(std::size_t nv, std::size_t ne, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {fixture::random_tensor({nv, dim}, rng), fixture::random_tensor({ne, dim}, rng)};
}

Tensor run(const SafeModel& m, const Inputs& in, const AblationSwitches& sw, std::vector<std::string>* bound = nullptr) {
  Graph g;
  ParamBinder p(g, m.params);
  EncodedInputs enc{{g.constant(in.vision), Modality::Vision}, {g.constant(in.event), Modality::Event}};
  auto out = fuse_and_classify(p, m, enc, sw);
  if (bound) *bound = p.bound_names();
  return out.logits.value();
}

Tensor text_tokens(const SafeModel& m, const AblationSwitches& sw) {
  Graph g;
  ParamBinder p(g, m.params);
  return class_tokens(p, m, sw).tokens.value();
}

class Fusion : public ::testing::Test {
 protected:
  void SetUp() override {
    model = make_model(fixture::tiny_model(), default_labels(3), 5);
    fixture::randomize(model.params, 50);
  }
  SafeModel model;
};

}  // namespace

TEST_F(Fusion, MultimodalDepthZeroIsIdentity) {
  auto in = random_inputs(6, 6, 8, 1);
  Graph g;
  ParamBinder p(g, model.params);
  TokenSequence mod{g.constant(in.vision), Modality::Vision}, text{g.constant(in.event), Modality::Text};
  auto [m, t] = multimodal_transformer(p, mod, text, "mt_vt", 0, 2, Activation::Gelu);
  EXPECT_EQ(m.tokens.value(), in.vision);
  EXPECT_EQ(t.tokens.value(), in.event);
}

TEST_F(Fusion, MultimodalMatchesOracle) {
  auto in = random_inputs(10, 3, 8, 2);
  Graph g;
  ParamBinder p(g, model.params);
  auto [m, t] = multimodal_transformer(p, {g.constant(in.vision), Modality::Vision}, {g.constant(in.event), Modality::Text},
                                       "mt_vt", 1, 2, Activation::Gelu);
  ASSERT_EQ(m.size(), 10u);
  ASSERT_EQ(t.size(), 3u);
  auto [rm, rt] = oracle::multimodal(model.params, oracle::from_tensor(in.vision), oracle::from_tensor(in.event), "mt_vt", 1, 2);
  EXPECT_LT(fixture::max_abs_diff(m.tokens.value(), rm), 1e-10);
  EXPECT_LT(fixture::max_abs_diff(t.tokens.value(), rt), 1e-10);
}

TEST_F(Fusion, SelfAttentionFusionShape) {
  auto in = random_inputs(10, 7, 8, 3);
  Graph g;
  ParamBinder p(g, model.params);
  auto f = fuse_vision_event(p, {g.constant(in.vision), Modality::Vision}, {g.constant(in.event), Modality::Event}, 2,
                             Activation::Gelu);
  EXPECT_EQ(f.size(), 17u);
  EXPECT_EQ(f.dim(), 8u);
}

TEST_F(Fusion, CrossAttentionSingleFusedToken) {
  std::mt19937_64 rng(4);
  auto text = fixture::random_tensor({3, 8}, rng);
  auto fused = fixture::random_tensor({1, 8}, rng);
  Graph g;
  ParamBinder p(g, model.params);
  auto out = cross_attention(p, {g.constant(text), Modality::Text}, {g.constant(fused), Modality::Vision}, "ca_vt");
  auto v = oracle::linear(model.params, oracle::from_tensor(fused), "ca_vt.v");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.tokens.value()(i, j), text(i, j) + v(0, j), 1e-12);
}

TEST_F(Fusion, CrossAttentionMatchesOracle) {
  std::mt19937_64 rng(5);
  auto text = fixture::random_tensor({3, 8}, rng);
  auto fused = fixture::random_tensor({5, 8}, rng);
  Graph g;
  ParamBinder p(g, model.params);
  auto out = cross_attention(p, {g.constant(text), Modality::Text}, {g.constant(fused), Modality::Vision}, "ca_et");
  ASSERT_EQ(out.size(), 3u);
  auto ref = oracle::cross_attention(model.params, oracle::from_tensor(text), oracle::from_tensor(fused), "ca_et");
  EXPECT_LT(fixture::max_abs_diff(out.tokens.value(), ref), 1e-10);
  EXPECT_THROW(cross_attention(p, {g.constant(text), Modality::Text}, {g.constant(fused), Modality::Vision}, "ca_xx"),
               ContractError);
}

TEST_F(Fusion, ClassifierZeroWeightsGiveBias) {
  for (auto& v : model.params.at("classifier.w").data()) v = 0.0;
  auto logits = run(model, random_inputs(10, 10, 8, 6), AblationSwitches{});
  const auto& b = model.params.at("classifier.b");
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(logits[c], b[c]);
}

TEST_F(Fusion, FullPipelineMatchesOracle) {
  auto in = random_inputs(10, 10, 8, 7);
  const AblationSwitches sw;
  auto logits = run(model, in, sw);
  ASSERT_EQ(logits.rows(), 1u);
  ASSERT_EQ(logits.cols(), 3u);
  auto text = oracle::from_tensor(text_tokens(model, sw));
  auto ref = oracle::fusion_logits(model.params, oracle::from_tensor(in.vision), oracle::from_tensor(in.event), text, 1, 2);
  EXPECT_LT(fixture::max_abs_diff(logits, ref), 1e-10);
  std::vector<double> z(logits.data().begin(), logits.data().end());
  double s = 0.0;
  for (double q : softmax(z)) s += q;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST_F(Fusion, DeeperPipelineMatchesOracle) {
  model = make_model(fixture::tiny_model(2), default_labels(4), 6);
  fixture::randomize(model.params, 60);
  auto in = random_inputs(10, 10, 8, 8);
  auto logits = run(model, in, AblationSwitches{});
  auto text = oracle::from_tensor(text_tokens(model, AblationSwitches{}));
  auto ref = oracle::fusion_logits(model.params, oracle::from_tensor(in.vision), oracle::from_tensor(in.event), text, 2, 2);
  EXPECT_LT(fixture::max_abs_diff(logits, ref), 1e-10);
}

TEST_F(Fusion, ReducesToMeanPoolingWhenStagesOff) {
  model = make_model(fixture::tiny_model(0), default_labels(3), 7);
  fixture::randomize(model.params, 70);
  AblationSwitches sw;
  sw.mt = sw.sa = sw.ca = false;
  auto in = random_inputs(10, 10, 8, 9);
  auto logits = run(model, in, sw);
  // With cross-attention off its outputs are the raw class tokens.
  auto text = oracle::from_tensor(text_tokens(model, sw));
  auto x = oracle::stack({oracle::from_tensor(in.vision), oracle::from_tensor(in.event), text, text});
  auto ref = oracle::linear(model.params, oracle::mean_rows(x), "classifier");
  EXPECT_LT(fixture::max_abs_diff(logits, ref), 1e-12);
}

TEST_F(Fusion, EverySwitchPatternIsTotal) {
  auto in = random_inputs(10, 10, 8, 10);
  for (int mask = 0; mask < 32; ++mask) {
    AblationSwitches sw{(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0, (mask & 8) != 0, (mask & 16) != 0};
    auto logits = run(model, in, sw);
    ASSERT_EQ(logits.cols(), 3u) << sw.to_string();
    for (double v : logits.data()) EXPECT_TRUE(std::isfinite(v)) << sw.to_string();
  }
}

TEST_F(Fusion, TextParametersReachableOnlyWithSemanticTokens) {
  auto in = random_inputs(10, 10, 8, 11);
  auto touches = [](const std::vector<std::string>& names, const std::string& group) {
    return std::any_of(names.begin(), names.end(), [&](const auto& n) { return param_group(n) == group; });
  };
  std::vector<std::string> bound;
  run(model, in, AblationSwitches{}, &bound);
  EXPECT_TRUE(touches(bound, "text"));
  EXPECT_FALSE(touches(bound, "free_text"));
  AblationSwitches off;
  off.sci = false;
  run(model, in, off, &bound);
  EXPECT_FALSE(touches(bound, "text"));
  EXPECT_TRUE(touches(bound, "free_text"));
}

TEST_F(Fusion, Deterministic) {
  auto in = random_inputs(10, 10, 8, 12);
  EXPECT_EQ(run(model, in, AblationSwitches{}), run(model, in, AblationSwitches{}));
  auto a = make_model(fixture::tiny_model(), default_labels(3), 9);
  auto b = make_model(fixture::tiny_model(), default_labels(3), 9);
  EXPECT_EQ(a.params, b.params);
}

TEST(Ablation, SixPatterns) {
  auto rows = ablation_patterns();
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], AblationSwitches{});
  for (std::size_t i = 1; i < 6; ++i) {
    const bool flags[] = {rows[i].sci, rows[i].lvm, rows[i].mt, rows[i].sa, rows[i].ca};
    EXPECT_EQ(std::count(std::begin(flags), std::end(flags), false), 1);
    EXPECT_FALSE(flags[i - 1]);
  }
}

TEST(Ablation, LargeEncoderSwitchControlsDepthAndFreezing) {
  auto cfg = fixture::tiny_model(2);
  cfg.rgb.shallow_depth = cfg.event.shallow_depth = 1;
  AblationSwitches on, off;
  off.lvm = false;
  EXPECT_EQ(encoder_depth(cfg.rgb, on), 2u);
  EXPECT_EQ(encoder_depth(cfg.rgb, off), 1u);
  EXPECT_EQ(frozen_groups(cfg, on), (std::set<std::string>{"rgb_encoder", "event_encoder"}));
  EXPECT_TRUE(frozen_groups(cfg, off).empty());
  cfg.text.trainable = false;
  EXPECT_TRUE(frozen_groups(cfg, off).contains("text"));
}

TEST(Ablation, MismatchedFrameCountsRejected) {
  auto model = make_model(fixture::tiny_model(), default_labels(2), 1);
  auto split = synth_split(fixture::tiny_spec(2), 1, 0, 1);
  auto s = split.train[0];
  s.event_frames.frames.pop_back();
  Graph g;
  ParamBinder p(g, model.params);
  EXPECT_THROW(safe_forward(p, model, s.clip, s.event_frames, AblationSwitches{}), ContractError);
}
