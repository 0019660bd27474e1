#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "safe/trainer.hpp"

using namespace safe;

namespace {

Image random_image(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(w, h, 3);
  for (auto& v : img.data) v = u(rng);
  return img;
}

ParamStore encoder_store(const EncoderConfig& cfg, std::uint64_t seed) {
  ParamStore s;
  ParamInit init(seed);
  add_encoder_params(s, init, "rgb_encoder", cfg);
  return s;
}

oracle::Mat text_oracle(const ParamStore& p, const std::string& prompt, const Vocabulary& vocab, const TextConfig& cfg) {
  const auto ids = tokenize(prompt, vocab, cfg.max_len);
  std::size_t n = 0;
  while (n < ids.size() && ids[n] != Vocabulary::kPad) ++n;
  const auto embed = oracle::param(p, "text.embed"), pos = oracle::param(p, "text.pos");
  oracle::Mat x(n, embed.c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < embed.c; ++j) x(i, j) = embed(ids[i], j) + pos(i, j);
  for (std::size_t b = 0; b < cfg.depth; ++b) x = oracle::block(p, x, "text.block" + std::to_string(b), cfg.heads);
  return oracle::linear(p, oracle::mean_rows(x), "text.proj");
}

}  // namespace

TEST(Encoder, TokensPerFrame) {
  EncoderConfig desk;
  EXPECT_EQ(desk.tokens_per_frame(), 17u);
  EncoderConfig full;
  full.image_size = 224;
  full.patch_size = 16;
  full.dim = 768;
  full.depth = 0;
  full.heads = 12;
  full.shallow_depth = 0;
  EXPECT_EQ(full.tokens_per_frame(), 197u);
  auto store = encoder_store(full, 1);
  Graph g;
  ParamBinder p(g, store);
  std::mt19937_64 rng(1);
  auto seq = patchify_embed(p, random_image(224, 224, rng), full, "rgb_encoder", Modality::Vision);
  EXPECT_EQ(seq.size(), 197u);
  EXPECT_EQ(seq.dim(), 768u);
}

TEST(Encoder, ZeroImageZeroWeightsGivesClsPlusPos) {
  EncoderConfig cfg;
  auto store = encoder_store(cfg, 2);
  for (auto& v : store.at("rgb_encoder.patch.w").data()) v = 0.0;
  for (auto& v : store.at("rgb_encoder.patch.b").data()) v = 0.0;
  Graph g;
  ParamBinder p(g, store);
  auto seq = patchify_embed(p, Image(32, 32, 3, 0.0), cfg, "rgb_encoder", Modality::Vision);
  const auto& t = seq.tokens.value();
  const auto& cls = store.at("rgb_encoder.cls");
  const auto& pos = store.at("rgb_encoder.pos");
  for (std::size_t i = 0; i < 17; ++i)
    for (std::size_t j = 0; j < cfg.dim; ++j) EXPECT_EQ(t(i, j), pos(i, j) + (i == 0 ? cls(0, j) : 0.0));
}

TEST(Encoder, PatchLayoutIsRowMajor) {
  EncoderConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  Image img(4, 4, 3);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<double>(100 * y + 10 * x + c);
  auto t = patchify(img, cfg);
  ASSERT_EQ(t.rows(), 4u);
  ASSERT_EQ(t.cols(), 12u);
  // Patch 1 is the top-right 2x2 block; its first pixel is (2, 0).
  EXPECT_EQ(t(1, 0), 20.0);
  EXPECT_EQ(t(1, 3), 30.0);
  EXPECT_EQ(t(2, 0), 200.0);
  EXPECT_EQ(t(3, 11), 332.0);
}

TEST(Encoder, DepthZeroIsIdentity) {
  EncoderConfig cfg;
  auto store = encoder_store(cfg, 3);
  Graph g;
  ParamBinder p(g, store);
  std::mt19937_64 rng(3);
  auto in = patchify_embed(p, random_image(32, 32, rng), cfg, "rgb_encoder", Modality::Vision);
  auto out = encoder_forward(p, in, cfg, "rgb_encoder", 0, Activation::Gelu);
  EXPECT_EQ(out.tokens.value(), in.tokens.value());
}

TEST(Encoder, BlockMatchesOracle) {
  for (std::size_t heads : {1u, 2u, 4u}) {
    EncoderConfig cfg;
    cfg.depth = 1;
    cfg.heads = heads;
    auto store = encoder_store(cfg, 4);
    fixture::randomize(store, 40 + heads);
    std::mt19937_64 rng(5);
    auto x = fixture::random_tensor({17, cfg.dim}, rng);
    Graph g;
    ParamBinder p(g, store);
    auto out = encoder_forward(p, {g.constant(x), Modality::Vision}, cfg, "rgb_encoder", 1, Activation::Gelu);
    EXPECT_EQ(out.size(), 17u);
    EXPECT_EQ(out.dim(), cfg.dim);
    auto ref = oracle::block(store, oracle::from_tensor(x), "rgb_encoder.block0", heads);
    EXPECT_LT(fixture::max_abs_diff(out.tokens.value(), ref), 1e-10) << "heads " << heads;
  }
}

TEST(Encoder, ClipFramesEncodedIndependently) {
  EncoderConfig cfg;
  auto store = encoder_store(cfg, 6);
  std::mt19937_64 rng(6);
  VideoClip clip;
  for (int i = 0; i < 5; ++i) {
    clip.frames.push_back(random_image(32, 32, rng));
    clip.timestamps.push_back(i * 10);
  }
  Graph g;
  ParamBinder p(g, store);
  auto seqs = encode_clip(p, clip, cfg, "rgb_encoder", cfg.depth, Activation::Gelu);
  ASSERT_EQ(seqs.size(), 5u);
  for (const auto& s : seqs) {
    EXPECT_EQ(s.size(), 17u);
    EXPECT_EQ(s.dim(), 64u);
  }
  VideoClip rev = clip;
  std::reverse(rev.frames.begin(), rev.frames.end());
  auto rseqs = encode_clip(p, rev, cfg, "rgb_encoder", cfg.depth, Activation::Gelu);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(rseqs[i].tokens.value(), seqs[4 - i].tokens.value());
}

TEST(Encoder, RejectsEmptyClipAndBadConfig) {
  EncoderConfig cfg;
  auto store = encoder_store(cfg, 7);
  Graph g;
  ParamBinder p(g, store);
  EXPECT_THROW(encode_clip(p, VideoClip{}, cfg, "rgb_encoder", 1, Activation::Gelu), ContractError);
  EncoderConfig bad;
  bad.patch_size = 7;
  EXPECT_THROW(bad.validate("rgb_encoder"), ConfigError);
  bad = EncoderConfig{};
  bad.heads = 3;
  EXPECT_THROW(bad.validate("rgb_encoder"), ConfigError);
}

TEST(Encoder, FrozenParametersUnchangedByTraining) {
  auto cfg = fixture::tiny_model();
  auto split = synth_split(fixture::tiny_spec(), 2, 0, 1);
  auto model = make_model(cfg, default_labels(3), 1);
  const auto before = model.params;
  OptimConfig opt;
  opt.base_lr = 1e-2;
  opt.epochs = 2;
  opt.batch_size = 3;
  train(split.train, model, opt, AblationSwitches{});
  bool other_changed = false;
  for (const auto& name : model.params.names()) {
    const auto group = param_group(name);
    if (group == "rgb_encoder" || group == "event_encoder")
      EXPECT_EQ(model.params.at(name), before.at(name)) << name;
    else if (group != "free_text" && !(model.params.at(name) == before.at(name)))
      other_changed = true;
  }
  EXPECT_TRUE(other_changed);
}

TEST(Encoder, GradientPassesThroughFrozenEncoder) {
  EncoderConfig cfg;
  cfg.depth = 2;
  auto store = encoder_store(cfg, 8);
  std::mt19937_64 rng(8);
  Graph g;
  ParamBinder p(g, store, [](const std::string&) { return false; });
  Var x = g.leaf(fixture::random_tensor({17, cfg.dim}, rng));
  auto out = encoder_forward(p, {x, Modality::Vision}, cfg, "rgb_encoder", 2, Activation::Gelu);
  g.backward(sum(out.tokens));
  ASSERT_NE(g.grad(x), nullptr);
  double norm = 0.0;
  for (double v : g.grad(x)->data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
  EXPECT_TRUE(p.gradients().empty());
}

TEST(Prompt, Rendering) {
  EXPECT_EQ(render_prompt(PromptTemplate("The action of the human is {}"), "pouring water"),
            "The action of the human is pouring water");
  EXPECT_EQ(render_prompt(PromptTemplate("The content of the playing card is {}"), "club 7"),
            "The content of the playing card is club 7");
  EXPECT_EQ(render_prompt(PromptTemplate("NONE"), "heart 3"), "heart 3");
  EXPECT_THROW(PromptTemplate("no placeholder"), ConfigError);
  EXPECT_THROW(PromptTemplate("{} and {}"), ConfigError);
  EXPECT_THROW(render_prompt(PromptTemplate("a {}"), ""), ContractError);
}

TEST(Prompt, Tokenize) {
  EXPECT_EQ(prompt_words("A photo of a Club, 7!"), (std::vector<std::string>{"a", "photo", "of", "a", "club", "7"}));
  const std::vector<std::string> prompts{"a b c", "b d"};
  auto vocab = Vocabulary::build(prompts);
  EXPECT_EQ(vocab.size(), 6u);
  EXPECT_EQ(tokenize("a b", vocab, 4), (std::vector<std::size_t>{2, 3, 0, 0}));
  EXPECT_EQ(tokenize("d zz a c", vocab, 3), (std::vector<std::size_t>{5, Vocabulary::kUnk, 2}));
  EXPECT_THROW(tokenize("a", vocab, 0), ContractError);
}

class TextEncoder : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg = fixture::tiny_model();
    cfg.text.max_len = 12;
    model = make_model(cfg, labels, 3);
    fixture::randomize(model.params, 30);
  }

  Tensor encode(const std::vector<std::string>& ls, const TextConfig& tc) {
    Graph g;
    ParamBinder p(g, model.params);
    return encode_labels(p, ls, model.prompt, model.vocab, tc, Activation::Gelu).tokens.value();
  }

  ModelConfig cfg;
  std::vector<std::string> labels{"pouring water", "club 7", "heart 3", "waving"};
  SafeModel model;
};

TEST_F(TextEncoder, ShapeAndOracle) {
  auto t = encode(labels, cfg.text);
  ASSERT_EQ(t.rows(), 4u);
  ASSERT_EQ(t.cols(), 8u);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto ref = text_oracle(model.params, render_prompt(model.prompt, labels[i]), model.vocab, cfg.text);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(t(i, j), ref.v[j], 1e-10);
  }
}

TEST_F(TextEncoder, PermutationAndRowIndependence) {
  auto t = encode(labels, cfg.text);
  auto perm = encode({labels[2], labels[0], labels[3], labels[1]}, cfg.text);
  const std::size_t src[] = {2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(perm(i, j), t(src[i], j));
  auto changed = encode({labels[0], labels[1], "waving water"}, cfg.text);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(changed(i, j), t(i, j));
}

TEST_F(TextEncoder, PaddingDoesNotMatter) {
  auto shorter = cfg.text;
  shorter.max_len = 9;
  auto a = encode(labels, cfg.text);
  auto b = encode(labels, shorter);
  EXPECT_EQ(a, b);
}

TEST_F(TextEncoder, DistinctLabelsDistinctRows) {
  auto t = encode(labels, cfg.text);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) {
      double d = 0.0;
      for (std::size_t j = 0; j < 8; ++j) d += std::abs(t(a, j) - t(b, j));
      EXPECT_GT(d, 1e-6);
    }
}

TEST_F(TextEncoder, RejectsDuplicatesAndEmptyPrompts) {
  EXPECT_THROW(encode({"waving", "waving"}, cfg.text), ContractError);
  EXPECT_THROW(encode({"waving"}, cfg.text), ContractError);
  model.prompt = PromptTemplate("NONE");
  EXPECT_THROW(encode({"waving", "!!"}, cfg.text), ContractError);
}
