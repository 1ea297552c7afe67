#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "triage/error.hpp"
#include "triage/encoders.hpp"
#include "triage/util/io.hpp"

using namespace triage;
using triage::testing::fixture;
using triage::testing::TempDir;
using triage::testing::tiny_local_config;

namespace {

EncoderInput text_input(const std::string& id, const std::string& text) {
  EncoderInput in;
  in.id = id;
  in.text = text;
  return in;
}

EncoderInput image_input(const std::string& id, const std::string& name) {
  EncoderInput in;
  in.id = id;
  in.image_path = fixture("images") / name;
  return in;
}

}  // namespace

TEST(Config, Defaults) {
  const auto text = EncoderConfig::text_default();
  EXPECT_EQ(text.checkpoint, "roberta-base");
  EXPECT_EQ(text.max_text_length, 144u);
  EXPECT_EQ(text.pooling, Pooling::cls);
  const auto image = EncoderConfig::image_default();
  EXPECT_EQ(image.checkpoint, "google/vit-base-patch16-384");
  EXPECT_EQ(image.image_size.height, 384);
  EXPECT_EQ(image.image_size.width, 384);
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny_local_config(Modality::image);
  c.pooling = Pooling::mean;
  c.freeze_half = true;
  const auto back = encoder_config_from_json(to_json(c), Modality::image);
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(encoder_config_from_json(to_json(c), Modality::text), Error);
  EXPECT_THROW(parse_pooling("max"), Error);
}

TEST(Tokenize, LowercasesAndTruncates) {
  EXPECT_EQ(tokenize("Smoke over KELOWNA!! #BCwildfire"),
            (std::vector<std::string>{"smoke", "over", "kelowna", "bcwildfire"}));
  EXPECT_EQ(truncate_tokens("a b c d e f", 4).size(), 3u);
  EXPECT_TRUE(truncate_tokens("", 4).empty());
}

TEST(Images, LoadAndResize) {
  const auto img = load_image(fixture("images/img0.png"));
  EXPECT_EQ(img.height, 24);
  EXPECT_EQ(img.width, 32);
  ASSERT_EQ(img.data.size(), 24u * 32u * 3u);
  for (float v : img.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  const auto small = resize_bilinear(img, 16, 16);
  EXPECT_EQ(small.data.size(), 16u * 16u * 3u);
  EXPECT_THROW(load_image(fixture("images/none.png")), Error);
  TempDir dir;
  write_file(dir / "bad.png", "not an image");
  EXPECT_THROW(load_image(dir / "bad.png"), Error);
}

TEST(Images, ConstantImageResizesToConstant) {
  Image img{5, 7, std::vector<float>(5 * 7 * 3, 0.25f)};
  const auto out = resize_bilinear(img, 11, 3);
  for (float v : out.data) EXPECT_NEAR(v, 0.25f, 1e-6f);
}

TEST(Stub, DeterministicAndShaped) {
  auto a = make_encoder(EncoderConfig::text_default(), 1);
  auto b = make_encoder(EncoderConfig::text_default(), 1);
  const std::vector<EncoderInput> batch{text_input("1", "smoke"), text_input("2", "fire")};
  const nn::Context eval{false, nullptr};
  const auto x = a->forward(batch, eval)->value;
  EXPECT_EQ(x.rows(), 2);
  EXPECT_EQ(x.cols(), static_cast<Eigen::Index>(kEncoderWidth));
  EXPECT_EQ(x, b->forward(batch, eval)->value);
  EXPECT_NE(x.row(0), x.row(1));
  EXPECT_TRUE(a->parameters().empty());
}

TEST(Local, ShapesAndPooling) {
  for (auto pooling : {Pooling::cls, Pooling::mean}) {
    auto config = tiny_local_config(Modality::text);
    config.pooling = pooling;
    auto enc = make_encoder(config, 3);
    const nn::Context eval{false, nullptr};
    const std::vector<EncoderInput> batch{text_input("1", "smoke over kelowna"),
                                          text_input("2", ""),
                                          text_input("3", "a b c d e f g h i j k l m")};
    const auto x = enc->forward(batch, eval)->value;
    EXPECT_EQ(x.rows(), 3);
    EXPECT_EQ(x.cols(), static_cast<Eigen::Index>(kEncoderWidth));
    EXPECT_TRUE(x.allFinite());
  }
  auto image = make_encoder(tiny_local_config(Modality::image), 3);
  const nn::Context eval{false, nullptr};
  const std::vector<EncoderInput> imgs{image_input("1", "img0.png"), image_input("2", "img1.png")};
  const auto y = image->forward(imgs, eval)->value;
  EXPECT_EQ(y.rows(), 2);
  EXPECT_EQ(y.cols(), static_cast<Eigen::Index>(kEncoderWidth));
}

TEST(Local, TruncationIgnoresTokensPastLimit) {
  auto enc = make_encoder(tiny_local_config(Modality::text), 4);
  const nn::Context eval{false, nullptr};
  // max_text_length 8 keeps 7 tokens
  const std::vector<EncoderInput> batch{text_input("1", "a b c d e f g h"),
                                        text_input("2", "a b c d e f g zzz")};
  const auto x = enc->forward(batch, eval)->value;
  EXPECT_EQ(x.row(0), x.row(1));
}

TEST(Local, FreezeHalfAndAll) {
  auto enc = make_encoder(tiny_local_config(Modality::text), 5);
  EXPECT_EQ(enc->num_layers(), 2u);
  freeze_half(*enc);
  std::size_t frozen = 0;
  for (auto* p : enc->parameters()) frozen += p->frozen;
  EXPECT_GT(frozen, 0u);
  EXPECT_LT(frozen, enc->parameters().size());
  enc->freeze_all();
  for (auto* p : enc->parameters()) EXPECT_TRUE(p->frozen) << p->name;
}

TEST(Recorded, LooksUpByTextAndFilename) {
  auto config = EncoderConfig::text_default();
  config.backend = EncoderBackend::recorded;
  config.recorded_path = fixture("recorded_text.jsonl");
  auto enc = make_encoder(config, 0);
  const nn::Context eval{false, nullptr};
  const std::vector<EncoderInput> batch{text_input("1", "smoke over kelowna")};
  EXPECT_EQ(enc->forward(batch, eval)->value.cols(), static_cast<Eigen::Index>(kEncoderWidth));
  const std::vector<EncoderInput> missing{text_input("2", "unseen")};
  EXPECT_THROW(enc->forward(missing, eval), Error);

  config.pooling = Pooling::mean;
  auto mean = make_encoder(config, 0);
  EXPECT_NE(enc->forward(batch, eval)->value, mean->forward(batch, eval)->value);

  auto image = EncoderConfig::image_default();
  image.backend = EncoderBackend::recorded;
  image.recorded_path = fixture("recorded_image.jsonl");
  auto ienc = make_encoder(image, 0);
  const std::vector<EncoderInput> imgs{image_input("1", "img0.png")};
  EXPECT_EQ(ienc->forward(imgs, eval)->value.rows(), 1);
}

TEST(EncodeImage, BadFilesBecomeItemErrors) {
  TempDir dir;
  write_file(dir / "bad.png", "garbage");
  auto enc = make_encoder(EncoderConfig::image_default(), 1);
  const auto result = encode_image(
      {fixture("images/img0.png"), dir / "bad.png", fixture("images/img2.png")}, *enc, 2);
  EXPECT_EQ(result.features.rows(), 2);
  EXPECT_EQ(result.rows, (std::vector<std::size_t>{0, 2}));
  ASSERT_EQ(result.errors.size(), 1u);
  EXPECT_EQ(result.errors[0].index, 1u);
}

TEST(EncodeText, BatchingDoesNotChangeResults) {
  auto enc = make_encoder(tiny_local_config(Modality::text), 6);
  const std::vector<std::string> texts{"smoke", "fire near jasper", "evacuation order", "", "rain"};
  EXPECT_TRUE(encode_text(texts, *enc, 2).isApprox(encode_text(texts, *enc, 5), 1e-12));
}

TEST(FeatureCache, WriteReadRoundTrip) {
  auto f = triage::testing::random_feature_fixture(5, 2);
  TempDir dir;
  f.cache->write(dir / "cache.bin");
  const auto back = FeatureCache::read(dir / "cache.bin", f.cache->header());
  EXPECT_EQ(back.header(), f.cache->header());
  EXPECT_EQ(back.records(), f.cache->records());
  ASSERT_NE(back.find("g3"), nullptr);
  EXPECT_EQ(back.find("nope"), nullptr);

  auto other = f.cache->header();
  other.text_checkpoint = "bert-base";
  EXPECT_THROW(FeatureCache::read(dir / "cache.bin", other), FormatError);
  write_file(dir / "junk.bin", "JUNKJUNKJUNK");
  EXPECT_THROW(FeatureCache::read(dir / "junk.bin"), FormatError);
}

TEST(FeatureCache, ExtractMatchesEncoders) {
  auto text = make_encoder(EncoderConfig::text_default(), 1);
  auto image = make_encoder(EncoderConfig::image_default(), 1);
  std::vector<EncoderInput> inputs{image_input("a", "img0.png"), image_input("b", "img1.png")};
  inputs[0].text = "smoke";
  inputs[1].text = "fire";
  const auto records = extract_features(inputs, *text, *image);
  ASSERT_EQ(records.size(), 2u);
  const nn::Context eval{false, nullptr};
  const auto direct = text->forward(inputs, eval)->value;
  for (std::size_t i = 0; i < kEncoderWidth; ++i) {
    EXPECT_EQ(records[1].text_vec[i], direct(1, static_cast<Eigen::Index>(i)));
  }
  auto cache = std::make_shared<const FeatureCache>(
      cache_header_for(text->config(), image->config()), records);
  auto cached = make_cached_encoder(cache, Modality::text);
  EXPECT_EQ(cached->forward(inputs, eval)->value, direct);
  EXPECT_EQ(cached->config().checkpoint, "roberta-base");
}
