#include "doctest_torch.hpp"

#include "rsam/decoder.hpp"
#include "rsam/errors.hpp"
#include "rsam/model.hpp"
#include "support.hpp"

using namespace rsam;

TEST_SUITE("decoder") {
  TEST_CASE("logits come out at the requested size") {
    MaskDecoder dec(DecoderConfig{});
    initialize_parameters(*dec, 1);
    // 64 px image with 16 px patches gives a 4×4 embedding; two ×2 stages reach 16×16.
    const auto logits = dec->forward(torch::randn({1, 32, 4, 4}), 64, 64);
    CHECK(logits.sizes() == torch::IntArrayRef{1, 1, 64, 64});
    CHECK(dec->forward(torch::randn({3, 32, 4, 4}), 16, 16).sizes() == torch::IntArrayRef{3, 1, 16, 16});
  }

  TEST_CASE("zeroed hypernetwork output leaves only the bias") {
    MaskDecoder dec(DecoderConfig{});
    initialize_parameters(*dec, 2);
    {
      torch::NoGradGuard g;
      auto* last = dec->hyper[2]->as<torch::nn::LinearImpl>();
      last->weight.zero_();
      last->bias.zero_();
      dec->mask_bias.fill_(0.375);
    }
    const auto logits = dec->forward(torch::zeros({1, 32, 4, 4}), 64, 64);
    CHECK(logits.min().item<float>() == 0.375f);
    CHECK(logits.max().item<float>() == 0.375f);
  }

  TEST_CASE("same input twice gives identical logits") {
    MaskDecoder dec(DecoderConfig{});
    initialize_parameters(*dec, 3);
    const auto x = torch::randn({2, 32, 8, 8});
    CHECK(torch::equal(dec->forward(x, 64, 64), dec->forward(x, 64, 64)));
  }

  TEST_CASE("channel mismatch is a configuration error") {
    MaskDecoder dec(DecoderConfig{});
    CHECK_THROWS_AS(dec->forward(torch::randn({1, 16, 4, 4}), 64, 64), ConfigError);
    DecoderConfig bad;
    bad.transformer_dim = 6;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("position encoding is bounded sin/cos features") {
    MaskDecoder dec(DecoderConfig{});
    initialize_parameters(*dec, 4);
    const auto pe = dec->position_encoding(4, 6);
    CHECK(pe.sizes() == torch::IntArrayRef{32, 4, 6});
    const auto s = pe.slice(0, 0, 16), c = pe.slice(0, 16, 32);
    CHECK(test::max_abs_diff(s * s + c * c, torch::ones_like(s)) < 1e-5);
  }

  TEST_CASE("upscale widths halve from dim/4") {
    DecoderConfig c;
    c.transformer_dim = 64;
    c.upscale_stages = 3;
    CHECK(c.upscale_channels(0) == 16);
    CHECK(c.upscale_channels(1) == 8);
    CHECK(c.upscale_channels(2) == 4);
  }

  TEST_CASE("logits_to_mask thresholds strictly") {
    CHECK(logits_to_mask(torch::full({1, 1, 4, 4}, 10.0)).sum().item<int64_t>() == 16);
    CHECK(logits_to_mask(torch::zeros({1, 1, 4, 4})).sum().item<int64_t>() == 0);
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(8);
    const auto z = torch::randn({2, 1, 8, 8}, gen, torch::kFloat64);
    const auto mask = logits_to_mask(z, 0.3);
    CHECK((mask.scalar_type() == torch::kUInt8));
    const auto zf = test::to_vector(z), mf = test::to_vector(mask);
    for (size_t i = 0; i < zf.size(); ++i) {
      const double want = 1.0 / (1.0 + std::exp(-zf[i])) > 0.3 ? 1.0 : 0.0;
      CHECK(mf[i] == want);
    }
  }
}
