#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "qpi/error.hpp"
#include "qpi/image.hpp"
#include "qpi/models.hpp"
#include "qpi/rng.hpp"

using namespace qpi;

namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& v : img.pixels) v = rng.uniform(-1.0, 1.0);
  return img;
}

double dot(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.pixels[i] * b.pixels[i];
  return s;
}

}  // namespace

TEST_CASE("architecture shapes") {
  SUBCASE("lenet5") {
    const auto m = models::build({});
    CHECK(m.input_shape() == Shape{1, 32, 32});
    CHECK(m.output_shape() == Shape{4});
    const std::size_t c5 = models::last_conv_layer(m);
    CHECK(m.layer_output_shape(c5) == Shape{120, 1, 1});
    CHECK(m.first_stochastic_layer() < m.layer_count());
  }
  SUBCASE("alexnet_mini") {
    models::ArchitectureConfig cfg;
    cfg.name = "alexnet_mini";
    const auto m = models::build(cfg);
    CHECK(m.input_shape() == Shape{3, 59, 59});
    CHECK(m.output_shape() == Shape{4});
    CHECK(m.layer_output_shape(models::last_conv_layer(m)) == Shape{16, 13, 13});
  }
  SUBCASE("dropout zero leaves no stochastic layer") {
    models::ArchitectureConfig cfg;
    cfg.dropout = 0.0;
    const auto m = models::build(cfg);
    CHECK(m.first_stochastic_layer() == m.layer_count());
    CHECK_FALSE(m.has_active_dropout());
  }
  SUBCASE("invalid configs") {
    models::ArchitectureConfig cfg;
    cfg.name = "resnet";
    CHECK_THROWS_AS(models::build(cfg), ConfigError);
    cfg = {};
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(models::build(cfg), ConfigError);
    cfg = {};
    cfg.classes = 1;
    CHECK_THROWS_AS(models::build(cfg), ConfigError);
    cfg = {};
    cfg.name = "alexnet_mini";
    cfg.fc_widths = {10};
    CHECK_THROWS_AS(models::build(cfg), ConfigError);
    cfg = {};
    cfg.input_extent = 20;
    CHECK_THROWS_AS(models::build(cfg), DimensionError);
  }
  SUBCASE("no conv layer") {
    const nn::Model m({4}, {nn::LayerSpec::fullyconnected(2)});
    CHECK(models::last_conv_layer(m) == m.layer_count());
  }
}

TEST_CASE("bilinear resize") {
  SUBCASE("equal extents reproduce the source") {
    const Image src = random_image(9, 7, 1);
    CHECK(resize_bilinear(src, 9, 7).pixels == src.pixels);
  }
  SUBCASE("constant images stay constant") {
    const Image src(50, 50, 0.37);
    for (double v : resize_bilinear(src, 32, 32).pixels) CHECK(v == doctest::Approx(0.37).epsilon(1e-14));
  }
  SUBCASE("values stay within the source range") {
    const Image src = random_image(50, 50, 2);
    const Image out = resize_bilinear(src, 59, 59);
    CHECK(out.min() >= src.min());
    CHECK(out.max() <= src.max());
  }
  SUBCASE("adjoint identity") {
    for (auto [h, w, th, tw] : {std::array<std::size_t, 4>{50, 50, 32, 32}, {50, 50, 59, 59}, {7, 11, 13, 5}}) {
      const Image x = random_image(h, w, h + tw);
      const Image y = random_image(th, tw, th + w);
      const double lhs = dot(resize_bilinear(x, th, tw), y);
      const double rhs = dot(x, resize_bilinear_adjoint(y, h, w));
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
  }
  SUBCASE("upsampling a linear ramp stays linear in the interior") {
    Image ramp(4, 4);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) ramp.at(r, c) = static_cast<double>(c);
    const Image up = resize_bilinear(ramp, 8, 8);
    // Destination column 3 samples source column (3 + 0.5) / 2 - 0.5 = 1.25.
    CHECK(up.at(4, 3) == doctest::Approx(1.25));
    CHECK(up.at(4, 0) == 0.0);
  }
}

TEST_CASE("batch preparation") {
  models::ArchitectureConfig cfg;
  cfg.name = "alexnet_mini";
  const auto m = models::build(cfg);
  std::vector<Image> patches{random_image(50, 50, 4), random_image(50, 50, 5)};
  const Tensor batch = models::prepare_batch(m, patches);
  CHECK(batch.shape() == Shape{2, 3, 59, 59});
  const std::size_t plane = 59 * 59;
  for (std::size_t i = 0; i < plane; ++i) {
    REQUIRE(batch[i] == batch[plane + i]);
    REQUIRE(batch[i] == batch[2 * plane + i]);
  }
  const Image resized = models::resize_patch(patches[1], 59);
  for (std::size_t i = 0; i < plane; ++i) REQUIRE(batch[3 * plane + i] == resized.pixels[i]);
}

TEST_CASE("input gradient pull-back matches finite differences through the resize") {
  nn::Model m({2, 6, 6}, {nn::LayerSpec::conv2d(2, 3), nn::LayerSpec::flatten(), nn::LayerSpec::fullyconnected(1)});
  m.initialize(3);
  const Image patch = random_image(5, 5, 9);
  auto score = [&](const Image& p) {
    const std::vector<Image> one{p};
    return m.forward(images_to_batch(one, m.input_shape()), {})[0];
  };
  nn::Tape tape;
  const std::vector<Image> one{patch};
  m.forward(images_to_batch(one, m.input_shape()), {}, tape);
  const Tensor g = m.backward_input(tape, Tensor({1, 1}, 1.0));
  const Image pulled = input_grad_to_patch(g.values(), m.input_shape(), 5, 5);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < patch.size(); ++i) {
    Image up = patch, down = patch;
    up.pixels[i] += eps;
    down.pixels[i] -= eps;
    const double numeric = (score(up) - score(down)) / (2 * eps);
    REQUIRE(gradcheck::relative_error(pulled.pixels[i], numeric) < 1e-6);
  }
}
