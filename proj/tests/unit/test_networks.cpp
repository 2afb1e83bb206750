#include <doctest.h>

#include <random>

#include <Eigen/Dense>

#include "../support/tiny.hpp"
#include "dasgan/error.hpp"
#include "dasgan/networks.hpp"
#include "dasgan/ck_pipeline.hpp"
#include "dasgan/synthdata.hpp"

using namespace dasgan;
using namespace dasgan::nn;

namespace {

double largest_singular_value(const torch::Tensor& m) {
  const auto t = m.to(torch::kDouble).contiguous();
  Eigen::MatrixXd e(t.size(0), t.size(1));
  for (int i = 0; i < t.size(0); ++i) {
    for (int j = 0; j < t.size(1); ++j) e(i, j) = t[i][j].item<double>();
  }
  return Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues()(0);
}

torch::Tensor random_images(int n, int size, std::uint64_t seed) {
  torch::manual_seed(seed);
  return torch::rand({n, 3, size, size});
}

torch::Tensor random_one_hot(int n, int size) { return one_hot_labels(torch::randint(0, 3, {n, size, size}, torch::kInt64)); }

}  // namespace

TEST_CASE("spectral normalization: identity, diagonal and random matrices") {
  auto u = torch::tensor({1.0, 0.0}, torch::kDouble);
  auto id = spectral_normalize(torch::eye(2, torch::kDouble), 1, u);
  CHECK(torch::allclose(id, torch::eye(2, torch::kDouble)));

  auto u2 = torch::tensor({0.6, 0.8}, torch::kDouble);
  const auto d = spectral_normalize(torch::diag(torch::tensor({3.0, 1.0}, torch::kDouble)), 50, u2);
  CHECK(std::abs(d[0][0].item<double>() - 1.0) < 1e-4);
  CHECK(std::abs(d[1][1].item<double>() - 1.0 / 3.0) < 1e-4);

  torch::manual_seed(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto w = torch::randn({8, 8}, torch::kDouble);
    auto uu = torch::randn({8}, torch::kDouble);
    CHECK(std::abs(largest_singular_value(spectral_normalize(w, 100, uu)) - 1.0) < 1e-3);
  }
  auto bad = torch::ones({3});
  CHECK_THROWS_AS(spectral_normalize(torch::eye(2), 0, bad), Error);
}

TEST_CASE("SN conv keeps its vectors in eval mode") {
  SNConv2d conv(SNConv2dOptions(2, 3, 3).padding(1));
  conv->eval();
  const auto u0 = conv->u.clone();
  conv->forward(torch::rand({1, 2, 4, 4}));
  CHECK(torch::equal(conv->u, u0));
  conv->train();
  conv->forward(torch::rand({1, 2, 4, 4}));
  CHECK_FALSE(torch::equal(conv->u, u0));
}

TEST_CASE("self-attention: closed gate, row sums and scalar oracle") {
  torch::manual_seed(2);
  AttentionParams p;
  const int c = 4, r = 2;
  p.query_weight = torch::randn({c / r, c}, torch::kDouble);
  p.query_bias = torch::randn({c / r}, torch::kDouble);
  p.key_weight = torch::randn({c / r, c}, torch::kDouble);
  p.key_bias = torch::randn({c / r}, torch::kDouble);
  p.value_weight = torch::randn({c, c}, torch::kDouble);
  p.value_bias = torch::randn({c}, torch::kDouble);
  p.gamma = torch::zeros({}, torch::kDouble);
  const auto x = torch::randn({1, c, 2, 2}, torch::kDouble);
  CHECK(torch::equal(self_attention(x, p), x));

  const auto attn = attention_map(x, p);
  CHECK(torch::allclose(attn.sum(-1), torch::ones({1, 4}, torch::kDouble), 0, 1e-5));

  p.gamma = torch::tensor(0.7, torch::kDouble);
  const auto got = self_attention(x, p);
  // scalar loops: positions i,j over the 4 pixels
  const int L = 4;
  auto feat = [&](int ch, int pos) { return x[0][ch][pos / 2][pos % 2].item<double>(); };
  auto proj = [&](const torch::Tensor& w, const torch::Tensor& b, int o, int pos) {
    double s = b[o].item<double>();
    for (int ch = 0; ch < c; ++ch) s += w[o][ch].item<double>() * feat(ch, pos);
    return s;
  };
  for (int i = 0; i < L; ++i) {
    std::vector<double> e(L);
    double mx = -1e300;
    for (int j = 0; j < L; ++j) {
      e[j] = 0;
      for (int o = 0; o < c / r; ++o) e[j] += proj(p.query_weight, p.query_bias, o, i) * proj(p.key_weight, p.key_bias, o, j);
      mx = std::max(mx, e[j]);
    }
    double z = 0;
    for (auto& v : e) z += (v = std::exp(v - mx));
    for (int ch = 0; ch < c; ++ch) {
      double o = 0;
      for (int j = 0; j < L; ++j) o += e[j] / z * proj(p.value_weight, p.value_bias, ch, j);
      CHECK(std::abs(got[0][ch][i / 2][i % 2].item<double>() - (feat(ch, i) + 0.7 * o)) < 1e-10);
    }
  }
  CHECK_THROWS_AS(SelfAttention(6, 4), Error);
}

TEST_CASE("generator shape, range, batching and determinism") {
  auto bundle = NetworkBundle::create(tiny::networks(), 1);
  bundle.train(false);
  const auto x = random_images(2, 64, 3);
  const auto m = random_one_hot(2, 64);
  const auto y = bundle.g_ab->forward(x, m);
  CHECK(y.sizes() == torch::IntArrayRef({2, 3, 64, 64}));
  CHECK(y.min().item<float>() >= 0.0f);
  CHECK(y.max().item<float>() <= 1.0f);
  CHECK(torch::equal(bundle.g_ab->forward(x, m), y));
  const auto single = bundle.g_ab->forward(x.slice(0, 1, 2), m.slice(0, 1, 2));
  CHECK(torch::allclose(single[0], y[1], 1e-5, 1e-6));
  auto again = NetworkBundle::create(tiny::networks(), 1);
  again.train(false);
  CHECK(torch::equal(again.g_ab->forward(x, m), y));
}

TEST_CASE("discriminator posterior and source map") {
  auto bundle = NetworkBundle::create(tiny::networks(), 2);
  bundle.train(false);
  const auto out = bundle.d_a->forward(random_images(2, 64, 5));
  CHECK(out.posterior.sizes() == torch::IntArrayRef({2, 3, 64, 64}));
  CHECK(torch::allclose(out.posterior.sum(1), torch::ones({2, 64, 64}), 0, 1e-5));
  CHECK(out.source.size(2) < 64);
  CHECK(out.source.size(3) < 64);
  CHECK_THROWS_AS(bundle.d_a->forward(torch::rand({1, 3, 60, 60})), Error);
}

TEST_CASE("weight sharing probe") {
  auto bundle = NetworkBundle::create(tiny::networks(), 3);
  bundle.train(false);
  auto& d = bundle.d_a;
  const auto x = random_images(1, 64, 6);
  torch::NoGradGuard no_grad;
  const auto base = d->forward(x);
  for (auto& p : d->seg_head_parameters()) p.add_(0.1);
  const auto seg_perturbed = d->forward(x);
  CHECK(torch::equal(seg_perturbed.source, base.source));
  CHECK_FALSE(torch::equal(seg_perturbed.posterior, base.posterior));

  const auto shared = d->shared_conv_parameters();
  REQUIRE(shared.size() == 6);  // 3 layers x (weight, bias)
  for (int layer = 0; layer < 3; ++layer) {
    const auto before = d->forward(x);
    shared[static_cast<std::size_t>(2 * layer)].mul_(1.5).add_(0.05);
    const auto after = d->forward(x);
    CHECK_FALSE(torch::equal(after.source, before.source));
    CHECK_FALSE(torch::equal(after.posterior, before.posterior));
  }
}

TEST_CASE("attention gamma starts closed") {
  auto bundle = NetworkBundle::create(tiny::networks(), 4);
  for (const auto& [name, p] : bundle.parameter_registry()) {
    if (name.ends_with("gamma")) CHECK(p.item<float>() == 0.0f);
  }
}

TEST_CASE("save and load round-trip") {
  auto a = NetworkBundle::create(tiny::networks(), 5);
  auto b = NetworkBundle::create(tiny::networks(), 6);
  const auto path = std::filesystem::temp_directory_path() / "dasgan_net.pt";
  save_module(*a.d_a, path);
  load_module(*b.d_a, path);
  a.train(false);
  b.train(false);
  const auto x = random_images(1, 64, 7);
  CHECK(torch::equal(a.d_a->forward(x).posterior, b.d_a->forward(x).posterior));
  std::filesystem::remove(path);
}

TEST_CASE("patch bridges") {
  synth::SynthConfig c;
  const auto a = synth::generate_a(c, 2);
  std::vector<ImagePatch> imgs{a[0].image, a[1].image};
  std::vector<LabelMask> masks{a[0].mask, a[1].mask};
  const auto t = images_to_tensor(imgs);
  CHECK(t.sizes() == torch::IntArrayRef({2, 3, 64, 64}));
  CHECK(t[1][2][5][7].item<float>() == a[1].image.at(5, 7, 2));
  const auto l = masks_to_tensor(masks);
  CHECK(l[0][3][4].item<int64_t>() == a[0].mask.at(3, 4));
  const auto back = tensor_to_image(t[0], Domain::A, "x");
  CHECK(std::equal(back.pixels().begin(), back.pixels().end(), a[0].image.pixels().begin()));
  const auto oh = one_hot_labels(torch::tensor({{{0, 255}}}, torch::kInt64));
  CHECK(oh.sizes() == torch::IntArrayRef({1, 3, 1, 2}));
  CHECK(oh[0][0][0][0].item<float>() == 1.0f);
  CHECK(oh.select(3, 1).sum().item<float>() == 0.0f);
}

TEST_CASE("single-patch wrappers") {
  auto bundle = NetworkBundle::create(tiny::networks(), 8);
  bundle.train(false);
  synth::SynthConfig c;
  const auto b = synth::generate_b(c, 1);
  const auto mask = ck::condition_masks(b[0].mask).second;
  const auto fake = generator_forward(bundle.g_ba, b[0].image, mask);
  CHECK(fake.domain() == Domain::A);
  CHECK(fake.height() == 64);
  const auto r = discriminator_forward(bundle.d_a, fake);
  CHECK(r.posterior.height() == 64);
  CHECK(r.source_scores.dim() == 2);
}
