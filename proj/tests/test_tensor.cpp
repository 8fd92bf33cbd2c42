#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "deer/checkpoint.hpp"
#include "deer/tensor.hpp"
#include "oracles.hpp"

using namespace deer;
using Catch::Approx;

namespace {
Tensor<double> dt(Shape s, std::vector<double> v, bool rg = false) {
  return Tensor<double>::from(std::move(s), std::move(v), rg);
}
}  // namespace

TEST_CASE("matmul identity and simple products", "[tensor]") {
  auto a = dt({2, 2}, {1, 2, 3, 4});
  auto eye = dt({2, 2}, {1, 0, 0, 1});
  auto r = matmul(a, eye);
  REQUIRE(r.vec() == std::vector<double>{1, 2, 3, 4});

  auto col = dt({2, 1}, {5, 7});
  auto r2 = matmul(eye, col);
  REQUIRE(r2.vec() == std::vector<double>{5, 7});
  REQUIRE(r2.shape() == Shape{2, 1});
}

TEST_CASE("matmul matches triple-loop oracle", "[tensor]") {
  Rng rng(42);
  std::vector<double> av(12), bv(8);
  for (auto& v : av) v = rng.uniform(-1, 1);
  for (auto& v : bv) v = rng.uniform(-1, 1);
  auto r = matmul(dt({3, 4}, av), dt({4, 2}, bv));
  auto expect = oracle::matmul(av, bv, 3, 4, 2);
  for (int i = 0; i < 6; ++i) REQUIRE(r.vec()[i] == Approx(expect[i]).margin(1e-12));
}

TEST_CASE("matmul shape mismatch names both shapes", "[tensor]") {
  auto a = dt({2, 3}, std::vector<double>(6, 0.0));
  auto b = dt({2, 2}, std::vector<double>(4, 0.0));
  REQUIRE_THROWS_MATCHES(matmul(a, b), DimensionError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("(2,3)") &&
                                                         Catch::Matchers::ContainsSubstring("(2,2)")));
}

TEST_CASE("batched matmul broadcasts shared rhs", "[tensor]") {
  Rng rng(7);
  std::vector<double> av(2 * 3 * 4), bv(4 * 2);
  for (auto& v : av) v = rng.uniform(-1, 1);
  for (auto& v : bv) v = rng.uniform(-1, 1);
  auto r = matmul(dt({2, 3, 4}, av), dt({4, 2}, bv));
  REQUIRE(r.shape() == Shape{2, 3, 2});
  for (int b = 0; b < 2; ++b) {
    std::vector<double> a_slice(av.begin() + b * 12, av.begin() + (b + 1) * 12);
    auto expect = oracle::matmul(a_slice, bv, 3, 4, 2);
    for (int i = 0; i < 6; ++i) REQUIRE(r.vec()[size_t(b * 6 + i)] == Approx(expect[size_t(i)]).margin(1e-12));
  }
}

TEST_CASE("softmax basic properties", "[tensor]") {
  auto r = softmax(dt({3}, {0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i) REQUIRE(r.vec()[i] == Approx(1.0 / 3).margin(1e-15));

  auto s = softmax(dt({2}, {1000, 0}), 0);
  REQUIRE(std::isfinite(s.vec()[0]));
  REQUIRE(s.vec()[0] == Approx(1.0).margin(1e-12));
  REQUIRE(s.vec()[1] == Approx(0.0).margin(1e-12));

  Rng rng(3);
  std::vector<double> xv(9);
  for (auto& v : xv) v = rng.uniform(-3, 3);
  auto y = softmax(dt({9}, xv), 0);
  auto expect = oracle::softmax(xv);
  double total = 0;
  for (int i = 0; i < 9; ++i) {
    REQUIRE(y.vec()[i] == Approx(expect[i]).margin(1e-12));
    REQUIRE(y.vec()[i] >= 0.0);
    total += y.vec()[i];
  }
  REQUIRE(total == Approx(1.0).margin(1e-12));
}

TEST_CASE("softmax along middle axis matches per-slice oracle", "[tensor]") {
  Rng rng(11);
  std::vector<double> xv(2 * 3 * 2);
  for (auto& v : xv) v = rng.uniform(-2, 2);
  auto y = softmax(dt({2, 3, 2}, xv), 1);
  for (int o = 0; o < 2; ++o)
    for (int in = 0; in < 2; ++in) {
      std::vector<double> slice(3);
      for (int j = 0; j < 3; ++j) slice[j] = xv[size_t(o * 6 + j * 2 + in)];
      auto ex = oracle::softmax(slice);
      for (int j = 0; j < 3; ++j) REQUIRE(y.vec()[size_t(o * 6 + j * 2 + in)] == Approx(ex[j]).margin(1e-12));
    }
}

TEST_CASE("group_norm degenerate and oracle cases", "[tensor]") {
  auto gamma1 = dt({4}, {1, 1, 1, 1});
  auto beta0 = dt({4}, {0, 0, 0, 0});
  auto c = Tensor<double>::filled({4, 2, 2}, 3.25);
  auto out = group_norm(c, 2, gamma1, beta0);
  for (auto v : out.vec()) REQUIRE(v == Approx(0.0).margin(1e-12));

  auto gamma0 = dt({4}, {0, 0, 0, 0});
  auto betac = dt({4}, {2.5, 2.5, 2.5, 2.5});
  Rng rng(5);
  std::vector<double> xv(16);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  auto out2 = group_norm(dt({4, 2, 2}, xv), 2, gamma0, betac);
  for (auto v : out2.vec()) REQUIRE(v == Approx(2.5).margin(1e-15));

  REQUIRE_THROWS_AS(group_norm(c, 3, gamma1, beta0), ConfigError);

  // rank-4 1x8x4x4 with 2 groups against direct statistics
  std::vector<double> big(8 * 16);
  for (auto& v : big) v = rng.uniform(-2, 2);
  auto g8 = Tensor<double>::filled({8}, 1.0);
  auto b8 = Tensor<double>::filled({8}, 0.0);
  auto y = group_norm(dt({1, 8, 4, 4}, big), 2, g8, b8, 1e-5);
  for (int g = 0; g < 2; ++g) {
    double m = 0, var = 0;
    for (int i = 0; i < 64; ++i) m += big[size_t(g * 64 + i)];
    m /= 64;
    for (int i = 0; i < 64; ++i) var += (big[size_t(g * 64 + i)] - m) * (big[size_t(g * 64 + i)] - m);
    var /= 64;
    for (int i = 0; i < 64; ++i) {
      double expect = (big[size_t(g * 64 + i)] - m) / std::sqrt(var + 1e-5);
      REQUIRE(y.vec()[size_t(g * 64 + i)] == Approx(expect).margin(1e-10));
    }
  }
}

TEST_CASE("conv2d identity kernel and shapes", "[tensor]") {
  Rng rng(9);
  std::vector<double> xv(2 * 4 * 4);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  // 1x1 kernels selecting each input channel
  auto k = dt({2, 2, 1, 1}, {1, 0, 0, 1});
  auto y = conv2d(dt({2, 4, 4}, xv), k, 1, 0);
  REQUIRE(y.shape() == Shape{2, 4, 4});
  for (size_t i = 0; i < xv.size(); ++i) REQUIRE(y.vec()[i] == Approx(xv[i]).margin(1e-15));

  auto x1 = dt({1, 4, 4}, std::vector<double>(16, 1.0));
  auto k3 = Tensor<double>::filled({1, 1, 3, 3}, 1.0);
  auto y2 = conv2d(x1, k3, 2, 1);
  REQUIRE(y2.shape() == Shape{1, 2, 2});
}

TEST_CASE("transposed_conv2d matches scatter oracle", "[tensor]") {
  Rng rng(14);
  std::vector<double> xv(1 * 2 * 2), kv(1 * 1 * 2 * 2);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  for (auto& v : kv) v = rng.uniform(-1, 1);
  auto y = transposed_conv2d(dt({1, 2, 2}, xv), dt({1, 1, 2, 2}, kv), 2);
  REQUIRE(y.shape() == Shape{1, 4, 4});
  int ho, wo;
  auto expect = oracle::transposed_conv2d(xv, kv, 1, 2, 2, 1, 2, 2, 2, ho, wo);
  REQUIRE(ho == 4);
  for (size_t i = 0; i < expect.size(); ++i) REQUIRE(y.vec()[i] == Approx(expect[i]).margin(1e-13));

  // multi-channel case
  std::vector<double> x2(3 * 2 * 3), k2(3 * 2 * 2 * 2);
  for (auto& v : x2) v = rng.uniform(-1, 1);
  for (auto& v : k2) v = rng.uniform(-1, 1);
  auto y2 = transposed_conv2d(dt({3, 2, 3}, x2), dt({3, 2, 2, 2}, k2), 2);
  auto e2 = oracle::transposed_conv2d(x2, k2, 3, 2, 3, 2, 2, 2, 2, ho, wo);
  REQUIRE(y2.shape() == Shape{2, ho, wo});
  for (size_t i = 0; i < e2.size(); ++i) REQUIRE(y2.vec()[i] == Approx(e2[i]).margin(1e-13));
}

TEST_CASE("cross_entropy extreme and uniform logits", "[tensor]") {
  auto logits = dt({2, 3}, {100, 0, 0, 0, 100, 0});
  auto l = cross_entropy(logits, {0, 1});
  REQUIRE(l.item() < 1e-4);

  auto uni = Tensor<double>::filled({4, 7}, 0.42);
  auto lu = cross_entropy(uni, {0, 3, 6, 2});
  REQUIRE(lu.item() == Approx(std::log(7.0)).margin(1e-10));

  auto li = cross_entropy(uni, {0, -1, -1, 2}, -1);
  REQUIRE(li.item() == Approx(std::log(7.0)).margin(1e-10));
}

TEST_CASE("backward on sum gives ones, product crosses grads", "[tensor]") {
  auto x = dt({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto loss = sum(x);
  backward(loss);
  for (auto g : x.grad_view()) REQUIRE(g == 1.0);

  auto a = dt({1}, {3.0}, true);
  auto b = dt({1}, {5.0}, true);
  auto l2 = mul(a, b);
  backward(l2);
  REQUIRE(a.grad_view()[0] == 5.0);
  REQUIRE(b.grad_view()[0] == 3.0);

  REQUIRE_THROWS_AS(backward(x), UsageError);
}

TEST_CASE("gradient accumulation doubles on replay", "[tensor]") {
  auto x = dt({3}, {0.3, -0.7, 1.2}, true);
  auto run = [&] {
    auto y = mul(x, x);
    backward(sum(y));
  };
  run();
  auto g1 = x.grad_view();
  run();
  for (size_t i = 0; i < 3; ++i) REQUIRE(x.grad_view()[i] == 2.0 * g1[i]);
}

TEST_CASE("composite graph gradients match finite differences", "[tensor]") {
  Rng rng(21);
  std::vector<double> xv(6), wv(6);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  for (auto& v : wv) v = rng.uniform(-1, 1);
  auto f = [](std::vector<Tensor<double>>& in) {
    auto h = matmul(in[0], in[1]);           // [2,2]
    auto s = softmax(h, 1);
    auto r = relu(sub_from_scalar(0.3, s));
    return mean(mul(r, r));
  };
  auto report = check_gradients<double>(f, {dt({2, 3}, xv), dt({3, 2}, wv)}, 1e-5);
  INFO("worst rel err " << report.worst);
  REQUIRE(report.pass);
}

TEST_CASE("check_gradients on identity and softmax-matmul", "[tensor]") {
  auto fid = [](std::vector<Tensor<double>>& in) { return sum(in[0]); };
  auto r1 = check_gradients<double>(fid, {dt({4}, {1, 2, 3, 4})}, 1e-12);
  REQUIRE(r1.worst <= 1e-9);

  Rng rng(33);
  std::vector<double> a(8), b(16);
  for (auto& v : a) v = rng.uniform(-1, 1);
  for (auto& v : b) v = rng.uniform(-1, 1);
  auto f = [](std::vector<Tensor<double>>& in) {
    auto y = softmax(matmul(in[0], in[1]), 1);
    // weight rows asymmetrically so the softmax gradient is nontrivial
    return sum(mul_const_vec(y, {0.9, -0.3, 0.4, 1.7, -1.1, 0.6, 0.2, -0.8}));
  };
  auto r2 = check_gradients<double>(f, {dt({2, 4}, a), dt({4, 4}, b)}, 1e-4);
  REQUIRE(r2.pass);
}

TEST_CASE("elementwise and shape op gradients", "[tensor]") {
  Rng rng(55);
  auto rv = [&](int n) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(0.2, 1.5);
    return v;
  };
  auto f = [](std::vector<Tensor<double>>& in) {
    auto a = in[0];
    auto b = in[1];
    auto x = div(mul(a, b), add_scalar(b, 2.0));
    x = add(x, sub(a, b));
    x = mul(x, sigmoid(a));
    auto t = transpose2d(x);
    auto c = concat_rows(std::vector<Tensor<double>>{t, t});
    auto s = slice_cols(slice_rows(c, 1, 5), 0, 2);
    auto r = reshape(s, {2, 4});
    return mean(abs_op(log_op(add_scalar(mul(r, r), 0.1))));
  };
  auto report = check_gradients<double>(f, {dt({2, 3}, rv(6)), dt({2, 3}, rv(6))}, 1e-5);
  INFO("worst " << report.worst);
  REQUIRE(report.pass);
}

TEST_CASE("conv and norm gradients match finite differences", "[tensor]") {
  Rng rng(77);
  auto rv = [&](int n) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(-1, 1);
    return v;
  };
  auto f = [](std::vector<Tensor<double>>& in) {
    auto y = conv2d(in[0], in[1], 2, 1);
    auto z = transposed_conv2d(y, in[2], 2);
    auto n = group_norm(z, 2, in[3], in[4], 1e-5);
    return mean(mul(n, sigmoid(z)));
  };
  auto report = check_gradients<double>(
      f,
      {dt({2, 4, 4}, rv(32)), dt({3, 2, 3, 3}, rv(54)), dt({3, 2, 2, 2}, rv(24)), dt({2}, rv(2)),
       dt({2}, rv(2))},
      1e-4, 1e-6);
  INFO("worst " << report.worst);
  REQUIRE(report.pass);
}

TEST_CASE("layer_norm and cross_entropy gradients", "[tensor]") {
  Rng rng(88);
  auto rv = [&](int n) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(-1, 1);
    return v;
  };
  auto f = [](std::vector<Tensor<double>>& in) {
    auto y = layer_norm(in[0], in[1], in[2], 1e-5);
    return cross_entropy(y, {2, 0, 1}, -1);
  };
  auto report = check_gradients<double>(f, {dt({3, 4}, rv(12)), dt({4}, rv(4)), dt({4}, rv(4))}, 1e-4);
  REQUIRE(report.pass);

  auto f2 = [](std::vector<Tensor<double>>& in) {
    return cross_entropy(in[0], {1, -1, 0}, -1);
  };
  auto r2 = check_gradients<double>(f2, {dt({3, 3}, rv(9))}, 1e-5);
  REQUIRE(r2.pass);
}

TEST_CASE("gather and embedding gradients", "[tensor]") {
  Rng rng(99);
  std::vector<double> tv(12);
  for (auto& v : tv) v = rng.uniform(-1, 1);
  auto f = [](std::vector<Tensor<double>>& in) {
    auto e = embedding_lookup(in[0], {2, 0, 2});
    auto g = gather_flat(e, {0, 3, 5});
    return sum(mul(g, g));
  };
  auto report = check_gradients<double>(f, {dt({4, 3}, tv)}, 1e-6);
  REQUIRE(report.pass);

  REQUIRE_THROWS_AS(embedding_lookup(dt({4, 3}, tv), {4}), InputError);
}

TEST_CASE("determinism: identical seeds give identical results", "[tensor]") {
  auto run = [] {
    Rng rng(1234);
    auto a = Tensor<float>::rand_uniform({8, 8}, rng, -1.f, 1.f, true);
    auto b = Tensor<float>::rand_uniform({8, 8}, rng, -1.f, 1.f, true);
    auto loss = mean(mul(matmul(a, b), sigmoid(a)));
    backward(loss);
    std::vector<float> out = a.grad_view();
    out.push_back(loss.item());
    return out;
  };
  REQUIRE(run() == run());
}

TEST_CASE("no NaN after forward ops on finite inputs", "[tensor]") {
  Rng rng(4);
  auto x = Tensor<double>::rand_uniform({4, 4}, rng, -50, 50);
  REQUIRE_FALSE(has_nan_or_inf(softmax(x, 1)));
  REQUIRE_FALSE(has_nan_or_inf(sigmoid(x)));
  REQUIRE_FALSE(has_nan_or_inf(relu(x)));
}

TEST_CASE("checkpoint round trip and validation", "[tensor]") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "deer_ckpt_test";
  fs::create_directories(dir);
  auto path = (dir / "t.ckpt").string();

  Rng rng(6);
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  tensors.emplace_back("layer.weight", Tensor<float>::rand_uniform({3, 4}, rng, -1.f, 1.f));
  tensors.emplace_back("layer.bias", Tensor<float>::rand_uniform({4}, rng, -1.f, 1.f));
  save_checkpoint(path, tensors);

  auto loaded = load_checkpoint<float>(path);
  REQUIRE(loaded.size() == 2);
  REQUIRE(loaded[0].first == "layer.weight");
  REQUIRE(loaded[0].second.shape() == Shape{3, 4});
  REQUIRE(loaded[0].second.vec() == tensors[0].second.vec());
  REQUIRE(loaded[1].second.vec() == tensors[1].second.vec());

  // corrupt magic
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "NOTADEER garbage";
  }
  REQUIRE_THROWS_AS(load_checkpoint<float>(path), InputError);

  // truncated file
  save_checkpoint(path, tensors);
  {
    std::error_code ec;
    fs::resize_file(path, fs::file_size(path) - 3, ec);
    REQUIRE_FALSE(ec);
  }
  REQUIRE_THROWS_AS(load_checkpoint<float>(path), InputError);
}
