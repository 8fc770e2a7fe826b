#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "poselatent/errors.hpp"
#include "poselatent/fta.hpp"
#include "poselatent/random.hpp"
#include "poselatent/tensor.hpp"

using namespace poselatent;

namespace {

TensorD random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD::from(std::move(shape), std::move(v), requires_grad);
}

// Central-difference gradient of sum(f(x)) w.r.t. every element of x.
template <typename F>
std::vector<double> fd_grad_of_sum(TensorD x, F f, double eps = 1e-6) {
  std::vector<double> g(x.numel());
  auto w = x.mutable_data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + eps;
    const double fp = sum(f(x)).item();
    w[i] = orig - eps;
    const double fm = sum(f(x)).item();
    w[i] = orig;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

}  // namespace

TEST_CASE("affine forward examples") {
  auto x = TensorD::from({1, 2}, {1, 2});
  auto id = TensorD::from({2, 2}, {1, 0, 0, 1});
  auto zero = TensorD::from({2}, {0, 0});
  auto y = affine(x, id, zero);
  CHECK(y[0] == 1);
  CHECK(y[1] == 2);

  auto x2 = TensorD::from({1, 2}, {1, 1});
  auto w2 = TensorD::from({2, 2}, {2, 3, 4, 5});
  auto b2 = TensorD::from({2}, {1, 1});
  auto y2 = affine(x2, w2, b2);
  CHECK(y2[0] == 7);
  CHECK(y2[1] == 9);
}

TEST_CASE("affine weight gradient matches finite differences") {
  auto x = TensorD::from({1, 2}, {1, 2});
  auto w = TensorD::from({2, 2}, {0.3, -0.1, 0.7, 0.2}, true);
  auto b = TensorD::from({2}, {0, 0});
  sum(affine(x, w, b)).backward();
  const auto fd = fd_grad_of_sum(w, [&](const TensorD& wv) { return affine(x, wv, b); });
  const std::vector<double> expected{1, 1, 2, 2};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(fd[i] == doctest::Approx(expected[i]).epsilon(1e-8));
    CHECK(w.grad()[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  }
}

TEST_CASE("affine rejects shape mismatch naming both shapes") {
  auto x = TensorD::zeros({2, 3});
  auto w = TensorD::zeros({2, 2});
  try {
    affine(x, w, TensorD{});
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("conv2d examples") {
  auto ones = TensorD::full({1, 1, 3, 3}, 1.0);
  auto k = TensorD::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(ones, k, 1);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y[4] == 9);  // center
  CHECK(y[0] == 4);  // corner
  CHECK(y[2] == 4);
  CHECK(y[1] == 6);  // edge

  Rng rng(1);
  auto x = random_tensor({2, 3, 5, 4}, rng, false);
  std::vector<double> kid(3 * 3 * 9, 0.0);
  for (int c = 0; c < 3; ++c) kid[(c * 3 + c) * 9 + 4] = 1.0;
  auto same = conv2d(x, TensorD::from({3, 3, 3, 3}, kid), 1);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same[i] == x[i]);

  auto x4 = TensorD::full({1, 1, 4, 4}, 1.0);
  CHECK(conv2d(x4, k, 2).shape() == Shape{1, 1, 2, 2});
  auto x5 = TensorD::full({1, 1, 5, 5}, 1.0);
  CHECK(conv2d(x5, k, 2).shape() == Shape{1, 1, 3, 3});
}

TEST_CASE("conv2d channel mismatch") {
  CHECK_THROWS_AS(conv2d(TensorD::zeros({1, 2, 4, 4}), TensorD::zeros({1, 3, 3, 3}), 1), DimensionError);
}

TEST_CASE("upsample2x_nearest") {
  auto one = upsample2x_nearest(TensorD::from({1, 1, 1, 1}, {1}));
  CHECK(one.shape() == Shape{1, 1, 2, 2});
  for (double v : one.data()) CHECK(v == 1);

  auto row = upsample2x_nearest(TensorD::from({1, 1, 1, 2}, {1, 2}));
  const std::vector<double> expected{1, 1, 2, 2, 1, 1, 2, 2};
  for (std::size_t i = 0; i < 8; ++i) CHECK(row[i] == expected[i]);

  auto x = TensorD::from({1, 1, 2, 2}, {0.1, 0.2, 0.3, 0.4}, true);
  sum(upsample2x_nearest(x)).backward();
  const auto fd = fd_grad_of_sum(x, [](const TensorD& v) { return upsample2x_nearest(v); });
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(fd[i] == doctest::Approx(4.0).epsilon(1e-8));
    CHECK(x.grad()[i] == 4.0);
  }
}

TEST_CASE("instance_stats") {
  auto c = instance_stats(TensorD::full({1, 1, 2, 2}, 5.0));
  CHECK(c.mu[0] == doctest::Approx(5.0));
  CHECK(c.sigma[0] == doctest::Approx(std::sqrt(kInstanceNormEps)).epsilon(1e-9));
  CHECK(c.sigma[0] == doctest::Approx(3.16e-3).epsilon(1e-3));

  auto two = instance_stats(TensorD::from({1, 1, 1, 2}, {1, 3}));
  CHECK(two.mu[0] == doctest::Approx(2.0));
  CHECK(two.sigma[0] == doctest::Approx(std::sqrt(1 + kInstanceNormEps)).epsilon(1e-12));

  Rng rng(3);
  auto f = random_tensor({2, 3, 3, 2}, rng);
  CHECK(grad_check([](std::span<const TensorD> in) { return spatial_mean(in[0]); }, {f}) < 1e-4);
  CHECK(grad_check([](std::span<const TensorD> in) { return spatial_std(in[0]); }, {f}) < 1e-4);
}

TEST_CASE("adain_modulate") {
  Rng rng(5);
  auto f = random_tensor({2, 3, 4, 4}, rng, false, -2, 3);
  auto ones = TensorD::full({2, 3}, 1.0);
  auto zeros = TensorD::zeros({2, 3});
  auto normed = adain_modulate(f, ones, zeros);
  auto st = instance_stats(normed);
  for (std::size_t p = 0; p < 6; ++p) {
    CHECK(std::abs(st.mu[p]) < 1e-12);
    CHECK(st.sigma[p] == doctest::Approx(1.0).epsilon(1e-4));
  }

  auto orig = instance_stats(f);
  auto back = adain_modulate(f, orig.sigma, orig.mu);
  for (std::size_t i = 0; i < f.numel(); ++i) CHECK(back[i] == doctest::Approx(f[i]).epsilon(1e-9));

  auto small = random_tensor({1, 2, 2, 2}, rng);
  auto gs = random_tensor({1, 2}, rng);
  auto gb = random_tensor({1, 2}, rng);
  const double err = grad_check(
      [](std::span<const TensorD> in) { return adain_modulate(in[0], in[1], in[2]); }, {small, gs, gb});
  CHECK(err < 1e-4);
}

TEST_CASE("bilinear_contract") {
  const std::size_t d = 3;
  std::vector<double> diag(d * d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) diag[i * d * d + i * d + i] = 1.0;
  auto a = TensorD::from({d}, {1.5, -2, 0.5});
  auto b = TensorD::from({d}, {2, 3, -4});
  auto out = bilinear_contract(TensorD::from({d, d, d}, diag), a, b);
  for (std::size_t k = 0; k < d; ++k) CHECK(out[k] == doctest::Approx(a[k] * b[k]));

  auto ones = TensorD::full({2, 2, 2}, 1.0);
  auto o2 = bilinear_contract(ones, TensorD::from({2}, {1, 2}), TensorD::from({2}, {3, 4}));
  CHECK(o2[0] == 21);
  CHECK(o2[1] == 21);

  // Batched against a triple-loop oracle, with per-row and shared first operands.
  Rng rng(11);
  const std::size_t dd = 4, batch = 3;
  auto w = random_tensor({dd, dd, dd}, rng, false);
  auto arow = random_tensor({batch, dd}, rng, false);
  auto ashared = random_tensor({1, dd}, rng, false);
  auto v = random_tensor({batch, dd}, rng, false);
  auto per_row = bilinear_contract(w, arow, v);
  auto shared = bilinear_contract(w, ashared, v);
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t k = 0; k < dd; ++k) {
      double acc_row = 0, acc_shared = 0;
      for (std::size_t i = 0; i < dd; ++i) {
        for (std::size_t j = 0; j < dd; ++j) {
          acc_row += w[i * dd * dd + j * dd + k] * arow[r * dd + i] * v[r * dd + j];
          acc_shared += w[i * dd * dd + j * dd + k] * ashared[i] * v[r * dd + j];
        }
      }
      CHECK(per_row[r * dd + k] == doctest::Approx(acc_row).epsilon(1e-12));
      CHECK(shared[r * dd + k] == doctest::Approx(acc_shared).epsilon(1e-12));
    }
  }

  CHECK_THROWS_AS(bilinear_contract(w, TensorD::zeros({3}), TensorD::zeros({4})), DimensionError);
}

TEST_CASE("bilinear_contract gradients") {
  Rng rng(13);
  auto w = random_tensor({3, 3, 3}, rng);
  auto a = random_tensor({3}, rng);
  auto b = random_tensor({3}, rng);
  auto op = [](std::span<const TensorD> in) { return bilinear_contract(in[0], in[1], in[2]); };
  CHECK(grad_check(op, {w, a, b}) < 1e-4);

  auto w4 = random_tensor({4, 4, 4}, rng);
  auto a4 = random_tensor({2, 4}, rng);
  auto b4 = random_tensor({2, 4}, rng);
  CHECK(grad_check(op, {w4, a4, b4}) < 1e-6);
  auto a1 = random_tensor({1, 4}, rng);
  CHECK(grad_check(op, {w4, a1, b4}) < 1e-6);
}

TEST_CASE("grad_check reference cases") {
  Rng rng(17);
  auto x = random_tensor({3, 3}, rng);
  auto w = random_tensor({3, 3}, rng);
  auto b = random_tensor({3}, rng);
  CHECK(grad_check([](std::span<const TensorD> in) { return affine(in[0], in[1], in[2]); }, {x, w, b}) < 1e-7);

  auto bad = [](std::span<const TensorD> in) {
    return scale(in[0], std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(grad_check(bad, {random_tensor({2}, rng)}), NumericError);
}

TEST_CASE("every primitive passes the finite-difference check") {
  Rng rng(19);
  std::vector<std::pair<const char*, double>> results;
  auto run = [&](const char* name, const GradCheckOp& op, std::vector<TensorD> in) {
    const double err = grad_check(op, std::move(in));
    INFO(name << " rel err " << err);
    CHECK(err < 1e-4);
  };
  run("conv2d s1", [](auto in) { return conv2d(in[0], in[1], 1, in[2]); },
      {random_tensor({2, 2, 4, 3}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  run("conv2d s2", [](auto in) { return conv2d(in[0], in[1], 2); },
      {random_tensor({1, 2, 5, 4}, rng), random_tensor({2, 2, 3, 3}, rng)});
  run("upsample", [](auto in) { return upsample2x_nearest(in[0]); }, {random_tensor({1, 2, 2, 3}, rng)});
  run("leaky_relu", [](auto in) { return leaky_relu(in[0]); }, {random_tensor({10}, rng)});
  run("sigmoid", [](auto in) { return sigmoid(in[0]); }, {random_tensor({10}, rng, true, -5, 5)});
  run("softplus", [](auto in) { return softplus(in[0]); }, {random_tensor({10}, rng, true, -5, 5)});
  run("mul", [](auto in) { return mul(in[0], in[1]); }, {random_tensor({6}, rng), random_tensor({6}, rng)});
  run("sub", [](auto in) { return sub(in[0], in[1]); }, {random_tensor({6}, rng), random_tensor({6}, rng)});
  run("mse", [](auto in) { return mse(in[0], in[1]); }, {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  run("mean", [](auto in) { return mean(in[0]); }, {random_tensor({2, 3}, rng)});
  run("slice/concat", [](auto in) { return concat_cols(slice_cols(in[0], 1, 3), in[1]); },
      {random_tensor({2, 4}, rng), random_tensor({2, 2}, rng)});
  run("reshape", [](auto in) { return reshape(in[0], {3, 2}); }, {random_tensor({2, 3}, rng)});
  run("normalize_rows", [](auto in) { return normalize_rows(in[0]); }, {random_tensor({3, 4}, rng)});
  run("row_dot", [](auto in) { return row_dot(in[0], in[1]); }, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("cross_entropy",
      [](auto in) {
        const std::vector<std::size_t> t{2, 0};
        return cross_entropy(in[0], t);
      },
      {random_tensor({2, 4}, rng, true, -3, 3)});
}

TEST_CASE("forward results are bit-identical across runs") {
  Rng r1(23), r2(23);
  auto x1 = random_tensor({2, 3, 6, 6}, r1, false);
  auto k1 = random_tensor({4, 3, 3, 3}, r1, false);
  auto x2 = random_tensor({2, 3, 6, 6}, r2, false);
  auto k2 = random_tensor({4, 3, 3, 3}, r2, false);
  auto y1 = adain_modulate(conv2d(x1, k1, 2), TensorD::full({2, 4}, 1.5), TensorD::full({2, 4}, 0.5));
  auto y2 = adain_modulate(conv2d(x2, k2, 2), TensorD::full({2, 4}, 1.5), TensorD::full({2, 4}, 0.5));
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("gradients accumulate across backward calls") {
  auto w = TensorD::from({2}, {1, 2}, true);
  sum(scale(w, 3.0)).backward();
  sum(scale(w, 3.0)).backward();
  CHECK(w.grad()[0] == 6);
  w.zero_grad();
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("normalize_rows guards zero norm") {
  CHECK_THROWS_AS(normalize_rows(TensorD::zeros({1, 3})), NumericError);
}

TEST_CASE("adam_step") {
  AdamState<double> st;
  auto p = TensorD::from({1}, {0.5}, true);
  std::vector<TensorD> params{p};
  p.mutable_grad()[0] = 0.0;
  adam_step<double>(params, st);
  CHECK(p[0] == 0.5);
  CHECK(st.t == 1);

  AdamState<double> st2;
  auto q = TensorD::from({1}, {0.0}, true);
  std::vector<TensorD> qs{q};
  q.mutable_grad()[0] = 1.0;
  adam_step<double>(qs, st2);
  // t=1: mhat = 1, vhat = 1 -> step = lr / (1 + eps)
  CHECK(q[0] == doctest::Approx(-0.0002 / (1 + 1e-8)).epsilon(1e-12));
  const double before = q[0];
  adam_step<double>(qs, st2);
  CHECK(std::abs(q[0] - before) <= 0.0002 * (1 + 1e-9));
  CHECK(st2.t == 2);
}

TEST_CASE("FTA archive round trip and layout") {
  Archive a;
  a.put("w", Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  a.put_json("meta.json", {{"format", "x/1"}, {"n", 3}});
  const auto bytes = a.serialize();
  REQUIRE(bytes.size() >= 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FTA1");
  CHECK(bytes[4] == 2);
  // first entry: name length 1, 'w', dtype 0, rank 2, dims 2 and 3
  CHECK(bytes[8] == 1);
  CHECK(bytes[12] == 'w');
  CHECK(bytes[13] == 0);
  CHECK(bytes[14] == 2);
  CHECK(bytes[15] == 2);
  CHECK(bytes[19] == 3);

  const auto b = Archive::deserialize(bytes);
  CHECK(b.tensor("w").shape() == Shape{2, 3});
  CHECK(b.tensor("w")[5] == 6.0f);
  CHECK(b.json("meta.json")["n"] == 3);
  CHECK(b.serialize() == bytes);

  auto broken = bytes;
  broken.resize(broken.size() - 1);
  CHECK_THROWS_AS(Archive::deserialize(broken), IoError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(Archive::deserialize(bad_magic), IoError);
}
