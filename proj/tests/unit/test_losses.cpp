#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "metricforge/errors.hpp"
#include "metricforge/gradcheck.hpp"
#include "metricforge/losses.hpp"
#include "oracles.hpp"

using namespace metricforge;

namespace {

Tensor vec(std::vector<double> v, bool grad = false) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v), grad);
}

Tensor rows(std::size_t r, std::size_t c, std::mt19937_64& rng, bool grad = false) {
  return Tensor(Shape{r, c}, testutil::random_values(r * c, rng), grad);
}

// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
std::vector<std::vector<double>> random_rotation(std::size_t d, std::mt19937_64& rng) {
  std::vector<std::vector<double>> q;
  while (q.size() < d) {
    auto v = testutil::random_values(d, rng);
    for (const auto& u : q) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += u[i] * v[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    q.push_back(v);
  }
  return q;
}

Tensor apply(const std::vector<std::vector<double>>& q, const Tensor& x, double scale = 1.0) {
  const std::size_t r = x.dim(0), d = x.dim(1);
  std::vector<double> out(r * d, 0.0);
  for (std::size_t row = 0; row < r; ++row)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out[row * d + i] += scale * q[i][j] * x.at(row * d + j);
  return Tensor(x.shape(), out);
}

double row_dot(const Tensor& x, std::size_t i, const Tensor& y, std::size_t j) {
  const std::size_t d = x.dim(1);
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += x.at(i * d + k) * y.at(j * d + k);
  return s;
}

double row_dist2(const Tensor& x, std::size_t i, std::size_t j) {
  const std::size_t d = x.dim(1);
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += (x.at(i * d + k) - x.at(j * d + k)) * (x.at(i * d + k) - x.at(j * d + k));
  return s;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("triplet examples") {
    CHECK(triplet_loss(vec({0, 0}), vec({0, 0}), vec({2, 0}), 1.0).item() == 0.0);
    CHECK(triplet_loss(vec({0, 0}), vec({1, 0}), vec({0, 1}), 0.5).item() == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(triplet_loss(vec({0, 0}), vec({3, 0}), vec({1, 0}), 0.2).item() == doctest::Approx(8.2).epsilon(1e-9));
    CHECK_THROWS_AS(triplet_loss(vec({0, 0}), vec({1, 0, 0}), vec({0, 1}), 0.5), ShapeError);
  }

  TEST_CASE("tuplet examples") {
    CHECK(tuplet_loss(vec({1, 0}), vec({1, 0}), vec({1, 0})).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    CHECK(tuplet_loss(vec({1, 0}), vec({1, 0}), vec({0, 1})).item() ==
          doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-6));
    CHECK(tuplet_loss(vec({1, 0}), vec({1, 0}), vec({-1e4, 0})).item() < 1e-300);
  }

  TEST_CASE("tuplet loss grows strictly with the negative's inner product") {
    double prev = -1.0;
    for (double x = -5.0; x <= 5.0; x += 0.25) {
      const double l = tuplet_loss(vec({1, 0.5}), vec({0.3, 1}), vec({x, 0})).item();
      CHECK(l > prev);
      prev = l;
    }
  }

  TEST_CASE("n-pair examples") {
    const double s = std::sqrt(0.5);
    const Tensor same(Shape{2, 2}, {s, s, s, s});
    CHECK(npair_loss(same, same).item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));
    const Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
    CHECK(npair_loss(eye, eye).item() == doctest::Approx(2.0 * std::log1p(std::exp(-1.0))).epsilon(1e-6));
    CHECK_THROWS_AS(npair_loss(eye, eye, {3, 3}), ContractError);
    CHECK_NOTHROW(npair_loss(eye, eye, {3, 4}));
  }

  TEST_CASE("n-pair loss is exactly the sum of tuplet losses") {
    std::mt19937_64 rng(1);
    for (std::size_t n = 2; n <= 10; ++n) {
      const Tensor fa = rows(n, 5, rng), fp = rows(n, 5, rng);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < n; ++j)
          if (j != i) others.push_back(j);
        const std::size_t self[] = {i};
        total += tuplet_loss(gather_rows(fa, self), gather_rows(fp, self), gather_rows(fp, others)).item();
      }
      CHECK(npair_loss(fa, fp).item() == total);
    }
  }

  TEST_CASE("angular examples") {
    CHECK(angular_loss(vec({0, 0}), vec({2, 0}), vec({1, 2}), 45.0).item() == 0.0);
    CHECK(angular_loss(vec({0, 0}), vec({2, 0}), vec({1, 0.5}), 45.0).item() == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(angular_loss(vec({0.3, -1}), vec({0.3, -1}), vec({4, 2}), 45.0).item() == 0.0);
    CHECK_THROWS_AS(angular_loss(vec({0, 0}), vec({2, 0}), vec({1, 2}), 0.0), ContractError);
    CHECK_THROWS_AS(angular_loss(vec({0, 0}), vec({2, 0}), vec({1, 2}), 90.0), ContractError);
  }

  TEST_CASE("angular hinge activation is scale invariant") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 200; ++t) {
      const Tensor a = rows(1, 3, rng), p = rows(1, 3, rng), n = rows(1, 3, rng);
      const double c = std::exp(testutil::random_values(1, rng, -2.0, 2.0)[0]);
      const auto q = random_rotation(3, rng);
      const double base = angular_loss(a, p, n, 45.0).item();
      const double scaled = angular_loss(apply(q, a, c), apply(q, p, c), apply(q, n, c), 45.0).item();
      CHECK((base > 0) == (scaled > 0));
      CHECK(scaled == doctest::Approx(c * c * base).epsilon(1e-9));
    }
  }

  TEST_CASE("triplet and angular losses are rotation invariant") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 50; ++t) {
      const Tensor a = rows(4, 6, rng), p = rows(4, 6, rng), n = rows(4, 6, rng);
      const auto q = random_rotation(6, rng);
      const Tensor ra = apply(q, a), rp = apply(q, p), rn = apply(q, n);
      CHECK(std::abs(triplet_loss(a, p, n, 0.3).item() - triplet_loss(ra, rp, rn, 0.3).item()) < 1e-9);
      CHECK(std::abs(angular_loss(a, p, n, 45.0).item() - angular_loss(ra, rp, rn, 45.0).item()) < 1e-9);
    }
  }

  TEST_CASE("softmax cross-entropy examples") {
    const Tensor uniform(Shape{1, 10}, std::vector<double>(10, 0.7));
    CHECK(softmax_ce_loss(uniform, {3}).item() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
    CHECK(softmax_ce_loss(Tensor(Shape{1, 2}, {1, 0}), {0}).item() ==
          doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-6));
    CHECK(softmax_ce_loss(Tensor(Shape{1, 3}, {1e4, 0, 0}), {0}).item() < 1e-300);
    CHECK_THROWS_AS(softmax_ce_loss(uniform, {10}), ContractError);
  }

  TEST_CASE("every loss is non-negative") {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 100; ++t) {
      const Tensor a = rows(3, 4, rng), p = rows(3, 4, rng), n = rows(3, 4, rng);
      CHECK(triplet_loss(a, p, n, 0.3).item() >= 0.0);
      CHECK(angular_loss(a, p, n, 30.0).item() >= 0.0);
      CHECK(npair_loss(a, p).item() >= 0.0);
      CHECK(tuplet_loss(gather_rows(a, std::vector<std::size_t>{0}), gather_rows(p, std::vector<std::size_t>{0}), n).item() >= 0.0);
      CHECK(softmax_ce_loss(a, {0, 1, 2}).item() >= 0.0);
    }
  }

  TEST_CASE("gradients match finite differences away from kinks") {
    std::mt19937_64 rng(5);
    const Tensor p = rows(3, 4, rng), n = rows(3, 4, rng);
    const Tensor a = rows(3, 4, rng, true);
    CHECK(finite_diff_check([&](const Tensor& x) { return triplet_loss(x, p, n, 2.0); }, a) < 1e-4);
    CHECK(finite_diff_check([&](const Tensor& x) { return angular_loss(x, p, n, 60.0); }, a) < 1e-4);
    CHECK(finite_diff_check([&](const Tensor& x) { return npair_loss(x, p); }, a) < 1e-4);
    CHECK(finite_diff_check([&](const Tensor& x) { return softmax_ce_loss(x, {3, 0, 1}); }, a) < 1e-4);
    const Tensor f = rows(1, 4, rng, true);
    const Tensor fp = rows(1, 4, rng);
    CHECK(finite_diff_check([&](const Tensor& x) { return tuplet_loss(x, fp, n); }, f) < 1e-4);
  }

  TEST_CASE("combined loss with all weights zero is zero") {
    std::mt19937_64 rng(6);
    BatchOutputs b;
    b.normalized = l2_normalize_rows(rows(4, 3, rng));
    b.raw = rows(4, 3, rng);
    b.logits = rows(4, 2, rng);
    b.class_labels = {0, 0, 1, 1};
    b.triplets = {{0, 1, 2}, {1, 0, 3}, {2, 3, 0}, {3, 2, 1}};
    b.npair = NPairTuple{{0, 2}, {1, 3}, {0, 1}};
    LossWeights w{0, 0, 0, 0};
    CHECK(combined_loss(b, w).total_value == 0.0);
  }

  TEST_CASE("combined loss with only the triplet weight is the mean triplet loss") {
    std::mt19937_64 rng(7);
    BatchOutputs b;
    b.normalized = l2_normalize_rows(rows(4, 3, rng));
    b.triplets = {{0, 1, 2}, {1, 0, 3}, {2, 3, 0}, {3, 2, 1}};
    LossWeights w{0, 0, 1, 0};
    double expected = 0.0;
    for (const auto& t : b.triplets) {
      expected += std::max(0.0, row_dist2(b.normalized, t.anchor, t.positive) + w.triplet_margin -
                                    row_dist2(b.normalized, t.anchor, t.negative));
    }
    CHECK(combined_loss(b, w).total_value == doctest::Approx(expected / 4).epsilon(1e-12));
  }

  TEST_CASE("combined loss matches independently computed terms") {
    std::mt19937_64 rng(8);
    const std::size_t B = 8, D = 5, C = 4;
    BatchOutputs b;
    b.raw = rows(B, D, rng);
    b.normalized = l2_normalize_rows(b.raw);
    b.logits = rows(B, C, rng);
    b.class_labels = {0, 0, 1, 1, 2, 2, 3, 3};
    b.triplets = {{0, 1, 4}, {1, 0, 2}, {2, 3, 7}, {3, 2, 5}, {4, 5, 6}, {5, 4, 0}, {6, 7, 1}, {7, 6, 3}};
    b.npair = NPairTuple{{0, 2, 4, 6}, {1, 3, 5, 7}, {0, 1, 2, 3}};
    const LossWeights w;  // 0.5, 0.1, 1.0, 1.0

    const Tensor& e = b.normalized;
    double tri = 0.0, ang = 0.0;
    const double t2 = std::pow(std::tan(w.angular_alpha_deg * std::numbers::pi / 180.0), 2);
    for (const auto& t : b.triplets) {
      tri += std::max(0.0, row_dist2(e, t.anchor, t.positive) + w.triplet_margin - row_dist2(e, t.anchor, t.negative));
      double c2 = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        const double mid = 0.5 * (e.at(t.anchor * D + k) + e.at(t.positive * D + k));
        c2 += (e.at(t.negative * D + k) - mid) * (e.at(t.negative * D + k) - mid);
      }
      ang += std::max(0.0, row_dist2(e, t.anchor, t.positive) - 4.0 * t2 * c2);
    }
    tri /= 8;
    ang /= 8;

    double np = 0.0;
    const auto& tu = *b.npair;
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      const double self = row_dot(b.raw, tu.anchors[i], b.raw, tu.positives[i]);
      for (std::size_t j = 0; j < 4; ++j)
        if (j != i) s += std::exp(row_dot(b.raw, tu.anchors[i], b.raw, tu.positives[j]) - self);
      np += std::log1p(s);
    }
    np /= 4;

    double soft = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(b.logits.at(r * C + c));
      soft += std::log(z) - b.logits.at(r * C + b.class_labels[r]);
    }
    soft /= B;

    const LossBreakdown got = combined_loss(b, w);
    CHECK(got.triplet == doctest::Approx(tri).epsilon(1e-12));
    CHECK(got.angular == doctest::Approx(ang).epsilon(1e-12));
    CHECK(got.npair == doctest::Approx(np).epsilon(1e-12));
    CHECK(got.softmax == doctest::Approx(soft).epsilon(1e-12));
    const double expected = 0.5 * np + 0.1 * soft + 1.0 * tri + 1.0 * ang;
    CHECK(std::abs(got.total_value - expected) < 1e-12);
  }

  TEST_CASE("combined loss gradient matches finite differences") {
    std::mt19937_64 rng(9);
    const std::vector<TripletIndices> triplets{{0, 1, 2}, {1, 0, 3}, {2, 3, 1}, {3, 2, 0}};
    const Tensor raw = rows(4, 3, rng, true);
    const Tensor logit_w = rows(3, 2, rng);
    const LossWeights w{0.5, 0.1, 1.0, 1.0, 0.3, 45.0};
    const auto f = [&](const Tensor& x) {
      BatchOutputs b;
      b.raw = x;
      b.normalized = l2_normalize_rows(x);
      b.logits = matmul(x, logit_w);
      b.class_labels = {0, 0, 1, 1};
      b.triplets = triplets;
      b.npair = NPairTuple{{0, 2}, {1, 3}, {0, 1}};
      return combined_loss(b, w).total;
    };
    CHECK(finite_diff_check(f, raw) < 1e-4);
  }

  TEST_CASE("missing inputs for weighted terms are contract errors") {
    std::mt19937_64 rng(10);
    BatchOutputs b;
    b.normalized = rows(4, 3, rng);
    b.raw = b.normalized;
    CHECK_THROWS_AS(combined_loss(b, LossWeights{}), ContractError);
    CHECK_THROWS_AS(combined_loss(b, LossWeights{-1, 0, 0, 0}), ContractError);
  }
}
