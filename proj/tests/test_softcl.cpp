// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "voicespace/errors.hpp"
#include "voicespace/softcl.hpp"

using namespace voicespace;
using vs_test::random_tensor;
using vs_test::to_vec;

namespace {

vs_oracle::Mat rows_of(const Tensor& t) { return vs_oracle::from_flat(to_vec(t), t.rows(), t.cols()); }

Tensor tau_of(double v) { return Tensor::scalar(v); }

}  // namespace

TEST_CASE("self_similarity examples") {
  auto e = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto p = self_similarity(e, tau_of(1.0));
  CHECK(p.at(0, 0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(p.at(0, 1) == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  CHECK(p.at(1, 0) == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  CHECK(p.at(1, 1) == doctest::Approx(0.7310585786300049).epsilon(1e-12));

  auto same = self_similarity(Tensor::matrix(3, 2, {0.4, 1, 0.4, 1, 0.4, 1}), tau_of(0.07));
  for (double v : same.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  // Self-similarity beats every other similarity by >= 0.1 -> sharp rows at tau = 0.01.
  auto distinct = Tensor::matrix(3, 3, {1, 0, 0, 0.6, 0.8, 0, 0, 0.6, 0.8});
  auto sharp = self_similarity(distinct, tau_of(0.01));
  for (std::size_t i = 0; i < 3; ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j < 3; ++j) mx = std::max(mx, sharp.at(i, j));
    CHECK(mx > 0.99);
  }
  CHECK_THROWS_AS(self_similarity(Tensor::matrix(1, 2, {1, 0}), tau_of(1.0)), ContractError);
}

TEST_CASE("neg_disentangle examples") {
  auto two = neg_disentangle(Tensor::matrix(2, 2, {0.9, 0.1, 0.3, 0.7}));
  CHECK(two.shape() == Shape{2, 1});
  CHECK(two.at(0) == 1.0);
  CHECK(two.at(1) == 1.0);

  auto eq = neg_disentangle(Tensor::matrix(3, 3, {0.4, 0.3, 0.3, 0.3, 0.4, 0.3, 0.3, 0.3, 0.4}));
  for (double v : eq.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-14));

  auto p = neg_disentangle(Tensor::matrix(3, 3, {0.2, 0.5, 0.3, 0.2, 0.5, 0.3, 0.2, 0.5, 0.3}));
  CHECK(p.at(0, 0) == doctest::Approx(0.5498339973124779).epsilon(1e-12));
  CHECK(p.at(0, 1) == doctest::Approx(0.4501660026875221).epsilon(1e-12));
}

TEST_CASE("intra_loss") {
  Rng rng(12);
  SUBCASE("identical embeddings give zero") {
    auto s = random_tensor(rng, {5, 4});
    CHECK(std::fabs(intra_loss(s, s, tau_of(0.07)).item()) < 1e-10);
  }
  SUBCASE("N = 2 is always zero") {
    for (int trial = 0; trial < 50; ++trial) {
      auto s = random_tensor(rng, {2, 4}, -3, 3);
      auto v = random_tensor(rng, {2, 4}, -3, 3);
      CHECK(intra_loss(s, v, tau_of(0.07)).item() == 0.0);
    }
  }
  SUBCASE("matches the composition oracle") {
    for (int trial = 0; trial < 20; ++trial) {
      auto s = random_tensor(rng, {4, 3});
      auto v = random_tensor(rng, {4, 3});
      const double tau = 0.05 + 0.5 * vs_test::random_tensor(rng, {}, 0, 1).item();
      CHECK(std::fabs(intra_loss(s, v, tau_of(tau)).item() -
                      vs_oracle::intra_loss(rows_of(s), rows_of(v), tau)) < 1e-10);
    }
  }
  SUBCASE("permutation equivariant") {
    auto s = random_tensor(rng, {6, 3});
    auto v = random_tensor(rng, {6, 3});
    std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
    const double a = intra_loss(s, v, tau_of(0.3)).item();
    const double b = intra_loss(gather_rows(s, perm), gather_rows(v, perm), tau_of(0.3)).item();
    CHECK(std::fabs(a - b) < 1e-10);
  }
  SUBCASE("teacher side receives no gradient") {
    auto s = random_tensor(rng, {4, 3}, -1, 1, true);
    auto v = random_tensor(rng, {4, 3}, -1, 1, true);
    auto tau = Tensor::scalar(0.5, true);
    auto loss = intra_loss(s.detach(), v, tau);
    backward(loss);
    CHECK(!v.grad().empty());
    CHECK(!tau.grad().empty());
  }
  SUBCASE("gradients match finite differences") {
    auto s = random_tensor(rng, {5, 3});
    auto v = random_tensor(rng, {5, 3});
    CHECK(vs_test::grad_check([&](const Tensor& x) { return intra_loss(s, x, tau_of(0.4)); }, v) <= 1.0);
    // tau enters the student only; the teacher holds its value fixed.
    auto tau = Tensor::scalar(0.4, true);
    backward(intra_loss(s, v, tau));
    const auto sm = rows_of(s), vm = rows_of(v);
    const auto teacher = vs_oracle::neg_disentangle(vs_oracle::similarity_softmax(sm, sm, 0.4));
    auto student_only = [&](double t) {
      return vs_oracle::kl_mean(teacher, vs_oracle::neg_disentangle(vs_oracle::similarity_softmax(sm, vm, t)));
    };
    const double h = 1e-5;
    const double numeric = (student_only(0.4 + h) - student_only(0.4 - h)) / (2 * h);
    CHECK(grad_violation(tau.grad(), std::vector<double>{numeric}) <= 1.0);
  }
}

TEST_CASE("infonce_loss") {
  Rng rng(13);
  CHECK(infonce_loss(Tensor::matrix(1, 2, {0.3, 0.1}), Tensor::matrix(1, 2, {1, 2}), tau_of(0.07)).item() == 0.0);

  auto eye = Tensor::identity(2);
  CHECK(infonce_loss(eye, eye, tau_of(1.0)).item() ==
        doctest::Approx(0.3132616875182228).epsilon(1e-12));

  // Growing positive similarity with fixed negatives strictly lowers the loss.
  auto with_positive = [](double sim) {
    return infonce_loss(Tensor::matrix(2, 2, {sim, 0, 0, sim}), Tensor::identity(2), tau_of(1.0)).item();
  };
  CHECK(with_positive(2.0) < with_positive(1.0));
  CHECK(with_positive(1.0) == doctest::Approx(vs_oracle::infonce_loss({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}}, 1.0)));

  for (int trial = 0; trial < 20; ++trial) {
    auto v = random_tensor(rng, {4, 3});
    auto s = random_tensor(rng, {4, 3});
    CHECK(std::fabs(infonce_loss(v, s, tau_of(0.2)).item() -
                    vs_oracle::infonce_loss(rows_of(v), rows_of(s), 0.2)) < 1e-10);
    CHECK(std::fabs(infonce_loss(v, s, tau_of(0.2)).item() - infonce_loss(s, v, tau_of(0.2)).item()) < 1e-12);
    CHECK(infonce_loss(v, s, tau_of(0.2)).item() >= 0.0);
  }

  SUBCASE("finite differences at two step sizes agree with backward") {
    auto v = random_tensor(rng, {3, 4});
    auto s = random_tensor(rng, {3, 4});
    auto f = [&](const Tensor& x) { return infonce_loss(x, s, tau_of(0.3)); };
    auto x = v.clone(true);
    backward(f(x));
    auto coarse = finite_diff_grad([&](const Tensor& p) { return f(p).item(); }, v, 1e-4);
    auto fine = finite_diff_grad([&](const Tensor& p) { return f(p).item(); }, v, 1e-6);
    CHECK(max_relative_error(coarse.data(), fine.data()) < 1e-4);
    CHECK(max_relative_error(x.grad(), coarse.data()) < 1e-4);
    CHECK(vs_test::grad_check([&](const Tensor& t) { return infonce_loss(v, s, t); }, tau_of(0.3)) <= 1.0);
  }
  SUBCASE("cosine option is scale invariant") {
    auto v = random_tensor(rng, {3, 4});
    auto s = random_tensor(rng, {3, 4});
    SimilarityOptions cos{true};
    CHECK(infonce_loss(v, s, tau_of(0.3), true, cos).item() ==
          doctest::Approx(infonce_loss(scale(v, 7.0), s, tau_of(0.3), true, cos).item()).epsilon(1e-12));
    CHECK(infonce_loss(v, s, tau_of(0.3)).item() != doctest::Approx(infonce_loss(scale(v, 7.0), s, tau_of(0.3)).item()));
  }
}

TEST_CASE("soft labels are row-stochastic") {
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    auto e = random_tensor(rng, {5, 4}, -3, 3);
    auto labels = soft_labels(e, tau_of(0.07));
    for (const Tensor* t : {&labels.full, &labels.disentangled}) {
      for (std::size_t i = 0; i < t->rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < t->cols(); ++j) {
          CHECK(t->at(i, j) >= 0.0);
          s += t->at(i, j);
        }
        CHECK(std::fabs(s - 1.0) < 1e-12);
      }
    }
    CHECK(intra_loss(e, e, tau_of(0.01 + trial * 0.01)).item() == doctest::Approx(0.0));
  }
}

TEST_CASE("total_loss") {
  auto s = [](double v) { return Tensor::scalar(v); };
  CHECK(total_loss(s(1.5), s(2), s(4), 0, 0).item() == 1.5);
  CHECK(total_loss(s(1), s(2), s(4), 0.05, 0.05).item() == doctest::Approx(1.3).epsilon(1e-15));
  CHECK(total_loss(s(0), s(0), s(0), 0.05, 0.05).item() == 0.0);
  CHECK_THROWS_AS(total_loss(s(0), s(0), s(0), -1, 0), ContractError);
}

TEST_CASE("temperature floor") {
  auto tau = Tensor::scalar(0.001, true);
  clamp_temperature(tau);
  CHECK(tau.item() == kTemperatureFloor);
  CHECK_THROWS_AS(self_similarity(Tensor::identity(2), Tensor::scalar(0.0)), ContractError);
}
