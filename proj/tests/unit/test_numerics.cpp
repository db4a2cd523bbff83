#include <doctest.h>

#include <cmath>
#include <vector>

#include <omp.h>

#include "laip/autodiff.hpp"
#include "laip/errors.hpp"
#include "laip/gradcheck.hpp"
#include "laip/kernels.hpp"
#include "laip/rng.hpp"
#include "laip/tensor.hpp"

using namespace laip;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// Textbook triple loop, the reference for every product.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul examples") {
  const auto m = Tensor::matrix({{1.5, -2}, {0.25, 7}});
  CHECK(matmul(Tensor::identity(2), m) == m);
  CHECK(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1}, {1}})) == Tensor::matrix({{3}, {7}}));
  Rng rng(1);
  CHECK(matmul(Tensor({3, 4}), random_matrix(rng, 4, 2)) == Tensor({3, 2}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    (void)matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul variants agree with the naive product") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = 1 + rng.below(9), k = 1 + rng.below(9), n = 1 + rng.below(9);
    auto a = random_matrix(rng, m, k), b = random_matrix(rng, k, n);
    CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
    CHECK(max_abs_diff(matmul_nt(a, transpose(b)), naive_matmul(a, b)) < 1e-12);
    CHECK(max_abs_diff(matmul_tn(transpose(a), b), naive_matmul(a, b)) < 1e-12);
  }
}

TEST_CASE("matmul is associative within 1e-10") {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    auto a = random_matrix(rng, 4, 5), b = random_matrix(rng, 5, 3), c = random_matrix(rng, 3, 6);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-10);
  }
}

TEST_CASE("row_softmax examples") {
  auto u = row_softmax(Tensor::matrix({{0, 0, 0}}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto p = row_softmax(Tensor::matrix({{std::log(1.0), std::log(3.0)}}));
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-15));
  auto big = row_softmax(Tensor::matrix({{1000, 0}}));
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
}

TEST_CASE("row_softmax rows are probability vectors") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_matrix(rng, 1 + rng.below(6), 1 + rng.below(12), 5.0);
    auto y = row_softmax(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double s = 0.0;
      for (double v : y.row(r)) {
        CHECK(v > 0.0);
        CHECK(v < 1.0 + 1e-15);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("cross_entropy_logits examples") {
  CHECK(cross_entropy_logits(Tensor::vector({0, 0}), 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(cross_entropy_logits(Tensor::vector({10, -10}), 0) < 1e-8);
  Rng rng(5);
  auto x = random_matrix(rng, 1, 7);
  auto shifted = x;
  for (auto& v : shifted.data()) v += 123.0;
  CHECK(cross_entropy_logits(x, 3) == doctest::Approx(cross_entropy_logits(shifted, 3)).epsilon(1e-12));
  CHECK_THROWS_AS((void)cross_entropy_logits(x, 7), std::out_of_range);
}

TEST_CASE("serial and OpenMP kernels are bitwise identical") {
  Rng rng(21);
  omp_set_num_threads(4);
  const kernels::GemmDims sizes[] = {{3, 5, 7}, {64, 48, 32}, {96, 80, 64}, {130, 33, 71}};
  for (auto dims : sizes) {
    for (bool acc : {false, true}) {
      auto a = random_matrix(rng, dims.m, dims.k), b = random_matrix(rng, dims.k, dims.n);
      auto bt = transpose(b), at = transpose(a);
      auto init = random_matrix(rng, dims.m, dims.n);
      auto c1 = init, c2 = init;
      kernels::serial::gemm_nn(a.data(), b.data(), c1.data(), dims, acc);
      kernels::omp::gemm_nn(a.data(), b.data(), c2.data(), dims, acc);
      CHECK(c1 == c2);
      c1 = init, c2 = init;
      kernels::serial::gemm_nt(a.data(), bt.data(), c1.data(), dims, acc);
      kernels::omp::gemm_nt(a.data(), bt.data(), c2.data(), dims, acc);
      CHECK(c1 == c2);
      c1 = init, c2 = init;
      kernels::serial::gemm_tn(at.data(), b.data(), c1.data(), dims, acc);
      kernels::omp::gemm_tn(at.data(), b.data(), c2.data(), dims, acc);
      CHECK(c1 == c2);
    }
    auto x = random_matrix(rng, dims.m, dims.n, 4.0);
    Tensor y1(x.shape()), y2(x.shape());
    kernels::serial::row_softmax(x.data(), y1.data(), dims.m, dims.n);
    kernels::omp::row_softmax(x.data(), y2.data(), dims.m, dims.n);
    CHECK(y1 == y2);
  }
}

TEST_CASE("rng streams are reproducible") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  Rng d(9), e(9);
  for (int i = 0; i < 1000; ++i) CHECK(d.normal() == e.normal());
}

TEST_CASE("rng derived draws") {
  Rng rng(4);
  std::vector<int> counts(5);
  for (int i = 0; i < 50000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    ++counts[rng.below(5)];
  }
  for (int c : counts) CHECK(std::abs(c / 50000.0 - 0.2) < 0.01);
  for (int i = 0; i < 1000; ++i) CHECK(std::abs(rng.truncated_normal(0.02)) <= 0.04);
  const double w[] = {0.0, 1.0, 0.0, 3.0};
  int hits3 = 0;
  for (int i = 0; i < 20000; ++i) {
    const auto k = rng.categorical(w);
    CHECK((k == 1 || k == 3));
    hits3 += k == 3;
  }
  CHECK(std::abs(hits3 / 20000.0 - 0.75) < 0.015);
}

TEST_CASE("backward examples") {
  auto x = ad::Var::leaf(Tensor::vector({1.5, -2, 4}));
  auto root = ad::sum(x);
  ad::backward(root);
  CHECK(x.grad() == Tensor::vector({1, 1, 1}));

  auto a = ad::Var::leaf(Tensor::vector({1, 2}));
  auto b = ad::Var::leaf(Tensor::vector({3, 4}));
  auto unreachable = ad::Var::leaf(Tensor::vector({5, 6}));
  auto dot = ad::sum(ad::mul(a, b));
  ad::backward(dot);
  CHECK(a.grad() == Tensor::vector({3, 4}));
  CHECK(b.grad() == Tensor::vector({1, 2}));
  CHECK(unreachable.grad() == Tensor::vector({0, 0}));
}

TEST_CASE("backward contracts") {
  auto x = ad::Var::leaf(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(ad::backward(ad::scale(x, 2.0)), ContractError);
  auto root = ad::sum(ad::square(x));
  ad::backward(root);
  // A second pass without a reset would silently double the gradient.
  CHECK_THROWS_AS(ad::backward(root), ContractError);
  ad::zero_grad_graph(root);
  ad::backward(root);
  CHECK(x.grad() == Tensor::vector({2, 4}));
}

TEST_CASE("gradient shapes mirror values and detached inputs record nothing") {
  Rng rng(2);
  auto w = ad::Var::leaf(random_matrix(rng, 3, 4));
  auto x = ad::Var::constant(random_matrix(rng, 2, 3));
  auto y = ad::sum(ad::gelu(ad::matmul(x, w)));
  ad::backward(y);
  CHECK(w.grad().shape() == w.value().shape());

  const auto before = ad::grad_allocations();
  auto d = w.detached();
  auto z = ad::sum(ad::gelu(ad::matmul(x, d)));
  CHECK_FALSE(z.tracked());
  CHECK(ad::grad_allocations() == before);
}

TEST_CASE("finite_diff_check examples") {
  const ScalarFn sq = [](const ad::Var& x) { return ad::sum(ad::square(x)); };
  CHECK(finite_diff_check(sq, Tensor::vector({1, 2, 3}), 1e-5) < 1e-6);
  const ScalarFn constant = [](const ad::Var& x) { return ad::scale(ad::sum(ad::sub(x, x)), 1.0); };
  CHECK(finite_diff_check(constant, Tensor::vector({1, 2, 3}), 1e-5) == 0.0);
  Rng rng(8);
  for (int seed = 0; seed < 10; ++seed) {
    const std::size_t target = rng.below(6);
    const std::size_t targets[] = {target, (target + 1) % 6};
    const ScalarFn ce = [&](const ad::Var& x) { return ad::softmax_cross_entropy(x, targets); };
    CHECK(finite_diff_check(ce, random_matrix(rng, 2, 6), 1e-4) < 1e-6);
  }
}

TEST_CASE("every differentiable op passes the finite-difference check") {
  Rng rng(13);
  const auto other = random_matrix(rng, 3, 4);
  const auto gain = random_matrix(rng, 1, 4), bias = random_matrix(rng, 1, 4);
  const auto right = random_matrix(rng, 4, 2);
  const std::size_t ids[] = {2, 0, 2};
  const double labels[] = {1, 0, 1, 0};
  const std::vector<std::pair<const char*, ScalarFn>> ops = {
      {"matmul", [&](const ad::Var& x) { return ad::sum(ad::matmul(x, ad::Var::constant(right))); }},
      {"matmul_nt", [&](const ad::Var& x) { return ad::sum(ad::square(ad::matmul_nt(x, ad::Var::constant(other)))); }},
      {"mul", [&](const ad::Var& x) { return ad::sum(ad::mul(x, ad::mul(x, ad::Var::constant(other)))); }},
      {"add_row", [&](const ad::Var& x) { return ad::sum(ad::square(ad::add_row(x, ad::row(x, 1)))); }},
      {"softmax", [&](const ad::Var& x) { return ad::sum(ad::mul(ad::row_softmax(x), ad::Var::constant(other))); }},
      {"layer_norm",
       [&](const ad::Var& x) {
         return ad::sum(ad::mul(ad::layer_norm(x, ad::Var::constant(gain), ad::Var::constant(bias)),
                                ad::Var::constant(other)));
       }},
      {"gelu", [&](const ad::Var& x) { return ad::sum(ad::gelu(x)); }},
      {"exp", [&](const ad::Var& x) { return ad::mean(ad::exp(ad::scale(x, 0.5))); }},
      {"rows", [&](const ad::Var& x) { return ad::sum(ad::square(ad::rows(x, 1, 3))); }},
      {"concat", [&](const ad::Var& x) { return ad::sum(ad::square(ad::concat_rows({x, ad::row(x, 0)}))); }},
      {"gather", [&](const ad::Var& x) { return ad::sum(ad::square(ad::gather_rows(x, ids))); }},
      {"normalize", [&](const ad::Var& x) { return ad::sum(ad::mul(ad::normalize_rows(x), ad::Var::constant(other))); }},
      {"cosine", [&](const ad::Var& x) { return ad::cosine(ad::row(x, 0), ad::row(x, 2)); }},
      {"scale_by", [&](const ad::Var& x) { return ad::sum(ad::scale_by(x, ad::sum(ad::row(x, 1)))); }},
      {"bce", [&](const ad::Var& x) { return ad::bce_with_logits(ad::rows(ad::matmul(x, ad::Var::constant(right)), 0, 2), labels); }},
  };
  for (const auto& [name, fn] : ops) {
    CAPTURE(name);
    for (int seed = 0; seed < 3; ++seed) {
      Rng r(100 + seed);
      CHECK(finite_diff_check(fn, random_matrix(r, 3, 4), 1e-4) < 1e-6);
    }
  }
}

TEST_CASE("public ops reject non-finite results") {
  auto x = ad::Var::leaf(Tensor::vector({800.0}));
  CHECK_THROWS_AS((void)ad::exp(x), NumericalError);
}
