#include <doctest.h>

#include <stdexcept>

#include <cmath>
#include <vector>

#include "cope/kernels.hpp"
#include "cope/random.hpp"

using namespace cope;
namespace k = cope::kernels;

namespace {

std::vector<double> randn(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// Bound on the rounding difference between two summation orders.
double sum_tol(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] * b[i]);
  return 1e-14 * (s + 1.0) * static_cast<double>(a.size() + 1);
}

struct IsaGuard {
  k::Isa saved = k::active_isa();
  ~IsaGuard() { k::set_active_isa(saved); }
};

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("isa names round-trip") {
    for (k::Isa isa : {k::Isa::scalar, k::Isa::avx2, k::Isa::neon}) {
      CHECK(k::parse_isa(k::isa_name(isa)) == isa);
    }
    CHECK(k::parse_isa("auto") == k::detect_isa());
    CHECK_THROWS_AS(k::parse_isa("sse9"), std::invalid_argument);
    CHECK(k::isa_supported(k::Isa::scalar));
    CHECK(k::isa_supported(k::detect_isa()));
  }

  TEST_CASE("every supported isa matches the scalar reference") {
    Rng rng(11);
    for (k::Isa isa : {k::Isa::avx2, k::Isa::neon}) {
      if (!k::isa_supported(isa)) continue;
      CAPTURE(k::isa_name(isa));
      for (std::size_t n = 0; n <= 70; ++n) {
        const auto a = randn(rng, n);
        const auto b = randn(rng, n);
        const double ref = k::dot(k::Isa::scalar, a, b);
        CHECK(std::fabs(k::dot(isa, a, b) - ref) <= sum_tol(a, b));

        auto y_ref = randn(rng, n);
        auto y = y_ref;
        k::axpy(k::Isa::scalar, 0.37, a, y_ref);
        k::axpy(isa, 0.37, a, y);
        for (std::size_t i = 0; i < n; ++i) CHECK(y[i] == doctest::Approx(y_ref[i]).epsilon(1e-14));
      }
    }
  }

  TEST_CASE("selected isa is deterministic") {
    Rng rng(3);
    const auto a = randn(rng, 129);
    const auto b = randn(rng, 129);
    CHECK(k::dot(a, b) == k::dot(a, b));
  }

  TEST_CASE("matrix kernels agree with naive loops on every isa") {
    IsaGuard guard;
    Rng rng(5);
    const std::size_t rows = 7, cols = 13;
    const auto w = randn(rng, rows * cols);
    const auto x = randn(rng, cols);
    const auto xr = randn(rng, rows);
    for (k::Isa isa : {k::Isa::scalar, k::Isa::avx2, k::Isa::neon}) {
      if (!k::isa_supported(isa)) continue;
      k::set_active_isa(isa);
      CAPTURE(k::isa_name(isa));

      std::vector<double> y(rows, 1.0);
      k::gemv(w, rows, cols, x, y);
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 1.0;
        for (std::size_t c = 0; c < cols; ++c) s += w[r * cols + c] * x[c];
        CHECK(y[r] == doctest::Approx(s).epsilon(1e-13));
      }

      std::vector<double> yt(cols, -0.5);
      k::gemv_t(w, rows, cols, xr, yt);
      for (std::size_t c = 0; c < cols; ++c) {
        double s = -0.5;
        for (std::size_t r = 0; r < rows; ++r) s += w[r * cols + c] * xr[r];
        CHECK(yt[c] == doctest::Approx(s).epsilon(1e-13));
      }

      auto g = w;
      k::ger(0.25, xr, x, g, rows, cols);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          CHECK(g[r * cols + c] == doctest::Approx(w[r * cols + c] + 0.25 * xr[r] * x[c]).epsilon(1e-14));
        }
      }
    }
  }

  TEST_CASE("scalar isa is exactly the reference loop") {
    IsaGuard guard;
    k::set_active_isa(k::Isa::scalar);
    Rng rng(9);
    const auto a = randn(rng, 33);
    const auto b = randn(rng, 33);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    CHECK(k::dot(a, b) == s);
  }
}
