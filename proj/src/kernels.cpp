#include "cope/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>
#define COPE_HAVE_X86 1
#else
#define COPE_HAVE_X86 0
#endif

#if defined(__aarch64__)
#include <arm_neon.h>
#define COPE_HAVE_NEON 1
#else
#define COPE_HAVE_NEON 0
#endif

namespace cope::kernels {

// ---------------------------------------------------------------------------
// Scalar reference
// ---------------------------------------------------------------------------

namespace scalar {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace scalar

// ---------------------------------------------------------------------------
// AVX2 + FMA
// ---------------------------------------------------------------------------

#if COPE_HAVE_X86
namespace avx2 {

__attribute__((target("avx2,fma"))) double dot(const double* a, const double* b,
                                                std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  if (i + 4 <= n) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    i += 4;
  }
  acc0 = _mm256_add_pd(acc0, acc1);
  const __m128d lo = _mm256_castpd256_pd128(acc0);
  const __m128d hi = _mm256_extractf128_pd(acc0, 1);
  const __m128d pair = _mm_add_pd(lo, hi);
  double s = _mm_cvtsd_f64(_mm_add_sd(pair, _mm_unpackhi_pd(pair, pair)));
  for (; i < n; ++i) s = std::fma(a[i], b[i], s);
  return s;
}

__attribute__((target("avx2,fma"))) void axpy(double alpha, const double* x, double* y,
                                               std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

}  // namespace avx2
#endif

// ---------------------------------------------------------------------------
// NEON
// ---------------------------------------------------------------------------

#if COPE_HAVE_NEON
namespace neon {

double dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double s = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) s = std::fma(a[i], b[i], s);
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

}  // namespace neon
#endif

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

namespace {

using DotFn = double (*)(const double*, const double*, std::size_t);
using AxpyFn = void (*)(double, const double*, double*, std::size_t);

struct Table {
  DotFn dot;
  AxpyFn axpy;
};

Table table_for(Isa isa) {
  switch (isa) {
#if COPE_HAVE_X86
    case Isa::avx2:
      return {avx2::dot, avx2::axpy};
#endif
#if COPE_HAVE_NEON
    case Isa::neon:
      return {neon::dot, neon::axpy};
#endif
    default:
      return {scalar::dot, scalar::axpy};
  }
}

Isa initial_isa() {
  const char* env = std::getenv("COPE_SIMD");
  if (env == nullptr || *env == '\0') return detect_isa();
  const Isa isa = parse_isa(env);
  if (!isa_supported(isa)) {
    throw std::invalid_argument(std::string("COPE_SIMD=") + env + " is not supported on this CPU");
  }
  return isa;
}

struct State {
  Isa isa;
  Table table;
  State() : isa(initial_isa()), table(table_for(isa)) {}
};

State& state() {
  static State s;
  return s;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::neon:
      return "neon";
  }
  return "?";
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  if (name == "neon") return Isa::neon;
  if (name == "auto") return detect_isa();
  throw std::invalid_argument("unknown SIMD ISA '" + std::string(name) + "'");
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if COPE_HAVE_X86
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
      return COPE_HAVE_NEON != 0;
  }
  return false;
}

Isa detect_isa() {
  if (isa_supported(Isa::avx2)) return Isa::avx2;
  if (isa_supported(Isa::neon)) return Isa::neon;
  return Isa::scalar;
}

Isa active_isa() { return state().isa; }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw std::invalid_argument("ISA " + std::string(isa_name(isa)) + " not supported on this CPU");
  }
  state().isa = isa;
  state().table = table_for(isa);
}

double dot(Isa isa, std::span<const double> a, std::span<const double> b) {
  return table_for(isa).dot(a.data(), b.data(), a.size());
}

void axpy(Isa isa, double alpha, std::span<const double> x, std::span<double> y) {
  table_for(isa).axpy(alpha, x.data(), y.data(), x.size());
}

double dot(std::span<const double> a, std::span<const double> b) {
  return state().table.dot(a.data(), b.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  state().table.axpy(alpha, x.data(), y.data(), x.size());
}

void gemv(std::span<const double> w, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<double> y) {
  const DotFn d = state().table.dot;
  for (std::size_t i = 0; i < rows; ++i) y[i] += d(w.data() + i * cols, x.data(), cols);
}

void gemv_t(std::span<const double> w, std::size_t rows, std::size_t cols,
            std::span<const double> x, std::span<double> y) {
  const AxpyFn ax = state().table.axpy;
  for (std::size_t i = 0; i < rows; ++i) {
    if (x[i] != 0.0) ax(x[i], w.data() + i * cols, y.data(), cols);
  }
}

void ger(double alpha, std::span<const double> x, std::span<const double> y,
         std::span<double> w, std::size_t rows, std::size_t cols) {
  const AxpyFn ax = state().table.axpy;
  for (std::size_t i = 0; i < rows; ++i) {
    const double coeff = alpha * x[i];
    if (coeff != 0.0) ax(coeff, y.data(), w.data() + i * cols, cols);
  }
}

}  // namespace cope::kernels
