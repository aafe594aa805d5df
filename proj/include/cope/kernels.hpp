#pragma once

// Dense double-precision kernels behind the tiny LM's forward and backward
// passes. Every kernel has a scalar reference implementation; SIMD variants
// (AVX2+FMA on x86-64, NEON on aarch64) are selected once at runtime and are
// equivalence-tested against the reference.
//
// Results are bit-reproducible for a fixed Isa. Different Isa values agree
// only up to rounding (summation order and fused multiply-add differ).

#include <cstddef>
#include <span>
#include <string_view>

namespace cope::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

/// Parses "scalar", "avx2", "neon" or "auto". Throws std::invalid_argument.
Isa parse_isa(std::string_view name);

/// Best ISA the running CPU supports.
Isa detect_isa();

bool isa_supported(Isa isa);

/// Active ISA. Initialized from the COPE_SIMD environment variable
/// (scalar|avx2|neon|auto, default auto) on first use.
Isa active_isa();

/// Throws std::invalid_argument if the CPU cannot run `isa`.
void set_active_isa(Isa isa);

// Kernels on the active ISA. Matrices are row-major.

/// sum_i a[i] * b[i]
double dot(std::span<const double> a, std::span<const double> b);

/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

/// y += W x, W is rows x cols.
void gemv(std::span<const double> w, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<double> y);

/// y += W^T x, W is rows x cols, x has rows entries, y has cols entries.
void gemv_t(std::span<const double> w, std::size_t rows, std::size_t cols,
            std::span<const double> x, std::span<double> y);

/// W += alpha * x y^T, W is rows x cols.
void ger(double alpha, std::span<const double> x, std::span<const double> y,
         std::span<double> w, std::size_t rows, std::size_t cols);

// Explicit-ISA entry points for equivalence tests and benchmarks.
double dot(Isa isa, std::span<const double> a, std::span<const double> b);
void axpy(Isa isa, double alpha, std::span<const double> x, std::span<double> y);

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
}  // namespace avx2
#endif

#if defined(__aarch64__)
namespace neon {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
}  // namespace neon
#endif

}  // namespace cope::kernels
