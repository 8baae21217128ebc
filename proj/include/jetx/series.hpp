#pragma once

// Truncated Taylor-series ("jet") arithmetic over tensors.
//
// A Series carries k+1 coefficient tensors of one shape: coeff(j) holds the
// j-th Taylor coefficient (1/j!) g^(j)(0) of the curve g(t) = f(x + t(y - x)).
// Every operation below maps input coefficients to output coefficients of the
// composed curve, truncated at the common order k. Coefficient j of any result
// depends only on coefficients 0..j of the inputs, so dropping the top order
// reproduces the lower-order computation exactly.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "jetx/tensor.hpp"

namespace jetx {

class Series {
 public:
  Series() = default;
  /// Takes ownership of the coefficients; all must share one shape.
  explicit Series(std::vector<Tensor> coeffs);

  std::size_t order() const noexcept { return coeffs_.size() - 1; }
  const Shape& shape() const { return coeffs_.front().shape(); }
  std::size_t rows() const { return coeffs_.front().rows(); }
  std::size_t cols() const { return coeffs_.front().cols(); }
  std::size_t size() const { return coeffs_.front().size(); }

  const Tensor& coeff(std::size_t j) const { return coeffs_.at(j); }
  std::span<const Tensor> coeffs() const noexcept { return coeffs_; }

  /// Sum of all coefficients: the curve evaluated at t = 1.
  Tensor evaluate() const;
  /// The same series truncated to a lower order.
  Series truncated(std::size_t order) const;

 private:
  std::vector<Tensor> coeffs_;
};

struct JetRequest {
  Tensor center;
  Tensor variate;
  std::size_t order = 0;
};

enum class Elementary { exp, log, sqrt, reciprocal, tanh, erf, sigmoid, power };

Series lift_constant(const Tensor& value, std::size_t order);
/// Seeds the line x + t (y - x).
Series lift_line(const Tensor& center, const Tensor& variate, std::size_t order);

Series series_add(const Series& a, const Series& b);
Series series_sub(const Series& a, const Series& b);
Series series_scale(const Series& a, double s);
/// Adds a constant tensor (same shape) to coefficient 0.
Series series_add_constant(const Series& a, const Tensor& c);
/// Adds a constant length-cols() vector to every row of coefficient 0.
Series series_add_row_vector(const Series& a, std::span<const double> v);
/// Elementwise truncated Cauchy product.
Series series_mul(const Series& a, const Series& b);
/// Elementwise product with a constant tensor of the same shape.
Series series_mul_constant(const Series& a, const Tensor& c);
/// Multiplies every row by a constant length-cols() vector.
Series series_mul_row_vector(const Series& a, std::span<const double> v);

/// Elementwise elementary function; `exponent` is used only by power.
/// Throws DomainError naming the offending element for log/sqrt/reciprocal/power
/// outside their domain.
Series series_elementary(Elementary f, const Series& a, double exponent = 1.0);

/// Cauchy product with matrix products as the scalar product.
Series series_matmul(const Series& a, const Series& b);
/// Series times a constant matrix (the common linear-layer case).
Series series_matmul_constant(const Series& a, const Tensor& b);
/// Series times the transpose of another series, Cauchy-style.
Series series_matmul_transposed(const Series& a, const Series& b);

Series series_slice_cols(const Series& a, std::size_t begin, std::size_t count);
Series series_concat_cols(std::span<const Series> parts);
/// Row sums, result is rows() x 1.
Series series_row_sum(const Series& a);
/// Multiplies row r of `a` by the scalar series in row r of `column` (rows() x 1).
Series series_mul_column(const Series& a, const Series& column);

/// Softmax over the last axis. With `causal`, row r only attends to columns
/// 0..r (the rest of the row is exactly zero in every coefficient).
Series series_softmax(const Series& a, bool causal = false);
/// Layer normalization over the last axis; empty scale/bias mean 1/0.
Series series_layernorm(const Series& a, std::span<const double> scale, std::span<const double> bias,
                        double eps);
Series series_rmsnorm(const Series& a, std::span<const double> scale, double eps);

Series series_gelu(const Series& a);
Series series_gelu_tanh(const Series& a);
Series series_silu(const Series& a);

using SeriesMap = std::function<Series(const Series&)>;

/// J^k f(x)(y): propagates the line through f and sums the coefficients.
Tensor jet_eval(const SeriesMap& f, const JetRequest& req);

}  // namespace jetx
