#include "jetx/series.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "jetx/errors.hpp"

namespace jetx {

namespace {

void require_compatible(const Series& a, const Series& b, const char* op) {
  if (a.order() != b.order()) {
    throw ShapeError(std::string(op) + ": order mismatch " + std::to_string(a.order()) + " vs " +
                     std::to_string(b.order()));
  }
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_order(const Series& a, const Series& b, const char* op) {
  if (a.order() != b.order()) {
    throw ShapeError(std::string(op) + ": order mismatch " + std::to_string(a.order()) + " vs " +
                     std::to_string(b.order()));
  }
}

std::vector<Tensor> zero_coeffs(const Shape& shape, std::size_t order) {
  return std::vector<Tensor>(order + 1, Tensor(shape));
}

// Applies a scalar recurrence to every element: gathers the element's
// coefficients into `in`, the kernel fills `out`.
template <typename Kernel>
Series map_elements(const Series& a, Kernel&& kernel) {
  const std::size_t k = a.order();
  std::vector<Tensor> out = zero_coeffs(a.shape(), k);
  std::vector<double> in(k + 1), res(k + 1);
  for (std::size_t e = 0; e < a.size(); ++e) {
    for (std::size_t j = 0; j <= k; ++j) in[j] = a.coeff(j)[e];
    kernel(e, std::span<const double>(in), std::span<double>(res));
    for (std::size_t j = 0; j <= k; ++j) out[j][e] = res[j];
  }
  return Series(std::move(out));
}

[[noreturn]] void domain_failure(const char* fn, std::size_t element, double value) {
  throw DomainError(std::string(fn) + ": argument " + std::to_string(value) + " outside the domain at element " +
                    std::to_string(element));
}

// c[j] = sum_{i=0}^{j} a[i] b[j-i]
double cauchy(std::span<const double> a, std::span<const double> b, std::size_t j) {
  double s = 0.0;
  for (std::size_t i = 0; i <= j; ++i) s += a[i] * b[j - i];
  return s;
}

// Solves j*b_j = sum_{i=1}^{j} i a_i c_{j-i} where c = weight(b) is refreshed
// order by order; covers every function with f' = weight(f).
template <typename Weight>
void derivative_recurrence(std::span<const double> a, std::span<double> b, std::vector<double>& c,
                           Weight&& weight) {
  const std::size_t k = a.size() - 1;
  for (std::size_t j = 1; j <= k; ++j) {
    c[j - 1] = weight(j - 1);
    double s = 0.0;
    for (std::size_t i = 1; i <= j; ++i) s += static_cast<double>(i) * a[i] * c[j - i];
    b[j] = s / static_cast<double>(j);
  }
}

void kernel_exp(std::span<const double> a, std::span<double> b) {
  const std::size_t k = a.size() - 1;
  b[0] = std::exp(a[0]);
  for (std::size_t j = 1; j <= k; ++j) {
    double s = 0.0;
    for (std::size_t i = 1; i <= j; ++i) s += static_cast<double>(i) * a[i] * b[j - i];
    b[j] = s / static_cast<double>(j);
  }
}

}  // namespace

Series::Series(std::vector<Tensor> coeffs) : coeffs_(std::move(coeffs)) {
  if (coeffs_.empty()) throw ShapeError("series needs at least one coefficient");
  for (const Tensor& c : coeffs_) {
    if (c.shape() != coeffs_.front().shape()) {
      throw ShapeError("series coefficients disagree in shape: " + shape_string(c.shape()) + " vs " +
                       shape_string(coeffs_.front().shape()));
    }
  }
}

Tensor Series::evaluate() const {
  Tensor out = coeffs_.front();
  for (std::size_t j = 1; j < coeffs_.size(); ++j) out += coeffs_[j];
  return out;
}

Series Series::truncated(std::size_t order) const {
  if (order > this->order()) throw ShapeError("truncated: requested order exceeds series order");
  return Series(std::vector<Tensor>(coeffs_.begin(), coeffs_.begin() + static_cast<std::ptrdiff_t>(order + 1)));
}

Series lift_constant(const Tensor& value, std::size_t order) {
  std::vector<Tensor> c = zero_coeffs(value.shape(), order);
  c[0] = value;
  return Series(std::move(c));
}

Series lift_line(const Tensor& center, const Tensor& variate, std::size_t order) {
  if (!center.same_shape(variate)) {
    throw ShapeError("lift_line: center " + shape_string(center.shape()) + " and variate " +
                     shape_string(variate.shape()) + " disagree");
  }
  std::vector<Tensor> c = zero_coeffs(center.shape(), order);
  c[0] = center;
  if (order >= 1) c[1] = variate - center;
  return Series(std::move(c));
}

Series series_add(const Series& a, const Series& b) {
  require_compatible(a, b, "series_add");
  std::vector<Tensor> c(a.coeffs().begin(), a.coeffs().end());
  for (std::size_t j = 0; j < c.size(); ++j) c[j] += b.coeff(j);
  return Series(std::move(c));
}

Series series_sub(const Series& a, const Series& b) {
  require_compatible(a, b, "series_sub");
  std::vector<Tensor> c(a.coeffs().begin(), a.coeffs().end());
  for (std::size_t j = 0; j < c.size(); ++j) c[j] -= b.coeff(j);
  return Series(std::move(c));
}

Series series_scale(const Series& a, double s) {
  std::vector<Tensor> c(a.coeffs().begin(), a.coeffs().end());
  for (Tensor& t : c) t *= s;
  return Series(std::move(c));
}

Series series_add_constant(const Series& a, const Tensor& c) {
  std::vector<Tensor> out(a.coeffs().begin(), a.coeffs().end());
  out[0] += c;
  return Series(std::move(out));
}

Series series_add_row_vector(const Series& a, std::span<const double> v) {
  std::vector<Tensor> out(a.coeffs().begin(), a.coeffs().end());
  out[0] = add_row_vector(std::move(out[0]), v);
  return Series(std::move(out));
}

Series series_mul(const Series& a, const Series& b) {
  require_compatible(a, b, "series_mul");
  const std::size_t k = a.order();
  std::vector<Tensor> out = zero_coeffs(a.shape(), k);
  const std::size_t n = a.size();
  for (std::size_t j = 0; j <= k; ++j) {
    double* o = out[j].data();
    for (std::size_t i = 0; i <= j; ++i) {
      const double* x = a.coeff(i).data();
      const double* y = b.coeff(j - i).data();
      for (std::size_t e = 0; e < n; ++e) o[e] += x[e] * y[e];
    }
  }
  return Series(std::move(out));
}

Series series_mul_constant(const Series& a, const Tensor& c) {
  if (!c.same_shape(a.coeff(0))) throw ShapeError("series_mul_constant: shape mismatch");
  std::vector<Tensor> out(a.coeffs().begin(), a.coeffs().end());
  for (Tensor& t : out)
    for (std::size_t e = 0; e < t.size(); ++e) t[e] *= c[e];
  return Series(std::move(out));
}

Series series_mul_row_vector(const Series& a, std::span<const double> v) {
  if (v.size() != a.cols()) throw ShapeError("series_mul_row_vector: length mismatch");
  std::vector<Tensor> out(a.coeffs().begin(), a.coeffs().end());
  for (Tensor& t : out)
    for (std::size_t r = 0; r < t.rows(); ++r) {
      auto row = t.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] *= v[j];
    }
  return Series(std::move(out));
}

Series series_elementary(Elementary f, const Series& a, double exponent) {
  const std::size_t k = a.order();
  switch (f) {
    case Elementary::exp:
      return map_elements(a, [](std::size_t, std::span<const double> x, std::span<double> b) { kernel_exp(x, b); });

    case Elementary::log:
      return map_elements(a, [k](std::size_t e, std::span<const double> x, std::span<double> b) {
        if (!(x[0] > 0.0)) domain_failure("log", e, x[0]);
        b[0] = std::log(x[0]);
        for (std::size_t j = 1; j <= k; ++j) {
          double s = 0.0;
          for (std::size_t i = 1; i < j; ++i) s += static_cast<double>(i) * b[i] * x[j - i];
          b[j] = (x[j] - s / static_cast<double>(j)) / x[0];
        }
      });

    case Elementary::reciprocal:
      return map_elements(a, [k](std::size_t e, std::span<const double> x, std::span<double> b) {
        if (x[0] == 0.0) domain_failure("reciprocal", e, x[0]);
        b[0] = 1.0 / x[0];
        for (std::size_t j = 1; j <= k; ++j) {
          double s = 0.0;
          for (std::size_t i = 1; i <= j; ++i) s += x[i] * b[j - i];
          b[j] = -s / x[0];
        }
      });

    case Elementary::sqrt:
      return map_elements(a, [k](std::size_t e, std::span<const double> x, std::span<double> b) {
        if (x[0] < 0.0 || (k > 0 && x[0] == 0.0)) domain_failure("sqrt", e, x[0]);
        b[0] = std::sqrt(x[0]);
        for (std::size_t j = 1; j <= k; ++j) {
          double s = 0.0;
          for (std::size_t i = 1; i < j; ++i) s += b[i] * b[j - i];
          b[j] = (x[j] - s) / (2.0 * b[0]);
        }
      });

    case Elementary::power:
      return map_elements(a, [k, exponent](std::size_t e, std::span<const double> x, std::span<double> b) {
        if (k > 0 ? !(x[0] > 0.0) : !std::isfinite(std::pow(x[0], exponent))) domain_failure("power", e, x[0]);
        b[0] = std::pow(x[0], exponent);
        for (std::size_t j = 1; j <= k; ++j) {
          double s = 0.0;
          for (std::size_t i = 1; i <= j; ++i)
            s += ((exponent + 1.0) * static_cast<double>(i) - static_cast<double>(j)) * x[i] * b[j - i];
          b[j] = s / (static_cast<double>(j) * x[0]);
        }
      });

    case Elementary::tanh:
      return map_elements(a, [k](std::size_t, std::span<const double> x, std::span<double> b) {
        std::vector<double> c(k + 1);
        b[0] = std::tanh(x[0]);
        // tanh' = 1 - tanh^2
        derivative_recurrence(x, b, c, [&](std::size_t m) { return (m == 0 ? 1.0 : 0.0) - cauchy(b, b, m); });
      });

    case Elementary::sigmoid:
      return map_elements(a, [k](std::size_t, std::span<const double> x, std::span<double> b) {
        std::vector<double> c(k + 1);
        b[0] = 1.0 / (1.0 + std::exp(-x[0]));
        // sigmoid' = s - s^2
        derivative_recurrence(x, b, c, [&](std::size_t m) { return b[m] - cauchy(b, b, m); });
      });

    case Elementary::erf:
      return map_elements(a, [k](std::size_t, std::span<const double> x, std::span<double> b) {
        // erf' = 2/sqrt(pi) exp(-a^2): the weight series is fully known up front.
        std::vector<double> sq(k + 1), g(k + 1), c(k + 1);
        for (std::size_t j = 0; j <= k; ++j) sq[j] = -cauchy(x, x, j);
        kernel_exp(sq, g);
        const double two_over_sqrt_pi = 2.0 * std::numbers::inv_sqrtpi;
        b[0] = std::erf(x[0]);
        derivative_recurrence(x, b, c, [&](std::size_t m) { return two_over_sqrt_pi * g[m]; });
      });
  }
  throw ConfigError("series_elementary: unknown function");
}

Series series_matmul(const Series& a, const Series& b) {
  require_order(a, b, "series_matmul");
  const std::size_t k = a.order();
  std::vector<Tensor> out;
  out.reserve(k + 1);
  for (std::size_t j = 0; j <= k; ++j) {
    Tensor acc = matmul(a.coeff(0), b.coeff(j));
    for (std::size_t i = 1; i <= j; ++i) acc += matmul(a.coeff(i), b.coeff(j - i));
    out.push_back(std::move(acc));
  }
  return Series(std::move(out));
}

Series series_matmul_constant(const Series& a, const Tensor& b) {
  std::vector<Tensor> out;
  out.reserve(a.order() + 1);
  for (const Tensor& c : a.coeffs()) out.push_back(matmul(c, b));
  return Series(std::move(out));
}

Series series_matmul_transposed(const Series& a, const Series& b) {
  require_order(a, b, "series_matmul_transposed");
  const std::size_t k = a.order();
  std::vector<Tensor> out;
  out.reserve(k + 1);
  for (std::size_t j = 0; j <= k; ++j) {
    Tensor acc = matmul_transposed(a.coeff(0), b.coeff(j));
    for (std::size_t i = 1; i <= j; ++i) acc += matmul_transposed(a.coeff(i), b.coeff(j - i));
    out.push_back(std::move(acc));
  }
  return Series(std::move(out));
}

Series series_slice_cols(const Series& a, std::size_t begin, std::size_t count) {
  std::vector<Tensor> out;
  out.reserve(a.order() + 1);
  for (const Tensor& c : a.coeffs()) out.push_back(slice_cols(c, begin, count));
  return Series(std::move(out));
}

Series series_concat_cols(std::span<const Series> parts) {
  if (parts.empty()) throw ShapeError("series_concat_cols: nothing to concatenate");
  const std::size_t k = parts.front().order();
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const Series& p : parts) {
    if (p.order() != k || p.rows() != rows) throw ShapeError("series_concat_cols: incompatible parts");
    total += p.cols();
  }
  std::vector<Tensor> out = zero_coeffs({rows, total}, k);
  std::size_t offset = 0;
  for (const Series& p : parts) {
    for (std::size_t j = 0; j <= k; ++j)
      for (std::size_t r = 0; r < rows; ++r) {
        auto src = p.coeff(j).row(r);
        std::copy(src.begin(), src.end(), out[j].row(r).begin() + static_cast<std::ptrdiff_t>(offset));
      }
    offset += p.cols();
  }
  return Series(std::move(out));
}

Series series_row_sum(const Series& a) {
  const std::size_t rows = a.rows();
  std::vector<Tensor> out = zero_coeffs({rows, 1}, a.order());
  for (std::size_t j = 0; j <= a.order(); ++j)
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (double v : a.coeff(j).row(r)) s += v;
      out[j][r] = s;
    }
  return Series(std::move(out));
}

Series series_mul_column(const Series& a, const Series& column) {
  require_order(a, column, "series_mul_column");
  if (column.rows() != a.rows() || column.cols() != 1) throw ShapeError("series_mul_column: column shape mismatch");
  const std::size_t k = a.order();
  const std::size_t cols = a.cols();
  std::vector<Tensor> out = zero_coeffs(a.shape(), k);
  for (std::size_t j = 0; j <= k; ++j)
    for (std::size_t i = 0; i <= j; ++i) {
      const Tensor& x = a.coeff(i);
      const Tensor& y = column.coeff(j - i);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const double s = y[r];
        const double* src = x.data() + r * cols;
        double* dst = out[j].data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c] * s;
      }
    }
  return Series(std::move(out));
}

namespace {

// a - column (broadcast along rows)
Series sub_column(const Series& a, const Series& column) {
  std::vector<Tensor> out(a.coeffs().begin(), a.coeffs().end());
  for (std::size_t j = 0; j <= a.order(); ++j)
    for (std::size_t r = 0; r < a.rows(); ++r) {
      const double s = column.coeff(j)[r];
      for (double& v : out[j].row(r)) v -= s;
    }
  return Series(std::move(out));
}

Series add_scalar(const Series& a, double s) {
  std::vector<Tensor> out(a.coeffs().begin(), a.coeffs().end());
  for (double& v : out[0].values()) v += s;
  return Series(std::move(out));
}

}  // namespace

Series series_softmax(const Series& a, bool causal) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (causal && cols < rows) throw ShapeError("series_softmax: causal mask needs cols >= rows");
  auto masked = [&](std::size_t r, std::size_t c) { return causal && c > r; };

  // Subtracting the row maximum of coefficient 0 leaves the result unchanged.
  std::vector<Tensor> shifted(a.coeffs().begin(), a.coeffs().end());
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (!masked(r, c)) m = std::max(m, shifted[0].at(r, c));
    for (std::size_t c = 0; c < cols; ++c) {
      if (masked(r, c)) {
        for (Tensor& t : shifted) t.at(r, c) = 0.0;
      } else {
        shifted[0].at(r, c) -= m;
      }
    }
  }
  Series e = series_elementary(Elementary::exp, Series(std::move(shifted)));
  if (causal) {
    std::vector<Tensor> ec(e.coeffs().begin(), e.coeffs().end());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = r + 1; c < cols; ++c) ec[0].at(r, c) = 0.0;
    e = Series(std::move(ec));
  }
  const Series inv = series_elementary(Elementary::reciprocal, series_row_sum(e));
  return series_mul_column(e, inv);
}

Series series_layernorm(const Series& a, std::span<const double> scale, std::span<const double> bias, double eps) {
  if (!(eps > 0.0)) throw DomainError("layernorm: eps must be positive");
  const double inv_d = 1.0 / static_cast<double>(a.cols());
  const Series mean = series_scale(series_row_sum(a), inv_d);
  const Series centered = sub_column(a, mean);
  const Series var = series_scale(series_row_sum(series_mul(centered, centered)), inv_d);
  const Series inv_std = series_elementary(Elementary::power, add_scalar(var, eps), -0.5);
  Series out = series_mul_column(centered, inv_std);
  if (!scale.empty()) out = series_mul_row_vector(out, scale);
  if (!bias.empty()) out = series_add_row_vector(out, bias);
  return out;
}

Series series_rmsnorm(const Series& a, std::span<const double> scale, double eps) {
  if (!(eps > 0.0)) throw DomainError("rmsnorm: eps must be positive");
  const double inv_d = 1.0 / static_cast<double>(a.cols());
  const Series ms = series_scale(series_row_sum(series_mul(a, a)), inv_d);
  const Series inv_rms = series_elementary(Elementary::power, add_scalar(ms, eps), -0.5);
  Series out = series_mul_column(a, inv_rms);
  if (!scale.empty()) out = series_mul_row_vector(out, scale);
  return out;
}

Series series_gelu(const Series& a) {
  const Series e = series_elementary(Elementary::erf, series_scale(a, std::numbers::sqrt2 / 2.0));
  return series_scale(series_add(a, series_mul(a, e)), 0.5);
}

Series series_gelu_tanh(const Series& a) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  const Series cube = series_mul(series_mul(a, a), a);
  const Series inner = series_scale(series_add(a, series_scale(cube, 0.044715)), c);
  const Series t = series_elementary(Elementary::tanh, inner);
  return series_scale(series_add(a, series_mul(a, t)), 0.5);
}

Series series_silu(const Series& a) { return series_mul(a, series_elementary(Elementary::sigmoid, a)); }

Tensor jet_eval(const SeriesMap& f, const JetRequest& req) {
  return f(lift_line(req.center, req.variate, req.order)).evaluate();
}

}  // namespace jetx
