#include "retlab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <utility>

#include "retlab/kernels.hpp"

namespace retlab::ad {

namespace {

std::atomic<std::uint64_t> g_live_bytes{0};
std::atomic<std::uint64_t> g_peak_bytes{0};

void track_alloc(std::size_t bytes) {
  const std::uint64_t now = g_live_bytes.fetch_add(bytes) + bytes;
  std::uint64_t peak = g_peak_bytes.load();
  while (now > peak && !g_peak_bytes.compare_exchange_weak(peak, now)) {
  }
}

void track_free(std::size_t bytes) { g_live_bytes.fetch_sub(bytes); }

std::size_t numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void transpose_copy(const double* a, double* out, std::size_t rows,
                    std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      out[j * rows + i] = a[i * cols + j];
    }
  }
}

constexpr double kGeluCoeff = 0.044715;
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

std::uint64_t peak_tensor_bytes() { return g_peak_bytes.load(); }
std::uint64_t live_tensor_bytes() { return g_live_bytes.load(); }
void reset_peak_tensor_bytes() { g_peak_bytes.store(g_live_bytes.load()); }

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct Tensor::Impl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool grad_path = false;

  Impl(std::vector<std::size_t> s, std::vector<double> d, bool rg)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg), grad_path(rg) {
    track_alloc(data.size() * sizeof(double));
  }

  ~Impl() { track_free((data.size() + grad.size()) * sizeof(double)); }

  std::vector<double>& grad_buf() {
    if (grad.empty()) {
      grad.assign(data.size(), 0.0);
      track_alloc(grad.size() * sizeof(double));
    }
    return grad;
  }
};

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  const std::size_t n = numel(shape);
  return Tensor(std::make_shared<Impl>(std::move(shape),
                                       std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_to_string(shape) +
                     " does not match buffer of " + std::to_string(data.size()) +
                     " elements");
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("from_data: non-finite input value");
  }
  return Tensor(std::make_shared<Impl>(std::move(shape), std::move(data),
                                       requires_grad));
}

Tensor Tensor::scalar_value(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::size() const { return impl_->data.size(); }

std::size_t Tensor::rows() const {
  if (impl_->shape.size() != 2) {
    throw ShapeError("rows(): tensor is not 2-D, shape " +
                     shape_to_string(impl_->shape));
  }
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (impl_->shape.size() != 2) {
    throw ShapeError("cols(): tensor is not 2-D, shape " +
                     shape_to_string(impl_->shape));
  }
  return impl_->shape[1];
}

const std::vector<double>& Tensor::data() const { return impl_->data; }

std::vector<double>& Tensor::mutable_data() { return impl_->data; }

double Tensor::value() const {
  if (!is_scalar()) {
    throw ContractError("value(): tensor is not scalar, shape " +
                        shape_to_string(impl_->shape));
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const { return impl_->data.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  return impl_->data.at(r * cols() + c);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) {
    throw ContractError("grad(): no gradient computed for this tensor");
  }
  return impl_->grad;
}

std::vector<double>& Tensor::mutable_grad() { return impl_->grad_buf(); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tape::on_grad_path(const Tensor& t) {
  return t.impl_->grad_path || t.impl_->requires_grad;
}

Tensor Tape::make_output(std::vector<std::size_t> shape, std::vector<double> data,
                         bool grad_path, const char* op) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value produced");
    }
  }
  Tensor out(std::make_shared<Tensor::Impl>(std::move(shape), std::move(data),
                                            false));
  out.impl_->grad_path = grad_path && recording_;
  return out;
}

void Tape::record(const Tensor& out, std::function<void()> back) {
  if (out.impl_->grad_path) {
    nodes_.push_back(Node{out.impl_, std::move(back)});
  }
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::matmul(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  Tensor res = make_output({m, n}, std::move(out),
                           on_grad_path(a) || on_grad_path(b), "matmul");
  record(res, [ai = a.impl_, bi = b.impl_, oi = res.impl_, m, k, n]() {
    const double* g = oi->grad.data();
    if (ai->grad_path || ai->requires_grad) {
      std::vector<double> bt(k * n);
      transpose_copy(bi->data.data(), bt.data(), k, n);
      kernels::matmul(g, bt.data(), ai->grad_buf().data(), m, n, k, true);
    }
    if (bi->grad_path || bi->requires_grad) {
      std::vector<double> at(m * k);
      transpose_copy(ai->data.data(), at.data(), m, k);
      kernels::matmul(at.data(), g, bi->grad_buf().data(), k, m, n, true);
    }
  });
  return res;
}

Tensor Tape::transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  transpose_copy(a.data().data(), out.data(), r, c);
  Tensor res = make_output({c, r}, std::move(out), on_grad_path(a), "transpose");
  record(res, [ai = a.impl_, oi = res.impl_, r, c]() {
    std::vector<double> gt(r * c);
    transpose_copy(oi->grad.data(), gt.data(), c, r);
    kernels::axpy(1.0, gt.data(), ai->grad_buf().data(), r * c);
  });
  return res;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
  std::vector<double> out(a.size());
  kernels::add(a.data().data(), b.data().data(), out.data(), a.size());
  Tensor res = make_output(a.shape(), std::move(out),
                           on_grad_path(a) || on_grad_path(b), "add");
  record(res, [ai = a.impl_, bi = b.impl_, oi = res.impl_]() {
    const std::size_t n = oi->grad.size();
    if (ai->grad_path || ai->requires_grad) {
      kernels::axpy(1.0, oi->grad.data(), ai->grad_buf().data(), n);
    }
    if (bi->grad_path || bi->requires_grad) {
      kernels::axpy(1.0, oi->grad.data(), bi->grad_buf().data(), n);
    }
  });
  return res;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
  std::vector<double> out(a.size());
  kernels::sub(a.data().data(), b.data().data(), out.data(), a.size());
  Tensor res = make_output(a.shape(), std::move(out),
                           on_grad_path(a) || on_grad_path(b), "sub");
  record(res, [ai = a.impl_, bi = b.impl_, oi = res.impl_]() {
    const std::size_t n = oi->grad.size();
    if (ai->grad_path || ai->requires_grad) {
      kernels::axpy(1.0, oi->grad.data(), ai->grad_buf().data(), n);
    }
    if (bi->grad_path || bi->requires_grad) {
      kernels::axpy(-1.0, oi->grad.data(), bi->grad_buf().data(), n);
    }
  });
  return res;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
  std::vector<double> out(a.size());
  kernels::mul(a.data().data(), b.data().data(), out.data(), a.size());
  Tensor res = make_output(a.shape(), std::move(out),
                           on_grad_path(a) || on_grad_path(b), "mul");
  record(res, [ai = a.impl_, bi = b.impl_, oi = res.impl_]() {
    const std::size_t n = oi->grad.size();
    if (ai->grad_path || ai->requires_grad) {
      double* ga = ai->grad_buf().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i] * bi->data[i];
    }
    if (bi->grad_path || bi->requires_grad) {
      double* gb = bi->grad_buf().data();
      for (std::size_t i = 0; i < n; ++i) gb[i] += oi->grad[i] * ai->data[i];
    }
  });
  return res;
}

Tensor Tape::add_rowvec(const Tensor& m, const Tensor& v) {
  const std::size_t r = m.rows(), c = m.cols();
  if (v.size() != c) {
    throw ShapeError("add_rowvec: vector size " + std::to_string(v.size()) +
                     " does not match columns of " + shape_to_string(m.shape()));
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    kernels::add(m.data().data() + i * c, v.data().data(), out.data() + i * c, c);
  }
  Tensor res = make_output(m.shape(), std::move(out),
                           on_grad_path(m) || on_grad_path(v), "add_rowvec");
  record(res, [mi = m.impl_, vi = v.impl_, oi = res.impl_, r, c]() {
    if (mi->grad_path || mi->requires_grad) {
      kernels::axpy(1.0, oi->grad.data(), mi->grad_buf().data(), r * c);
    }
    if (vi->grad_path || vi->requires_grad) {
      double* gv = vi->grad_buf().data();
      for (std::size_t i = 0; i < r; ++i) {
        kernels::axpy(1.0, oi->grad.data() + i * c, gv, c);
      }
    }
  });
  return res;
}

Tensor Tape::scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  kernels::scale(a.data().data(), c, out.data(), a.size());
  Tensor res = make_output(a.shape(), std::move(out), on_grad_path(a), "scale");
  record(res, [ai = a.impl_, oi = res.impl_, c]() {
    kernels::axpy(c, oi->grad.data(), ai->grad_buf().data(), oi->grad.size());
  });
  return res;
}

Tensor Tape::add_const(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] + c;
  Tensor res = make_output(a.shape(), std::move(out), on_grad_path(a), "add_const");
  record(res, [ai = a.impl_, oi = res.impl_]() {
    kernels::axpy(1.0, oi->grad.data(), ai->grad_buf().data(), oi->grad.size());
  });
  return res;
}

Tensor Tape::clamp_min(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::max(a.data()[i], c);
  Tensor res = make_output(a.shape(), std::move(out), on_grad_path(a), "clamp_min");
  record(res, [ai = a.impl_, oi = res.impl_, c]() {
    double* ga = ai->grad_buf().data();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      if (ai->data[i] > c) ga[i] += oi->grad[i];
    }
  });
  return res;
}

Tensor Tape::activation(const Tensor& a, Activation kind) {
  std::vector<double> out(a.size());
  const double* x = a.data().data();
  switch (kind) {
    case Activation::tanh_fn:
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::tanh(x[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < a.size(); ++i) {
        // stable in both tails
        out[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                             : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      }
      break;
    case Activation::clamp_unit:
      for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = x[i] < 0.0 ? 0.0 : (x[i] > 1.0 ? 1.0 : x[i]);
      }
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double u = kGeluScale * (x[i] + kGeluCoeff * x[i] * x[i] * x[i]);
        out[i] = 0.5 * x[i] * (1.0 + std::tanh(u));
      }
      break;
  }
  Tensor res = make_output(a.shape(), std::move(out), on_grad_path(a), "activation");
  record(res, [ai = a.impl_, oi = res.impl_, kind]() {
    const std::size_t n = oi->grad.size();
    double* ga = ai->grad_buf().data();
    const double* g = oi->grad.data();
    const double* y = oi->data.data();
    const double* xv = ai->data.data();
    switch (kind) {
      case Activation::tanh_fn:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      case Activation::clamp_unit:
        // subgradient: 1 on (0,1), 0 elsewhere (boundaries included)
        for (std::size_t i = 0; i < n; ++i) {
          if (xv[i] > 0.0 && xv[i] < 1.0) ga[i] += g[i];
        }
        break;
      case Activation::gelu:
        for (std::size_t i = 0; i < n; ++i) {
          const double u = kGeluScale * (xv[i] + kGeluCoeff * xv[i] * xv[i] * xv[i]);
          const double t = std::tanh(u);
          const double du = kGeluScale * (1.0 + 3.0 * kGeluCoeff * xv[i] * xv[i]);
          ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * xv[i] * (1.0 - t * t) * du);
        }
        break;
    }
  });
  return res;
}

Tensor Tape::softmax_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = a.data().data() + i * c;
    double* orow = out.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - m);
      s += orow[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  Tensor res = make_output(a.shape(), std::move(out), on_grad_path(a), "softmax_rows");
  record(res, [ai = a.impl_, oi = res.impl_, r, c]() {
    double* ga = ai->grad_buf().data();
    for (std::size_t i = 0; i < r; ++i) {
      const double* g = oi->grad.data() + i * c;
      const double* y = oi->data.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      double* garow = ga + i * c;
      for (std::size_t j = 0; j < c; ++j) garow[j] += y[j] * (g[j] - dot);
    }
  });
  return res;
}

Tensor Tape::layer_norm_rows(const Tensor& a, const Tensor& gain,
                             const Tensor& bias, double eps) {
  const std::size_t r = a.rows(), c = a.cols();
  if (gain.size() != c || bias.size() != c) {
    throw ShapeError("layer_norm_rows: gain/bias size must equal columns");
  }
  std::vector<double> out(r * c);
  std::vector<double> xhat(r * c);
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = a.data().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mean) * is;
      out[i * c + j] = gain.data()[j] * xhat[i * c + j] + bias.data()[j];
    }
  }
  Tensor res = make_output(a.shape(), std::move(out),
                           on_grad_path(a) || on_grad_path(gain) || on_grad_path(bias),
                           "layer_norm_rows");
  record(res, [ai = a.impl_, gi = gain.impl_, bi = bias.impl_, oi = res.impl_,
               xh = std::move(xhat), is = std::move(inv_std), r, c]() {
    const double* g = oi->grad.data();
    if (bi->grad_path || bi->requires_grad) {
      double* gb = bi->grad_buf().data();
      for (std::size_t i = 0; i < r; ++i) {
        kernels::axpy(1.0, g + i * c, gb, c);
      }
    }
    if (gi->grad_path || gi->requires_grad) {
      double* gg = gi->grad_buf().data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xh[i * c + j];
      }
    }
    if (ai->grad_path || ai->requires_grad) {
      double* ga = ai->grad_buf().data();
      const double cn = static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = g[i * c + j] * gi->data[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = g[i * c + j] * gi->data[j];
          ga[i * c + j] += is[i] * (dxh - sum_dxhat / cn -
                                    xh[i * c + j] * sum_dxhat_xhat / cn);
        }
      }
    }
  });
  return res;
}

Tensor Tape::sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor res = make_output({1}, {s}, on_grad_path(a), "sum");
  record(res, [ai = a.impl_, oi = res.impl_]() {
    const double g = oi->grad[0];
    double* ga = ai->grad_buf().data();
    for (std::size_t i = 0; i < ai->data.size(); ++i) ga[i] += g;
  });
  return res;
}

Tensor Tape::row_scale(const Tensor& h, const Tensor& z) {
  const std::size_t r = h.rows(), c = h.cols();
  if (z.size() != r) {
    throw ShapeError("row_scale: gate vector size " + std::to_string(z.size()) +
                     " does not match rows of " + shape_to_string(h.shape()));
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    kernels::scale(h.data().data() + i * c, z.data()[i], out.data() + i * c, c);
  }
  Tensor res = make_output(h.shape(), std::move(out),
                           on_grad_path(h) || on_grad_path(z), "row_scale");
  record(res, [hi = h.impl_, zi = z.impl_, oi = res.impl_, r, c]() {
    const double* g = oi->grad.data();
    if (hi->grad_path || hi->requires_grad) {
      double* gh = hi->grad_buf().data();
      for (std::size_t i = 0; i < r; ++i) {
        kernels::axpy(zi->data[i], g + i * c, gh + i * c, c);
      }
    }
    if (zi->grad_path || zi->requires_grad) {
      double* gz = zi->grad_buf().data();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * hi->data[i * c + j];
        gz[i] += dot;
      }
    }
  });
  return res;
}

Tensor Tape::slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin + count > r) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") exceeds " +
                     std::to_string(r) + " rows");
  }
  std::vector<double> out(a.data().begin() + begin * c,
                          a.data().begin() + (begin + count) * c);
  Tensor res = make_output({count, c}, std::move(out), on_grad_path(a), "slice_rows");
  record(res, [ai = a.impl_, oi = res.impl_, begin, c, count]() {
    kernels::axpy(1.0, oi->grad.data(), ai->grad_buf().data() + begin * c,
                  count * c);
  });
  return res;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  bool path = false;
  for (const Tensor& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
    path = path || on_grad_path(p);
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const Tensor& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Tensor res = make_output({total, c}, std::move(out), path, "concat_rows");
  std::vector<std::shared_ptr<Tensor::Impl>> impls;
  impls.reserve(parts.size());
  for (const Tensor& p : parts) impls.push_back(p.impl_);
  record(res, [impls = std::move(impls), oi = res.impl_, c]() {
    std::size_t offset = 0;
    for (const auto& pi : impls) {
      const std::size_t n = pi->data.size();
      if (pi->grad_path || pi->requires_grad) {
        kernels::axpy(1.0, oi->grad.data() + offset, pi->grad_buf().data(), n);
      }
      offset += n;
    }
  });
  return res;
}

Tensor Tape::slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin + count > c) {
    throw ShapeError("slice_cols: range exceeds " + std::to_string(c) + " columns");
  }
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i) {
    std::memcpy(out.data() + i * count, a.data().data() + i * c + begin,
                count * sizeof(double));
  }
  Tensor res = make_output({r, count}, std::move(out), on_grad_path(a), "slice_cols");
  record(res, [ai = a.impl_, oi = res.impl_, begin, r, c, count]() {
    double* ga = ai->grad_buf().data();
    for (std::size_t i = 0; i < r; ++i) {
      kernels::axpy(1.0, oi->grad.data() + i * count, ga + i * c + begin, count);
    }
  });
  return res;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  bool path = false;
  for (const Tensor& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
    path = path || on_grad_path(p);
  }
  std::vector<double> out(r * total);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i) {
      std::memcpy(out.data() + i * total + offset, p.data().data() + i * pc,
                  pc * sizeof(double));
    }
    offset += pc;
  }
  Tensor res = make_output({r, total}, std::move(out), path, "concat_cols");
  std::vector<std::shared_ptr<Tensor::Impl>> impls;
  impls.reserve(parts.size());
  for (const Tensor& p : parts) impls.push_back(p.impl_);
  record(res, [impls = std::move(impls), oi = res.impl_, r, total]() {
    std::size_t off = 0;
    for (const auto& pi : impls) {
      const std::size_t pc = pi->data.size() / r;
      if (pi->grad_path || pi->requires_grad) {
        double* gp = pi->grad_buf().data();
        for (std::size_t i = 0; i < r; ++i) {
          kernels::axpy(1.0, oi->grad.data() + i * total + off, gp + i * pc, pc);
        }
      }
      off += pc;
    }
  });
  return res;
}

Tensor Tape::gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  const std::size_t r = table.rows(), c = table.cols();
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= r) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) +
                       " out of range for " + std::to_string(r) + " rows");
    }
    std::memcpy(out.data() + i * c, table.data().data() + ids[i] * c,
                c * sizeof(double));
  }
  Tensor res = make_output({ids.size(), c}, std::move(out), on_grad_path(table),
                           "gather_rows");
  record(res, [ti = table.impl_, oi = res.impl_, ids, c]() {
    double* gt = ti->grad_buf().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      kernels::axpy(1.0, oi->grad.data() + i * c, gt + ids[i] * c, c);
    }
  });
  return res;
}

Tensor Tape::div_by_scalar(const Tensor& a, const Tensor& s) {
  if (!s.is_scalar()) throw ShapeError("div_by_scalar: divisor must be scalar");
  const double sv = s.value();
  std::vector<double> out(a.size());
  kernels::scale(a.data().data(), 1.0 / sv, out.data(), a.size());
  Tensor res = make_output(a.shape(), std::move(out),
                           on_grad_path(a) || on_grad_path(s), "div_by_scalar");
  record(res, [ai = a.impl_, si = s.impl_, oi = res.impl_, sv]() {
    const std::size_t n = oi->grad.size();
    if (ai->grad_path || ai->requires_grad) {
      kernels::axpy(1.0 / sv, oi->grad.data(), ai->grad_buf().data(), n);
    }
    if (si->grad_path || si->requires_grad) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += oi->grad[i] * oi->data[i];
      si->grad_buf()[0] += -dot / sv;
    }
  });
  return res;
}

Tensor Tape::reshape(const Tensor& a, std::vector<std::size_t> shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_to_string(a.shape()) + " to " +
                     shape_to_string(shape) + " changes element count");
  }
  std::vector<double> out(a.data());
  Tensor res = make_output(std::move(shape), std::move(out), on_grad_path(a),
                           "reshape");
  record(res, [ai = a.impl_, oi = res.impl_]() {
    kernels::axpy(1.0, oi->grad.data(), ai->grad_buf().data(), oi->grad.size());
  });
  return res;
}

Tensor Tape::cross_entropy_mean(const Tensor& logits,
                                const std::vector<int>& labels,
                                double label_smoothing) {
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b) {
    throw ShapeError("cross_entropy_mean: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(b) + " rows");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ContractError("cross_entropy_mean: label_smoothing must lie in [0, 1)");
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("cross_entropy_mean: label " + std::to_string(y) +
                          " out of range for " + std::to_string(c) + " classes");
    }
    const double* row = logits.data().data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - m);
      s += probs[i * c + j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] *= inv;
    // smoothed target: (1 - eps) on the label, eps/C everywhere
    double target_logit = (1.0 - label_smoothing) * row[y];
    for (std::size_t j = 0; j < c; ++j) {
      target_logit += label_smoothing / static_cast<double>(c) * row[j];
    }
    loss += m + std::log(s) - target_logit;
  }
  loss /= static_cast<double>(b);
  Tensor res = make_output({1}, {loss}, on_grad_path(logits), "cross_entropy_mean");
  record(res, [li = logits.impl_, oi = res.impl_, probs = std::move(probs), labels,
               b, c, label_smoothing]() {
    const double g = oi->grad[0] / static_cast<double>(b);
    double* gl = li->grad_buf().data();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
        const double target = (1.0 - label_smoothing) * onehot +
                              label_smoothing / static_cast<double>(c);
        gl[i * c + j] += g * (probs[i * c + j] - target);
      }
    }
  });
  return res;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  // Intermediate grads are scratch for this pass; leaf grads accumulate.
  for (Node& node : nodes_) {
    auto& g = node.out->grad_buf();
    std::fill(g.begin(), g.end(), 0.0);
  }
  loss.impl_->grad_buf()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->back();
  }
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                  const Tensor& x, double h) {
  if (h <= 0.0) throw ContractError("grad_check: step must be positive");
  Tensor xg = Tensor::from_data(x.shape(), x.data(), true);
  Tape tape;
  Tensor loss = f(tape, xg);
  tape.backward(loss);
  const std::vector<double>& analytic = xg.grad();

  std::vector<double> numeric(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> plus = x.data();
    std::vector<double> minus = x.data();
    plus[i] += h;
    minus[i] -= h;
    Tape tp(false);
    const double fp = f(tp, Tensor::from_data(x.shape(), std::move(plus))).value();
    Tape tm(false);
    const double fm = f(tm, Tensor::from_data(x.shape(), std::move(minus))).value();
    numeric[i] = (fp - fm) / (2.0 * h);
  }

  double max_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(analytic[i]) || !std::isfinite(numeric[i])) {
      return std::numeric_limits<double>::infinity();
    }
    const double err =
        std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace retlab::ad
