#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

// Dense f64 tensors with tape-based reverse-mode differentiation. Tapes are
// per-forward-pass and discarded after backward; tensors are immutable after
// creation except for grad accumulation during backward. All arithmetic is
// f64 with fixed left-to-right summation order, so results are bit-identical
// per seed.

namespace retlab::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Activation { tanh_fn, sigmoid, clamp_unit, gelu };

// Peak live bytes held in tensor buffers (data + grad) since the last reset.
std::uint64_t peak_tensor_bytes();
std::uint64_t live_tensor_bytes();
void reset_peak_tensor_bytes();

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar_value(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return size() == 1; }

  const std::vector<double>& data() const;
  // For parameter init and optimizer updates between tapes; never mutate a
  // tensor that a live tape references.
  std::vector<double>& mutable_data();

  double value() const;                       // scalar tensors
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();
  void zero_grad();

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  friend class Tape;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
};

class Tape {
 public:
  // recording=false evaluates forward values only (inference mode).
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t node_count() const { return nodes_.size(); }

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor add_rowvec(const Tensor& m, const Tensor& v);
  Tensor scale(const Tensor& a, double c);
  Tensor add_const(const Tensor& a, double c);
  Tensor clamp_min(const Tensor& a, double c);
  Tensor activation(const Tensor& a, Activation kind);
  Tensor softmax_rows(const Tensor& a);
  Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5);
  Tensor sum(const Tensor& a);
  Tensor row_scale(const Tensor& h, const Tensor& z);
  Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);
  Tensor div_by_scalar(const Tensor& a, const Tensor& s);
  Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
  Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels,
                            double label_smoothing = 0.0);

  // Populates grads of every requires_grad tensor reachable from loss.
  // Repeated calls without zero_grad accumulate into leaf grads.
  void backward(const Tensor& loss);

 private:
  struct Node {
    std::shared_ptr<Tensor::Impl> out;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
  bool recording_;

  Tensor make_output(std::vector<std::size_t> shape, std::vector<double> data,
                     bool grad_path, const char* op);
  void record(const Tensor& out, std::function<void()> back);
  static bool on_grad_path(const Tensor& t);
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued graph builder evaluated at x.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                  const Tensor& x, double h);

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace retlab::ad
