#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace scat {

// Training runs in f32: every op result and every gradient accumulation is
// rounded through float. Gradient-check tests use f64 tapes instead.
enum class Precision { f32, f64 };

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value) { return full({1}, value); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const;
  bool defined() const { return data_ != nullptr; }

  // deep copy, off-tape; the copy owns its buffer
  Tensor clone() const { return Tensor(shape_, std::vector<double>(*data_)); }

  // the rvalue overload copies: iterating `f(...).data()` would otherwise
  // walk a buffer the destroyed temporary owned
  const std::vector<double>& data() const& { return *data_; }
  std::vector<double> data() && { return *data_; }
  std::vector<double>& mutable_data() { return *data_; }
  double value() const;  // numel()==1 convenience

  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  bool requires_grad() const { return node_ >= 0; }

  // detached copy of the values, off any tape
  Tensor detach() const;

 private:
  friend class Tape;
  std::shared_ptr<std::vector<double>> data_;
  std::vector<int> shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Wengert list. Ops append nodes in evaluation order, so the recorded order is
// a valid topological order and backward() is a single reverse sweep with
// deterministic, sequential gradient accumulation.
class Tape {
 public:
  explicit Tape(Precision precision = Precision::f32) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }

  // registers a differentiable leaf (copies and rounds the values)
  Tensor leaf(const Tensor& value);
  // places values on the tape without a grad path (rounded constants)
  Tensor constant(const Tensor& value);

  void backward(const Tensor& loss);

  // gradient of the last backward() w.r.t. a leaf/node; zeros if unreachable
  Tensor grad(const Tensor& t) const;

  size_t num_nodes() const { return nodes_.size(); }
  void round_inplace(std::vector<double>& v) const;

  // --- op support ---
  using BackwardFn = std::function<void(Tape&, const Tensor& gout)>;
  int record(const std::vector<int>& parents, BackwardFn fn);
  void accumulate(int node, const Tensor& contribution);
  // takes ownership of a freshly computed result; empty fn means no grad path
  Tensor attach(Tensor t, std::vector<int> parents, BackwardFn fn);

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn backward;
  };
  Precision precision_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Ops mixing tensors from two different tapes, shape mismatches, and other
// contract violations throw TensorError.
struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// elementwise, broadcasting over exactly-matching or size-1 axes (equal rank)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor elu(const Tensor& a);        // alpha = 1, C1 at the origin
Tensor sigmoid(const Tensor& a);
Tensor vabs(const Tensor& a);       // kink at 0
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor vexp(const Tensor& a);
Tensor vlog(const Tensor& a);
Tensor vsqrt(const Tensor& a);
Tensor vsin(const Tensor& a);
Tensor vcos(const Tensor& a);

Tensor sum(const Tensor& a);   // -> shape {1}
Tensor mean(const Tensor& a);  // -> shape {1}
Tensor channel_mean(const Tensor& a);  // [N,C,H,W] -> [N,1,H,W]

Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor slice(const Tensor& a, const std::vector<int>& start, const std::vector<int>& stop);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor concat_channels(const std::vector<Tensor>& parts);

Tensor upsample_nearest_x2(const Tensor& a);  // [N,C,H,W] -> [N,C,2H,2W]

// cross-correlation, zero padding; input [N,C,H,W], kernel [F,C,kh,kw]
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);

// bilinear sampling; image [N,C,H,W], grid [N,H',W',2] in normalized [-1,1]
// coordinates (align-corners), border clamping outside the frame
Tensor grid_sample(const Tensor& image, const Tensor& grid);

// registers a fused op result: resolves the tape from the inputs, applies
// precision rounding, and records fn when any input carries a grad path
Tensor custom_op(std::vector<int> shape, std::vector<double> data,
                 std::initializer_list<const Tensor*> inputs, Tape::BackwardFn fn);

}  // namespace scat
