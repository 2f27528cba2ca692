#include "core/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace scat {

// ---------------------------------------------------------------- basics

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw TensorError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : data_(std::make_shared<std::vector<double>>(std::move(data))), shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_->size()))
    throw TensorError("data size does not match shape " + shape_str(shape_));
}

Tensor Tensor::zeros(std::vector<int> shape) {
  int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), value));
}

int64_t Tensor::numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

double Tensor::value() const {
  if (numel() != 1) throw TensorError("value() needs a single-element tensor, got " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  t.shape_ = shape_;
  return t;
}

// ---------------------------------------------------------------- tape

void Tape::round_inplace(std::vector<double>& v) const {
  if (precision_ != Precision::f32) return;
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

Tensor Tape::leaf(const Tensor& value) {
  Tensor t = value.detach();
  round_inplace(t.mutable_data());
  t.tape_ = this;
  t.node_ = record({}, nullptr);
  return t;
}

Tensor Tape::constant(const Tensor& value) {
  Tensor t = value.detach();
  round_inplace(t.mutable_data());
  t.tape_ = this;
  t.node_ = -1;
  return t;
}

int Tape::record(const std::vector<int>& parents, BackwardFn fn) {
  nodes_.push_back(Node{parents, std::move(fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int node, const Tensor& contribution) {
  if (node < 0) return;
  Tensor& g = grads_[static_cast<size_t>(node)];
  if (!g.defined()) {
    g = contribution.detach();
    round_inplace(g.mutable_data());
    return;
  }
  if (g.shape() != contribution.shape())
    throw TensorError("gradient shape mismatch: " + shape_str(g.shape()) + " vs " +
                      shape_str(contribution.shape()));
  auto& gd = g.mutable_data();
  const auto& cd = contribution.data();
  for (size_t i = 0; i < gd.size(); ++i) gd[i] += cd[i];
  round_inplace(gd);
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) throw TensorError("loss does not live on this tape");
  if (loss.numel() != 1) throw TensorError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  grads_.assign(nodes_.size(), Tensor());
  if (loss.node() < 0) return;  // pure constant: every leaf gradient stays zero
  grads_[static_cast<size_t>(loss.node())] = Tensor::full(loss.shape(), 1.0);
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    const Node& node = nodes_[static_cast<size_t>(i)];
    if (!node.backward) continue;
    const Tensor& g = grads_[static_cast<size_t>(i)];
    if (!g.defined()) continue;
    node.backward(*this, g);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.node() >= 0 && static_cast<size_t>(t.node()) < grads_.size()) {
    const Tensor& g = grads_[static_cast<size_t>(t.node())];
    if (g.defined()) return g.detach();
  }
  return Tensor::zeros(t.shape());
}

namespace {

Tape* resolve_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->defined()) throw TensorError("undefined tensor passed to op");
    if (t->tape() == nullptr) continue;
    if (tape != nullptr && tape != t->tape()) throw TensorError("tensors belong to different tapes");
    tape = t->tape();
  }
  return tape;
}

struct ResultBuilder {
  Tape* tape;
  explicit ResultBuilder(std::initializer_list<const Tensor*> inputs) : tape(resolve_tape(inputs)) {}

  Tensor done(std::vector<int> shape, std::vector<double> data,
              std::initializer_list<int> parent_nodes, Tape::BackwardFn fn) const {
    Tensor out(std::move(shape), std::move(data));
    if (tape == nullptr) return out;
    tape->round_inplace(out.mutable_data());
    bool any_grad = false;
    for (int p : parent_nodes)
      if (p >= 0) any_grad = true;
    return tape->attach(std::move(out), any_grad ? std::vector<int>(parent_nodes) : std::vector<int>{},
                        any_grad ? std::move(fn) : Tape::BackwardFn());
  }
};

}  // namespace

Tensor Tape::attach(Tensor t, std::vector<int> parents, BackwardFn fn) {
  t.tape_ = this;
  t.node_ = fn ? record(parents, std::move(fn)) : -1;
  return t;
}

Tensor custom_op(std::vector<int> shape, std::vector<double> data,
                 std::initializer_list<const Tensor*> inputs, Tape::BackwardFn fn) {
  ResultBuilder rb(inputs);
  std::vector<int> parents;
  for (const Tensor* t : inputs) parents.push_back(t->node());
  Tensor out(std::move(shape), std::move(data));
  if (rb.tape == nullptr) return out;
  rb.tape->round_inplace(out.mutable_data());
  bool any_grad = false;
  for (int p : parents)
    if (p >= 0) any_grad = true;
  return rb.tape->attach(std::move(out), any_grad ? std::move(parents) : std::vector<int>{},
                         any_grad ? std::move(fn) : Tape::BackwardFn());
}

// ------------------------------------------------------- broadcast helpers

namespace {

struct Bcast {
  std::vector<int> shape;     // output shape
  std::vector<int64_t> sa, sb;  // per-axis strides into a and b (0 on broadcast axes)
  int64_t n = 1;
  bool same = false;
};

std::vector<int64_t> dense_strides(const std::vector<int>& shape) {
  std::vector<int64_t> s(shape.size(), 0);
  int64_t acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    s[static_cast<size_t>(i)] = acc;
    acc *= shape[static_cast<size_t>(i)];
  }
  return s;
}

Bcast plan_bcast(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size())
    throw TensorError("broadcast requires equal rank: " + shape_str(a) + " vs " + shape_str(b));
  Bcast p;
  p.shape.resize(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) p.shape[i] = a[i];
    else if (a[i] == 1) p.shape[i] = b[i];
    else if (b[i] == 1) p.shape[i] = a[i];
    else throw TensorError("incompatible broadcast: " + shape_str(a) + " vs " + shape_str(b));
  }
  p.n = shape_numel(p.shape);
  p.same = (a == b);
  auto da = dense_strides(a), db = dense_strides(b);
  p.sa.resize(a.size());
  p.sb.resize(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    p.sa[i] = (a[i] == 1 && p.shape[i] != 1) ? 0 : da[i];
    p.sb[i] = (b[i] == 1 && p.shape[i] != 1) ? 0 : db[i];
  }
  return p;
}

// walks the output index space once, giving (out, a, b) linear offsets
template <class Fn>
void bcast_for_each(const Bcast& p, Fn fn) {
  if (p.same) {
    for (int64_t i = 0; i < p.n; ++i) fn(i, i, i);
    return;
  }
  const int r = static_cast<int>(p.shape.size());
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < p.n; ++i) {
    fn(i, oa, ob);
    for (int ax = r - 1; ax >= 0; --ax) {
      idx[static_cast<size_t>(ax)]++;
      oa += p.sa[static_cast<size_t>(ax)];
      ob += p.sb[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < p.shape[static_cast<size_t>(ax)]) break;
      oa -= p.sa[static_cast<size_t>(ax)] * p.shape[static_cast<size_t>(ax)];
      ob -= p.sb[static_cast<size_t>(ax)] * p.shape[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
}

// sums an out-shaped buffer down to `shape` (axes of size 1 collapse)
Tensor reduce_to_shape(const std::vector<double>& buf, const std::vector<int>& out_shape,
                       const std::vector<int>& shape) {
  if (shape == out_shape) return Tensor(shape, buf);
  Bcast p = plan_bcast(shape, out_shape);  // strides of `shape` inside out space
  std::vector<double> acc(static_cast<size_t>(shape_numel(shape)), 0.0);
  bcast_for_each(p, [&](int64_t i, int64_t oa, int64_t) { acc[static_cast<size_t>(oa)] += buf[static_cast<size_t>(i)]; });
  return Tensor(shape, std::move(acc));
}

// shared implementation for the four broadcasting arithmetic ops
template <class FwdFn, class BwdFn>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
  Bcast p = plan_bcast(a.shape(), b.shape());
  std::vector<double> out(static_cast<size_t>(p.n));
  const auto& ad = a.data();
  const auto& bd = b.data();
  bcast_for_each(p, [&](int64_t i, int64_t oa, int64_t ob) {
    out[static_cast<size_t>(i)] = fwd(ad[static_cast<size_t>(oa)], bd[static_cast<size_t>(ob)]);
  });

  ResultBuilder rb({&a, &b});
  Tensor ac = a, bc = b;
  int an = a.node(), bn = b.node();
  auto backward = [p, ac, bc, an, bn, bwd](Tape& tp, const Tensor& g) {
    const auto& gd = g.data();
    const auto& ad2 = ac.data();
    const auto& bd2 = bc.data();
    std::vector<double> ca, cb;
    if (an >= 0) ca.resize(gd.size());
    if (bn >= 0) cb.resize(gd.size());
    bcast_for_each(p, [&](int64_t i, int64_t oa, int64_t ob) {
      double da, db;
      bwd(gd[static_cast<size_t>(i)], ad2[static_cast<size_t>(oa)], bd2[static_cast<size_t>(ob)], da, db);
      if (an >= 0) ca[static_cast<size_t>(i)] = da;
      if (bn >= 0) cb[static_cast<size_t>(i)] = db;
    });
    if (an >= 0) tp.accumulate(an, reduce_to_shape(ca, p.shape, ac.shape()));
    if (bn >= 0) tp.accumulate(bn, reduce_to_shape(cb, p.shape, bc.shape()));
  };
  return rb.done(p.shape, std::move(out), {an, bn}, backward);
}

template <class FwdFn, class BwdFn>
Tensor pointwise(const Tensor& a, FwdFn fwd, BwdFn dfdx) {
  std::vector<double> out(a.data().size());
  const auto& ad = a.data();
  for (size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);

  ResultBuilder rb({&a});
  Tensor ac = a;
  int an = a.node();
  auto backward = [ac, an, dfdx](Tape& tp, const Tensor& g) {
    const auto& gd = g.data();
    const auto& ad2 = ac.data();
    std::vector<double> c(gd.size());
    for (size_t i = 0; i < gd.size(); ++i) c[i] = gd[i] * dfdx(ad2[i]);
    tp.accumulate(an, Tensor(ac.shape(), std::move(c)));
  };
  return rb.done(a.shape(), std::move(out), {an}, backward);
}

}  // namespace

// ---------------------------------------------------------------- ops

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x + y; },
                   [](double g, double, double, double& da, double& db) { da = g; db = g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x - y; },
                   [](double g, double, double, double& da, double& db) { da = g; db = -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x * y; },
                   [](double g, double x, double y, double& da, double& db) { da = g * y; db = g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x / y; },
                   [](double g, double x, double y, double& da, double& db) {
                     da = g / y;
                     db = -g * x / (y * y);
                   });
}

Tensor scalar_mul(const Tensor& a, double c) {
  return pointwise(a, [c](double x) { return x * c; }, [c](double) { return c; });
}

Tensor scalar_add(const Tensor& a, double c) {
  return pointwise(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

Tensor elu(const Tensor& a) {
  return pointwise(a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
                   [](double x) { return x > 0.0 ? 1.0 : std::exp(x); });
}

Tensor sigmoid(const Tensor& a) {
  auto s = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return pointwise(a, s, [s](double x) {
    double v = s(x);
    return v * (1.0 - v);
  });
}

Tensor vabs(const Tensor& a) {
  return pointwise(a, [](double x) { return std::fabs(x); },
                   [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return pointwise(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                   [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor vexp(const Tensor& a) {
  return pointwise(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor vlog(const Tensor& a) {
  return pointwise(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor vsqrt(const Tensor& a) {
  return pointwise(a, [](double x) { return std::sqrt(x); },
                   [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor vsin(const Tensor& a) {
  return pointwise(a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

Tensor vcos(const Tensor& a) {
  return pointwise(a, [](double x) { return std::cos(x); }, [](double x) { return -std::sin(x); });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;  // fixed sequential order
  ResultBuilder rb({&a});
  Tensor ac = a;
  int an = a.node();
  auto backward = [ac, an](Tape& tp, const Tensor& g) {
    tp.accumulate(an, Tensor::full(ac.shape(), g.data()[0]));
  };
  return rb.done({1}, {acc}, {an}, backward);
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw TensorError("mean of empty tensor");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  ResultBuilder rb({&a});
  Tensor ac = a;
  int an = a.node();
  auto backward = [ac, an, inv](Tape& tp, const Tensor& g) {
    tp.accumulate(an, Tensor::full(ac.shape(), g.data()[0] * inv));
  };
  return rb.done({1}, {acc * inv}, {an}, backward);
}

Tensor channel_mean(const Tensor& a) {
  if (a.rank() != 4) throw TensorError("channel_mean expects [N,C,H,W], got " + shape_str(a.shape()));
  const int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<double> out(static_cast<size_t>(N * hw), 0.0);
  const auto& ad = a.data();
  const double inv = 1.0 / std::max(C, 1);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = ad.data() + (static_cast<int64_t>(n) * C + c) * hw;
      double* dst = out.data() + static_cast<int64_t>(n) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
    }
  for (double& v : out) v *= inv;

  ResultBuilder rb({&a});
  Tensor ac = a;
  int an = a.node();
  auto backward = [ac, an, N, C, hw, inv](Tape& tp, const Tensor& g) {
    std::vector<double> contrib(ac.data().size());
    const auto& gd = g.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double* dst = contrib.data() + (static_cast<int64_t>(n) * C + c) * hw;
        const double* src = gd.data() + static_cast<int64_t>(n) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] * inv;
      }
    tp.accumulate(an, Tensor(ac.shape(), std::move(contrib)));
  };
  return rb.done({N, 1, H, W}, std::move(out), {an}, backward);
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel())
    throw TensorError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  ResultBuilder rb({&a});
  Tensor ac = a;
  int an = a.node();
  auto backward = [ac, an](Tape& tp, const Tensor& g) {
    tp.accumulate(an, Tensor(ac.shape(), g.data()));
  };
  return rb.done(std::move(shape), a.data(), {an}, backward);
}

Tensor slice(const Tensor& a, const std::vector<int>& start, const std::vector<int>& stop) {
  const int r = a.rank();
  if (static_cast<int>(start.size()) != r || static_cast<int>(stop.size()) != r)
    throw TensorError("slice bounds rank mismatch");
  std::vector<int> oshape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    if (start[static_cast<size_t>(i)] < 0 || stop[static_cast<size_t>(i)] > a.dim(i) ||
        start[static_cast<size_t>(i)] >= stop[static_cast<size_t>(i)])
      throw TensorError("bad slice bounds on axis " + std::to_string(i));
    oshape[static_cast<size_t>(i)] = stop[static_cast<size_t>(i)] - start[static_cast<size_t>(i)];
  }
  auto astr = dense_strides(a.shape());
  const int64_t n = shape_numel(oshape);
  std::vector<double> out(static_cast<size_t>(n));
  const auto& ad = a.data();
  std::vector<int> idx(static_cast<size_t>(r), 0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t off = 0;
    for (int ax = 0; ax < r; ++ax)
      off += astr[static_cast<size_t>(ax)] * (start[static_cast<size_t>(ax)] + idx[static_cast<size_t>(ax)]);
    out[static_cast<size_t>(i)] = ad[static_cast<size_t>(off)];
    for (int ax = r - 1; ax >= 0; --ax) {
      if (++idx[static_cast<size_t>(ax)] < oshape[static_cast<size_t>(ax)]) break;
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
  ResultBuilder rb({&a});
  Tensor ac = a;
  int an = a.node();
  std::vector<int> st = start;
  auto backward = [ac, an, st, oshape, astr, r](Tape& tp, const Tensor& g) {
    std::vector<double> contrib(ac.data().size(), 0.0);
    const auto& gd = g.data();
    std::vector<int> idx2(static_cast<size_t>(r), 0);
    for (size_t i = 0; i < gd.size(); ++i) {
      int64_t off = 0;
      for (int ax = 0; ax < r; ++ax)
        off += astr[static_cast<size_t>(ax)] * (st[static_cast<size_t>(ax)] + idx2[static_cast<size_t>(ax)]);
      contrib[static_cast<size_t>(off)] += gd[i];
      for (int ax = r - 1; ax >= 0; --ax) {
        if (++idx2[static_cast<size_t>(ax)] < oshape[static_cast<size_t>(ax)]) break;
        idx2[static_cast<size_t>(ax)] = 0;
      }
    }
    tp.accumulate(an, Tensor(ac.shape(), std::move(contrib)));
  };
  return rb.done(oshape, std::move(out), {an}, backward);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw TensorError("concat of zero tensors");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw TensorError("concat axis out of range");
  std::vector<int> oshape = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw TensorError("concat rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != oshape[static_cast<size_t>(i)])
        throw TensorError("concat shape mismatch on axis " + std::to_string(i));
    total += p.dim(axis);
  }
  oshape[static_cast<size_t>(axis)] = total;

  // outer x axis x inner layout
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= oshape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= oshape[static_cast<size_t>(i)];

  std::vector<double> out(static_cast<size_t>(shape_numel(oshape)));
  int at = 0;
  std::vector<int> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(at);
    const int pa = p.dim(axis);
    const auto& pd = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total + at) * inner, pd.data() + o * pa * inner,
                  static_cast<size_t>(pa * inner) * sizeof(double));
    at += pa;
  }

  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  Tape* tape = nullptr;
  for (const Tensor* t : ptrs) {
    if (t->tape()) {
      if (tape && tape != t->tape()) throw TensorError("tensors belong to different tapes");
      tape = t->tape();
    }
  }
  std::vector<Tensor> copies = parts;
  std::vector<int> nodes;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    if (p.node() >= 0) any_grad = true;
  }
  auto backward = [copies, nodes, offsets, outer, inner, total, axis](Tape& tp, const Tensor& g) {
    const auto& gd = g.data();
    for (size_t k = 0; k < copies.size(); ++k) {
      if (nodes[k] < 0) continue;
      const int pa = copies[k].dim(axis);
      std::vector<double> contrib(copies[k].data().size());
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(contrib.data() + o * pa * inner, gd.data() + (o * total + offsets[k]) * inner,
                    static_cast<size_t>(pa * inner) * sizeof(double));
      tp.accumulate(nodes[k], Tensor(copies[k].shape(), std::move(contrib)));
    }
  };
  Tensor out_t(oshape, std::move(out));
  if (!tape) return out_t;
  tape->round_inplace(out_t.mutable_data());
  return tape->attach(std::move(out_t), any_grad ? nodes : std::vector<int>{},
                      any_grad ? Tape::BackwardFn(backward) : Tape::BackwardFn());
}

Tensor concat_channels(const std::vector<Tensor>& parts) { return concat(parts, 1); }

Tensor upsample_nearest_x2(const Tensor& a) {
  if (a.rank() != 4) throw TensorError("upsample_nearest_x2 expects [N,C,H,W]");
  const int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const int Ho = 2 * H, Wo = 2 * W;
  std::vector<double> out(static_cast<size_t>(static_cast<int64_t>(N) * C * Ho * Wo));
  const auto& ad = a.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const double* src = ad.data() + nc * H * W;
    double* dst = out.data() + nc * Ho * Wo;
    for (int y = 0; y < Ho; ++y)
      for (int x = 0; x < Wo; ++x) dst[static_cast<int64_t>(y) * Wo + x] = src[static_cast<int64_t>(y / 2) * W + x / 2];
  }
  ResultBuilder rb({&a});
  Tensor ac = a;
  int an = a.node();
  auto backward = [ac, an, N, C, H, W, Ho, Wo](Tape& tp, const Tensor& g) {
    std::vector<double> contrib(ac.data().size(), 0.0);
    const auto& gd = g.data();
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
      const double* src = gd.data() + nc * Ho * Wo;
      double* dst = contrib.data() + nc * H * W;
      for (int y = 0; y < Ho; ++y)
        for (int x = 0; x < Wo; ++x) dst[static_cast<int64_t>(y / 2) * W + x / 2] += src[static_cast<int64_t>(y) * Wo + x];
    }
    tp.accumulate(an, Tensor(ac.shape(), std::move(contrib)));
  };
  return rb.done({N, C, Ho, Wo}, std::move(out), {an}, backward);
}

// ---------------------------------------------------------------- conv2d

namespace {

// col is [C*kh*kw, Ho*Wo], row-major
void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* col) {
  const int64_t owh = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        double* row = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * owh;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            row[static_cast<int64_t>(oy) * Wo + ox] =
                (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[static_cast<int64_t>(c) * H * W + static_cast<int64_t>(iy) * W + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* x) {
  const int64_t owh = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const double* row = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * owh;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix < 0 || ix >= W) continue;
            x[static_cast<int64_t>(c) * H * W + static_cast<int64_t>(iy) * W + ix] += row[static_cast<int64_t>(oy) * Wo + ox];
          }
        }
      }
}

// C = A[M,K] x B[K,N] (+ C if beta), row-major; f32 path converts through
// float so training math is genuinely 32-bit
void gemm(bool f32, int M, int N, int K, const double* A, const double* B, double beta, double* C) {
  if (!f32) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, M, N, K, 1.0, A, K, B, N, beta, C, N);
    return;
  }
  std::vector<float> fa(static_cast<size_t>(M) * K), fb(static_cast<size_t>(K) * N), fc(static_cast<size_t>(M) * N);
  for (size_t i = 0; i < fa.size(); ++i) fa[i] = static_cast<float>(A[i]);
  for (size_t i = 0; i < fb.size(); ++i) fb[i] = static_cast<float>(B[i]);
  if (beta != 0.0)
    for (size_t i = 0; i < fc.size(); ++i) fc[i] = static_cast<float>(C[i]);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, M, N, K, 1.0f, fa.data(), K, fb.data(), N,
              static_cast<float>(beta), fc.data(), N);
  for (size_t i = 0; i < fc.size(); ++i) C[i] = static_cast<double>(fc[i]);
}

void gemm_at_b(bool f32, int M, int N, int K, const double* A, const double* B, double beta, double* C) {
  // C[M,N] = A^T[M,K] x B[K,N] where A is [K,M]
  if (!f32) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, M, N, K, 1.0, A, M, B, N, beta, C, N);
    return;
  }
  std::vector<float> fa(static_cast<size_t>(K) * M), fb(static_cast<size_t>(K) * N), fc(static_cast<size_t>(M) * N);
  for (size_t i = 0; i < fa.size(); ++i) fa[i] = static_cast<float>(A[i]);
  for (size_t i = 0; i < fb.size(); ++i) fb[i] = static_cast<float>(B[i]);
  if (beta != 0.0)
    for (size_t i = 0; i < fc.size(); ++i) fc[i] = static_cast<float>(C[i]);
  cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, M, N, K, 1.0f, fa.data(), M, fb.data(), N,
              static_cast<float>(beta), fc.data(), N);
  for (size_t i = 0; i < fc.size(); ++i) C[i] = static_cast<double>(fc[i]);
}

void gemm_a_bt(bool f32, int M, int N, int K, const double* A, const double* B, double beta, double* C) {
  // C[M,N] = A[M,K] x B^T[K,N] where B is [N,K]
  if (!f32) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, M, N, K, 1.0, A, K, B, K, beta, C, N);
    return;
  }
  std::vector<float> fa(static_cast<size_t>(M) * K), fb(static_cast<size_t>(N) * K), fc(static_cast<size_t>(M) * N);
  for (size_t i = 0; i < fa.size(); ++i) fa[i] = static_cast<float>(A[i]);
  for (size_t i = 0; i < fb.size(); ++i) fb[i] = static_cast<float>(B[i]);
  if (beta != 0.0)
    for (size_t i = 0; i < fc.size(); ++i) fc[i] = static_cast<float>(C[i]);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, M, N, K, 1.0f, fa.data(), K, fb.data(), K,
              static_cast<float>(beta), fc.data(), N);
  for (size_t i = 0; i < fc.size(); ++i) C[i] = static_cast<double>(fc[i]);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw TensorError("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw]");
  if (input.dim(1) != kernel.dim(1))
    throw TensorError("conv2d channel mismatch: " + shape_str(input.shape()) + " vs " + shape_str(kernel.shape()));
  if (stride < 1 || padding < 0) throw TensorError("conv2d bad stride/padding");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int F = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw TensorError("conv2d output would be empty");

  ResultBuilder rb({&input, &kernel});
  const bool f32 = rb.tape && rb.tape->precision() == Precision::f32;

  const int64_t ckk = static_cast<int64_t>(C) * kh * kw;
  const int64_t owh = static_cast<int64_t>(Ho) * Wo;
  std::vector<double> out(static_cast<size_t>(static_cast<int64_t>(N) * F * owh));
  std::vector<double> col(static_cast<size_t>(ckk * owh));
  for (int n = 0; n < N; ++n) {
    im2col(input.data().data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
    gemm(f32, F, static_cast<int>(owh), static_cast<int>(ckk), kernel.data().data(), col.data(), 0.0,
         out.data() + static_cast<int64_t>(n) * F * owh);
  }

  Tensor xc = input, wc = kernel;
  int xn = input.node(), wn = kernel.node();
  auto backward = [xc, wc, xn, wn, N, C, H, W, F, kh, kw, stride, padding, Ho, Wo, ckk, owh, f32](
                      Tape& tp, const Tensor& g) {
    std::vector<double> col(static_cast<size_t>(ckk * owh));
    std::vector<double> dw, dx, dcol;
    if (wn >= 0) dw.assign(wc.data().size(), 0.0);
    if (xn >= 0) {
      dx.assign(xc.data().size(), 0.0);
      dcol.resize(static_cast<size_t>(ckk * owh));
    }
    for (int n = 0; n < N; ++n) {
      const double* gn = g.data().data() + static_cast<int64_t>(n) * F * owh;
      if (wn >= 0) {
        im2col(xc.data().data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
        // dW[F,ckk] += gn[F,owh] x col[ckk,owh]^T
        gemm_a_bt(f32, F, static_cast<int>(ckk), static_cast<int>(owh), gn, col.data(), 1.0, dw.data());
      }
      if (xn >= 0) {
        // dcol[ckk,owh] = W[F,ckk]^T x gn[F,owh]
        gemm_at_b(f32, static_cast<int>(ckk), static_cast<int>(owh), F, wc.data().data(), gn, 0.0, dcol.data());
        col2im(dcol.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
               dx.data() + static_cast<int64_t>(n) * C * H * W);
      }
    }
    if (wn >= 0) tp.accumulate(wn, Tensor(wc.shape(), std::move(dw)));
    if (xn >= 0) tp.accumulate(xn, Tensor(xc.shape(), std::move(dx)));
  };
  return rb.done({N, F, Ho, Wo}, std::move(out), {xn, wn}, backward);
}

// ------------------------------------------------------------ grid_sample

namespace {
// Normalized->pixel coordinates land slightly off lattice points after round
// trips through the projection math; on f32 tapes the rounded grid is off by
// up to ~6e-6 px once unnormalized. Snapping keeps exact-identity warps
// exact. Finite-difference probes sample mid-cell (>= 0.2 px from a lattice
// line), well clear of the snap radius.
constexpr double kSnap = 1e-4;

inline double snap_lattice(double x) {
  const double r = std::nearbyint(x);
  return std::fabs(x - r) <= kSnap ? r : x;
}

struct BilinearPrep {
  int x0, x1, y0, y1;
  double fx, fy;
  bool inx, iny;  // strictly interior: clamp kink carries zero grid gradient
};

inline BilinearPrep bilinear_prep(double gx, double gy, int W, int H) {
  BilinearPrep b;
  if (!std::isfinite(gx) || !std::isfinite(gy)) {
    // poisoned coordinates sample the corner with zero grid gradient instead
    // of indexing out of bounds; the caller's valid mask excludes them
    b.x0 = b.x1 = b.y0 = b.y1 = 0;
    b.fx = b.fy = 0.0;
    b.inx = b.iny = false;
    return b;
  }
  double x = snap_lattice((gx + 1.0) * 0.5 * (W - 1));
  double y = snap_lattice((gy + 1.0) * 0.5 * (H - 1));
  b.inx = (x > 0.0 && x < W - 1);
  b.iny = (y > 0.0 && y < H - 1);
  x = std::min(std::max(x, 0.0), static_cast<double>(W - 1));
  y = std::min(std::max(y, 0.0), static_cast<double>(H - 1));
  b.x0 = std::min(static_cast<int>(x), W - 1);
  b.y0 = std::min(static_cast<int>(y), H - 1);
  b.x1 = std::min(b.x0 + 1, W - 1);
  b.y1 = std::min(b.y0 + 1, H - 1);
  b.fx = x - b.x0;
  b.fy = y - b.y0;
  return b;
}

}  // namespace

Tensor grid_sample(const Tensor& image, const Tensor& grid) {
  if (image.rank() != 4 || grid.rank() != 4 || grid.dim(3) != 2)
    throw TensorError("grid_sample expects image [N,C,H,W] and grid [N,H',W',2]");
  if (image.dim(0) != grid.dim(0)) throw TensorError("grid_sample batch mismatch");
  const int N = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  const int Ho = grid.dim(1), Wo = grid.dim(2);
  const int64_t hw = static_cast<int64_t>(H) * W;
  const int64_t ohw = static_cast<int64_t>(Ho) * Wo;

  std::vector<double> out(static_cast<size_t>(static_cast<int64_t>(N) * C * ohw));
  const auto& im = image.data();
  const auto& gr = grid.data();

  for (int n = 0; n < N; ++n)
    for (int64_t o = 0; o < ohw; ++o) {
      const int64_t go2 = (static_cast<int64_t>(n) * ohw + o) * 2;
      const BilinearPrep b = bilinear_prep(gr[go2], gr[go2 + 1], W, H);
      for (int c = 0; c < C; ++c) {
        const double* p = im.data() + (static_cast<int64_t>(n) * C + c) * hw;
        const double v00 = p[static_cast<int64_t>(b.y0) * W + b.x0];
        const double v01 = p[static_cast<int64_t>(b.y0) * W + b.x1];
        const double v10 = p[static_cast<int64_t>(b.y1) * W + b.x0];
        const double v11 = p[static_cast<int64_t>(b.y1) * W + b.x1];
        out[(static_cast<int64_t>(n) * C + c) * ohw + o] =
            v00 * (1.0 - b.fy) * (1.0 - b.fx) + v01 * (1.0 - b.fy) * b.fx +
            v10 * b.fy * (1.0 - b.fx) + v11 * b.fy * b.fx;
      }
    }

  ResultBuilder rb({&image, &grid});
  Tensor ic = image, gc = grid;
  int in_node = image.node(), gn_node = grid.node();
  auto backward = [ic, gc, in_node, gn_node, N, C, H, W, hw, ohw](Tape& tp, const Tensor& g) {
    const auto& gd = g.data();
    const auto& im2 = ic.data();
    const auto& gr2 = gc.data();
    std::vector<double> dimg, dgrid;
    if (in_node >= 0) dimg.assign(ic.data().size(), 0.0);
    if (gn_node >= 0) dgrid.assign(gc.data().size(), 0.0);
    for (int n = 0; n < N; ++n)
      for (int64_t o = 0; o < ohw; ++o) {
        const int64_t go2 = (static_cast<int64_t>(n) * ohw + o) * 2;
        const BilinearPrep b = bilinear_prep(gr2[go2], gr2[go2 + 1], W, H);
        double ddx = 0.0, ddy = 0.0;
        for (int c = 0; c < C; ++c) {
          const double go = gd[(static_cast<int64_t>(n) * C + c) * ohw + o];
          if (in_node >= 0) {
            double* p = dimg.data() + (static_cast<int64_t>(n) * C + c) * hw;
            p[static_cast<int64_t>(b.y0) * W + b.x0] += go * (1.0 - b.fy) * (1.0 - b.fx);
            p[static_cast<int64_t>(b.y0) * W + b.x1] += go * (1.0 - b.fy) * b.fx;
            p[static_cast<int64_t>(b.y1) * W + b.x0] += go * b.fy * (1.0 - b.fx);
            p[static_cast<int64_t>(b.y1) * W + b.x1] += go * b.fy * b.fx;
          }
          if (gn_node >= 0) {
            const double* p = im2.data() + (static_cast<int64_t>(n) * C + c) * hw;
            const double v00 = p[static_cast<int64_t>(b.y0) * W + b.x0];
            const double v01 = p[static_cast<int64_t>(b.y0) * W + b.x1];
            const double v10 = p[static_cast<int64_t>(b.y1) * W + b.x0];
            const double v11 = p[static_cast<int64_t>(b.y1) * W + b.x1];
            ddx += go * ((v01 - v00) * (1.0 - b.fy) + (v11 - v10) * b.fy);
            ddy += go * ((v10 - v00) * (1.0 - b.fx) + (v11 - v01) * b.fx);
          }
        }
        if (gn_node >= 0) {
          dgrid[go2 + 0] = b.inx ? ddx * 0.5 * (W - 1) : 0.0;
          dgrid[go2 + 1] = b.iny ? ddy * 0.5 * (H - 1) : 0.0;
        }
      }
    if (in_node >= 0) tp.accumulate(in_node, Tensor(ic.shape(), std::move(dimg)));
    if (gn_node >= 0) tp.accumulate(gn_node, Tensor(gc.shape(), std::move(dgrid)));
  };
  return rb.done({N, C, Ho, Wo}, std::move(out), {in_node, gn_node}, backward);
}

}  // namespace scat
