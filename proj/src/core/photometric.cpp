#include "core/photometric.hpp"

#include <cmath>
#include <utility>

namespace scat {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

Tensor pad_replicate1(const Tensor& x) {
  const auto& s = x.shape();
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  const Tensor top = slice(x, {0, 0, 0, 0}, {n, c, 1, w});
  const Tensor bottom = slice(x, {0, 0, h - 1, 0}, {n, c, h, w});
  const Tensor rows = concat({top, x, bottom}, 2);
  const Tensor left = slice(rows, {0, 0, 0, 0}, {n, c, h + 2, 1});
  const Tensor right = slice(rows, {0, 0, 0, w - 1}, {n, c, h + 2, w});
  return concat({left, rows, right}, 3);
}

void check_image_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 4 || b.shape() != a.shape())
    throw TensorError(std::string(op) + ": expected matching [N,C,H,W] images, got " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// |forward difference| of x along axis (2 or 3)
Tensor abs_diff(const Tensor& x, int axis) {
  const auto& s = x.shape();
  std::vector<int> from_hi = {0, 0, 0, 0}, to_hi = s;
  std::vector<int> from_lo = {0, 0, 0, 0}, to_lo = s;
  from_hi[static_cast<size_t>(axis)] = 1;
  to_lo[static_cast<size_t>(axis)] = s[static_cast<size_t>(axis)] - 1;
  return vabs(sub(slice(x, from_hi, to_hi), slice(x, from_lo, to_lo)));
}

}  // namespace

void validate_weights(const LossWeights& w) {
  if (!(w.alpha >= 0.0 && w.alpha <= 1.0))
    throw TensorError("loss weights: alpha must lie in [0,1]");
  if (!(w.smoothness_weight >= 0.0))
    throw TensorError("loss weights: smoothness_weight must be nonnegative");
}

Tensor box3(const Tensor& x) {
  if (x.rank() != 4) throw TensorError("box3: expected [N,C,H,W], got " + shape_str(x.shape()));
  const auto& s = x.shape();
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  const Tensor padded = pad_replicate1(x);
  const Tensor flat = reshape(padded, {n * c, 1, h + 2, w + 2});
  const Tensor kernel = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
  return reshape(conv2d(flat, kernel, 1, 0), {n, c, h, w});
}

Tensor ssim(const Tensor& a, const Tensor& b) {
  check_image_pair(a, b, "ssim");
  const Tensor mu_a = box3(a);
  const Tensor mu_b = box3(b);
  const Tensor var_a = sub(box3(mul(a, a)), mul(mu_a, mu_a));
  const Tensor var_b = sub(box3(mul(b, b)), mul(mu_b, mu_b));
  const Tensor cov = sub(box3(mul(a, b)), mul(mu_a, mu_b));
  const Tensor lum = div(scalar_add(scalar_mul(mul(mu_a, mu_b), 2.0), kC1),
                         scalar_add(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), kC1));
  const Tensor con = div(scalar_add(scalar_mul(cov, 2.0), kC2),
                         scalar_add(add(var_a, var_b), kC2));
  return channel_mean(mul(lum, con));
}

Tensor pe(const Tensor& a, const Tensor& b, const LossWeights& w) {
  check_image_pair(a, b, "pe");
  validate_weights(w);
  const Tensor dssim = scalar_mul(scalar_add(neg(ssim(a, b)), 1.0), w.alpha / 2.0);
  const Tensor l1 = scalar_mul(channel_mean(vabs(sub(a, b))), 1.0 - w.alpha);
  return add(dssim, l1);
}

Tensor masked_mean(const Tensor& map, const Tensor& mask, bool* empty) {
  if (mask.shape() != map.shape())
    throw TensorError("masked_mean: map " + shape_str(map.shape()) + " vs mask " +
                      shape_str(mask.shape()));
  double count = 0;
  for (double m : mask.data()) count += (m > 0) ? 1.0 : 0.0;
  if (count == 0) {
    if (empty) *empty = true;
    return Tensor::scalar(0.0);
  }
  if (empty) *empty = false;
  return scalar_mul(sum(mul(map, mask)), 1.0 / count);
}

Tensor reprojection_loss(const Tensor& target, const std::vector<Warped>& clean,
                         const std::vector<Warped>& adversarial, const LossWeights& w,
                         int* empty_terms) {
  if (clean.empty()) throw TensorError("reprojection_loss: no clean warped frames");
  int empties = 0;
  Tensor total;
  auto accumulate_terms = [&](const std::vector<Warped>& frames) {
    for (const Warped& f : frames) {
      bool empty = false;
      const Tensor term = masked_mean(pe(target, f.image, w), f.valid, &empty);
      if (empty) ++empties;
      total = total.defined() ? add(total, term) : term;
    }
  };
  accumulate_terms(clean);
  accumulate_terms(adversarial);
  if (empty_terms) *empty_terms = empties;
  return total;
}

Tensor adversarial_loss(const Tensor& target, const std::vector<Warped>& adversarial,
                        const LossWeights& w, int* empty_terms) {
  if (adversarial.empty()) throw TensorError("adversarial_loss: no warped frames");
  int empties = 0;
  Tensor total;
  for (const Warped& f : adversarial) {
    bool empty = false;
    const Tensor term = masked_mean(pe(target, f.image, w), f.valid, &empty);
    if (empty) ++empties;
    total = total.defined() ? add(total, term) : term;
  }
  if (empty_terms) *empty_terms = empties;
  return total;
}

Tensor smoothness_loss(const Tensor& disp, const Tensor& image) {
  if (disp.rank() != 4 || disp.shape()[1] != 1)
    throw TensorError("smoothness_loss: disparity must be [N,1,H,W]");
  if (image.rank() != 4 || image.shape()[0] != disp.shape()[0] ||
      image.shape()[2] != disp.shape()[2] || image.shape()[3] != disp.shape()[3])
    throw TensorError("smoothness_loss: image size does not match the disparity");
  const auto& s = disp.shape();
  const int n = s[0];
  std::vector<Tensor> parts;
  parts.reserve(static_cast<size_t>(n));
  for (int b = 0; b < n; ++b) {
    const Tensor dn = slice(disp, {b, 0, 0, 0}, {b + 1, 1, s[2], s[3]});
    parts.push_back(div(dn, reshape(mean(dn), {1, 1, 1, 1})));
  }
  const Tensor norm = n > 1 ? concat(parts, 0) : parts[0];
  const Tensor wx = vexp(neg(channel_mean(abs_diff(image, 3))));
  const Tensor wy = vexp(neg(channel_mean(abs_diff(image, 2))));
  return add(mean(mul(abs_diff(norm, 3), wx)), mean(mul(abs_diff(norm, 2), wy)));
}

}  // namespace scat
