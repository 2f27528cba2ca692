#pragma once

#include <vector>

#include "core/geometry.hpp"
#include "core/tensor.hpp"

namespace scat {

struct LossWeights {
  double alpha = 0.85;            // SSIM/L1 mix
  double smoothness_weight = 1e-3;
};

void validate_weights(const LossWeights& w);

// 3x3 mean filter with replicate padding, applied per channel
Tensor box3(const Tensor& x);

// windowed SSIM with C1=0.01^2, C2=0.03^2, averaged over channels;
// [N,C,H,W] x2 -> [N,1,H,W] map in [-1,1]
Tensor ssim(const Tensor& a, const Tensor& b);

// alpha/2 (1 - SSIM) + (1-alpha) |a-b|, channel-averaged -> [N,1,H,W]
Tensor pe(const Tensor& a, const Tensor& b, const LossWeights& w);

// scalar mean of map over mask > 0; an all-zero mask yields a constant 0
// and sets *empty
Tensor masked_mean(const Tensor& map, const Tensor& mask, bool* empty = nullptr);

// sum over source frames of the masked mean photometric error against the
// unaugmented target, clean and adversarial warps both included; empty-mask
// terms contribute 0 and are counted in *empty_terms
Tensor reprojection_loss(const Tensor& target, const std::vector<Warped>& clean,
                         const std::vector<Warped>& adversarial, const LossWeights& w,
                         int* empty_terms = nullptr);

// the adversarial branch alone
Tensor adversarial_loss(const Tensor& target, const std::vector<Warped>& adversarial,
                        const LossWeights& w, int* empty_terms = nullptr);

// edge-aware first-difference penalty on per-image mean-normalized disparity
Tensor smoothness_loss(const Tensor& disp, const Tensor& image);

}  // namespace scat
