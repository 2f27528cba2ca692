#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/geometry.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace scat {

struct ConvLayer {
  Tensor w;  // [F,C,kh,kw]
  Tensor b;  // [1,F,1,1]
};

// UNet-style depth network with scaled long skip connections: each decoder
// stage consumes kappa_i * (encoder feature) + (deeper recursion output);
// kappa_i = 1 for every skip is the standard UNet
struct SdnParams {
  std::vector<ConvLayer> enc;  // stride-2 3x3 blocks, ELU
  ConvLayer bottleneck;        // stride-1 3x3 at the deepest width, ELU
  std::vector<ConvLayer> dec;  // deepest-first, each after a x2 upsample, ELU
  ConvLayer head;              // 3x3 to 1 channel, sigmoid
  std::vector<double> kappa;   // one positive scale per skip
};

SdnParams make_sdn(Rng& rng, double kappa = 0.7,
                   const std::vector<int>& widths = {16, 32, 64, 128}, int in_channels = 3);

// [N,3,H,W] -> disparity [N,1,H,W] in (0,1); H, W divisible by 2^levels
Tensor sdn_forward(const SdnParams& p, const Tensor& image);

// mean L2 output deviation under `trials` random unit-norm input
// perturbations; the empirical counterpart of the skip-scaling bound
double sdn_sensitivity(const SdnParams& p, const Tensor& image, int trials, uint64_t seed);

struct PoseNetParams {
  std::vector<ConvLayer> trunk;  // stride-2 3x3 blocks over the 6-channel pair
  ConvLayer head;                // 1x1 to 6 channels, then global average
};

PoseNetParams make_posenet(Rng& rng, const std::vector<int>& widths = {16, 32, 64, 128});

// head output is bounded to (-0.01, 0.01) per component via 0.01*(2*sigmoid-1),
// so zero weights give the exact identity pose and the axis-angle norm stays
// far below pi
PoseSE3 posenet_forward(const PoseNetParams& p, const Tensor& target, const Tensor& source);

struct GeneratorParams {
  std::vector<ConvLayer> enc;  // stride-2 3x3 blocks, ELU
  ConvLayer bottleneck;        // sees encoder features + the noise plane
  std::vector<ConvLayer> dec;  // upsample + conv; the last layer is linear
  double epsilon = 0.0;        // per-image L2 target of the emitted perturbation
  int64_t version_tag = 0;
};

// perturbation budget for this image scale: the reference budget 135 at
// 3x192x640 scaled to preserve per-pixel density at 3x64x192
double default_epsilon();

GeneratorParams make_generator(Rng& rng, double epsilon = default_epsilon(),
                               const std::vector<int>& widths = {16, 32, 64},
                               int noise_channels = 4, int in_channels = 3);

// deterministic in (params, image, z_seed); output is projected per image
// onto the epsilon sphere. An exactly-zero raw output is replaced by seeded
// Gaussian noise before projection and reported through *degenerate.
Tensor generator_forward(const GeneratorParams& p, const Tensor& image, uint64_t z_seed,
                         bool* degenerate = nullptr);

// deep copy for the history buffer, stamped with the given version
GeneratorParams snapshot(const GeneratorParams& p, int64_t version_tag);

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

// deterministic parameter enumeration for optimizers and gradient layouts
std::vector<NamedParam> named_params(SdnParams& p);
std::vector<NamedParam> named_params(PoseNetParams& p);
std::vector<NamedParam> named_params(GeneratorParams& p);

}  // namespace scat
