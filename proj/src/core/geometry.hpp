#pragma once

#include <array>

#include "core/tensor.hpp"

namespace scat {

struct CameraModel {
  double fx = 0, fy = 0;  // focal lengths, pixels
  double cx = 0, cy = 0;  // principal point, pixels
  int width = 0, height = 0;
};

// 64x192 desk-scale frame; the power-of-two focal keeps the unproject/project
// round trip exact in floating point, so identity warps stay bit-exact
CameraModel default_camera(int width = 192, int height = 64);

void validate_camera(const CameraModel& cam);

// rigid motion mapping target-frame points into the source frame:
// X_src = R(axis_angle) * X_tgt + translation
struct PoseSE3 {
  Tensor axis_angle;   // [N,3], radians * unit axis
  Tensor translation;  // [N,3], scene units
};

PoseSE3 identity_pose(int n);

// value-level inverse (R^T, -R^T t); for ground-truth pose bookkeeping
PoseSE3 inverse_pose_values(const PoseSE3& pose);

// eager row-major 3x3 rotation from one axis-angle vector
std::array<double, 9> rotation_values(double wx, double wy, double wz);

// [N,3] -> [N,3,3] rotation matrices, series-expanded near zero so the
// gradient stays finite and the zero vector maps to the exact identity
Tensor rodrigues(const Tensor& axis_angle);

// [N,4,4] rigid transforms assembled from rotation and translation
Tensor pose_matrix(const PoseSE3& pose);

// depth = 1/(1/max + (1/min - 1/max)*disp), strictly decreasing in disp;
// disp 0 and 1 map to max_depth and min_depth exactly
Tensor disp_to_depth(const Tensor& disp, double min_depth = 0.1, double max_depth = 100.0);

// constant sampling grid [N,H,W,2] with x = (2u - (W-1))/(W-1), same for y
Tensor identity_grid(const CameraModel& cam, int n);

struct Projection {
  Tensor grid;   // [N,H,W,2] normalized source coordinates
  Tensor valid;  // [N,1,H,W] constant 0/1: transformed depth positive, in view
};

// back-project each pixel with K^-1 and its depth, move by pose, re-project;
// differentiable in depth and pose, the mask carries no gradient
Projection project(const Tensor& depth, const PoseSE3& pose, const CameraModel& cam);

struct Warped {
  Tensor image;  // [N,C,H,W]
  Tensor valid;  // [N,1,H,W]
};

// samples src at project's grid: the source view re-rendered from the
// target camera under (depth, pose)
Warped inverse_warp(const Tensor& src, const Tensor& depth, const PoseSE3& pose,
                    const CameraModel& cam);

}  // namespace scat
