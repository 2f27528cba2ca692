#include "core/geometry.hpp"

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

namespace scat {

namespace {

// below this squared angle the closed-form Rodrigues terms lose digits to
// cancellation; the truncated series is exact to ~1e-24 there
constexpr double kSeriesCut = 1e-8;

constexpr double kMinDen = 1e-6;   // transformed-depth floor, in units of depth
constexpr double kMaxDen = 1e18;

struct RotCoef {
  double a, b;    // R = I + a K + b K^2
  double ap, bp;  // derivatives w.r.t. s = theta^2
};

RotCoef rot_coef(double s) {
  RotCoef c{};
  if (s < kSeriesCut) {
    c.a = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
    c.b = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
    c.ap = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0;
    c.bp = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0;
  } else {
    const double th = std::sqrt(s);
    const double sn = std::sin(th), cs = std::cos(th);
    c.a = sn / th;
    c.b = (1.0 - cs) / s;
    c.ap = (th * cs - sn) / (2.0 * th * th * th);
    c.bp = (th * sn - 2.0 * (1.0 - cs)) / (2.0 * s * s);
  }
  return c;
}

void skew(const double w[3], double k[9]) {
  k[0] = 0;     k[1] = -w[2]; k[2] = w[1];
  k[3] = w[2];  k[4] = 0;     k[5] = -w[0];
  k[6] = -w[1]; k[7] = w[0];  k[8] = 0;
}

}  // namespace

CameraModel default_camera(int width, int height) {
  CameraModel cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = static_cast<double>(height);
  cam.cx = (width - 1) / 2.0;
  cam.cy = (height - 1) / 2.0;
  return cam;
}

void validate_camera(const CameraModel& cam) {
  if (cam.width <= 1 || cam.height <= 1) throw TensorError("camera: image size must exceed 1x1");
  if (!(cam.fx > 0) || !(cam.fy > 0)) throw TensorError("camera: focal lengths must be positive");
  if (!(cam.cx >= 0 && cam.cx < cam.width) || !(cam.cy >= 0 && cam.cy < cam.height))
    throw TensorError("camera: principal point outside the image");
}

PoseSE3 identity_pose(int n) {
  return {Tensor::zeros({n, 3}), Tensor::zeros({n, 3})};
}

std::array<double, 9> rotation_values(double wx, double wy, double wz) {
  const double w[3] = {wx, wy, wz};
  const double s = wx * wx + wy * wy + wz * wz;
  const RotCoef c = rot_coef(s);
  double k[9];
  skew(w, k);
  std::array<double, 9> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double k2 = w[i] * w[j] - (i == j ? s : 0.0);
      r[static_cast<size_t>(i * 3 + j)] = (i == j ? 1.0 : 0.0) + c.a * k[i * 3 + j] + c.b * k2;
    }
  return r;
}

PoseSE3 inverse_pose_values(const PoseSE3& pose) {
  if (pose.axis_angle.rank() != 2 || pose.axis_angle.shape()[1] != 3 ||
      pose.translation.shape() != pose.axis_angle.shape())
    throw TensorError("inverse_pose_values: expected axis_angle and translation [N,3]");
  const int n = pose.axis_angle.shape()[0];
  const auto& aa = pose.axis_angle.data();
  const auto& tr = pose.translation.data();
  std::vector<double> aai(static_cast<size_t>(n) * 3), ti(static_cast<size_t>(n) * 3);
  for (int b = 0; b < n; ++b) {
    const auto r = rotation_values(aa[b * 3], aa[b * 3 + 1], aa[b * 3 + 2]);
    for (int i = 0; i < 3; ++i) {
      aai[static_cast<size_t>(b * 3 + i)] = -aa[b * 3 + i];
      double acc = 0;  // -R^T t
      for (int j = 0; j < 3; ++j) acc -= r[static_cast<size_t>(j * 3 + i)] * tr[b * 3 + j];
      ti[static_cast<size_t>(b * 3 + i)] = acc;
    }
  }
  return {Tensor({n, 3}, std::move(aai)), Tensor({n, 3}, std::move(ti))};
}

Tensor rodrigues(const Tensor& axis_angle) {
  if (axis_angle.rank() != 2 || axis_angle.shape()[1] != 3)
    throw TensorError("rodrigues: expected [N,3], got " + shape_str(axis_angle.shape()));
  const int n = axis_angle.shape()[0];
  const auto& v = axis_angle.data();
  std::vector<double> out(static_cast<size_t>(n) * 9);
  for (int b = 0; b < n; ++b) {
    const auto r = rotation_values(v[b * 3], v[b * 3 + 1], v[b * 3 + 2]);
    for (int i = 0; i < 9; ++i) out[static_cast<size_t>(b * 9 + i)] = r[static_cast<size_t>(i)];
  }
  Tensor aac = axis_angle;
  auto backward = [aac, n](Tape& tp, const Tensor& gout) {
    if (aac.node() < 0) return;
    const auto& w = aac.data();
    const auto& g = gout.data();
    std::vector<double> gaa(static_cast<size_t>(n) * 3, 0.0);
    for (int b = 0; b < n; ++b) {
      const double wv[3] = {w[b * 3], w[b * 3 + 1], w[b * 3 + 2]};
      const double s = wv[0] * wv[0] + wv[1] * wv[1] + wv[2] * wv[2];
      const RotCoef c = rot_coef(s);
      double k[9], k2[9];
      skew(wv, k);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) k2[i * 3 + j] = wv[i] * wv[j] - (i == j ? s : 0.0);
      for (int i = 0; i < 3; ++i) {
        double e[3] = {0, 0, 0};
        e[i] = 1.0;
        double ei[9];
        skew(e, ei);
        double acc = 0;
        for (int p = 0; p < 3; ++p)
          for (int q = 0; q < 3; ++q) {
            double anti = 0;  // (Ei K + K Ei)[p][q]
            for (int m = 0; m < 3; ++m)
              anti += ei[p * 3 + m] * k[m * 3 + q] + k[p * 3 + m] * ei[m * 3 + q];
            const double dr = 2.0 * wv[i] * c.ap * k[p * 3 + q] + c.a * ei[p * 3 + q] +
                              2.0 * wv[i] * c.bp * k2[p * 3 + q] + c.b * anti;
            acc += g[b * 9 + p * 3 + q] * dr;
          }
        gaa[static_cast<size_t>(b * 3 + i)] = acc;
      }
    }
    tp.accumulate(aac.node(), Tensor(aac.shape(), std::move(gaa)));
  };
  return custom_op({n, 3, 3}, std::move(out), {&axis_angle}, std::move(backward));
}

Tensor pose_matrix(const PoseSE3& pose) {
  const Tensor r = rodrigues(pose.axis_angle);
  const int n = r.shape()[0];
  if (pose.translation.rank() != 2 || pose.translation.shape()[0] != n ||
      pose.translation.shape()[1] != 3)
    throw TensorError("pose_matrix: translation must be [N,3]");
  const Tensor rt = concat({r, reshape(pose.translation, {n, 3, 1})}, 2);
  std::vector<double> bot(static_cast<size_t>(n) * 4, 0.0);
  for (int b = 0; b < n; ++b) bot[static_cast<size_t>(b * 4 + 3)] = 1.0;
  return concat({rt, Tensor({n, 1, 4}, std::move(bot))}, 1);
}

Tensor disp_to_depth(const Tensor& disp, double min_depth, double max_depth) {
  if (!(min_depth > 0) || !(max_depth > min_depth))
    throw TensorError("disp_to_depth: need 0 < min_depth < max_depth");
  const double c1 = 1.0 / max_depth;
  const double c2 = 1.0 / min_depth - 1.0 / max_depth;
  const auto& v = disp.data();
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    // endpoint branches pin the bounds exactly; elsewhere 1/(c1 + c2 d)
    if (v[i] == 0.0)
      out[i] = max_depth;
    else if (v[i] == 1.0)
      out[i] = min_depth;
    else
      out[i] = 1.0 / (c1 + c2 * v[i]);
  }
  Tensor dc = disp;
  auto backward = [dc, c1, c2](Tape& tp, const Tensor& gout) {
    if (dc.node() < 0) return;
    const auto& d = dc.data();
    const auto& g = gout.data();
    std::vector<double> gd(d.size());
    for (size_t i = 0; i < d.size(); ++i) {
      const double den = c1 + c2 * d[i];
      gd[i] = g[i] * (-c2 / (den * den));
    }
    tp.accumulate(dc.node(), Tensor(dc.shape(), std::move(gd)));
  };
  return custom_op(disp.shape(), std::move(out), {&disp}, std::move(backward));
}

Tensor identity_grid(const CameraModel& cam, int n) {
  validate_camera(cam);
  const int h = cam.height, w = cam.width;
  std::vector<double> g(static_cast<size_t>(n) * h * w * 2);
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t at = ((static_cast<size_t>(b) * h + y) * w + x) * 2;
        // must match project's normalization arithmetic bit for bit
        g[at] = (2.0 * x - (w - 1.0)) * (1.0 / (w - 1.0));
        g[at + 1] = (2.0 * y - (h - 1.0)) * (1.0 / (h - 1.0));
      }
  return Tensor({n, h, w, 2}, std::move(g));
}

Projection project(const Tensor& depth, const PoseSE3& pose, const CameraModel& cam) {
  validate_camera(cam);
  if (depth.rank() != 4 || depth.shape()[1] != 1)
    throw TensorError("project: depth must be [N,1,H,W], got " + shape_str(depth.shape()));
  const int n = depth.shape()[0], h = depth.shape()[2], w = depth.shape()[3];
  if (h != cam.height || w != cam.width)
    throw TensorError("project: depth size does not match the camera");
  if (pose.axis_angle.rank() != 2 || pose.axis_angle.shape()[0] != n ||
      pose.axis_angle.shape()[1] != 3 || pose.translation.shape() != pose.axis_angle.shape())
    throw TensorError("project: pose fields must be [N,3] matching the batch");

  const Tensor rot = rodrigues(pose.axis_angle);
  auto rentry = [&](int i, int j) {
    return reshape(slice(rot, {0, i, j}, {n, i + 1, j + 1}), {n, 1, 1, 1});
  };
  auto tentry = [&](int i) {
    return reshape(slice(pose.translation, {0, i}, {n, i + 1}), {n, 1, 1, 1});
  };

  // camera rays (x, y, 1) per pixel
  std::vector<double> xr(static_cast<size_t>(h) * w), yr(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      xr[static_cast<size_t>(y) * w + x] = (x - cam.cx) / cam.fx;
      yr[static_cast<size_t>(y) * w + x] = (y - cam.cy) / cam.fy;
    }
  const Tensor xray({1, 1, h, w}, std::move(xr));
  const Tensor yray({1, 1, h, w}, std::move(yr));

  // rotated rays q = R (x, y, 1); the translation enters as t/D so the
  // identity pose reduces every pixel to exactly q = (x, y, 1)
  const Tensor qx = add(add(mul(rentry(0, 0), xray), mul(rentry(0, 1), yray)), rentry(0, 2));
  const Tensor qy = add(add(mul(rentry(1, 0), xray), mul(rentry(1, 1), yray)), rentry(1, 2));
  const Tensor qz = add(add(mul(rentry(2, 0), xray), mul(rentry(2, 1), yray)), rentry(2, 2));

  const Tensor den = add(qz, div(tentry(2), depth));
  const Tensor den_safe = clamp(den, kMinDen, kMaxDen);
  const Tensor px = div(add(qx, div(tentry(0), depth)), den_safe);
  const Tensor py = div(add(qy, div(tentry(1), depth)), den_safe);
  const Tensor up = scalar_add(scalar_mul(px, cam.fx), cam.cx);
  const Tensor vp = scalar_add(scalar_mul(py, cam.fy), cam.cy);
  const Tensor gx = scalar_mul(scalar_add(scalar_mul(up, 2.0), -(w - 1.0)), 1.0 / (w - 1.0));
  const Tensor gy = scalar_mul(scalar_add(scalar_mul(vp, 2.0), -(h - 1.0)), 1.0 / (h - 1.0));

  const auto& dv = den.data();
  const auto& gxv = gx.data();
  const auto& gyv = gy.data();
  std::vector<double> m(static_cast<size_t>(n) * h * w);
  for (size_t i = 0; i < m.size(); ++i)
    m[i] = (dv[i] > kMinDen && std::fabs(gxv[i]) <= 1.0 && std::fabs(gyv[i]) <= 1.0) ? 1.0 : 0.0;

  Projection out;
  out.grid = concat({reshape(gx, {n, h, w, 1}), reshape(gy, {n, h, w, 1})}, 3);
  out.valid = Tensor({n, 1, h, w}, std::move(m));
  return out;
}

Warped inverse_warp(const Tensor& src, const Tensor& depth, const PoseSE3& pose,
                    const CameraModel& cam) {
  if (src.rank() != 4 || src.shape()[2] != cam.height || src.shape()[3] != cam.width)
    throw TensorError("inverse_warp: source image size does not match the camera");
  Projection pr = project(depth, pose, cam);
  return {grid_sample(src, pr.grid), std::move(pr.valid)};
}

}  // namespace scat
