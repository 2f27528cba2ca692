#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "core/geometry.hpp"
#include "core/gradcheck.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"

using namespace scat;

namespace {

// independent rotation oracle via unit quaternions
std::array<double, 9> quat_rotation(double wx, double wy, double wz) {
  const double th = std::sqrt(wx * wx + wy * wy + wz * wz);
  double qw = std::cos(th / 2), qx = 0, qy = 0, qz = 0;
  if (th > 0) {
    const double s = std::sin(th / 2) / th;
    qx = wx * s;
    qy = wy * s;
    qz = wz * s;
  }
  return {1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw),
          2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw),
          2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)};
}

// independent per-pixel pinhole oracle: unproject, move, reproject, normalize
std::vector<double> pinhole_grid(const CameraModel& cam, const std::vector<double>& depth,
                                 const std::array<double, 3>& aa, const std::array<double, 3>& t) {
  const auto r = quat_rotation(aa[0], aa[1], aa[2]);
  std::vector<double> grid(depth.size() * 2);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      const size_t at = static_cast<size_t>(v) * cam.width + u;
      const double d = depth[at];
      const double x = (u - cam.cx) / cam.fx * d;
      const double y = (v - cam.cy) / cam.fy * d;
      const double xs = r[0] * x + r[1] * y + r[2] * d + t[0];
      const double ys = r[3] * x + r[4] * y + r[5] * d + t[1];
      const double zs = r[6] * x + r[7] * y + r[8] * d + t[2];
      const double up = cam.fx * xs / zs + cam.cx;
      const double vp = cam.fy * ys / zs + cam.cy;
      grid[at * 2] = 2 * (up / (cam.width - 1.0)) - 1;
      grid[at * 2 + 1] = 2 * (vp / (cam.height - 1.0)) - 1;
    }
  return grid;
}

Tensor smooth_image(int n, int c, int h, int w, double freq = 1.0) {
  std::vector<double> v(static_cast<size_t>(n) * c * h * w);
  size_t i = 0;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x, ++i)
          v[i] = 0.5 + 0.25 * std::sin(freq * (2 * M_PI * x / w) + ch) *
                           std::cos(freq * (2 * M_PI * y / h) + 0.3 * b);
  return Tensor({n, c, h, w}, std::move(v));
}

}  // namespace

TEST_CASE("rodrigues matches the quaternion oracle") {
  Rng rng(31);
  const int n = 8;
  std::vector<double> aa(n * 3);
  for (auto& x : aa) x = 2.8 * (rng.uniform() - 0.5);
  Tensor r = rodrigues(Tensor({n, 3}, std::vector<double>(aa)));
  for (int b = 0; b < n; ++b) {
    const auto q = quat_rotation(aa[b * 3], aa[b * 3 + 1], aa[b * 3 + 2]);
    for (int i = 0; i < 9; ++i)
      CHECK(r.data()[b * 9 + i] == doctest::Approx(q[static_cast<size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("quarter turn about z maps the x-axis to the y-axis") {
  const auto r = rotation_values(0, 0, M_PI / 2);
  // columns of R are the images of the basis vectors
  CHECK(std::fabs(r[0]) < 1e-7);       // x -> (0, 1, 0)
  CHECK(std::fabs(r[3] - 1) < 1e-7);
  CHECK(std::fabs(r[6]) < 1e-7);
  CHECK(std::fabs(r[1] + 1) < 1e-7);   // y -> (-1, 0, 0)
  CHECK(std::fabs(r[4]) < 1e-7);
  CHECK(std::fabs(r[8] - 1) < 1e-7);
}

TEST_CASE("zero axis-angle gives the exact identity") {
  Tensor r = rodrigues(Tensor::zeros({2, 3}));
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(r.data()[b * 9 + i * 3 + j] == (i == j ? 1.0 : 0.0));
}

TEST_CASE("rotations stay orthonormal up to norm pi") {
  Rng rng(87);
  for (int trial = 0; trial < 50; ++trial) {
    double w[3];
    double s = 0;
    for (auto& x : w) {
      x = rng.uniform() - 0.5;
      s += x * x;
    }
    const double scale = (M_PI * trial / 50.0) / std::sqrt(s);
    const auto r = rotation_values(w[0] * scale, w[1] * scale, w[2] * scale);
    // R^T R == I
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += r[static_cast<size_t>(k * 3 + i)] * r[static_cast<size_t>(k * 3 + j)];
        CHECK(std::fabs(acc - (i == j ? 1 : 0)) < 1e-6);
      }
    const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                       r[2] * (r[3] * r[7] - r[4] * r[6]);
    CHECK(std::fabs(det - 1) < 1e-6);
  }
}

TEST_CASE("rodrigues gradients match finite differences") {
  Rng rng(412);
  std::vector<double> w(9 * 4);
  for (auto& x : w) x = rng.uniform() - 0.5;
  const Tensor weights({4, 3, 3}, std::move(w));
  GraphFn f = [&](Tape&, const std::vector<Tensor>& xs) {
    return sum(mul(rodrigues(xs[0]), weights));
  };
  // moderate angles, the series branch, and near pi
  const Tensor aa({4, 3}, {0.3, -0.2, 0.9, 1e-5, -2e-5, 1.5e-5, 2.0, 1.5, 1.2, -0.4, 0.0, 0.1});
  const FdReport rep = finite_difference_check(f, {aa});
  CHECK(rep.checked == 12);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("pose matrix embeds rotation, translation, and the affine row") {
  const Tensor aa({1, 3}, {0.2, -0.1, 0.4});
  const Tensor tr({1, 3}, {1.5, -2.0, 0.25});
  Tensor m = pose_matrix({aa, tr});
  REQUIRE(m.shape() == std::vector<int>{1, 4, 4});
  const auto r = rotation_values(0.2, -0.1, 0.4);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j)
      CHECK(m.data()[i * 4 + j] == doctest::Approx(r[static_cast<size_t>(i * 3 + j)]).epsilon(1e-12));
    CHECK(m.data()[i * 4 + 3] == tr.data()[i]);
    CHECK(m.data()[12 + i] == 0.0);
  }
  CHECK(m.data()[15] == 1.0);

  GraphFn f = [](Tape&, const std::vector<Tensor>& xs) {
    return sum(mul(pose_matrix({xs[0], xs[1]}), pose_matrix({xs[0], xs[1]})));
  };
  const FdReport rep = finite_difference_check(f, {aa, tr});
  CHECK(rep.checked == 6);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("pose inverse composes to the identity") {
  const PoseSE3 pose{Tensor({2, 3}, {0.3, -0.5, 0.2, 0.0, 0.0, 0.0}),
                     Tensor({2, 3}, {1.0, 2.0, -0.5, 0.1, 0.0, 0.0})};
  const PoseSE3 inv = inverse_pose_values(pose);
  for (int b = 0; b < 2; ++b) {
    const auto r = rotation_values(pose.axis_angle.data()[b * 3], pose.axis_angle.data()[b * 3 + 1],
                                   pose.axis_angle.data()[b * 3 + 2]);
    const auto ri = rotation_values(inv.axis_angle.data()[b * 3], inv.axis_angle.data()[b * 3 + 1],
                                    inv.axis_angle.data()[b * 3 + 2]);
    const double p[3] = {0.7, -1.3, 4.0};
    double q[3], back[3];
    for (int i = 0; i < 3; ++i) {
      q[i] = pose.translation.data()[b * 3 + i];
      for (int j = 0; j < 3; ++j) q[i] += r[static_cast<size_t>(i * 3 + j)] * p[j];
    }
    for (int i = 0; i < 3; ++i) {
      back[i] = inv.translation.data()[b * 3 + i];
      for (int j = 0; j < 3; ++j) back[i] += ri[static_cast<size_t>(i * 3 + j)] * q[j];
      CHECK(back[i] == doctest::Approx(p[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("disp_to_depth endpoints are exact and the midpoint follows the formula") {
  Tensor d = disp_to_depth(Tensor({5}, {0.0, 1.0, 0.5, 0.25, 0.75}), 0.1, 100.0);
  CHECK(d.data()[0] == 100.0);
  CHECK(d.data()[1] == 0.1);
  CHECK(d.data()[2] == doctest::Approx(1.0 / (0.01 + 0.5 * 9.99)).epsilon(1e-14));
  CHECK(d.data()[2] == doctest::Approx(0.19980019980019981).epsilon(1e-12));
  // strictly decreasing in disparity
  Tensor ramp = Tensor::zeros({21});
  {
    std::vector<double> v(21);
    for (int i = 0; i < 21; ++i) v[static_cast<size_t>(i)] = i / 20.0;
    ramp = Tensor({21}, std::move(v));
  }
  Tensor dr = disp_to_depth(ramp);
  for (int i = 1; i < 21; ++i) CHECK(dr.data()[i] < dr.data()[i - 1]);

  CHECK_THROWS_AS(disp_to_depth(ramp, 0.0, 10.0), TensorError);
  CHECK_THROWS_AS(disp_to_depth(ramp, 5.0, 5.0), TensorError);

  GraphFn f = [](Tape&, const std::vector<Tensor>& xs) { return sum(disp_to_depth(xs[0])); };
  const Tensor x0({4}, {0.1, 0.4, 0.6, 0.9});
  const FdReport rep = finite_difference_check(f, {x0});
  CHECK(rep.max_rel_err < 1e-6);

  // hand derivative at 0.5: -c2/(c1 + c2/2)^2
  Tape tape(Precision::f64);
  Tensor x = tape.leaf(Tensor({1}, {0.5}));
  tape.backward(disp_to_depth(x));
  CHECK(tape.grad(x).data()[0] == doctest::Approx(-9.99 / (5.005 * 5.005)).epsilon(1e-12));
}

TEST_CASE("identity pose projects to the identity grid bit for bit") {
  for (const CameraModel cam : {default_camera(), default_camera(10, 8)}) {
    Rng rng(5);
    std::vector<double> dv(static_cast<size_t>(cam.height) * cam.width);
    for (auto& x : dv) x = 2.0 + 40.0 * rng.uniform();
    Tape tape(Precision::f64);
    Tensor depth = tape.leaf(Tensor({1, 1, cam.height, cam.width}, std::move(dv)));
    Projection pr = project(depth, identity_pose(1), cam);
    Tensor ref = identity_grid(cam, 1);
    REQUIRE(pr.grid.shape() == ref.shape());
    for (size_t i = 0; i < ref.data().size(); ++i) CHECK(pr.grid.data()[i] == ref.data()[i]);
    for (double m : pr.valid.data()) CHECK(m == 1.0);
  }
}

TEST_CASE("identity warp returns the image bit for bit on a float32 tape") {
  const CameraModel cam = default_camera(24, 16);
  Tape tape(Precision::f32);
  Rng rng(9);
  std::vector<double> iv(static_cast<size_t>(3) * 16 * 24);
  for (auto& x : iv) x = rng.uniform();
  Tensor img = tape.leaf(Tensor({1, 3, 16, 24}, std::move(iv)));
  Tensor depth = tape.leaf(Tensor::full({1, 1, 16, 24}, 5.0));
  Warped w = inverse_warp(img, depth, identity_pose(1), cam);
  for (size_t i = 0; i < img.data().size(); ++i) CHECK(w.image.data()[i] == img.data()[i]);
  for (double m : w.valid.data()) CHECK(m == 1.0);
}

TEST_CASE("pure z translation contracts the grid by the pinhole ratio") {
  const CameraModel cam = default_camera(12, 8);
  const Tensor depth = Tensor::full({1, 1, 8, 12}, 10.0);
  const PoseSE3 pose{Tensor::zeros({1, 3}), Tensor({1, 3}, {0.0, 0.0, 1.0})};
  Projection pr = project(depth, pose, cam);
  Tensor ref = identity_grid(cam, 1);
  for (size_t i = 0; i < ref.data().size(); ++i)
    CHECK(pr.grid.data()[i] == doctest::Approx(ref.data()[i] * 10.0 / 11.0).epsilon(1e-12));
}

TEST_CASE("projection matches the pinhole oracle for a general pose") {
  const CameraModel cam = default_camera(14, 8);
  Rng rng(77);
  std::vector<double> dv(static_cast<size_t>(8) * 14);
  for (auto& x : dv) x = 4.0 + 20.0 * rng.uniform();
  const std::array<double, 3> aa = {0.03, -0.05, 0.02};
  const std::array<double, 3> tr = {0.2, -0.1, 0.3};
  const std::vector<double> oracle = pinhole_grid(cam, dv, aa, tr);

  const Tensor depth({1, 1, 8, 14}, std::vector<double>(dv));
  const PoseSE3 pose{Tensor({1, 3}, {aa[0], aa[1], aa[2]}), Tensor({1, 3}, {tr[0], tr[1], tr[2]})};
  Projection pr = project(depth, pose, cam);
  for (size_t i = 0; i < oracle.size(); ++i)
    CHECK(pr.grid.data()[i] == doctest::Approx(oracle[i]).epsilon(1e-10));
}

TEST_CASE("projection gradients match finite differences") {
  const CameraModel cam = default_camera(6, 4);
  Rng rng(55);
  std::vector<double> dv(24), wv(48);
  for (auto& x : dv) x = 4.0 + 4.0 * rng.uniform();
  for (auto& x : wv) x = rng.uniform() - 0.5;
  const Tensor weights({1, 4, 6, 2}, std::move(wv));
  GraphFn f = [&](Tape&, const std::vector<Tensor>& xs) {
    Projection pr = project(xs[0], {xs[1], xs[2]}, cam);
    return sum(mul(pr.grid, weights));
  };
  const Tensor depth({1, 1, 4, 6}, std::move(dv));
  const Tensor aa({1, 3}, {0.02, -0.03, 0.01});
  const Tensor tr({1, 3}, {0.05, -0.02, 0.08});
  const FdReport rep = finite_difference_check(f, {depth, aa, tr});
  CHECK(rep.checked == 30);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("warp gradients match finite differences for a mid-cell translation") {
  const CameraModel cam = default_camera(8, 4);
  const Tensor img = smooth_image(1, 2, 4, 8);
  // shifts of ~0.37/0.29 px keep every sample mid-cell, clear of the
  // bilinear kinks at lattice lines where central differences break down
  GraphFn f = [&](Tape&, const std::vector<Tensor>& xs) {
    Warped w = inverse_warp(img, xs[0], {xs[1], xs[2]}, cam);
    return sum(mul(w.image, w.image));
  };
  const Tensor depth = Tensor::full({1, 1, 4, 8}, 5.0);
  const Tensor aa({1, 3}, {0.002, -0.003, 0.004});
  const Tensor tr({1, 3}, {0.37 * 5.0 / cam.fx, 0.29 * 5.0 / cam.fy, 0.05});
  const FdReport rep = finite_difference_check(f, {depth, aa, tr});
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("a calibrated translation shifts the image by exactly one pixel") {
  const CameraModel cam = default_camera(24, 16);
  Rng rng(13);
  std::vector<double> iv(static_cast<size_t>(16) * 24);
  for (auto& x : iv) x = rng.uniform();
  const Tensor img({1, 1, 16, 24}, std::vector<double>(iv));
  const Tensor depth = Tensor::full({1, 1, 16, 24}, 2.0);
  const PoseSE3 pose{Tensor::zeros({1, 3}), Tensor({1, 3}, {2.0 / cam.fx, 0.0, 0.0})};
  Warped w = inverse_warp(img, depth, pose, cam);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 24; ++x) {
      const int sx = std::min(x + 1, 23);  // border clamp on the last column
      CHECK(w.image.data()[y * 24 + x] == iv[static_cast<size_t>(y) * 24 + sx]);
    }
}

TEST_CASE("warping by a pose and its inverse returns the original") {
  const CameraModel cam = default_camera(24, 16);
  const Tensor img = smooth_image(1, 3, 16, 24);
  const Tensor depth = Tensor::full({1, 1, 16, 24}, 10.0);
  const PoseSE3 pose{Tensor::zeros({1, 3}), Tensor({1, 3}, {0.1, 0.05, 0.2})};
  const PoseSE3 inv = inverse_pose_values(pose);
  Warped once = inverse_warp(img, depth, pose, cam);
  // the scene plane sits 0.2 units further along z in the warped frame
  const Tensor depth2 = Tensor::full({1, 1, 16, 24}, 10.2);
  Warped twice = inverse_warp(once.image, depth2, inv, cam);
  double err = 0;
  int count = 0;
  for (int y = 2; y < 14; ++y)
    for (int c = 0; c < 3; ++c)
      for (int x = 2; x < 22; ++x) {
        const size_t at = (static_cast<size_t>(c) * 16 + y) * 24 + x;
        err += std::fabs(twice.image.data()[at] - img.data()[at]);
        ++count;
      }
  CHECK(err / count < 1e-2);
}

TEST_CASE("out-of-view and behind-camera pixels are masked") {
  const CameraModel cam = default_camera(24, 16);
  const Tensor depth = Tensor::full({1, 1, 16, 24}, 10.0);
  // shift right by 8 px: the rightmost 8 columns leave the frame
  Projection pr = project(depth, {Tensor::zeros({1, 3}), Tensor({1, 3}, {5.0, 0.0, 0.0})}, cam);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 24; ++x)
      CHECK(pr.valid.data()[y * 24 + x] == (x < 16 ? 1.0 : 0.0));

  Projection behind =
      project(depth, {Tensor::zeros({1, 3}), Tensor({1, 3}, {0.0, 0.0, -12.0})}, cam);
  for (double m : behind.valid.data()) CHECK(m == 0.0);
}

TEST_CASE("geometry input validation") {
  CHECK_THROWS_AS(validate_camera(CameraModel{-1, 1, 0, 0, 4, 4}), TensorError);
  CHECK_THROWS_AS(validate_camera(CameraModel{1, 1, 9, 0, 4, 4}), TensorError);
  const CameraModel cam = default_camera(6, 4);
  CHECK_THROWS_AS(project(Tensor::zeros({1, 3, 4, 6}), identity_pose(1), cam), TensorError);
  CHECK_THROWS_AS(project(Tensor::full({1, 1, 4, 6}, 5.0), identity_pose(2), cam), TensorError);
  CHECK_THROWS_AS(project(Tensor::full({1, 1, 8, 6}, 5.0), identity_pose(1), cam), TensorError);
  CHECK_THROWS_AS(rodrigues(Tensor::zeros({3})), TensorError);
  CHECK_THROWS_AS(inverse_warp(Tensor::zeros({1, 3, 8, 6}), Tensor::full({1, 1, 4, 6}, 5.0),
                               identity_pose(1), cam),
                  TensorError);
}
