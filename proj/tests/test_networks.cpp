#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "core/gradcheck.hpp"
#include "core/networks.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"

using namespace scat;

namespace {

// naive reference ops, loops only, no shared code with the library ops
Tensor ref_conv(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const int n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const int f = ws[0], kh = ws[2], kw = ws[3];
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<size_t>(n) * f * ho * wo, 0.0);
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < f; ++oc)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = bias.data()[oc];
          for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x.data()[((static_cast<size_t>(b) * c + ic) * h + iy) * wd + ix] *
                       w.data()[((static_cast<size_t>(oc) * c + ic) * kh + ky) * kw + kx];
              }
          out[((static_cast<size_t>(b) * f + oc) * ho + oy) * wo + ox] = acc;
        }
  return Tensor({n, f, ho, wo}, std::move(out));
}

Tensor ref_map(const Tensor& x, double (*fn)(double)) {
  std::vector<double> v(x.data());
  for (auto& e : v) e = fn(e);
  return Tensor(x.shape(), std::move(v));
}

double ref_elu1(double v) { return v > 0 ? v : std::exp(v) - 1; }
double ref_sigmoid1(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor ref_up2(const Tensor& x) {
  const auto& s = x.shape();
  std::vector<double> out(static_cast<size_t>(s[0]) * s[1] * s[2] * 2 * s[3] * 2);
  for (int b = 0; b < s[0]; ++b)
    for (int c = 0; c < s[1]; ++c)
      for (int y = 0; y < s[2] * 2; ++y)
        for (int x2 = 0; x2 < s[3] * 2; ++x2)
          out[((static_cast<size_t>(b) * s[1] + c) * s[2] * 2 + y) * s[3] * 2 + x2] =
              x.data()[((static_cast<size_t>(b) * s[1] + c) * s[2] + y / 2) * s[3] + x2 / 2];
  return Tensor({s[0], s[1], s[2] * 2, s[3] * 2}, std::move(out));
}

Tensor ref_add(const Tensor& a, const Tensor& b) {
  std::vector<double> v(a.data());
  for (size_t i = 0; i < v.size(); ++i) v[i] += b.data()[i];
  return Tensor(a.shape(), std::move(v));
}

// standard UNet written as the recursion f_i = b_{i+1}[a_{i+1} x + f_{i+1}(a_{i+1} x)]
Tensor ref_unet_level(const SdnParams& p, const Tensor& x, int i) {
  const int n = static_cast<int>(p.enc.size());
  if (i == n) return ref_map(ref_conv(x, p.bottleneck.w, p.bottleneck.b, 1, 1), ref_elu1);
  const Tensor e = ref_map(ref_conv(x, p.enc[static_cast<size_t>(i)].w,
                                    p.enc[static_cast<size_t>(i)].b, 2, 1),
                           ref_elu1);
  const Tensor merged = ref_add(e, ref_unet_level(p, e, i + 1));
  const ConvLayer& dec = p.dec[static_cast<size_t>(n - 1 - i)];
  return ref_map(ref_conv(ref_up2(merged), dec.w, dec.b, 1, 1), ref_elu1);
}

Tensor ref_unet(const SdnParams& p, const Tensor& image) {
  return ref_map(ref_conv(ref_unet_level(p, image, 0), p.head.w, p.head.b, 1, 1), ref_sigmoid1);
}

Tensor random_image(Rng& rng, int n, int c, int h, int w) {
  std::vector<double> v(static_cast<size_t>(n) * c * h * w);
  for (auto& x : v) x = rng.uniform();
  return Tensor({n, c, h, w}, std::move(v));
}

double image_norm(const Tensor& t, int n) {
  const auto& s = t.shape();
  const size_t per = static_cast<size_t>(s[1]) * s[2] * s[3];
  double acc = 0;
  for (size_t i = 0; i < per; ++i) {
    const double v = t.data()[static_cast<size_t>(n) * per + i];
    acc += v * v;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("sdn forward shape, range, and input validation") {
  Rng rng(3);
  SdnParams p = make_sdn(rng, 0.7, {6, 8});
  Rng ir(4);
  Tensor img = random_image(ir, 2, 3, 16, 24);
  Tensor disp = sdn_forward(p, img);
  REQUIRE(disp.shape() == std::vector<int>{2, 1, 16, 24});
  for (double v : disp.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK_THROWS_AS(sdn_forward(p, random_image(ir, 1, 3, 18, 24)), TensorError);
  CHECK_THROWS_AS(make_sdn(rng, 0.0, {6, 8}), TensorError);
  CHECK_THROWS_AS(make_sdn(rng, -0.3, {6, 8}), TensorError);
  SdnParams bad = make_sdn(rng, 0.7, {6, 8});
  bad.kappa[1] = 0.0;
  CHECK_THROWS_AS(sdn_forward(bad, img), TensorError);
}

TEST_CASE("unit skip scales reproduce the standard UNet") {
  Rng rng(17);
  SdnParams p = make_sdn(rng, 1.0, {6, 8, 12});
  Rng ir(18);
  Tensor img = random_image(ir, 2, 3, 24, 40);
  Tensor mine = sdn_forward(p, img);
  Tensor ref = ref_unet(p, img);
  double max_diff = 0;
  for (size_t i = 0; i < ref.data().size(); ++i)
    max_diff = std::max(max_diff, std::fabs(mine.data()[i] - ref.data()[i]));
  CHECK(max_diff < 1e-6);
}

TEST_CASE("output sensitivity to unit perturbations grows with the skip scale") {
  Rng rng(23);
  SdnParams p = make_sdn(rng, 1.0, {8, 16, 32});
  Rng ir(24);
  Tensor img = random_image(ir, 1, 3, 24, 40);
  p.kappa.assign(3, 0.1);
  const double low = sdn_sensitivity(p, img, 20, 900);
  p.kappa.assign(3, 1.0);
  const double high = sdn_sensitivity(p, img, 20, 900);
  CHECK(low <= high);
}

TEST_CASE("posenet with a zero head emits the exact identity pose") {
  Rng rng(31);
  PoseNetParams p = make_posenet(rng, {8, 16});
  p.head.w = Tensor::zeros(p.head.w.shape());
  p.head.b = Tensor::zeros(p.head.b.shape());
  Rng ir(32);
  Tensor a = random_image(ir, 2, 3, 16, 24);
  Tensor b = random_image(ir, 2, 3, 16, 24);
  PoseSE3 pose = posenet_forward(p, a, b);
  REQUIRE(pose.axis_angle.shape() == std::vector<int>{2, 3});
  REQUIRE(pose.translation.shape() == std::vector<int>{2, 3});
  for (double v : pose.axis_angle.data()) CHECK(v == 0.0);
  for (double v : pose.translation.data()) CHECK(v == 0.0);
}

TEST_CASE("posenet outputs are bounded and keep the rotation tiny") {
  Rng rng(41);
  PoseNetParams p = make_posenet(rng, {8, 16});
  Rng ir(42);
  Tensor a = random_image(ir, 3, 3, 16, 24);
  Tensor b = random_image(ir, 3, 3, 16, 24);
  PoseSE3 pose = posenet_forward(p, a, b);
  for (int n = 0; n < 3; ++n) {
    double norm = 0;
    for (int i = 0; i < 3; ++i) {
      const double v = pose.axis_angle.data()[n * 3 + i];
      CHECK(std::fabs(v) < 0.01);
      norm += v * v;
    }
    CHECK(std::sqrt(norm) < M_PI);
    for (int i = 0; i < 3; ++i) CHECK(std::fabs(pose.translation.data()[n * 3 + i]) < 0.01);
  }
}

TEST_CASE("pose loss gradients reach the first trunk layer") {
  Rng rng(51);
  PoseNetParams p = make_posenet(rng, {8, 16});
  Rng ir(52);
  Tape tape(Precision::f64);
  Tensor a = tape.leaf(random_image(ir, 1, 3, 16, 24));
  Tensor b = random_image(ir, 1, 3, 16, 24);
  Tensor w0 = tape.leaf(p.trunk[0].w);
  p.trunk[0].w = w0;
  PoseSE3 pose = posenet_forward(p, a, b);
  tape.backward(sum(mul(pose.translation, pose.translation)));
  double norm = 0;
  Tensor g = tape.grad(w0);
  for (double v : g.data()) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("generator output lands on the epsilon sphere deterministically") {
  Rng rng(61);
  GeneratorParams p = make_generator(rng, 3.5, {6, 8, 12}, 2);
  Rng ir(62);
  Tensor img = random_image(ir, 2, 3, 16, 24);
  bool degenerate = true;
  Tensor d1 = generator_forward(p, img, 777, &degenerate);
  CHECK_FALSE(degenerate);
  REQUIRE(d1.shape() == img.shape());
  for (int n = 0; n < 2; ++n) CHECK(std::fabs(image_norm(d1, n) - 3.5) < 1e-5);

  Tensor d2 = generator_forward(p, img, 777);
  for (size_t i = 0; i < d1.data().size(); ++i) CHECK(d1.data()[i] == d2.data()[i]);

  Tensor d3 = generator_forward(p, img, 778);
  double diff = 0;
  for (size_t i = 0; i < d1.data().size(); ++i) diff += std::fabs(d1.data()[i] - d3.data()[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("zero budget and zero raw output are handled") {
  Rng rng(71);
  GeneratorParams p = make_generator(rng, 0.0, {6, 8}, 2);
  Rng ir(72);
  Tensor img = random_image(ir, 1, 3, 16, 24);
  Tensor d = generator_forward(p, img, 5);
  for (double v : d.data()) CHECK(v == 0.0);

  GeneratorParams dead = make_generator(rng, 2.0, {6, 8}, 2);
  for (auto& l : dead.dec) {
    l.w = Tensor::zeros(l.w.shape());
    l.b = Tensor::zeros(l.b.shape());
  }
  bool degenerate = false;
  Tensor fd = generator_forward(dead, img, 5, &degenerate);
  CHECK(degenerate);
  CHECK(std::fabs(image_norm(fd, 0) - 2.0) < 1e-5);
}

TEST_CASE("snapshots are immutable deep copies with version tags") {
  Rng rng(81);
  GeneratorParams p = make_generator(rng, 1.5, {6, 8}, 2);
  Rng ir(82);
  Tensor img = random_image(ir, 1, 3, 16, 24);
  Tensor before = generator_forward(p, img, 99);
  GeneratorParams snap = snapshot(p, 5);
  CHECK(snap.version_tag == 5);
  CHECK(snap.epsilon == p.epsilon);

  p.enc[0].w.mutable_data()[0] += 0.5;
  Tensor after_mutation = generator_forward(snap, img, 99);
  for (size_t i = 0; i < before.data().size(); ++i)
    CHECK(after_mutation.data()[i] == before.data()[i]);
  Tensor changed = generator_forward(p, img, 99);
  double diff = 0;
  for (size_t i = 0; i < before.data().size(); ++i)
    diff += std::fabs(changed.data()[i] - before.data()[i]);
  CHECK(diff > 0.0);

  for (int64_t e = 1; e <= 5; ++e) CHECK(snapshot(p, e).version_tag == e);
}

TEST_CASE("network gradients match finite differences") {
  FdOptions opts;
  opts.step = 1e-6;
  Rng rng(91);

  SdnParams sp = make_sdn(rng, 0.7, {4, 6});
  Rng ir(92);
  Tensor img = random_image(ir, 1, 3, 8, 12);
  std::vector<double> wv(96);
  for (auto& v : wv) v = ir.uniform() - 0.5;
  const Tensor weight({1, 1, 8, 12}, std::move(wv));
  GraphFn f = [&](Tape&, const std::vector<Tensor>& xs) {
    SdnParams q = sp;
    q.enc[0].w = xs[1];
    q.head.w = xs[2];
    q.dec[1].b = xs[3];
    return sum(mul(sdn_forward(q, xs[0]), weight));
  };
  FdReport rep = finite_difference_check(f, {img, sp.enc[0].w, sp.head.w, sp.dec[1].b}, opts);
  CHECK(rep.max_rel_err < 1e-4);

  PoseNetParams pp = make_posenet(rng, {4, 6});
  Tensor a = random_image(ir, 1, 3, 8, 12);
  Tensor b = random_image(ir, 1, 3, 8, 12);
  GraphFn g = [&](Tape&, const std::vector<Tensor>& xs) {
    PoseNetParams q = pp;
    q.trunk[0].w = xs[0];
    q.head.w = xs[1];
    PoseSE3 pose = posenet_forward(q, a, b);
    return add(sum(mul(pose.axis_angle, pose.axis_angle)),
               sum(mul(pose.translation, pose.translation)));
  };
  rep = finite_difference_check(g, {pp.trunk[0].w, pp.head.w}, opts);
  CHECK(rep.max_rel_err < 1e-4);

  GeneratorParams gp = make_generator(rng, 2.5, {4, 6}, 2);
  Tensor gi = random_image(ir, 1, 3, 8, 12);
  std::vector<double> gw(static_cast<size_t>(3) * 8 * 12);
  for (auto& v : gw) v = ir.uniform() - 0.5;
  const Tensor gweight({1, 3, 8, 12}, std::move(gw));
  GraphFn h = [&](Tape&, const std::vector<Tensor>& xs) {
    GeneratorParams q = gp;
    q.enc[0].w = xs[1];
    q.dec[1].w = xs[2];
    return sum(mul(generator_forward(q, xs[0], 31), gweight));
  };
  rep = finite_difference_check(h, {gi, gp.enc[0].w, gp.dec[1].w}, opts);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("named parameter enumeration is complete and unique") {
  Rng rng(99);
  SdnParams sp = make_sdn(rng, 0.7, {4, 6});
  PoseNetParams pp = make_posenet(rng, {4, 6});
  GeneratorParams gp = make_generator(rng, 1.0, {4, 6}, 2);
  auto sn = named_params(sp);
  auto pn = named_params(pp);
  auto gn = named_params(gp);
  CHECK(sn.size() == 12);  // 2 enc + bneck + 2 dec + head, w and b each
  CHECK(pn.size() == 6);
  CHECK(gn.size() == 10);
  std::set<std::string> names;
  for (const auto& lists : {sn, pn, gn})
    for (const auto& np : lists) {
      CHECK(names.insert(np.name).second);
      CHECK(np.tensor->defined());
    }
}
