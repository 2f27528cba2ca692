#include "core/networks.hpp"

#include <cmath>
#include <utility>

namespace scat {

namespace {

ConvLayer he_conv(Rng& rng, int out_ch, int in_ch, int k) {
  std::vector<double> w(static_cast<size_t>(out_ch) * in_ch * k * k);
  const double stddev = std::sqrt(2.0 / (in_ch * k * k));
  for (auto& x : w) x = stddev * rng.normal();
  return {Tensor({out_ch, in_ch, k, k}, std::move(w)), Tensor::zeros({1, out_ch, 1, 1})};
}

Tensor apply(const ConvLayer& l, const Tensor& x, int stride, int pad) {
  return add(conv2d(x, l.w, stride, pad), l.b);
}

void check_divisible(const Tensor& image, int levels, const char* op) {
  const int h = image.shape()[2], w = image.shape()[3];
  const int m = 1 << levels;
  if (h % m != 0 || w % m != 0)
    throw TensorError(std::string(op) + ": image " + shape_str(image.shape()) +
                      " not divisible by 2^" + std::to_string(levels));
}

// per-image L2 norm as an [N,1,1,1] graph tensor
Tensor per_image_norm(const Tensor& x) {
  const auto& s = x.shape();
  std::vector<Tensor> parts;
  parts.reserve(static_cast<size_t>(s[0]));
  for (int n = 0; n < s[0]; ++n) {
    const Tensor xn = slice(x, {n, 0, 0, 0}, {n + 1, s[1], s[2], s[3]});
    parts.push_back(reshape(vsqrt(sum(mul(xn, xn))), {1, 1, 1, 1}));
  }
  return s[0] > 1 ? concat(parts, 0) : parts[0];
}

void collect(std::vector<NamedParam>& out, const std::string& base, ConvLayer& l) {
  out.push_back({base + ".w", &l.w});
  out.push_back({base + ".b", &l.b});
}

}  // namespace

SdnParams make_sdn(Rng& rng, double kappa, const std::vector<int>& widths, int in_channels) {
  if (widths.empty()) throw TensorError("make_sdn: need at least one encoder width");
  if (!(kappa > 0)) throw TensorError("make_sdn: kappa must be positive");
  const int n = static_cast<int>(widths.size());
  SdnParams p;
  int prev = in_channels;
  for (int i = 0; i < n; ++i) {
    p.enc.push_back(he_conv(rng, widths[static_cast<size_t>(i)], prev, 3));
    prev = widths[static_cast<size_t>(i)];
  }
  p.bottleneck = he_conv(rng, prev, prev, 3);
  for (int j = 0; j < n; ++j) {
    const int in = widths[static_cast<size_t>(n - 1 - j)];
    const int out = j == n - 1 ? widths[0] : widths[static_cast<size_t>(n - 2 - j)];
    p.dec.push_back(he_conv(rng, out, in, 3));
  }
  p.head = he_conv(rng, 1, widths[0], 3);
  p.kappa.assign(static_cast<size_t>(n), kappa);
  return p;
}

Tensor sdn_forward(const SdnParams& p, const Tensor& image) {
  const int n = static_cast<int>(p.enc.size());
  if (image.rank() != 4) throw TensorError("sdn_forward: expected [N,C,H,W]");
  if (static_cast<int>(p.kappa.size()) != n || p.dec.size() != p.enc.size())
    throw TensorError("sdn_forward: inconsistent parameter block counts");
  for (double k : p.kappa)
    if (!(k > 0)) throw TensorError("sdn_forward: kappa must be positive");
  check_divisible(image, n, "sdn_forward");

  std::vector<Tensor> skips;
  skips.reserve(static_cast<size_t>(n));
  Tensor x = image;
  for (int i = 0; i < n; ++i) {
    x = elu(apply(p.enc[static_cast<size_t>(i)], x, 2, 1));
    skips.push_back(x);
  }
  Tensor y = elu(apply(p.bottleneck, x, 1, 1));
  for (int i = n - 1; i >= 0; --i) {
    y = add(scalar_mul(skips[static_cast<size_t>(i)], p.kappa[static_cast<size_t>(i)]), y);
    y = elu(apply(p.dec[static_cast<size_t>(n - 1 - i)], upsample_nearest_x2(y), 1, 1));
  }
  return sigmoid(apply(p.head, y, 1, 1));
}

double sdn_sensitivity(const SdnParams& p, const Tensor& image, int trials, uint64_t seed) {
  if (trials <= 0) throw TensorError("sdn_sensitivity: trials must be positive");
  const Tensor base = sdn_forward(p, image);
  Rng rng(seed);
  double acc = 0;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> d(image.data().size());
    double norm = 0;
    for (auto& v : d) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    std::vector<double> perturbed(image.data());
    for (size_t i = 0; i < d.size(); ++i) perturbed[i] += d[i] / norm;
    const Tensor out = sdn_forward(p, Tensor(image.shape(), std::move(perturbed)));
    double dev = 0;
    for (size_t i = 0; i < out.data().size(); ++i) {
      const double e = out.data()[i] - base.data()[i];
      dev += e * e;
    }
    acc += std::sqrt(dev);
  }
  return acc / trials;
}

PoseNetParams make_posenet(Rng& rng, const std::vector<int>& widths) {
  if (widths.empty()) throw TensorError("make_posenet: need at least one trunk width");
  PoseNetParams p;
  int prev = 6;
  for (int w : widths) {
    p.trunk.push_back(he_conv(rng, w, prev, 3));
    prev = w;
  }
  p.head = he_conv(rng, 6, prev, 1);
  return p;
}

PoseSE3 posenet_forward(const PoseNetParams& p, const Tensor& target, const Tensor& source) {
  if (target.rank() != 4 || source.shape() != target.shape())
    throw TensorError("posenet_forward: expected two matching [N,3,H,W] images");
  Tensor x = concat_channels({target, source});
  for (const ConvLayer& l : p.trunk) x = elu(apply(l, x, 2, 1));
  x = apply(p.head, x, 1, 0);
  const auto& s = x.shape();
  // global average per channel via a full-size mean kernel
  const Tensor pool = Tensor::full({1, 1, s[2], s[3]}, 1.0 / (s[2] * s[3]));
  Tensor six = reshape(conv2d(reshape(x, {s[0] * s[1], 1, s[2], s[3]}), pool, 1, 0), {s[0], 6});
  six = scalar_mul(scalar_add(scalar_mul(sigmoid(six), 2.0), -1.0), 0.01);
  return {slice(six, {0, 0}, {s[0], 3}), slice(six, {0, 3}, {s[0], 6})};
}

double default_epsilon() { return 135.0 * std::sqrt((3.0 * 64 * 192) / (3.0 * 192 * 640)); }

GeneratorParams make_generator(Rng& rng, double epsilon, const std::vector<int>& widths,
                               int noise_channels, int in_channels) {
  if (widths.empty()) throw TensorError("make_generator: need at least one encoder width");
  if (!(epsilon >= 0)) throw TensorError("make_generator: epsilon must be nonnegative");
  if (noise_channels <= 0) throw TensorError("make_generator: need noise channels");
  const int n = static_cast<int>(widths.size());
  GeneratorParams p;
  int prev = in_channels;
  for (int w : widths) {
    p.enc.push_back(he_conv(rng, w, prev, 3));
    prev = w;
  }
  p.bottleneck = he_conv(rng, prev, prev + noise_channels, 3);
  for (int j = 0; j < n; ++j) {
    const int in = j == 0 ? widths[static_cast<size_t>(n - 1)] : widths[static_cast<size_t>(n - 1 - j)];
    const int out = j == n - 1 ? in_channels : widths[static_cast<size_t>(n - 2 - j)];
    p.dec.push_back(he_conv(rng, out, in, 3));
  }
  p.epsilon = epsilon;
  return p;
}

Tensor generator_forward(const GeneratorParams& p, const Tensor& image, uint64_t z_seed,
                         bool* degenerate) {
  if (image.rank() != 4) throw TensorError("generator_forward: expected [N,C,H,W]");
  const int levels = static_cast<int>(p.enc.size());
  check_divisible(image, levels, "generator_forward");
  if (degenerate) *degenerate = false;
  const auto& s = image.shape();
  if (p.epsilon == 0.0) return Tensor::zeros(s);

  Tensor x = image;
  for (const ConvLayer& l : p.enc) x = elu(apply(l, x, 2, 1));
  const auto& bs = x.shape();
  const int zc = p.bottleneck.w.shape()[1] - bs[1];
  std::vector<double> zv(static_cast<size_t>(bs[0]) * zc * bs[2] * bs[3]);
  Rng zrng(z_seed);
  for (auto& v : zv) v = zrng.normal();
  x = concat_channels({x, Tensor({bs[0], zc, bs[2], bs[3]}, std::move(zv))});
  x = elu(apply(p.bottleneck, x, 1, 1));
  for (size_t j = 0; j < p.dec.size(); ++j) {
    x = apply(p.dec[j], upsample_nearest_x2(x), 1, 1);
    if (j + 1 < p.dec.size()) x = elu(x);
  }

  // replace an exactly-zero raw map by seeded noise so the sphere projection
  // below stays defined
  Tensor norms = per_image_norm(x);
  bool any_zero = false;
  for (double v : norms.data()) any_zero = any_zero || v == 0.0;
  if (any_zero) {
    if (degenerate) *degenerate = true;
    std::vector<double> fb(static_cast<size_t>(s[0]) * s[1] * s[2] * s[3]);
    Rng frng(Rng::mix(z_seed, 0x5eedfa11));
    for (auto& v : fb) v = frng.normal();
    const Tensor fallback({s[0], s[1], s[2], s[3]}, std::move(fb));
    std::vector<Tensor> parts;
    for (int n = 0; n < s[0]; ++n) {
      const bool dead = norms.data()[n] == 0.0;
      const Tensor src = dead ? fallback : x;
      parts.push_back(slice(src, {n, 0, 0, 0}, {n + 1, s[1], s[2], s[3]}));
    }
    x = s[0] > 1 ? concat(parts, 0) : parts[0];
    norms = per_image_norm(x);
  }
  return div(scalar_mul(x, p.epsilon), norms);
}

GeneratorParams snapshot(const GeneratorParams& p, int64_t version_tag) {
  GeneratorParams out;
  for (const ConvLayer& l : p.enc) out.enc.push_back({l.w.clone(), l.b.clone()});
  out.bottleneck = {p.bottleneck.w.clone(), p.bottleneck.b.clone()};
  for (const ConvLayer& l : p.dec) out.dec.push_back({l.w.clone(), l.b.clone()});
  out.epsilon = p.epsilon;
  out.version_tag = version_tag;
  return out;
}

std::vector<NamedParam> named_params(SdnParams& p) {
  std::vector<NamedParam> out;
  for (size_t i = 0; i < p.enc.size(); ++i) collect(out, "depth.enc" + std::to_string(i), p.enc[i]);
  collect(out, "depth.bneck", p.bottleneck);
  for (size_t i = 0; i < p.dec.size(); ++i) collect(out, "depth.dec" + std::to_string(i), p.dec[i]);
  collect(out, "depth.head", p.head);
  return out;
}

std::vector<NamedParam> named_params(PoseNetParams& p) {
  std::vector<NamedParam> out;
  for (size_t i = 0; i < p.trunk.size(); ++i)
    collect(out, "pose.trunk" + std::to_string(i), p.trunk[i]);
  collect(out, "pose.head", p.head);
  return out;
}

std::vector<NamedParam> named_params(GeneratorParams& p) {
  std::vector<NamedParam> out;
  for (size_t i = 0; i < p.enc.size(); ++i) collect(out, "gen.enc" + std::to_string(i), p.enc[i]);
  collect(out, "gen.bneck", p.bottleneck);
  for (size_t i = 0; i < p.dec.size(); ++i) collect(out, "gen.dec" + std::to_string(i), p.dec[i]);
  return out;
}

}  // namespace scat
