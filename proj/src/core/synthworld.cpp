#include "core/synthworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "core/rng.hpp"

namespace fs = std::filesystem;

namespace scat {

namespace {

// Scenes are fronto-parallel planes textured by band-limited sinusoid mixes.
// Every surface color is a function of the point's frame-t pixel coordinates,
// and all surfaces share one flat base color near depth edges: rect rims fade
// to the base over kRimPad..kRimPad+kRimWidth px inside the footprint, and the
// background flattens to the base within kWinPad px of any footprint. A
// disocclusion band (parallax gap is capped at kGapMax px) then only ever
// samples that shared flat color, so warp error reduces to bilinear
// interpolation error of the textures, which the amplitude*omega^2 budget
// keeps below the 1e-3 consistency target.
constexpr double kGapMin = 0.25, kGapMax = 2.0;
constexpr double kRimPad = 6.0, kRimWidth = 8.0;
constexpr double kWinPad = 5.0, kWinWidth = 14.0;
constexpr double kRectSep = 6.0;

struct FieldComp {
  double amp = 0, kx = 0, ky = 0;
  std::array<double, 3> phase{};
};

using Field = std::array<FieldComp, 3>;

struct RectPlane {
  double depth = 0;
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;  // frame-t pixel footprint
  std::array<double, 3> tint{};
  Field field{};
};

struct World {
  double bg_depth = 0;
  std::array<double, 3> base{};
  Field bg_field{};
  std::vector<RectPlane> rects;  // ascending depth
};

double smooth01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

double field_eval(const Field& f, double u, double v, int ch) {
  double s = 0.0;
  for (const auto& c : f) s += c.amp * std::sin(c.kx * u + c.ky * v + c.phase[ch]);
  return s;
}

Field sample_field(Rng& rng) {
  // (omega band, amplitude band); budget sum(amp*omega^2) ~ 1e-2
  constexpr double bands[3][4] = {{0.08, 0.15, 0.10, 0.18},
                                  {0.20, 0.30, 0.025, 0.045},
                                  {0.45, 0.60, 0.005, 0.009}};
  Field f;
  for (int i = 0; i < 3; ++i) {
    double omega = rng.uniform(bands[i][0], bands[i][1]);
    double theta = rng.uniform(0.0, 3.14159265358979323846);
    f[i].amp = rng.uniform(bands[i][2], bands[i][3]);
    f[i].kx = omega * std::cos(theta);
    f[i].ky = omega * std::sin(theta);
    for (int ch = 0; ch < 3; ++ch) f[i].phase[ch] = rng.uniform(0.0, 6.28318530717958647692);
  }
  return f;
}

double box_dist(const RectPlane& r, double u, double v) {
  double dx = std::max({r.x0 - u, 0.0, u - r.x1});
  double dy = std::max({r.y0 - v, 0.0, v - r.y1});
  return std::hypot(dx, dy);
}

double bg_color(const World& w, double u, double v, int ch) {
  double win = 1.0;
  for (const auto& r : w.rects) win *= smooth01((box_dist(r, u, v) - kWinPad) / kWinWidth);
  return std::clamp(w.base[ch] + win * field_eval(w.bg_field, u, v, ch), 0.0, 1.0);
}

double rect_color(const World& w, const RectPlane& r, double u, double v, int ch) {
  double inner = std::min({u - r.x0, r.x1 - u, v - r.y0, r.y1 - v});
  double m = smooth01((inner - kRimPad) / kRimWidth);
  return std::clamp(w.base[ch] + m * (field_eval(r.field, u, v, ch) + r.tint[ch]), 0.0, 1.0);
}

World sample_world(Rng& rng, const CameraModel& cam) {
  World w;
  w.bg_depth = rng.uniform(35.0, 50.0);
  for (int ch = 0; ch < 3; ++ch) w.base[ch] = rng.uniform(0.42, 0.58);
  w.bg_field = sample_field(rng);

  const double W = cam.width, H = cam.height;
  int want = 2 + static_cast<int>(rng.uniform_int(6));
  for (int k = 0; k < want; ++k) {
    RectPlane r;
    r.depth = rng.uniform(2.0, 30.0);
    for (int ch = 0; ch < 3; ++ch) r.tint[ch] = rng.uniform(-0.08, 0.08);
    r.field = sample_field(rng);

    // greedy placement, separation keeps disocclusion bands on flat color;
    // the second pass shrinks so small frames still get their planes
    bool placed = false;
    for (int pass = 0; pass < 2 && !placed; ++pass) {
      double scale = pass == 0 ? 1.0 : 0.6;
      double sep = pass == 0 ? kRectSep : 2.0;
      double border = pass == 0 ? 2.0 : 1.0;
      for (int t = 0; t < 300 && !placed; ++t) {
        double rw = std::max(1.0, rng.uniform(0.15, 0.30) * W * scale);
        double rh = std::max(1.0, rng.uniform(0.25, 0.47) * H * scale);
        if (W - 2 * border - rw <= 0 || H - 2 * border - rh <= 0) continue;
        r.x0 = rng.uniform(border, W - border - rw);
        r.y0 = rng.uniform(border, H - border - rh);
        r.x1 = r.x0 + rw;
        r.y1 = r.y0 + rh;
        bool ok = true;
        for (const auto& o : w.rects) {
          double dx = std::max({o.x0 - r.x1, 0.0, r.x0 - o.x1});
          double dy = std::max({o.y0 - r.y1, 0.0, r.y0 - o.y1});
          if (std::hypot(dx, dy) < sep) ok = false;
        }
        if (ok) {
          w.rects.push_back(r);
          placed = true;
        }
      }
    }
  }
  std::stable_sort(w.rects.begin(), w.rects.end(),
                   [](const RectPlane& a, const RectPlane& b) { return a.depth < b.depth; });
  return w;
}

struct Motion {
  std::array<double, 3> axis{};
  std::array<double, 3> trans{};
};

// eager pinhole transfer of pixel (x,y) at depth d through (R,t)
std::array<double, 2> transfer(const CameraModel& cam, const std::array<double, 9>& R,
                               const std::array<double, 3>& t, double x, double y, double d) {
  double X = (x - cam.cx) / cam.fx * d;
  double Y = (y - cam.cy) / cam.fy * d;
  double cx = R[0] * X + R[1] * Y + R[2] * d + t[0];
  double cy = R[3] * X + R[4] * Y + R[5] * d + t[1];
  double cz = R[6] * X + R[7] * Y + R[8] * d + t[2];
  return {cam.fx * cx / cz + cam.cx, cam.fy * cy / cz + cam.cy};
}

// max parallax gap (px) between the nearest and the background plane over
// image corners and center; rotation flow is depth-free and cancels here
double parallax_gap(const CameraModel& cam, const Motion& m, double d_min, double d_bg) {
  auto R = rotation_values(m.axis[0], m.axis[1], m.axis[2]);
  const double probes[5][2] = {{0, 0},
                               {cam.width - 1.0, 0},
                               {0, cam.height - 1.0},
                               {cam.width - 1.0, cam.height - 1.0},
                               {(cam.width - 1.0) / 2, (cam.height - 1.0) / 2}};
  double gap = 0.0;
  for (const auto& p : probes) {
    auto a = transfer(cam, R, m.trans, p[0], p[1], d_min);
    auto b = transfer(cam, R, m.trans, p[0], p[1], d_bg);
    gap = std::max(gap, std::hypot(a[0] - b[0], a[1] - b[1]));
  }
  return gap;
}

Motion sample_motion(Rng& rng, const CameraModel& cam, double d_min, double d_bg) {
  const double axy = std::min(3.84 / cam.fx, 0.28);
  const double az = std::min(2.56 / cam.fx, 0.28);
  Motion m;
  for (int t = 0; t < 1000; ++t) {
    for (int i = 0; i < 3; ++i) m.axis[i] = rng.uniform(-0.004, 0.004);
    m.trans = {rng.uniform(-axy, axy), rng.uniform(-axy, axy), rng.uniform(-az, az)};
    double gap = parallax_gap(cam, m, d_min, d_bg);
    if (gap >= kGapMin && gap <= kGapMax) return m;
  }
  // translation scales the gap linearly; normalize the last candidate
  double gap = parallax_gap(cam, m, d_min, d_bg);
  if (gap > 0) {
    for (auto& v : m.trans) v *= 1.0 / gap;
  }
  return m;
}

// ray through source pixel -> nearest plane -> color at its frame-t pixel
Tensor render_frame(const World& w, const CameraModel& cam, const Motion& m, bool identity) {
  const int W = cam.width, H = cam.height;
  auto R = identity ? std::array<double, 9>{1, 0, 0, 0, 1, 0, 0, 0, 1}
                    : rotation_values(m.axis[0], m.axis[1], m.axis[2]);
  // X_t = R^T(X_c - t): precompute q = R^T t
  std::array<double, 3> q{};
  for (int i = 0; i < 3; ++i)
    q[i] = R[0 + i] * m.trans[0] + R[3 + i] * m.trans[1] + R[6 + i] * m.trans[2];
  if (identity) q = {0, 0, 0};

  std::vector<double> img(static_cast<size_t>(3) * H * W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double dx = (x - cam.cx) / cam.fx, dy = (y - cam.cy) / cam.fy;
      double ex = R[0] * dx + R[3] * dy + R[6];
      double ey = R[1] * dx + R[4] * dy + R[7];
      double ez = R[2] * dx + R[5] * dy + R[8];
      const RectPlane* hit = nullptr;
      double hu = 0, hv = 0;
      for (const auto& r : w.rects) {
        double lam = (r.depth + q[2]) / ez;
        double u = cam.fx * (lam * ex - q[0]) / r.depth + cam.cx;
        double v = cam.fy * (lam * ey - q[1]) / r.depth + cam.cy;
        if (u >= r.x0 && u <= r.x1 && v >= r.y0 && v <= r.y1) {
          hit = &r;
          hu = u;
          hv = v;
          break;
        }
      }
      if (!hit) {
        double lam = (w.bg_depth + q[2]) / ez;
        hu = cam.fx * (lam * ex - q[0]) / w.bg_depth + cam.cx;
        hv = cam.fy * (lam * ey - q[1]) / w.bg_depth + cam.cy;
      }
      for (int ch = 0; ch < 3; ++ch)
        img[(static_cast<size_t>(ch) * H + y) * W + x] =
            hit ? rect_color(w, *hit, hu, hv, ch) : bg_color(w, hu, hv, ch);
    }
  }
  return Tensor({1, 3, H, W}, std::move(img));
}

Tensor render_depth(const World& w, const CameraModel& cam) {
  const int W = cam.width, H = cam.height;
  std::vector<double> d(static_cast<size_t>(H) * W, w.bg_depth);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (const auto& r : w.rects)
        if (x >= r.x0 && x <= r.x1 && y >= r.y0 && y <= r.y1) {
          d[static_cast<size_t>(y) * W + x] = r.depth;
          break;
        }
  return Tensor({1, 1, H, W}, std::move(d));
}

PoseSE3 motion_pose(const Motion& m) {
  return {Tensor({1, 3}, {m.axis[0], m.axis[1], m.axis[2]}),
          Tensor({1, 3}, {m.trans[0], m.trans[1], m.trans[2]})};
}

std::string fmt17(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.17g", v);
  return b;
}

void write_kv3(std::ostream& os, const std::string& key, const Tensor& t) {
  const auto& d = t.data();
  os << key << " = " << fmt17(d[0]) << ' ' << fmt17(d[1]) << ' ' << fmt17(d[2]) << "\n";
}

std::map<std::string, std::vector<double>> read_kv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::map<std::string, std::vector<double>> kv;
  std::string line;
  while (std::getline(in, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    std::istringstream vs(line.substr(eq + 1));
    std::vector<double> vals;
    double v;
    while (vs >> v) vals.push_back(v);
    kv[key] = std::move(vals);
  }
  return kv;
}

double kv1(const std::map<std::string, std::vector<double>>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end() || it->second.size() != 1)
    throw std::runtime_error("missing scalar key " + key);
  return it->second[0];
}

Tensor kv3(const std::map<std::string, std::vector<double>>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end() || it->second.size() != 3)
    throw std::runtime_error("missing triple key " + key);
  return Tensor({1, 3}, {it->second[0], it->second[1], it->second[2]});
}

}  // namespace

SceneSample generate_scene(uint64_t seed, const CameraModel& camera) {
  validate_camera(camera);
  Rng rng(seed);
  World w = sample_world(rng, camera);
  double d_min = w.rects.empty() ? 2.0 : w.rects.front().depth;
  Motion to_prev = sample_motion(rng, camera, d_min, w.bg_depth);
  Motion to_next = sample_motion(rng, camera, d_min, w.bg_depth);

  SceneSample s;
  s.camera = camera;
  s.seed = seed;
  s.frame_t = render_frame(w, camera, Motion{}, true);
  s.frame_prev = render_frame(w, camera, to_prev, false);
  s.frame_next = render_frame(w, camera, to_next, false);
  s.gt_depth = render_depth(w, camera);
  s.pose_to_prev = motion_pose(to_prev);
  s.pose_to_next = motion_pose(to_next);
  return s;
}

const CorruptionKind kAllCorruptions[6] = {CorruptionKind::gaussian_noise,
                                           CorruptionKind::shot_noise,
                                           CorruptionKind::blur,
                                           CorruptionKind::brightness,
                                           CorruptionKind::contrast,
                                           CorruptionKind::fog};

std::string corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::shot_noise: return "shot_noise";
    case CorruptionKind::blur: return "blur";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::fog: return "fog";
  }
  throw std::invalid_argument("unknown corruption kind");
}

CorruptionKind corruption_from_string(const std::string& name) {
  for (CorruptionKind k : kAllCorruptions)
    if (corruption_name(k) == name) return k;
  throw std::invalid_argument("unknown corruption kind: " + name);
}

Tensor corrupt(const Tensor& image, const CorruptionSpec& spec, uint64_t seed,
               const Tensor* gt_depth) {
  if (image.rank() != 4) throw std::invalid_argument("corrupt expects [N,C,H,W]");
  if (spec.severity < 1 || spec.severity > 3)
    throw std::invalid_argument("corruption severity must be 1..3");
  const int sev = spec.severity - 1;
  const int N = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  Rng rng(Rng::mix(seed, static_cast<uint64_t>(spec.kind) * 8 + spec.severity));
  std::vector<double> out = image.data();
  auto clamp_all = [&out] {
    for (auto& v : out) v = std::clamp(v, 0.0, 1.0);
  };

  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: {
      constexpr double sigma[3] = {0.04, 0.08, 0.12};
      for (auto& v : out) v += sigma[sev] * rng.normal();
      clamp_all();
      break;
    }
    case CorruptionKind::shot_noise: {
      constexpr double rate[3] = {60.0, 25.0, 12.0};
      for (auto& v : out)
        v = static_cast<double>(rng.poisson(std::clamp(v, 0.0, 1.0) * rate[sev])) / rate[sev];
      clamp_all();
      break;
    }
    case CorruptionKind::blur: {
      constexpr int radius[3] = {1, 2, 3};
      const int r = radius[sev];
      std::vector<double> tmp(out.size());
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const size_t plane = (static_cast<size_t>(n) * C + c) * H * W;
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
              double s = 0;
              for (int k = -r; k <= r; ++k) s += out[plane + y * W + std::clamp(x + k, 0, W - 1)];
              tmp[plane + y * W + x] = s / (2 * r + 1);
            }
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
              double s = 0;
              for (int k = -r; k <= r; ++k) s += tmp[plane + std::clamp(y + k, 0, H - 1) * W + x];
              out[plane + y * W + x] = s / (2 * r + 1);
            }
        }
      clamp_all();
      break;
    }
    case CorruptionKind::brightness: {
      constexpr double offset[3] = {0.1, 0.2, 0.3};
      for (auto& v : out) v += offset[sev];
      clamp_all();
      break;
    }
    case CorruptionKind::contrast: {
      constexpr double factor[3] = {0.75, 0.5, 0.35};
      const size_t per = static_cast<size_t>(C) * H * W;
      for (int n = 0; n < N; ++n) {
        double mean = 0;
        for (size_t i = 0; i < per; ++i) mean += out[n * per + i];
        mean /= static_cast<double>(per);
        for (size_t i = 0; i < per; ++i) out[n * per + i] = mean + (out[n * per + i] - mean) * factor[sev];
      }
      clamp_all();
      break;
    }
    case CorruptionKind::fog: {
      constexpr double beta[3] = {0.02, 0.05, 0.1};
      constexpr double airlight = 0.8;
      if (!gt_depth) throw std::invalid_argument("fog corruption needs the scene depth");
      if (gt_depth->rank() != 4 || gt_depth->dim(0) != N || gt_depth->dim(1) != 1 ||
          gt_depth->dim(2) != H || gt_depth->dim(3) != W)
        throw std::invalid_argument("fog depth must be [N,1,H,W] matching the image");
      const auto& d = gt_depth->data();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
              size_t di = (static_cast<size_t>(n) * H + y) * W + x;
              size_t ii = ((static_cast<size_t>(n) * C + c) * H + y) * W + x;
              double t = std::exp(-beta[sev] * d[di]);
              out[ii] = out[ii] * t + airlight * (1.0 - t);
            }
      clamp_all();
      break;
    }
  }
  return Tensor(image.shape(), std::move(out));
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3)
    throw std::invalid_argument("write_ppm expects [1,3,H,W]");
  const int H = image.dim(2), W = image.dim(3);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << W << ' ' << H << "\n255\n";
  const auto& d = image.data();
  std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(d[(static_cast<size_t>(c) * H + y) * W + x], 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("short write on " + path);
}

namespace {

int next_pnm_int(std::istream& in) {
  // skips whitespace and '#' comments
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') c = in.get();
    c = in.get();
  }
  int v = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw std::runtime_error("malformed PNM header");
  return v;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char m0 = static_cast<char>(in.get()), m1 = static_cast<char>(in.get());
  if (m0 != 'P' || m1 != '6') throw std::runtime_error(path + " is not a P6 PPM");
  int W = next_pnm_int(in), H = next_pnm_int(in), maxv = next_pnm_int(in);
  if (maxv != 255) throw std::runtime_error(path + ": only maxval 255 is supported");
  std::vector<unsigned char> raw(static_cast<size_t>(W) * H * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error(path + ": truncated pixel data");
  std::vector<double> d(raw.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        d[(static_cast<size_t>(c) * H + y) * W + x] =
            raw[(static_cast<size_t>(y) * W + x) * 3 + c] / 255.0;
  return Tensor({1, 3, H, W}, std::move(d));
}

void write_pfm(const std::string& path, const Tensor& depth) {
  if (depth.rank() != 4 || depth.dim(0) != 1 || depth.dim(1) != 1)
    throw std::invalid_argument("write_pfm expects [1,1,H,W]");
  const int H = depth.dim(2), W = depth.dim(3);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "Pf\n" << W << ' ' << H << "\n-1.0\n";
  const auto& d = depth.data();
  std::vector<char> row(static_cast<size_t>(W) * 4);
  for (int y = H - 1; y >= 0; --y) {  // PFM rasters run bottom-up
    for (int x = 0; x < W; ++x) {
      float f = static_cast<float>(d[static_cast<size_t>(y) * W + x]);
      std::memcpy(row.data() + static_cast<size_t>(x) * 4, &f, 4);
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("short write on " + path);
}

Tensor read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "Pf") throw std::runtime_error(path + " is not a grayscale PFM");
  int W = 0, H = 0;
  double scale = 0;
  in >> W >> H >> scale;
  in.get();  // the single whitespace before the raster
  if (W <= 0 || H <= 0 || scale >= 0)
    throw std::runtime_error(path + ": expected little-endian PFM");
  std::vector<char> raw(static_cast<size_t>(W) * H * 4);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error(path + ": truncated raster");
  std::vector<double> d(static_cast<size_t>(W) * H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      float f;
      std::memcpy(&f, raw.data() + ((static_cast<size_t>(H - 1 - y) * W) + x) * 4, 4);
      d[static_cast<size_t>(y) * W + x] = static_cast<double>(f);
    }
  return Tensor({1, 1, H, W}, std::move(d));
}

void save_scene(const std::string& dir, const SceneSample& s) {
  fs::create_directories(dir);
  write_ppm(dir + "/frame_prev.ppm", s.frame_prev);
  write_ppm(dir + "/frame_t.ppm", s.frame_t);
  write_ppm(dir + "/frame_next.ppm", s.frame_next);
  write_pfm(dir + "/depth_t.pfm", s.gt_depth);
  std::ofstream poses(dir + "/poses.txt");
  if (!poses) throw std::runtime_error("cannot write poses in " + dir);
  write_kv3(poses, "axis_to_prev", s.pose_to_prev.axis_angle);
  write_kv3(poses, "trans_to_prev", s.pose_to_prev.translation);
  write_kv3(poses, "axis_to_next", s.pose_to_next.axis_angle);
  write_kv3(poses, "trans_to_next", s.pose_to_next.translation);
  std::ofstream cam(dir + "/camera.txt");
  if (!cam) throw std::runtime_error("cannot write camera in " + dir);
  cam << "fx = " << fmt17(s.camera.fx) << "\nfy = " << fmt17(s.camera.fy) << "\ncx = "
      << fmt17(s.camera.cx) << "\ncy = " << fmt17(s.camera.cy) << "\nwidth = " << s.camera.width
      << "\nheight = " << s.camera.height << "\n";
}

SceneSample load_scene(const std::string& dir, uint64_t seed) {
  SceneSample s;
  s.seed = seed;
  s.frame_prev = read_ppm(dir + "/frame_prev.ppm");
  s.frame_t = read_ppm(dir + "/frame_t.ppm");
  s.frame_next = read_ppm(dir + "/frame_next.ppm");
  s.gt_depth = read_pfm(dir + "/depth_t.pfm");
  auto poses = read_kv(dir + "/poses.txt");
  s.pose_to_prev = {kv3(poses, "axis_to_prev"), kv3(poses, "trans_to_prev")};
  s.pose_to_next = {kv3(poses, "axis_to_next"), kv3(poses, "trans_to_next")};
  auto cam = read_kv(dir + "/camera.txt");
  s.camera = {kv1(cam, "fx"), kv1(cam, "fy"), kv1(cam, "cx"), kv1(cam, "cy"),
              static_cast<int>(kv1(cam, "width")), static_cast<int>(kv1(cam, "height"))};
  validate_camera(s.camera);
  return s;
}

std::string dataset_build(int n_scenes, std::pair<double, double> split_ratios,
                          const std::string& out_dir, uint64_t base_seed,
                          const CameraModel& camera) {
  if (n_scenes <= 0) throw std::invalid_argument("n_scenes must be positive");
  if (split_ratios.first < 0 || split_ratios.second < 0 ||
      std::abs(split_ratios.first + split_ratios.second - 1.0) > 1e-9)
    throw std::invalid_argument("split ratios must be nonnegative and sum to 1");
  const int n_train =
      std::clamp(static_cast<int>(std::llround(split_ratios.first * n_scenes)), 0, n_scenes);
  fs::create_directories(out_dir);
  std::string manifest_path = out_dir + "/manifest.txt";
  std::ofstream manifest(manifest_path);
  if (!manifest) throw std::runtime_error("cannot write " + manifest_path);
  manifest << "# scat-synth-1\n";
  for (int i = 0; i < n_scenes; ++i) {
    uint64_t seed = Rng::mix(base_seed, static_cast<uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04d", i);
    std::string rel = std::string(i < n_train ? "train/" : "val/") + name;
    save_scene(out_dir + "/" + rel, generate_scene(seed, camera));
    manifest << rel << ' ' << seed << "\n";
  }
  if (!manifest) throw std::runtime_error("short write on " + manifest_path);
  return manifest_path;
}

std::vector<ManifestEntry> read_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open " + manifest_path);
  std::string line;
  if (!std::getline(in, line) || line != "# scat-synth-1")
    throw std::runtime_error(manifest_path + ": missing scat-synth-1 header");
  std::vector<ManifestEntry> entries;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.dir >> e.seed)) throw std::runtime_error(manifest_path + ": malformed line");
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace scat
