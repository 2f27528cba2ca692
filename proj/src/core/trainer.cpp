#include "core/trainer.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "core/geometry.hpp"
#include "core/photometric.hpp"

namespace scat {

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmtg(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(int line, const std::string& key, const std::string& val) {
  throw ConfigError("line " + std::to_string(line) + ": invalid value `" + val + "` for key `" +
                    key + "`");
}

double to_double(const std::string& v, int line, const std::string& key) {
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) bad_value(line, key, v);
    return out;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(line, key, v);
  }
}

int to_int(const std::string& v, int line, const std::string& key) {
  try {
    size_t pos = 0;
    long long out = std::stoll(v, &pos);
    if (pos != v.size() || out < INT_MIN || out > INT_MAX) bad_value(line, key, v);
    return static_cast<int>(out);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(line, key, v);
  }
}

uint64_t to_u64(const std::string& v, int line, const std::string& key) {
  try {
    size_t pos = 0;
    uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) bad_value(line, key, v);
    return out;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(line, key, v);
  }
}

bool to_bool(const std::string& v, int line, const std::string& key) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(line, key, v);
}

void apply_key(TrainConfig& c, const std::string& key, const std::string& val, int line) {
  if (key == "epochs")
    c.epochs = to_int(val, line, key);
  else if (key == "batch_size")
    c.batch_size = to_int(val, line, key);
  else if (key == "lr_theta")
    c.lr_theta = to_double(val, line, key);
  else if (key == "lr_phi")
    c.lr_phi = to_double(val, line, key);
  else if (key == "kappa")
    c.kappa = to_double(val, line, key);
  else if (key == "epsilon_m")
    c.epsilon_m = to_double(val, line, key);
  else if (key == "buffer_capacity")
    c.buffer_capacity = to_int(val, line, key);
  else if (key == "sample_j")
    c.sample_j = to_int(val, line, key);
  else if (key == "blend_warmup_fraction")
    c.blend_warmup_fraction = to_double(val, line, key);
  else if (key == "alpha")
    c.alpha = to_double(val, line, key);
  else if (key == "smoothness_weight")
    c.smoothness_weight = to_double(val, line, key);
  else if (key == "seed")
    c.seed = to_u64(val, line, key);
  else if (key == "enable_cgs")
    c.enable_cgs = to_bool(val, line, key);
  else if (key == "enable_sdn")
    c.enable_sdn = to_bool(val, line, key);
  else if (key == "enable_ada")
    c.enable_ada = to_bool(val, line, key);
  else if (key == "min_reprojection")
    c.min_reprojection = to_bool(val, line, key);
  else if (key == "mix_batch")
    c.mix_batch = to_bool(val, line, key);
  else if (key == "use_adam")
    c.use_adam = to_bool(val, line, key);
  else if (key == "snapshot_every_steps")
    c.snapshot_every_steps = to_int(val, line, key);
  else
    throw ConfigError("line " + std::to_string(line) + ": unknown key `" + key + "`");
}

}  // namespace

void validate_config(const TrainConfig& c) {
  if (c.epochs <= 0) throw ConfigError("epochs must be positive");
  if (c.batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(c.lr_theta > 0)) throw ConfigError("lr_theta must be positive");
  if (!(c.lr_phi > 0)) throw ConfigError("lr_phi must be positive");
  if (!(c.kappa > 0)) throw ConfigError("kappa must be positive");
  if (!(c.epsilon_m >= 0)) throw ConfigError("epsilon_m must be non-negative");
  if (c.buffer_capacity <= 0) throw ConfigError("buffer_capacity must be positive");
  if (c.sample_j <= 0) throw ConfigError("sample_j must be positive");
  if (!(c.blend_warmup_fraction >= 0 && c.blend_warmup_fraction <= 1))
    throw ConfigError("blend_warmup_fraction must be in [0,1]");
  if (!(c.alpha >= 0 && c.alpha <= 1)) throw ConfigError("alpha must be in [0,1]");
  if (!(c.smoothness_weight >= 0)) throw ConfigError("smoothness_weight must be non-negative");
  if (c.snapshot_every_steps < 0) throw ConfigError("snapshot_every_steps must be non-negative");
}

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected `key = value`, got `" +
                        line + "`");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": expected `key = value`, got `" +
                        line + "`");
    apply_key(c, key, val, lineno);
  }
  validate_config(c);
  return c;
}

TrainConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file `" + path + "`");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream os;
  os << "epochs = " << c.epochs << "\n";
  os << "batch_size = " << c.batch_size << "\n";
  os << "lr_theta = " << fmt17(c.lr_theta) << "\n";
  os << "lr_phi = " << fmt17(c.lr_phi) << "\n";
  os << "kappa = " << fmt17(c.kappa) << "\n";
  os << "epsilon_m = " << fmt17(c.epsilon_m) << "\n";
  os << "buffer_capacity = " << c.buffer_capacity << "\n";
  os << "sample_j = " << c.sample_j << "\n";
  os << "blend_warmup_fraction = " << fmt17(c.blend_warmup_fraction) << "\n";
  os << "alpha = " << fmt17(c.alpha) << "\n";
  os << "smoothness_weight = " << fmt17(c.smoothness_weight) << "\n";
  os << "seed = " << c.seed << "\n";
  os << "enable_cgs = " << (c.enable_cgs ? "true" : "false") << "\n";
  os << "enable_sdn = " << (c.enable_sdn ? "true" : "false") << "\n";
  os << "enable_ada = " << (c.enable_ada ? "true" : "false") << "\n";
  os << "min_reprojection = " << (c.min_reprojection ? "true" : "false") << "\n";
  os << "mix_batch = " << (c.mix_batch ? "true" : "false") << "\n";
  os << "use_adam = " << (c.use_adam ? "true" : "false") << "\n";
  os << "snapshot_every_steps = " << c.snapshot_every_steps << "\n";
  return os.str();
}

namespace {

const TrainConfig& checked(const TrainConfig& c) {
  validate_config(c);
  return c;
}

int pyramid_levels(int h, int w, int want) {
  int n = 0;
  while (n < want && h % 2 == 0 && w % 2 == 0 && h > 1 && w > 1) {
    h /= 2;
    w /= 2;
    ++n;
  }
  return n;
}

void round_params_f32(std::vector<NamedParam> ps) {
  for (auto& p : ps)
    for (double& v : p.tensor->mutable_data()) v = static_cast<double>(static_cast<float>(v));
}

Tensor put(Tape& t, const Tensor& v, bool leaf) { return leaf ? t.leaf(v) : t.constant(v); }

ConvLayer put(Tape& t, const ConvLayer& l, bool leaf) {
  return ConvLayer{put(t, l.w, leaf), put(t, l.b, leaf)};
}

std::vector<ConvLayer> put(Tape& t, const std::vector<ConvLayer>& ls, bool leaf) {
  std::vector<ConvLayer> out;
  out.reserve(ls.size());
  for (const auto& l : ls) out.push_back(put(t, l, leaf));
  return out;
}

SdnParams put(Tape& t, const SdnParams& p, bool leaf) {
  SdnParams q;
  q.enc = put(t, p.enc, leaf);
  q.bottleneck = put(t, p.bottleneck, leaf);
  q.dec = put(t, p.dec, leaf);
  q.head = put(t, p.head, leaf);
  q.kappa = p.kappa;
  return q;
}

PoseNetParams put(Tape& t, const PoseNetParams& p, bool leaf) {
  PoseNetParams q;
  q.trunk = put(t, p.trunk, leaf);
  q.head = put(t, p.head, leaf);
  return q;
}

GeneratorParams put(Tape& t, const GeneratorParams& p, bool leaf) {
  GeneratorParams q;
  q.enc = put(t, p.enc, leaf);
  q.bottleneck = put(t, p.bottleneck, leaf);
  q.dec = put(t, p.dec, leaf);
  q.epsilon = p.epsilon;
  q.version_tag = p.version_tag;
  return q;
}

FlatGradient gather(Tape& tape, const std::vector<NamedParam>& taped, const LayoutPtr& layout) {
  FlatGradient g = zero_gradient(layout);
  for (const auto& p : taped) {
    Tensor gr = tape.grad(*p.tensor);
    set_segment(g, p.name, gr.data());
  }
  return g;
}

double l2norm(const FlatGradient& g) {
  double s = 0;
  for (double v : g.values) s += v * v;
  return std::sqrt(s);
}

bool all_finite(const FlatGradient& g) {
  for (double v : g.values)
    if (!std::isfinite(v)) return false;
  return true;
}

void apply_sgd(const std::vector<NamedParam>& params, const FlatGradient& g, double lr,
               double sign) {
  for (const auto& p : params) {
    const GradLayout::Entry* e = g.layout->find(p.name);
    if (!e) throw std::logic_error("apply_sgd: no layout entry for " + p.name);
    auto& data = p.tensor->mutable_data();
    for (int64_t i = 0; i < e->length; ++i)
      data[static_cast<size_t>(i)] = static_cast<double>(
          static_cast<float>(data[static_cast<size_t>(i)] + sign * lr * g.values[e->offset + i]));
  }
}

void apply_adam(const std::vector<NamedParam>& params, const FlatGradient& g, AdamState& st,
                double lr, double sign) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (st.m.empty()) {
    st.m.assign(g.values.size(), 0.0);
    st.v.assign(g.values.size(), 0.0);
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (const auto& p : params) {
    const GradLayout::Entry* e = g.layout->find(p.name);
    if (!e) throw std::logic_error("apply_adam: no layout entry for " + p.name);
    auto& data = p.tensor->mutable_data();
    for (int64_t i = 0; i < e->length; ++i) {
      const size_t k = static_cast<size_t>(e->offset + i);
      const double gi = g.values[k];
      st.m[k] = static_cast<double>(static_cast<float>(b1 * st.m[k] + (1.0 - b1) * gi));
      st.v[k] = static_cast<double>(static_cast<float>(b2 * st.v[k] + (1.0 - b2) * gi * gi));
      const double step = lr * (st.m[k] / c1) / (std::sqrt(st.v[k] / c2) + eps);
      data[static_cast<size_t>(i)] = static_cast<double>(
          static_cast<float>(data[static_cast<size_t>(i)] + sign * step));
    }
  }
}

std::vector<NamedParam> theta_params(TrainState& s) {
  auto out = named_params(s.depth);
  auto pp = named_params(s.pose);
  out.insert(out.end(), pp.begin(), pp.end());
  return out;
}

struct ForwardOut {
  Tensor reproj;
  Tensor disp;
  int empty_terms = 0;
};

// per-pixel minimum of the two reprojection errors over the jointly valid
// region; the default path sums the two masked means
Tensor pair_term(const Tensor& target, const Warped& a, const Warped& b, const LossWeights& w,
                 bool use_min, int* empty_terms) {
  if (!use_min) return reprojection_loss(target, {a, b}, {}, w, empty_terms);
  Tensor ea = pe(target, a.image, w);
  Tensor eb = pe(target, b.image, w);
  Tensor mn = scalar_mul(sub(add(ea, eb), vabs(sub(ea, eb))), 0.5);
  bool empty = false;
  Tensor out = masked_mean(mn, mul(a.valid, b.valid), &empty);
  if (empty && empty_terms) ++*empty_terms;
  return out;
}

// depth and pose read `input_t` (perturbed on the adversarial branch); the
// photometric comparison always targets the clean frame
ForwardOut branch_forward(const SdnParams& depth_p, const PoseNetParams& pose_p,
                          const Tensor& input_t, const Tensor& clean_t, const Tensor& prev,
                          const Tensor& next, const CameraModel& cam, const LossWeights& w,
                          bool use_min) {
  ForwardOut out;
  out.disp = sdn_forward(depth_p, input_t);
  Tensor depth = disp_to_depth(out.disp, 0.1, 100.0);
  PoseSE3 to_prev = posenet_forward(pose_p, input_t, prev);
  PoseSE3 to_next = posenet_forward(pose_p, input_t, next);
  Warped wp = inverse_warp(prev, depth, to_prev, cam);
  Warped wn = inverse_warp(next, depth, to_next, cam);
  out.reproj = pair_term(clean_t, wp, wn, w, use_min, &out.empty_terms);
  return out;
}

}  // namespace

TrainState::TrainState(const TrainConfig& cfg, const CameraModel& cam)
    : config(checked(cfg)),
      camera(cam),
      buffer(cfg.buffer_capacity, Rng::mix(cfg.seed, 0xB0FFull)),
      rng(Rng::mix(cfg.seed, 0x7EA1ull)) {
  validate_camera(cam);
  const int levels = pyramid_levels(cam.height, cam.width, 4);
  if (levels < 1)
    throw ConfigError("frame " + std::to_string(cam.width) + "x" + std::to_string(cam.height) +
                      " does not allow a single 2x downsample");
  static const int kDepthWidths[4] = {16, 32, 64, 128};
  static const int kGenWidths[3] = {16, 32, 64};
  std::vector<int> dw(kDepthWidths, kDepthWidths + levels);
  std::vector<int> gw(kGenWidths, kGenWidths + std::min(levels, 3));
  Rng init(Rng::mix(cfg.seed, 0x1871ull));
  depth = make_sdn(init, cfg.enable_sdn ? cfg.kappa : 1.0, dw);
  pose = make_posenet(init, dw);
  const double eps =
      cfg.epsilon_m * std::sqrt((3.0 * cam.height * cam.width) / (3.0 * 192.0 * 640.0));
  gen = make_generator(init, eps, gw);
  // parameters live on the f32 lattice from the start, so checkpoints and
  // resumed trajectories reproduce uninterrupted runs exactly
  round_params_f32(named_params(depth));
  round_params_f32(named_params(pose));
  round_params_f32(named_params(gen));
  layout_theta = make_layout({named_params(depth), named_params(pose)});
  layout_phi = make_layout({named_params(gen)});
}

Batch make_batch(const std::vector<SceneSample>& scenes, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  const SceneSample& first = scenes.at(static_cast<size_t>(indices[0]));
  const std::vector<int>& fs = first.frame_t.shape();
  const int n = static_cast<int>(indices.size());
  const int64_t per = first.frame_t.numel();
  std::vector<double> prev, t, next;
  prev.reserve(static_cast<size_t>(per) * n);
  t.reserve(static_cast<size_t>(per) * n);
  next.reserve(static_cast<size_t>(per) * n);
  for (int idx : indices) {
    const SceneSample& sc = scenes.at(static_cast<size_t>(idx));
    if (sc.frame_t.shape() != fs)
      throw std::invalid_argument("make_batch: mixed frame shapes in one batch");
    const auto& dp = sc.frame_prev.data();
    const auto& dt = sc.frame_t.data();
    const auto& dn = sc.frame_next.data();
    prev.insert(prev.end(), dp.begin(), dp.end());
    t.insert(t.end(), dt.begin(), dt.end());
    next.insert(next.end(), dn.begin(), dn.end());
  }
  std::vector<int> shape = {n, fs[1], fs[2], fs[3]};
  return Batch{Tensor(shape, std::move(prev)), Tensor(shape, std::move(t)),
               Tensor(shape, std::move(next))};
}

StepReport train_step(TrainState& s, const Batch& batch) {
  if (!batch.t.defined() || !batch.prev.defined() || !batch.next.defined())
    throw std::invalid_argument("train_step: undefined batch tensors");
  StepReport r;
  const LossWeights w{s.config.alpha, s.config.smoothness_weight};
  const bool use_min = s.config.min_reprojection;
  const double blend = s.config.enable_cgs
                           ? blend_schedule(s.epoch, s.config.epochs, s.config.blend_warmup_fraction)
                           : 1.0;

  std::vector<const GeneratorParams*> snaps;
  if (s.config.enable_ada) snaps = s.buffer.sample(s.config.sample_j);
  std::vector<uint64_t> zs(snaps.size());
  for (auto& z : zs) z = s.rng.u64();

  FlatGradient g_update = zero_gradient(s.layout_theta);
  double objective = 0;  // loss actually differentiated for theta

  if (s.config.mix_batch) {
    // single combined pass: adversarial terms join the clean objective on one
    // tape, so there is nothing to project; conflict stats stay empty
    Tape tape;
    SdnParams dth = put(tape, s.depth, true);
    PoseNetParams pth = put(tape, s.pose, true);
    Tensor It = tape.constant(batch.t);
    Tensor Ip = tape.constant(batch.prev);
    Tensor In = tape.constant(batch.next);
    ForwardOut clean = branch_forward(dth, pth, It, It, Ip, In, s.camera, w, use_min);
    Tensor total =
        add(clean.reproj, scalar_mul(smoothness_loss(clean.disp, It), s.config.smoothness_weight));
    for (size_t k = 0; k < snaps.size(); ++k) {
      GeneratorParams gk = put(tape, *snaps[k], false);
      Tensor delta = generator_forward(gk, It, zs[k]);
      ForwardOut adv = branch_forward(dth, pth, add(It, delta), It, Ip, In, s.camera, w, use_min);
      total = add(total, scalar_mul(adv.reproj, blend / static_cast<double>(snaps.size())));
      ++r.adv_terms;
    }
    r.L_p = clean.reproj.value();
    objective = total.value();
    tape.backward(total);
    auto taped = named_params(dth);
    auto tp = named_params(pth);
    taped.insert(taped.end(), tp.begin(), tp.end());
    g_update = gather(tape, taped, s.layout_theta);
    r.stats = make_stats({});
  } else {
    FlatGradient g_clean = zero_gradient(s.layout_theta);
    {
      Tape tape;
      SdnParams dth = put(tape, s.depth, true);
      PoseNetParams pth = put(tape, s.pose, true);
      Tensor It = tape.constant(batch.t);
      Tensor Ip = tape.constant(batch.prev);
      Tensor In = tape.constant(batch.next);
      ForwardOut clean = branch_forward(dth, pth, It, It, Ip, In, s.camera, w, use_min);
      Tensor total = add(clean.reproj,
                         scalar_mul(smoothness_loss(clean.disp, It), s.config.smoothness_weight));
      r.L_p = clean.reproj.value();
      objective = total.value();
      tape.backward(total);
      auto taped = named_params(dth);
      auto tp = named_params(pth);
      taped.insert(taped.end(), tp.begin(), tp.end());
      g_clean = gather(tape, taped, s.layout_theta);
    }
    std::vector<FlatGradient> g_adv;
    g_adv.reserve(snaps.size());
    for (size_t k = 0; k < snaps.size(); ++k) {
      Tape tape;
      SdnParams dth = put(tape, s.depth, true);
      PoseNetParams pth = put(tape, s.pose, true);
      GeneratorParams gk = put(tape, *snaps[k], false);
      Tensor It = tape.constant(batch.t);
      Tensor Ip = tape.constant(batch.prev);
      Tensor In = tape.constant(batch.next);
      Tensor delta = generator_forward(gk, It, zs[k]);
      ForwardOut adv = branch_forward(dth, pth, add(It, delta), It, Ip, In, s.camera, w, use_min);
      tape.backward(adv.reproj);
      auto taped = named_params(dth);
      auto tp = named_params(pth);
      taped.insert(taped.end(), tp.begin(), tp.end());
      g_adv.push_back(gather(tape, taped, s.layout_theta));
      ++r.adv_terms;
    }
    if (s.config.enable_cgs) {
      SurgeryResult res = surgery(g_clean, g_adv, blend);
      g_update = std::move(res.g_update);
      r.stats = std::move(res.stats);
    } else {
      // raw blended mean; cosines still recorded for the logs
      std::vector<double> cos;
      cos.reserve(g_adv.size());
      for (const auto& ga : g_adv) cos.push_back(cosine(ga, g_clean));
      r.stats = make_stats(std::move(cos));
      g_update = g_clean;
      if (!g_adv.empty()) {
        const double wk = blend / static_cast<double>(g_adv.size());
        for (const auto& ga : g_adv)
          for (size_t i = 0; i < g_update.values.size(); ++i)
            g_update.values[i] += wk * ga.values[i];
      }
    }
    r.update_clean_cos = cosine(g_update, g_clean);
  }

  FlatGradient g_phi = zero_gradient(s.layout_phi);
  if (s.config.enable_ada) {
    Tape tape;
    GeneratorParams gph = put(tape, s.gen, true);
    SdnParams dc = put(tape, s.depth, false);
    PoseNetParams pc = put(tape, s.pose, false);
    Tensor It = tape.constant(batch.t);
    Tensor Ip = tape.constant(batch.prev);
    Tensor In = tape.constant(batch.next);
    Tensor delta = generator_forward(gph, It, s.rng.u64());
    ForwardOut adv = branch_forward(dc, pc, add(It, delta), It, Ip, In, s.camera, w, use_min);
    r.L_AD = adv.reproj.value();
    tape.backward(adv.reproj);
    g_phi = gather(tape, named_params(gph), s.layout_phi);
  }

  r.grad_norm_theta = l2norm(g_update);
  r.grad_norm_phi = l2norm(g_phi);

  const bool ok = std::isfinite(objective) && std::isfinite(r.L_p) && std::isfinite(r.L_AD) &&
                  all_finite(g_update) && all_finite(g_phi);
  if (!ok) {
    r.rejected = true;
    ++s.step;
    if (++s.consecutive_rejects >= 3)
      throw NumericError("non-finite loss or gradient in three consecutive steps, last at step " +
                         std::to_string(s.step - 1) + "; aborting");
    return r;
  }
  s.consecutive_rejects = 0;

  auto th = theta_params(s);
  if (s.config.use_adam)
    apply_adam(th, g_update, s.adam_theta, s.config.lr_theta, -1.0);
  else
    apply_sgd(th, g_update, s.config.lr_theta, -1.0);
  if (s.config.enable_ada) {
    auto ph = named_params(s.gen);
    if (s.config.use_adam)
      apply_adam(ph, g_phi, s.adam_phi, s.config.lr_phi, +1.0);
    else
      apply_sgd(ph, g_phi, s.config.lr_phi, +1.0);
  }

  ++s.step;
  if (s.config.enable_ada && s.config.snapshot_every_steps > 0 &&
      s.step % s.config.snapshot_every_steps == 0)
    s.buffer.add(snapshot(s.gen, ++s.snapshots_taken));
  return r;
}

void epoch_end(TrainState& s) {
  if (s.config.enable_ada && s.config.snapshot_every_steps == 0)
    s.buffer.add(snapshot(s.gen, ++s.snapshots_taken));
  ++s.epoch;
}

void write_train_log_header(std::ostream& os) {
  os << "step,L_p,L_AD,mean_cos,frac_neg,grad_norm_theta,grad_norm_phi\n";
}

void append_train_log_row(std::ostream& os, int64_t step, const StepReport& r) {
  os << step << ',' << fmt17(r.L_p) << ',' << fmt17(r.L_AD) << ',' << fmt17(r.stats.mean_cosine)
     << ',' << fmt17(r.stats.fraction_negative) << ',' << fmt17(r.grad_norm_theta) << ','
     << fmt17(r.grad_norm_phi) << "\n";
}

void train_run(TrainState& s, const std::vector<SceneSample>& scenes, std::ostream* log_csv,
               std::ostream* stats_csv, const std::function<void(const TrainState&)>& on_epoch_end,
               const std::function<void(int64_t, const StepReport&)>& on_step) {
  if (scenes.empty()) throw std::invalid_argument("train_run: no scenes");
  if (log_csv && s.step == 0) write_train_log_header(*log_csv);
  if (stats_csv && s.step == 0) write_stats_header(*stats_csv);
  const int n = static_cast<int>(scenes.size());
  while (s.epoch < s.config.epochs) {
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      int k = static_cast<int>(s.rng.uniform_int(static_cast<uint64_t>(i) + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(k)]);
    }
    for (int at = 0; at < n; at += s.config.batch_size) {
      std::vector<int> idx(order.begin() + at,
                           order.begin() + std::min(n, at + s.config.batch_size));
      const int64_t step_id = s.step;
      StepReport r = train_step(s, make_batch(scenes, idx));
      if (log_csv) append_train_log_row(*log_csv, step_id, r);
      if (stats_csv) append_stats_row(*stats_csv, step_id, r.stats);
      if (on_step) on_step(step_id, r);
    }
    epoch_end(s);
    if (on_epoch_end) on_epoch_end(s);
  }
}

std::vector<double> generator_ascent_check(const TrainState& s, const Batch& batch, int k,
                                           std::vector<double>* delta_norms) {
  if (k < 0) throw std::invalid_argument("generator_ascent_check: negative step count");
  GeneratorParams gen = snapshot(s.gen, s.gen.version_tag);
  const LossWeights w{s.config.alpha, s.config.smoothness_weight};
  const uint64_t z = Rng::mix(s.config.seed, 0xA5CE57ull);
  if (delta_norms) delta_norms->clear();
  std::vector<double> out;
  out.reserve(static_cast<size_t>(k) + 1);
  for (int it = 0; it <= k; ++it) {
    Tape tape;
    GeneratorParams gph = put(tape, gen, true);
    SdnParams dc = put(tape, s.depth, false);
    PoseNetParams pc = put(tape, s.pose, false);
    Tensor It = tape.constant(batch.t);
    Tensor Ip = tape.constant(batch.prev);
    Tensor In = tape.constant(batch.next);
    Tensor delta = generator_forward(gph, It, z);
    if (delta_norms) {
      const auto& dv = delta.data();
      const int64_t per = delta.numel() / delta.dim(0);
      for (int n = 0; n < delta.dim(0); ++n) {
        double sq = 0;
        for (int64_t i = 0; i < per; ++i) sq += dv[n * per + i] * dv[n * per + i];
        delta_norms->push_back(std::sqrt(sq));
      }
    }
    ForwardOut adv =
        branch_forward(dc, pc, add(It, delta), It, Ip, In, s.camera, w, s.config.min_reprojection);
    out.push_back(adv.reproj.value());
    if (it == k) break;
    tape.backward(adv.reproj);
    FlatGradient g = gather(tape, named_params(gph), s.layout_phi);
    apply_sgd(named_params(gen), g, s.config.lr_phi, +1.0);
  }
  return out;
}

Tensor predict_depth(const TrainState& s, const Tensor& image) {
  Tape tape;
  SdnParams d = put(tape, s.depth, false);
  Tensor disp = sdn_forward(d, tape.constant(image));
  return disp_to_depth(disp, 0.1, 100.0).detach();
}

MetricsReport evaluate_scenes(const TrainState& s, const std::vector<SceneSample>& scenes,
                              const CorruptionSpec* spec) {
  if (scenes.empty()) throw std::invalid_argument("evaluate_scenes: no scenes");
  MetricsReport acc{};
  for (const SceneSample& sc : scenes) {
    Tensor frame = sc.frame_t;
    if (spec) {
      const uint64_t cs =
          Rng::mix(sc.seed, 0xC0DEull + static_cast<uint64_t>(spec->kind) * 8 +
                                static_cast<uint64_t>(spec->severity));
      frame = corrupt(sc.frame_t, *spec, cs, &sc.gt_depth);
    }
    Tensor pred = predict_depth(s, frame);
    MetricsReport m = depth_metrics(pred, sc.gt_depth, Tensor::full(sc.gt_depth.shape(), 1.0));
    acc.abs_rel += m.abs_rel;
    acc.sq_rel += m.sq_rel;
    acc.rmse += m.rmse;
    acc.rmse_log += m.rmse_log;
    acc.delta1 += m.delta1;
    acc.delta2 += m.delta2;
    acc.delta3 += m.delta3;
  }
  const double n = static_cast<double>(scenes.size());
  acc.abs_rel /= n;
  acc.sq_rel /= n;
  acc.rmse /= n;
  acc.rmse_log /= n;
  acc.delta1 /= n;
  acc.delta2 /= n;
  acc.delta3 /= n;
  return acc;
}

namespace {

constexpr const char* kCkptVersion = "scat-ckpt-1";

struct BlobRec {
  std::string name;
  std::vector<int> dims;
  int64_t offset = 0;
  int64_t bytes = 0;
};

using ConstParams = std::vector<std::pair<std::string, const Tensor*>>;

void append_const(ConstParams& out, const std::string& prefix, std::vector<NamedParam> ps) {
  for (const auto& p : ps) out.emplace_back(prefix + p.name, p.tensor);
}

void write_f32_le(std::string& out, const std::vector<double>& values) {
  for (double v : values) {
    float f = static_cast<float>(v);
    uint32_t u;
    std::memcpy(&u, &f, 4);
    char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                 static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
    out.append(b, 4);
  }
}

std::vector<double> read_f32_le(const char* p, int64_t count) {
  std::vector<double> out(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    const unsigned char* q = reinterpret_cast<const unsigned char*>(p) + 4 * i;
    uint32_t u = static_cast<uint32_t>(q[0]) | (static_cast<uint32_t>(q[1]) << 8) |
                 (static_cast<uint32_t>(q[2]) << 16) | (static_cast<uint32_t>(q[3]) << 24);
    float f;
    std::memcpy(&f, &u, 4);
    out[static_cast<size_t>(i)] = static_cast<double>(f);
  }
  return out;
}

[[noreturn]] void malformed(const std::string& why) {
  throw CheckpointError(CheckpointError::Code::malformed, "malformed checkpoint: " + why);
}

}  // namespace

void save_checkpoint(const TrainState& s, const std::string& path) {
  TrainState& m = const_cast<TrainState&>(s);  // named_params wants mutable refs; nothing is written
  ConstParams blobs;
  append_const(blobs, "", named_params(m.depth));
  append_const(blobs, "", named_params(m.pose));
  append_const(blobs, "", named_params(m.gen));
  std::vector<std::pair<double, int64_t>> buf_meta;  // epsilon, version per snapshot
  int bi = 0;
  for (const auto& snap : s.buffer.snapshots()) {
    append_const(blobs, "buf" + std::to_string(bi) + ".",
                 named_params(const_cast<GeneratorParams&>(snap)));
    buf_meta.emplace_back(snap.epsilon, snap.version_tag);
    ++bi;
  }

  std::ostringstream man;
  man << kCkptVersion << "\n";
  man << "epoch " << s.epoch << "\n";
  man << "step " << s.step << "\n";
  man << "snapshots_taken " << s.snapshots_taken << "\n";
  man << "consecutive_rejects " << s.consecutive_rejects << "\n";
  man << "rng_train " << s.rng.serialize() << "\n";
  man << "rng_buffer " << const_cast<GeneratorBuffer&>(s.buffer).rng().serialize() << "\n";
  man << "camera " << fmt17(s.camera.fx) << ' ' << fmt17(s.camera.fy) << ' ' << fmt17(s.camera.cx)
      << ' ' << fmt17(s.camera.cy) << ' ' << s.camera.width << ' ' << s.camera.height << "\n";
  man << "kappa_levels";
  for (double k : s.depth.kappa) man << ' ' << fmt17(k);
  man << "\n";
  man << "gen_epsilon " << fmt17(s.gen.epsilon) << "\n";
  man << "gen_version " << s.gen.version_tag << "\n";
  man << "adam_theta_t " << s.adam_theta.t << "\n";
  man << "adam_phi_t " << s.adam_phi.t << "\n";
  man << "buffer_count " << buf_meta.size() << "\n";
  for (size_t i = 0; i < buf_meta.size(); ++i)
    man << "buffer_meta " << i << ' ' << fmt17(buf_meta[i].first) << ' ' << buf_meta[i].second
        << "\n";
  {
    std::istringstream cfg(config_to_text(s.config));
    std::string line;
    while (std::getline(cfg, line)) {
      size_t eq = line.find('=');
      man << "config." << trim(line.substr(0, eq)) << ' ' << trim(line.substr(eq + 1)) << "\n";
    }
  }

  std::string data;
  int64_t offset = 0;
  std::ostringstream dir;
  auto emit = [&](const std::string& name, const std::vector<int>& dims,
                  const std::vector<double>& values) {
    const int64_t bytes = static_cast<int64_t>(values.size()) * 4;
    dir << "blob " << name << ' ' << dims.size();
    for (int d : dims) dir << ' ' << d;
    dir << ' ' << offset << ' ' << bytes << "\n";
    write_f32_le(data, values);
    offset += bytes;
  };
  for (const auto& [name, tensor] : blobs) emit(name, tensor->shape(), tensor->data());
  if (s.adam_theta.t > 0) {
    emit("adam_theta.m", {static_cast<int>(s.adam_theta.m.size())}, s.adam_theta.m);
    emit("adam_theta.v", {static_cast<int>(s.adam_theta.v.size())}, s.adam_theta.v);
  }
  if (s.adam_phi.t > 0) {
    emit("adam_phi.m", {static_cast<int>(s.adam_phi.m.size())}, s.adam_phi.m);
    emit("adam_phi.v", {static_cast<int>(s.adam_phi.v.size())}, s.adam_phi.v);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint `" + path + "`");
  out << man.str() << dir.str() << "data\n";
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("short write on checkpoint `" + path + "`");
}

namespace {

struct Manifest {
  std::map<std::string, std::string> scalars;
  std::vector<BlobRec> blobs;
  std::map<int, std::pair<double, int64_t>> buffer_meta;
  TrainConfig config;
  size_t data_start = 0;
};

Manifest parse_manifest(const std::string& file) {
  Manifest m;
  size_t pos = 0;
  bool first = true;
  bool saw_data = false;
  while (pos < file.size()) {
    size_t nl = file.find('\n', pos);
    std::string line = nl == std::string::npos ? file.substr(pos) : file.substr(pos, nl - pos);
    pos = nl == std::string::npos ? file.size() : nl + 1;
    if (first) {
      if (line != kCkptVersion)
        throw CheckpointError(CheckpointError::Code::version,
                              "unsupported checkpoint version `" + line + "`");
      first = false;
      continue;
    }
    if (line == "data") {
      saw_data = true;
      m.data_start = pos;
      break;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "blob") {
      BlobRec b;
      size_t rank = 0;
      if (!(ls >> b.name >> rank)) malformed("bad blob line `" + line + "`");
      b.dims.resize(rank);
      for (size_t i = 0; i < rank; ++i)
        if (!(ls >> b.dims[i])) malformed("bad blob dims in `" + line + "`");
      if (!(ls >> b.offset >> b.bytes)) malformed("bad blob extent in `" + line + "`");
      m.blobs.push_back(std::move(b));
    } else if (key == "buffer_meta") {
      int i = 0;
      double eps = 0;
      int64_t tag = 0;
      if (!(ls >> i >> eps >> tag)) malformed("bad buffer_meta line `" + line + "`");
      m.buffer_meta[i] = {eps, tag};
    } else if (key.rfind("config.", 0) == 0) {
      std::string val = trim(line.substr(key.size()));
      try {
        apply_key(m.config, key.substr(7), val, 0);
      } catch (const ConfigError& e) {
        malformed(e.what());
      }
    } else if (!key.empty()) {
      std::string val = trim(line.substr(key.size()));
      m.scalars[key] = val;
    }
  }
  if (!saw_data) malformed("no data section");
  try {
    validate_config(m.config);
  } catch (const ConfigError& e) {
    malformed(e.what());
  }
  return m;
}

const std::string& need(const Manifest& m, const std::string& key) {
  auto it = m.scalars.find(key);
  if (it == m.scalars.end()) malformed("missing `" + key + "`");
  return it->second;
}

using BlobMap = std::map<std::string, Tensor>;

Tensor take_blob(const BlobMap& blobs, const std::string& name) {
  auto it = blobs.find(name);
  if (it == blobs.end()) malformed("missing blob `" + name + "`");
  return it->second;
}

ConvLayer take_layer(const BlobMap& blobs, const std::string& prefix) {
  return ConvLayer{take_blob(blobs, prefix + ".w"), take_blob(blobs, prefix + ".b")};
}

std::vector<ConvLayer> take_seq(const BlobMap& blobs, const std::string& prefix) {
  std::vector<ConvLayer> out;
  while (blobs.count(prefix + std::to_string(out.size()) + ".w"))
    out.push_back(take_layer(blobs, prefix + std::to_string(out.size())));
  if (out.empty()) malformed("no blobs under `" + prefix + "`");
  return out;
}

}  // namespace

TrainState load_checkpoint(const std::string& path, const TrainConfig* requested,
                           std::vector<std::string>* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) malformed("cannot open `" + path + "`");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string file = ss.str();
  Manifest man = parse_manifest(file);

  if (requested && warnings) {
    const std::string a = config_to_text(*requested), b = config_to_text(man.config);
    std::istringstream ia(a), ib(b);
    std::string la, lb;
    while (std::getline(ia, la) && std::getline(ib, lb))
      if (la != lb)
        warnings->push_back("config conflict: requested `" + la + "` but checkpoint has `" + lb +
                            "`; checkpoint wins");
  }

  BlobMap blobs;
  for (const auto& b : man.blobs) {
    const int64_t expect = shape_numel(b.dims) * 4;
    if (b.bytes != expect)
      throw CheckpointError(CheckpointError::Code::size_mismatch,
                            "blob `" + b.name + "` declares " + std::to_string(b.bytes) +
                                " bytes for shape " + shape_str(b.dims) + " (" +
                                std::to_string(expect) + " expected)");
    if (b.offset < 0 ||
        man.data_start + static_cast<size_t>(b.offset + b.bytes) > file.size())
      throw CheckpointError(CheckpointError::Code::truncated,
                            "blob `" + b.name + "` extends past end of file");
    blobs.emplace(b.name, Tensor(b.dims, read_f32_le(file.data() + man.data_start + b.offset,
                                                     b.bytes / 4)));
  }

  CameraModel cam;
  {
    std::istringstream cs(need(man, "camera"));
    if (!(cs >> cam.fx >> cam.fy >> cam.cx >> cam.cy >> cam.width >> cam.height))
      malformed("bad camera line");
  }

  TrainState st(man.config, cam);

  st.depth.enc = take_seq(blobs, "depth.enc");
  st.depth.bottleneck = take_layer(blobs, "depth.bneck");
  st.depth.dec = take_seq(blobs, "depth.dec");
  st.depth.head = take_layer(blobs, "depth.head");
  {
    std::istringstream ks(need(man, "kappa_levels"));
    st.depth.kappa.clear();
    double k;
    while (ks >> k) st.depth.kappa.push_back(k);
    if (st.depth.kappa.size() != st.depth.enc.size()) malformed("kappa_levels count mismatch");
  }
  st.pose.trunk = take_seq(blobs, "pose.trunk");
  st.pose.head = take_layer(blobs, "pose.head");
  st.gen.enc = take_seq(blobs, "gen.enc");
  st.gen.bottleneck = take_layer(blobs, "gen.bneck");
  st.gen.dec = take_seq(blobs, "gen.dec");
  st.gen.epsilon = std::stod(need(man, "gen_epsilon"));
  st.gen.version_tag = std::stoll(need(man, "gen_version"));

  st.buffer = GeneratorBuffer(man.config.buffer_capacity, 0);
  st.buffer.rng().deserialize(need(man, "rng_buffer"));
  const int bcount = std::stoi(need(man, "buffer_count"));
  for (int i = 0; i < bcount; ++i) {
    auto mit = man.buffer_meta.find(i);
    if (mit == man.buffer_meta.end()) malformed("missing buffer_meta " + std::to_string(i));
    GeneratorParams snap;
    const std::string prefix = "buf" + std::to_string(i) + ".";
    snap.enc = take_seq(blobs, prefix + "gen.enc");
    snap.bottleneck = take_layer(blobs, prefix + "gen.bneck");
    snap.dec = take_seq(blobs, prefix + "gen.dec");
    snap.epsilon = mit->second.first;
    snap.version_tag = mit->second.second;
    st.buffer.add(std::move(snap));
  }

  st.rng.deserialize(need(man, "rng_train"));
  st.epoch = std::stoi(need(man, "epoch"));
  st.step = std::stoll(need(man, "step"));
  st.snapshots_taken = std::stoll(need(man, "snapshots_taken"));
  st.consecutive_rejects = std::stoi(need(man, "consecutive_rejects"));
  st.adam_theta.t = std::stoll(need(man, "adam_theta_t"));
  st.adam_phi.t = std::stoll(need(man, "adam_phi_t"));
  if (st.adam_theta.t > 0) {
    st.adam_theta.m = take_blob(blobs, "adam_theta.m").data();
    st.adam_theta.v = take_blob(blobs, "adam_theta.v").data();
  }
  if (st.adam_phi.t > 0) {
    st.adam_phi.m = take_blob(blobs, "adam_phi.m").data();
    st.adam_phi.v = take_blob(blobs, "adam_phi.v").data();
  }

  st.layout_theta = make_layout({named_params(st.depth), named_params(st.pose)});
  st.layout_phi = make_layout({named_params(st.gen)});
  return st;
}

std::vector<AblationCell> ablation_grid(const TrainConfig& base,
                                        const std::vector<std::string>& axes) {
  if (axes.empty()) throw std::invalid_argument("ablation_grid: no axes");
  using Mod = std::pair<std::string, std::function<void(TrainConfig&)>>;
  std::vector<std::vector<Mod>> per_axis;
  for (const std::string& ax : axes) {
    std::vector<Mod> vals;
    if (ax == "cgs" || ax == "sdn" || ax == "ada") {
      for (bool on : {true, false})
        vals.emplace_back(ax + (on ? "=on" : "=off"), [ax, on](TrainConfig& c) {
          if (ax == "cgs")
            c.enable_cgs = on;
          else if (ax == "sdn")
            c.enable_sdn = on;
          else
            c.enable_ada = on;
        });
    } else if (ax == "epsilon_m") {
      for (double e : {20.0, 40.0, 80.0, 135.0, 180.0})
        vals.emplace_back("epsilon_m=" + fmtg(e), [e](TrainConfig& c) { c.epsilon_m = e; });
    } else if (ax == "kappa") {
      for (double k : {0.1, 0.3, 0.7, 1.0})
        vals.emplace_back("kappa=" + fmtg(k), [k](TrainConfig& c) { c.kappa = k; });
    } else {
      throw std::invalid_argument("ablation_grid: unknown axis `" + ax + "`");
    }
    per_axis.push_back(std::move(vals));
  }
  std::vector<AblationCell> cells{{std::string(), base}};
  for (const auto& axis : per_axis) {
    std::vector<AblationCell> next;
    next.reserve(cells.size() * axis.size());
    for (const auto& cell : cells)
      for (const auto& [label, mod] : axis) {
        AblationCell c{cell.name.empty() ? label : cell.name + "," + label, cell.config};
        mod(c.config);
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  return cells;
}

std::vector<std::pair<std::string, MetricsReport>> run_ablation(
    const TrainConfig& base, const std::vector<std::string>& axes,
    const std::vector<SceneSample>& train_scenes, const std::vector<SceneSample>& val_scenes) {
  if (train_scenes.empty() || val_scenes.empty())
    throw std::invalid_argument("run_ablation: empty scene lists");
  std::vector<std::pair<std::string, MetricsReport>> out;
  for (const AblationCell& cell : ablation_grid(base, axes)) {
    TrainState st(cell.config, train_scenes.front().camera);
    train_run(st, train_scenes, nullptr, nullptr);
    out.emplace_back(cell.name, evaluate_scenes(st, val_scenes));
  }
  return out;
}

}  // namespace scat
