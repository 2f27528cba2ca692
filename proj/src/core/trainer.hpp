#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "core/metrics.hpp"
#include "core/networks.hpp"
#include "core/surgery.hpp"
#include "core/synthworld.hpp"

namespace scat {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 4;
  double lr_theta = 1e-3;  // depth/pose descent rate
  double lr_phi = 1e-4;    // generator ascent rate
  double kappa = 0.7;      // skip-connection scale when enable_sdn
  double epsilon_m = 135.0;  // reference perturbation budget at 3x192x640
  int buffer_capacity = 8;
  int sample_j = 3;  // generators drawn from the buffer per step
  double blend_warmup_fraction = 0.2;
  double alpha = 0.85;
  double smoothness_weight = 1e-3;
  uint64_t seed = 0;
  bool enable_cgs = true;
  bool enable_sdn = true;  // false trains with kappa = 1 (standard UNet)
  bool enable_ada = true;  // false skips the adversarial branch entirely
  bool min_reprojection = false;  // per-pixel min over the two reprojections
  bool mix_batch = false;  // single combined pass instead of per-generator gradients
  bool use_adam = false;
  int snapshot_every_steps = 0;  // 0 snapshots once per epoch
};

void validate_config(const TrainConfig& c);

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// line-based `key = value` with '#' comments; unknown keys and malformed
// lines raise ConfigError naming the line number
TrainConfig parse_config_text(const std::string& text);
TrainConfig parse_config_file(const std::string& path);
std::string config_to_text(const TrainConfig& c);

struct AdamState {
  std::vector<double> m, v;
  int64_t t = 0;
};

// One training run's mutable state. Parameters are kept exactly
// f32-representable so checkpoints round trip losslessly; copying is
// disabled because tensors share buffers.
struct TrainState {
  TrainState(const TrainConfig& cfg, const CameraModel& cam);
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;
  TrainState(TrainState&&) = default;

  TrainConfig config;
  CameraModel camera;
  SdnParams depth;
  PoseNetParams pose;
  GeneratorParams gen;  // the live generator
  GeneratorBuffer buffer;
  Rng rng;  // batch order, z seeds
  LayoutPtr layout_theta, layout_phi;
  AdamState adam_theta, adam_phi;
  int epoch = 0;
  int64_t step = 0;
  int64_t snapshots_taken = 0;
  int consecutive_rejects = 0;
};

struct Batch {
  Tensor prev, t, next;  // [N,3,H,W]
};

Batch make_batch(const std::vector<SceneSample>& scenes, const std::vector<int>& indices);

struct StepReport {
  double L_p = 0;     // clean reprojection term
  double L_AD = 0;    // live-generator adversarial term
  ConflictStats stats;  // pre-surgery adversarial/clean cosines
  double update_clean_cos = 0;  // applied update against the clean gradient
  double grad_norm_theta = 0;   // applied combined update
  double grad_norm_phi = 0;
  int adv_terms = 0;
  bool rejected = false;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// one optimization transaction: clean pass, j buffered adversarial passes,
// gradient surgery, theta descent, live-generator ascent. A non-finite loss
// rejects the step without touching parameters; the third consecutive
// rejection throws NumericError.
StepReport train_step(TrainState& s, const Batch& batch);

// snapshots the live generator into the buffer and advances the epoch counter
void epoch_end(TrainState& s);

// `step,L_p,L_AD,mean_cos,frac_neg,grad_norm_theta,grad_norm_phi`
void write_train_log_header(std::ostream& os);
void append_train_log_row(std::ostream& os, int64_t step, const StepReport& r);

// full epoch loop over the scene list; CSV sinks may be null
void train_run(TrainState& s, const std::vector<SceneSample>& scenes, std::ostream* log_csv,
               std::ostream* stats_csv,
               const std::function<void(const TrainState&)>& on_epoch_end = {},
               const std::function<void(int64_t, const StepReport&)>& on_step = {});

// k ascent steps on a copy of the live generator against frozen depth/pose;
// returns k+1 values of L_AD (initial first). delta_norms, when given,
// receives the per-image L2 norm of the perturbation at every evaluation.
std::vector<double> generator_ascent_check(const TrainState& s, const Batch& batch, int k,
                                           std::vector<double>* delta_norms = nullptr);

// depth prediction for evaluation, off-tape
Tensor predict_depth(const TrainState& s, const Tensor& image);

// per-scene depth metrics (median-scaled) averaged over the list; corrupted
// evaluation perturbs frame t with spec before prediction, scoring against
// the clean ground truth
MetricsReport evaluate_scenes(const TrainState& s, const std::vector<SceneSample>& scenes,
                              const CorruptionSpec* spec = nullptr);

struct CheckpointError : std::runtime_error {
  enum class Code { version, truncated, size_mismatch, malformed };
  Code code;
  CheckpointError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

// text manifest (version "scat-ckpt-1", counters, rng states, config, blob
// directory) followed by little-endian f32 blobs
void save_checkpoint(const TrainState& s, const std::string& path);

// `requested` is compared against the stored config; conflicts warn and the
// checkpoint value wins
TrainState load_checkpoint(const std::string& path, const TrainConfig* requested = nullptr,
                           std::vector<std::string>* warnings = nullptr);

struct AblationCell {
  std::string name;
  TrainConfig config;
};

// axes from {cgs, sdn, ada, epsilon_m, kappa}: flags toggle on/off,
// epsilon_m sweeps {20,40,80,135,180}, kappa sweeps {0.1,0.3,0.7,1.0};
// the grid is the cartesian product in axis order
std::vector<AblationCell> ablation_grid(const TrainConfig& base,
                                        const std::vector<std::string>& axes);

// trains every cell with identical seeds and scores it on the validation
// scenes; returns (cell name, clean metrics) rows
std::vector<std::pair<std::string, MetricsReport>> run_ablation(
    const TrainConfig& base, const std::vector<std::string>& axes,
    const std::vector<SceneSample>& train_scenes, const std::vector<SceneSample>& val_scenes);

}  // namespace scat
