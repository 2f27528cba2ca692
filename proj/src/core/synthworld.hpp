#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "core/geometry.hpp"
#include "core/tensor.hpp"

namespace scat {

// frame triplet with exact ground truth; warping frame t+-1 by gt_depth and
// the matching pose reconstructs frame t to MAE < 1e-3 on valid pixels
// (guaranteed for images at least 48px on a side; smaller frames are only
// meant for gradient plumbing tests)
struct SceneSample {
  Tensor frame_prev;  // [1,3,H,W], values in [0,1]
  Tensor frame_t;
  Tensor frame_next;
  Tensor gt_depth;  // [1,1,H,W], frame t, values in [2,50]
  PoseSE3 pose_to_prev;
  PoseSE3 pose_to_next;
  CameraModel camera;
  uint64_t seed = 0;
};

SceneSample generate_scene(uint64_t seed, const CameraModel& camera);

enum class CorruptionKind { gaussian_noise, shot_noise, blur, brightness, contrast, fog };

extern const CorruptionKind kAllCorruptions[6];

std::string corruption_name(CorruptionKind kind);
CorruptionKind corruption_from_string(const std::string& name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;  // 1..3
};

// deterministic in (spec, seed); output clamped to [0,1], shape preserved.
// fog needs the scene depth map and rejects a null one.
Tensor corrupt(const Tensor& image, const CorruptionSpec& spec, uint64_t seed,
               const Tensor* gt_depth = nullptr);

// --- on-disk scene format ---
// images: binary PPM (P6, maxval 255); depth: PFM (little-endian, scale -1);
// poses and camera: `key = v1 v2 v3` text sidecars

void write_ppm(const std::string& path, const Tensor& image);   // [1,3,H,W]
Tensor read_ppm(const std::string& path);
void write_pfm(const std::string& path, const Tensor& depth);   // [1,1,H,W]
Tensor read_pfm(const std::string& path);

void save_scene(const std::string& dir, const SceneSample& s);
SceneSample load_scene(const std::string& dir, uint64_t seed);

struct ManifestEntry {
  std::string dir;  // relative to the dataset root, e.g. train/scene_0003
  uint64_t seed = 0;
};

// builds n scene directories under out_dir split into train/ and val/ by the
// given ratios, writes out_dir/manifest.txt (`# scat-synth-1` header plus one
// scene per line), returns the manifest path
std::string dataset_build(int n_scenes, std::pair<double, double> split_ratios,
                          const std::string& out_dir, uint64_t base_seed,
                          const CameraModel& camera);

std::vector<ManifestEntry> read_manifest(const std::string& manifest_path);

}  // namespace scat
