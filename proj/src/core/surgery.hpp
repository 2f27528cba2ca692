#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "core/networks.hpp"
#include "core/rng.hpp"

namespace scat {

// fixed flattening order over a set of trainable parameters
struct GradLayout {
  struct Entry {
    std::string name;
    int64_t offset = 0;
    int64_t length = 0;
  };
  std::vector<Entry> entries;
  int64_t total = 0;

  const Entry* find(const std::string& name) const;
  bool same_as(const GradLayout& other) const;
};

using LayoutPtr = std::shared_ptr<const GradLayout>;

LayoutPtr make_layout(const std::vector<std::vector<NamedParam>>& groups);

struct FlatGradient {
  LayoutPtr layout;
  std::vector<double> values;
};

FlatGradient zero_gradient(const LayoutPtr& layout);
void set_segment(FlatGradient& g, const std::string& name, const std::vector<double>& values);

// standard cosine; 0 when either vector has zero norm, reported via *zero_norm
double cosine(const FlatGradient& a, const FlatGradient& b, bool* zero_norm = nullptr);

struct ConflictStats {
  std::vector<double> cosines;  // pre-surgery, adversarial vs clean
  double mean_cosine = 0.0;
  double fraction_negative = 0.0;
};

ConflictStats make_stats(std::vector<double> cosines);

struct SurgeryResult {
  FlatGradient g_update;
  std::vector<FlatGradient> adjusted;  // post-surgery adversarial gradients
  ConflictStats stats;                 // records the pre-surgery cosines
  bool zero_clean = false;
};

// project every adversarial gradient that conflicts with the clean gradient
// (negative cosine) onto the clean gradient's orthogonal complement, then
// blend: g_update = g_clean + (blend/j) * sum of adjusted gradients.
// A zero clean gradient skips projection and blends the raw mean, flagged.
SurgeryResult surgery(const FlatGradient& g_clean, const std::vector<FlatGradient>& g_adv,
                      double blend);

// linear warmup of the adversarial blend weight over the first warmup
// fraction of epochs
double blend_schedule(int epoch, int total_epochs, double warmup_fraction);

// `iter,mean_cos,frac_neg,bin_00..bin_19`, bins uniform over [-1,1]
void write_stats_header(std::ostream& os);
void append_stats_row(std::ostream& os, int64_t iter, const ConflictStats& stats);

// bounded history of generator snapshots with seeded uniform sampling
class GeneratorBuffer {
 public:
  GeneratorBuffer(int capacity, uint64_t seed);

  void add(GeneratorParams snap);  // evicts the oldest when full

  // j distinct snapshots, uniform without replacement; fewer if the buffer
  // holds fewer; pointers are valid until the next add()
  std::vector<const GeneratorParams*> sample(int j);

  int size() const { return static_cast<int>(snaps_.size()); }
  int capacity() const { return capacity_; }
  const std::deque<GeneratorParams>& snapshots() const { return snaps_; }
  Rng& rng() { return rng_; }

 private:
  int capacity_;
  std::deque<GeneratorParams> snaps_;
  Rng rng_;
};

}  // namespace scat
