#include "core/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace scat {

const GradLayout::Entry* GradLayout::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

bool GradLayout::same_as(const GradLayout& other) const {
  if (this == &other) return true;
  if (total != other.total || entries.size() != other.entries.size()) return false;
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& a = entries[i];
    const auto& b = other.entries[i];
    if (a.name != b.name || a.offset != b.offset || a.length != b.length) return false;
  }
  return true;
}

LayoutPtr make_layout(const std::vector<std::vector<NamedParam>>& groups) {
  auto layout = std::make_shared<GradLayout>();
  int64_t offset = 0;
  for (const auto& group : groups) {
    for (const auto& p : group) {
      if (layout->find(p.name)) throw std::invalid_argument("duplicate parameter name " + p.name);
      int64_t len = p.tensor->numel();
      layout->entries.push_back({p.name, offset, len});
      offset += len;
    }
  }
  layout->total = offset;
  return layout;
}

FlatGradient zero_gradient(const LayoutPtr& layout) {
  if (!layout) throw std::invalid_argument("null gradient layout");
  return {layout, std::vector<double>(layout->total, 0.0)};
}

void set_segment(FlatGradient& g, const std::string& name, const std::vector<double>& values) {
  const GradLayout::Entry* e = g.layout->find(name);
  if (!e) throw std::invalid_argument("unknown parameter " + name);
  if (static_cast<int64_t>(values.size()) != e->length)
    throw std::invalid_argument("segment size mismatch for " + name);
  std::copy(values.begin(), values.end(), g.values.begin() + e->offset);
}

namespace {

void check_compatible(const FlatGradient& a, const FlatGradient& b) {
  if (!a.layout || !b.layout) throw std::invalid_argument("gradient missing layout");
  if (a.layout != b.layout && !a.layout->same_as(*b.layout))
    throw std::invalid_argument("gradient layouts do not match");
  if (a.values.size() != b.values.size() ||
      static_cast<int64_t>(a.values.size()) != a.layout->total)
    throw std::invalid_argument("gradient size does not match layout");
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

double cosine(const FlatGradient& a, const FlatGradient& b, bool* zero_norm) {
  check_compatible(a, b);
  double na = std::sqrt(dot(a.values, a.values));
  double nb = std::sqrt(dot(b.values, b.values));
  if (zero_norm) *zero_norm = (na == 0.0 || nb == 0.0);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a.values, b.values) / (na * nb);
}

ConflictStats make_stats(std::vector<double> cosines) {
  ConflictStats s;
  s.cosines = std::move(cosines);
  if (s.cosines.empty()) return s;
  double sum = 0.0;
  int64_t neg = 0;
  for (double c : s.cosines) {
    sum += c;
    if (c < 0.0) ++neg;
  }
  s.mean_cosine = sum / static_cast<double>(s.cosines.size());
  s.fraction_negative = static_cast<double>(neg) / static_cast<double>(s.cosines.size());
  return s;
}

SurgeryResult surgery(const FlatGradient& g_clean, const std::vector<FlatGradient>& g_adv,
                      double blend) {
  if (!(blend >= 0.0 && blend <= 1.0)) throw std::invalid_argument("blend must lie in [0,1]");
  if (!g_clean.layout || static_cast<int64_t>(g_clean.values.size()) != g_clean.layout->total)
    throw std::invalid_argument("clean gradient does not match its layout");
  for (const auto& g : g_adv) check_compatible(g_clean, g);

  SurgeryResult r;
  r.g_update = g_clean;
  if (g_adv.empty()) return r;

  const double j = static_cast<double>(g_adv.size());
  const double clean_sq = dot(g_clean.values, g_clean.values);
  r.zero_clean = (clean_sq == 0.0);

  std::vector<double> cosines;
  cosines.reserve(g_adv.size());
  r.adjusted.reserve(g_adv.size());
  for (const auto& g : g_adv) {
    cosines.push_back(cosine(g, g_clean));
    FlatGradient adj = g;
    if (!r.zero_clean) {
      double d = dot(g.values, g_clean.values);
      if (d < 0.0) {
        double scale = d / clean_sq;
        for (int64_t i = 0; i < g_clean.layout->total; ++i)
          adj.values[i] -= scale * g_clean.values[i];
      }
    }
    r.adjusted.push_back(std::move(adj));
  }
  r.stats = make_stats(std::move(cosines));

  const double w = blend / j;
  for (const auto& adj : r.adjusted) {
    for (int64_t i = 0; i < g_clean.layout->total; ++i)
      r.g_update.values[i] += w * adj.values[i];
  }
  return r;
}

double blend_schedule(int epoch, int total_epochs, double warmup_fraction) {
  if (total_epochs <= 0) throw std::invalid_argument("total_epochs must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0))
    throw std::invalid_argument("warmup_fraction must lie in [0,1]");
  double warm = warmup_fraction * static_cast<double>(total_epochs);
  if (warm == 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / warm);
}

void write_stats_header(std::ostream& os) {
  os << "iter,mean_cos,frac_neg";
  for (int b = 0; b < 20; ++b) os << ",bin_" << (b < 10 ? "0" : "") << b;
  os << "\n";
}

void append_stats_row(std::ostream& os, int64_t iter, const ConflictStats& stats) {
  int bins[20] = {0};
  for (double c : stats.cosines) {
    int b = static_cast<int>(std::floor((c + 1.0) * 10.0));
    bins[std::clamp(b, 0, 19)] += 1;
  }
  os << iter << ',' << stats.mean_cosine << ',' << stats.fraction_negative;
  for (int b = 0; b < 20; ++b) os << ',' << bins[b];
  os << "\n";
}

GeneratorBuffer::GeneratorBuffer(int capacity, uint64_t seed) : capacity_(capacity), rng_(seed) {
  if (capacity <= 0) throw std::invalid_argument("buffer capacity must be positive");
}

void GeneratorBuffer::add(GeneratorParams snap) {
  if (static_cast<int>(snaps_.size()) == capacity_) snaps_.pop_front();
  snaps_.push_back(std::move(snap));
}

std::vector<const GeneratorParams*> GeneratorBuffer::sample(int j) {
  if (j <= 0) throw std::invalid_argument("sample count must be positive");
  const int n = size();
  const int m = std::min(j, n);
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<const GeneratorParams*> out;
  out.reserve(m);
  for (int k = 0; k < m; ++k) {
    int pick = k + static_cast<int>(rng_.uniform_int(static_cast<uint64_t>(n - k)));
    std::swap(idx[k], idx[pick]);
    out.push_back(&snaps_[idx[k]]);
  }
  return out;
}

}  // namespace scat
