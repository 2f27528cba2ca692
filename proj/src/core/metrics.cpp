#include "core/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace scat {

namespace {

double median(std::vector<double> v) {
  const size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt9(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

}  // namespace

MetricsReport depth_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                            bool median_scale, double min_depth, double max_depth) {
  if (pred.shape() != gt.shape() || pred.shape() != mask.shape())
    throw std::invalid_argument("depth_metrics expects matching pred/gt/mask shapes");
  const auto& pd = pred.data();
  const auto& gd = gt.data();
  const auto& md = mask.data();

  std::vector<double> p, g;
  for (size_t i = 0; i < pd.size(); ++i)
    if (md[i] > 0.5) {
      p.push_back(pd[i]);
      g.push_back(std::clamp(gd[i], min_depth, max_depth));
    }
  if (p.empty()) throw std::invalid_argument("depth_metrics: empty mask");

  if (median_scale) {
    double mp = median(p);
    if (mp <= 0) throw std::invalid_argument("depth_metrics: nonpositive prediction median");
    double s = median(g) / mp;
    for (auto& v : p) v *= s;
  }
  for (auto& v : p) v = std::clamp(v, min_depth, max_depth);

  MetricsReport r;
  const double n = static_cast<double>(p.size());
  const double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
  double se = 0, sle = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    double d = p[i] - g[i];
    r.abs_rel += std::abs(d) / g[i];
    r.sq_rel += d * d / g[i];
    se += d * d;
    double dl = std::log(p[i]) - std::log(g[i]);
    sle += dl * dl;
    double ratio = std::max(p[i] / g[i], g[i] / p[i]);
    if (ratio < t1) r.delta1 += 1;
    if (ratio < t2) r.delta2 += 1;
    if (ratio < t3) r.delta3 += 1;
  }
  r.abs_rel /= n;
  r.sq_rel /= n;
  r.rmse = std::sqrt(se / n);
  r.rmse_log = std::sqrt(sle / n);
  r.delta1 /= n;
  r.delta2 /= n;
  r.delta3 /= n;
  return r;
}

double dee(const MetricsReport& r) { return (r.abs_rel + (1.0 - r.delta1)) / 2.0; }

Aggregate corruption_aggregate(const std::vector<std::vector<MetricsReport>>& model,
                               const std::vector<std::vector<MetricsReport>>& baseline,
                               const MetricsReport& clean_model,
                               const MetricsReport& clean_baseline) {
  (void)clean_baseline;
  if (model.empty() || model.size() != baseline.size())
    throw std::invalid_argument("corruption grids do not match");
  const double clean_res = 1.0 - dee(clean_model);
  if (clean_res <= 0) throw std::invalid_argument("degenerate clean model score");

  double ce_sum = 0, rr_sum = 0;
  for (size_t c = 0; c < model.size(); ++c) {
    if (model[c].empty() || model[c].size() != baseline[c].size())
      throw std::invalid_argument("corruption grids do not match");
    const double S = static_cast<double>(model[c].size());
    double dm = 0, db = 0, res = 0;
    for (size_t s = 0; s < model[c].size(); ++s) {
      dm += dee(model[c][s]);
      db += dee(baseline[c][s]);
      res += 1.0 - dee(model[c][s]);
    }
    if (db == 0) throw std::invalid_argument("degenerate baseline: zero corrupted error");
    ce_sum += dm / db;
    rr_sum += res / (S * clean_res);
  }
  const double C = static_cast<double>(model.size());
  return {100.0 * (ce_sum / C), 100.0 * (rr_sum / C)};
}

void write_metrics_header(std::ostream& os) {
  os << "tag,corruption,severity,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3\n";
}

void append_metrics_row(std::ostream& os, const std::string& tag, const std::string& corruption,
                        int severity, const MetricsReport& r) {
  os << tag << ',' << corruption << ',' << severity << ',' << fmt9(r.abs_rel) << ','
     << fmt9(r.sq_rel) << ',' << fmt9(r.rmse) << ',' << fmt9(r.rmse_log) << ',' << fmt9(r.delta1)
     << ',' << fmt9(r.delta2) << ',' << fmt9(r.delta3) << "\n";
}

void append_aggregate_row(std::ostream& os, const std::string& tag, const std::string& name,
                          double value) {
  os << tag << ',' << name << ",0," << fmt9(value) << ",0,0,0,0,0,0\n";
}

}  // namespace scat
