#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace scat {

struct MetricsReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;  // fraction with max(p/g,g/p) < 1.25^k
};

// Standard monocular depth errors over the masked pixels. Ground truth is
// clipped to [min_depth, max_depth]; with median_scale the prediction is
// rescaled by median(gt)/median(pred) first (scale-ambiguous convention),
// then clipped to the same range.
MetricsReport depth_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                            bool median_scale = true, double min_depth = 0.1,
                            double max_depth = 100.0);

// depth estimation error: collapses a report to one number for CE/RR
double dee(const MetricsReport& r);

struct Aggregate {
  double mce = 0;  // percent, lower is better
  double mrr = 0;  // percent, higher is better
};

// model and baseline reports indexed [corruption][severity] on the same grid.
// CE_c = sum_s DEE_model / sum_s DEE_baseline, mCE = 100 * mean_c CE_c.
// RR_c = sum_s (1 - DEE_model,c,s) / (S * (1 - DEE_model,clean)), summed-over-
// severity form, mRR = 100 * mean_c RR_c. The baseline clean report is
// accepted for interface symmetry; the resilience definition only needs the
// model's clean score.
Aggregate corruption_aggregate(const std::vector<std::vector<MetricsReport>>& model,
                               const std::vector<std::vector<MetricsReport>>& baseline,
                               const MetricsReport& clean_model,
                               const MetricsReport& clean_baseline);

// `tag,corruption,severity,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3`
void write_metrics_header(std::ostream& os);
void append_metrics_row(std::ostream& os, const std::string& tag, const std::string& corruption,
                        int severity, const MetricsReport& r);
// aggregate rows reuse the grid: value lands in the abs_rel column, rest 0
void append_aggregate_row(std::ostream& os, const std::string& tag, const std::string& name,
                          double value);

}  // namespace scat
