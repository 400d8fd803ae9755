#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halluscope/cache_io.hpp"

namespace halluscope::eval {

/// Mann-Whitney AUC; tied scores earn half credit. Throws when a class is missing.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// max(AUC, 1 - AUC).
double oriented_auc(double auc);

struct ConfusionMetrics {
  int tp = 0, fp = 0, fn = 0, tn = 0;
  double f1 = 0.0;
  double balanced_accuracy = 0.0;
  bool degenerate = false;  // some ratio had an empty denominator and was set to 0
};

/// Positive prediction is score >= threshold.
ConfusionMetrics f1_balacc(std::span<const double> scores, std::span<const int> labels, double threshold);

/// Threshold maximizing F1 over the distinct scores; ties keep the highest threshold.
double best_f1_threshold(std::span<const double> scores, std::span<const int> labels);

/// sup |ECDF_a - ECDF_b|.
double ks_distance(std::span<const double> a, std::span<const double> b);

/// Standard error of the AUC under the null (Hanley-McNeil with AUC = 0.5).
double null_auc_se(std::size_t n_pos, std::size_t n_neg);

struct MetricReport {
  double auc = 0.5;
  double f1 = 0.0;
  double balanced_accuracy = 0.5;
  double threshold = 0.5;
  std::size_t n = 0;
  double positive_rate = 0.0;
  bool degenerate = false;
};

MetricReport metric_report(std::span<const double> scores, std::span<const int> labels, double threshold);

struct GroupReport {
  std::string group;
  MetricReport report;
};

struct GroupBreakdown {
  std::vector<GroupReport> groups;
  std::vector<std::string> skipped;  // groups lacking one of the classes
};

GroupBreakdown group_breakdown(std::span<const double> scores, std::span<const int> labels,
                               std::span<const std::string> group_tags, double threshold);

struct GroupDelta {
  std::string group;
  double auc_a = 0.5;
  double auc_b = 0.5;
  double delta = 0.0;  // auc_b - auc_a
};

/// Per-group AUC deltas between two systems scored on the same rows.
std::vector<GroupDelta> compare_groups(const GroupBreakdown& a, const GroupBreakdown& b);

/// Deterministic seeded partition into groups of `group_size` rows ("g00", "g01", ...),
/// used when true generator labels are absent.
std::vector<std::string> synthetic_groups(std::size_t n, std::size_t group_size, std::uint64_t seed);

struct SignalStability {
  std::string name;
  double test_auc = 0.5;
  double ood_auc = 0.5;
  double gap = 0.0;  // |test_auc - ood_auc|
  bool inverted = false;
};

struct StabilityReport {
  std::vector<SignalStability> signals;
  std::vector<std::size_t> ranked_by_gap;  // indices into signals, largest gap first
  std::size_t inverted_count = 0;
};

/// Columns of `test` and `ood` are scalar signals named by `names`.
StabilityReport signal_stability(const std::vector<std::string>& names, const std::vector<std::vector<double>>& test,
                                 std::span<const int> labels_test, const std::vector<std::vector<double>>& ood,
                                 std::span<const int> labels_ood);

struct TaskDepth {
  std::string task;
  std::vector<double> layer_auc;  // raw AUC of head-averaged S2 per layer
  int best_layer = 0;
  double depth_fraction = 0.0;  // best_layer / n_layers
  double best_oriented_auc = 0.5;
  bool no_peak = false;
};

struct DepthMap {
  int n_layers = 0;
  std::vector<TaskDepth> tasks;
  std::vector<std::string> excluded;  // single-class tasks
};

/// `layer_s2[i][l]` is the head-averaged S2 of sample i at layer l.
DepthMap depth_map(const std::vector<std::vector<double>>& layer_s2, std::span<const int> labels,
                   std::span<const std::string> task_tags);
DepthMap depth_map(const std::vector<SampleCache>& caches, std::span<const int> labels,
                   std::span<const std::string> task_tags);

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);
void to_json(nlohmann::json& j, const GroupBreakdown& g);
void to_json(nlohmann::json& j, const GroupDelta& d);
void to_json(nlohmann::json& j, const StabilityReport& r);
void from_json(const nlohmann::json& j, StabilityReport& r);
void to_json(nlohmann::json& j, const DepthMap& d);
void from_json(const nlohmann::json& j, DepthMap& d);

/// Flat report rows with a stable column order: system, split, group, metric, value.
struct ReportRow {
  std::string system;
  std::string split;
  std::string group;
  std::string metric;
  double value = 0.0;

  bool operator==(const ReportRow&) const = default;
};

void append_rows(std::vector<ReportRow>& rows, const std::string& system, const std::string& split,
                 const std::string& group, const MetricReport& r);
std::string to_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> parse_csv(const std::string& text);

}  // namespace halluscope::eval
