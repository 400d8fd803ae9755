#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halluscope/cache_io.hpp"

namespace halluscope::calibration {

inline constexpr double kDefaultTemperature = 2.0;
inline constexpr double kKsWarnThreshold = 0.45;

double apply_temperature(double meta_logit, double temperature);
std::vector<double> apply_temperature(std::span<const double> meta_logits, double temperature);

/// Monotone piecewise-linear map; constant beyond the first and last knot.
struct IsotonicMap {
  std::vector<double> breakpoints;
  std::vector<double> values;
  std::string fit_source;

  double operator()(double score) const;
  std::vector<double> apply(std::span<const double> scores) const;
  bool empty() const { return breakpoints.empty(); }
};

struct IsotonicOptions {
  std::size_t min_pairs = 50;
};

/// Pool-adjacent-violators over the distinct scores, weighted by multiplicity.
IsotonicMap fit_isotonic(std::span<const double> scores, std::span<const int> labels,
                         const std::string& fit_source = "global", const IsotonicOptions& options = {});

enum class Regime { kQA, kClaim, kGlobal };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct RegimeRules {
  std::vector<std::string> qa_prefixes{"halueval"};
  std::vector<std::string> claim_tags{"minicheck", "anli"};

  Regime regime_of(const std::string& dataset_tag) const;
};

struct RoutingRules {
  std::string specialist_domain = "ragtruth";
};

struct RegimeFit {
  IsotonicMap map;
  std::vector<std::string> sample_ids;  // sorted fitting rows
  bool fallback = false;                // too few rows; the global map stands in
};

struct CalibrationBundle {
  double temperature = kDefaultTemperature;
  std::map<Regime, RegimeFit> maps;
  RegimeRules regime_rules;
  RoutingRules routing_rules;
  double threshold = 0.5;
  double ks_ragtruth_halueval = -1.0;  // negative when either group is absent
  bool ks_warning = false;

  const IsotonicMap& map_for(Regime r) const;
  /// Union of every map's fitting ids intersected with `ids`.
  std::vector<std::string> fitting_overlap(std::span<const std::string> ids) const;
};

void to_json(nlohmann::json& j, const CalibrationBundle& b);
void from_json(const nlohmann::json& j, CalibrationBundle& b);

struct CalibrationRow {
  std::string sample_id;
  double meta_logit = 0.0;
  int label = 0;
  std::string dataset_tag;
};

struct CalibrationOptions {
  double temperature = kDefaultTemperature;
  std::size_t min_pairs = 50;
  double ks_threshold = kKsWarnThreshold;
  RegimeRules regime_rules{};
  RoutingRules routing_rules{};
};

/// Fits the three regime maps and the max-F1 threshold on validation rows.
CalibrationBundle fit_calibration(std::span<const CalibrationRow> validation, const CalibrationOptions& options = {});

struct Calibrated {
  double probability = 0.5;
  Regime regime = Regime::kGlobal;
  bool defaulted = false;  // untagged or unknown dataset tag
};

/// Maps a temperature-scaled probability through its regime's isotonic map.
Calibrated calibrate(double probability, const SampleMeta& meta, const CalibrationBundle& bundle);

inline constexpr const char* kGeneralist = "stacking";
inline constexpr const char* kSpecialist = "ragt_stacking";

struct Routed {
  std::string model_id;
  bool defaulted = false;  // no domain tag
};

/// `registered` lists the loaded model identifiers.
Routed route(const SampleMeta& meta, std::span<const std::string> registered, const RoutingRules& rules = {});

/// Equal-width binned expected calibration error.
double expected_calibration_error(std::span<const double> probs, std::span<const int> labels, int n_bins = 10);

}  // namespace halluscope::calibration
