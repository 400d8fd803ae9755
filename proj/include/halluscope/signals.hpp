#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "halluscope/cache_io.hpp"
#include "halluscope/numeric.hpp"

namespace halluscope {

inline constexpr double kEpsilon = 1e-8;
inline constexpr int kWindowLength = 7;
inline constexpr int kLogitSlopeLayers = 8;
inline constexpr double kPerplexityCap = 100.0;

struct LayerSignals {
  std::vector<double> s1;  // mean residual norm over answer tokens, per layer
  std::vector<double> s4;  // mean MLP output norm over answer tokens, per layer
  double s15 = 0.0;        // OLS slope of s1 against layer index
};

struct AttentionSignals {
  std::vector<double> s2;   // [n_layers x n_heads] source attention mass
  std::vector<double> s3;   // [n_layers x n_heads] source-restricted entropy
  std::vector<double> tau;  // per answer token grounding score
};

struct LogitSignals {
  std::vector<double> s5;  // lens log-prob at each depth fraction
  double s6_raw = 1.0;     // capped perplexity
  double s13_raw = 0.0;    // lens slope over the final layers
};

struct LexicalSignals {
  double s9 = 0.0;   // answer/source token-count ratio
  double s10 = 0.0;  // Jaccard overlap of token sets
};

LayerSignals compute_layer_signals(const SampleCache& cache);
AttentionSignals compute_attention_signals(const SampleCache& cache);
LogitSignals compute_logit_signals(const SampleCache& cache);
LexicalSignals compute_lexical_signals(const SampleTexts& texts);

/// Lowercased whitespace tokens.
std::vector<std::string> lexical_tokens(std::string_view text);

/// Lens layer index sampled for depth fraction f: ceil(f * n_layers) - 1.
int depth_layer(double fraction, int n_layers);

/// Every statistic-independent signal of one sample. assemble_features turns
/// this into the classifier layout once TrainStats are fitted.
struct RawSignals {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> s1, s4, s2, s3, s5;
  double s6_raw = 1.0;
  double s8 = 0.5;
  double s9 = 0.0;
  double s10 = 0.0;
  double s13_raw = 0.0;
  double s15 = 0.0;
  double tau_min = 0.0;
  double tau_var = 0.0;
  double tau_slope = 0.0;

  double s2_mean() const;
  double s4_mean() const;
  /// Head-averaged S2 per layer.
  std::vector<double> s2_by_layer() const;

  std::vector<double> flatten() const;
  static RawSignals unflatten(std::span<const double> values, int n_layers, int n_heads, int n_depths);
};

std::size_t raw_dimension(int n_layers, int n_heads, int n_depths = 4);
std::vector<std::string> raw_names(int n_layers, int n_heads, const std::vector<double>& depth_fractions);

/// `s8_external` is 1 - entailment score, in [0,1].
RawSignals compute_raw_signals(const SampleCache& cache, double s8_external);

struct WindowSpec {
  int start_layer = 0;
  int length = kWindowLength;

  bool operator==(const WindowSpec&) const = default;
};

struct AHIWeights {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> w;  // [n_layers x n_heads], non-negative, sums to 1
  double sign = 1.0;
  std::vector<double> mu0, mu1, sigma;
};

using OrthoCoeffs = numeric::LinearFit;

struct TrainStats {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> depth_fractions{0.25, 0.50, 0.75, 1.00};
  WindowSpec window;
  AHIWeights ahi;
  double s2_mean_mu = 0.0, s2_mean_sd = 1.0;
  double s4_mean_mu = 0.0, s4_mean_sd = 1.0;
  OrthoCoeffs s6_on_s13, s13_on_s6, s14_on_s2, s16_on_s2, s17_on_s2, s18_on_s2;
  double epsilon = kEpsilon;
  std::size_t n_train = 0;
  std::string fingerprint;  // hash of training sample ids
  bool include_ahi = false;  // append AHI as an extra classifier column
};

void to_json(nlohmann::json& j, const TrainStats& s);
void from_json(const nlohmann::json& j, TrainStats& s);
void to_json(nlohmann::json& j, const WindowSpec& w);
void from_json(const nlohmann::json& j, WindowSpec& w);

/// Residual of x after removing the fitted linear dependence on y.
double orthogonalize(double x, double y, const OrthoCoeffs& coeffs);

struct WindowSelection {
  WindowSpec window;
  std::vector<double> cv_auc;  // mean validation AUC per start layer
  bool fallback = false;       // n_layers < 7: the window spans all layers
};

/// Exhaustive search over 7-layer windows with a stratified 3-fold logistic
/// probe on (mean S1, mean S2) over the window.
WindowSelection select_fixed_window(const std::vector<RawSignals>& train, std::span<const int> labels,
                                    std::uint64_t seed = 0);

/// AHI weights from per-head S2 class statistics.
AHIWeights fit_ahi(const std::vector<RawSignals>& train, std::span<const int> labels);
double ahi_score(std::span<const double> s2, const AHIWeights& weights);

struct FitStatsOptions {
  std::optional<WindowSpec> window;  // overrides cross-validated selection
  std::uint64_t seed = 0;
  std::vector<std::string> sample_ids;  // for the fingerprint
  bool include_ahi = false;
};

TrainStats fit_train_stats(const std::vector<RawSignals>& train, std::span<const int> labels,
                           const FitStatsOptions& options = {});

/// S14 before orthogonalization: window S2 / (window S3 + eps).
double grounding_ratio(const RawSignals& raw, const WindowSpec& window, double eps = kEpsilon);

struct FeatureVector {
  std::vector<double> values;
  double ahi = 0.0;
};

/// Index helper for the fixed layout:
/// [S1 x L][S4 x L][S2 x L*H][S3 x L*H][S5 x D][S6][S7a][S7b][S7c][S8]...[S18]
struct FeatureLayout {
  int n_layers = 0;
  int n_heads = 0;
  int n_depths = 4;

  std::size_t s1(int l) const { return static_cast<std::size_t>(l); }
  std::size_t s4(int l) const { return static_cast<std::size_t>(n_layers + l); }
  std::size_t s2(int l, int h) const { return static_cast<std::size_t>(2 * n_layers + l * n_heads + h); }
  std::size_t s3(int l, int h) const {
    return static_cast<std::size_t>(2 * n_layers + n_layers * n_heads + l * n_heads + h);
  }
  std::size_t scalar_begin() const { return static_cast<std::size_t>(2 * n_layers * (1 + n_heads)); }
  std::size_t size() const { return scalar_begin() + n_depths + 15; }
  /// Position of a scalar signal by name ("S5@25", "S6", "S7a", ..., "S18").
  std::size_t scalar(std::string_view name) const;
  std::vector<std::string> scalar_names(const std::vector<double>& depth_fractions) const;
  std::vector<std::string> names(const std::vector<double>& depth_fractions) const;
  /// Family label ("S1".."S18") of each column.
  std::vector<std::string> families() const;
};

std::size_t feature_dimension(int n_layers, int n_heads, int n_depths = 4);

FeatureVector assemble_features(const RawSignals& raw, const TrainStats& stats);
/// Classifier input: the feature vector, plus AHI when stats.include_ahi is set.
std::vector<double> model_input(const FeatureVector& fv, const TrainStats& stats);
FeatureVector assemble_features(const SampleCache& cache, const TrainStats& stats, double s8_external);

}  // namespace halluscope
