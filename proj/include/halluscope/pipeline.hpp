#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halluscope/cache_io.hpp"
#include "halluscope/calibration.hpp"
#include "halluscope/feature_io.hpp"
#include "halluscope/learners.hpp"
#include "halluscope/signals.hpp"
#include "halluscope/synth.hpp"

namespace halluscope::pipeline {

namespace fs = std::filesystem;

inline constexpr int kPredictSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

struct Paths {
  fs::path work_dir = "work";
  fs::path cache, ood_cache, features, ood_features, stats, models, bundle, predictions, reports;

  /// Fills unset paths with defaults under work_dir.
  void resolve();
};

enum class S8Kind { kMetadata, kConstant, kPlugin };

/// "metadata", "constant", or "plugin:<command>". The plugin reads JSON lines
/// {sample_id, source, question, answer} on stdin and writes {sample_id, score}.
struct S8Source {
  S8Kind kind = S8Kind::kMetadata;
  std::string command;

  static S8Source parse(const std::string& text);
  std::string str() const;
};

struct SynthConfig {
  std::string mode = "mixture";  // "mixture" or "plant"
  synth::MixtureSpec mixture = synth::benchmark_mixture(2000, 0);
  synth::PlantSpec plant{};
  bool write_ood = true;  // also write a long-source cache for stability analysis
};

struct PipelineConfig {
  Paths paths;
  std::uint64_t seed = 0;
  std::optional<int> window_start;
  bool include_ahi = false;
  S8Source s8;
  SynthConfig synth;
  features::SplitFractions split;
  learners::StackingConfig stacking;
  calibration::CalibrationOptions calibration;
  std::optional<double> fixed_threshold;  // default: max-F1 on validation

  void validate() const;
};

PipelineConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir = ".");
nlohmann::json config_to_json(const PipelineConfig& c);
/// Reads `path`, else $HALLUSCOPE_CONFIG, else defaults.
PipelineConfig load_config(const std::optional<fs::path>& path);

/// S8 value (1 - entailment score) for each sample.
std::vector<double> s8_values(const std::vector<SampleRecord>& records, const S8Source& source);
double s8_value(const SampleCache& sample, const S8Source& source);

/// Raw signal table for every sample of a cache; splits assigned when `assign_splits`.
features::FeatureTable extract_table(const fs::path& cache_dir, const S8Source& s8, bool assign_splits,
                                     std::uint64_t seed, const features::SplitFractions& split = {});

/// Assembled classifier features for the given rows of a raw table.
Matrix assemble_rows(const features::FeatureTable& raw, std::span<const std::size_t> idx, const TrainStats& stats,
                     std::vector<double>* ahi = nullptr);

/// Forest impurity importance summed per signal family ("S1".."S18", plus "AHI" when included).
std::map<std::string, double> family_importance(const learners::StackedModel& model, const TrainStats& stats);

struct PredictRecord {
  std::string sample_id;
  std::string model_used;
  double meta_logit = 0.0;
  double raw = 0.5;
  double calibrated = 0.5;
  int decision = 0;
  std::string regime;
};

nlohmann::json to_json(const PredictRecord& r);

/// Loaded artifacts for scoring; immutable after construction.
class Detector {
 public:
  Detector(TrainStats stats, learners::StackedModel generalist, std::optional<learners::StackedModel> specialist,
           calibration::CalibrationBundle bundle, S8Source s8);
  static Detector load(const PipelineConfig& config);

  PredictRecord detect(const SampleCache& sample) const;
  PredictRecord detect(const std::string& sample_id, const RawSignals& raw, const SampleMeta& meta) const;
  std::vector<std::string> registered() const;
  const TrainStats& stats() const { return stats_; }
  const calibration::CalibrationBundle& bundle() const { return bundle_; }
  const S8Source& s8() const { return s8_; }

 private:
  TrainStats stats_;
  learners::StackedModel generalist_;
  std::optional<learners::StackedModel> specialist_;
  calibration::CalibrationBundle bundle_;
  S8Source s8_;
};

void cmd_synth(const PipelineConfig& c);
void cmd_extract(const PipelineConfig& c);
void cmd_fit_stats(const PipelineConfig& c);
void cmd_train(const PipelineConfig& c);
void cmd_calibrate(const PipelineConfig& c);
/// Scores every sample of `cache_dir` (default: the configured cache).
void cmd_predict(const PipelineConfig& c, const std::optional<fs::path>& cache_dir = std::nullopt);
void cmd_evaluate(const PipelineConfig& c);
void cmd_analyze(const PipelineConfig& c);

nlohmann::json read_json(const fs::path& path, const std::string& what);
void write_json(const fs::path& path, const nlohmann::json& j);

}  // namespace halluscope::pipeline
