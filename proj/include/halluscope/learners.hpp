#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halluscope/matrix.hpp"
#include "halluscope/trees.hpp"

namespace halluscope::learners {

enum class BaseKind { kLinearLogistic, kRandomForest, kHistGradientBoosting, kGradientBoostedTrees };

std::string to_string(BaseKind kind);
BaseKind base_kind_from_string(const std::string& s);

struct LogisticParams {
  double C = 1.0;  // inverse L2 strength; intercept is unpenalized
  bool standardize = true;
  int max_iter = 100;
  double tol = 1e-10;
};

struct ForestParams {
  int n_trees = 300;
  int max_depth = -1;  // unlimited
  int min_samples_leaf = 1;
  int max_bins = 64;
};

struct BoostParams {
  int n_trees = 200;
  int max_depth = 6;
  double learning_rate = 0.1;
  double l2 = 0.0;
  int min_samples_leaf = 1;
  double min_child_weight = 0.0;
  int max_bins = 255;  // histogram member only
};

/// Histogram boosting defaults (binned splits, leaves of >= 20 rows, no L2).
BoostParams hist_boost_defaults();
/// Exact-split Newton boosting defaults (lambda 1, min child hessian 1).
BoostParams exact_boost_defaults();

struct StackingConfig {
  int n_folds = 3;
  double meta_C = 0.1;
  std::uint64_t seed = 0;
  std::vector<BaseKind> base_kinds{BaseKind::kLinearLogistic, BaseKind::kRandomForest,
                                   BaseKind::kHistGradientBoosting, BaseKind::kGradientBoostedTrees};
  LogisticParams linear{};
  ForestParams forest{};
  BoostParams hist = hist_boost_defaults();
  BoostParams gbt = exact_boost_defaults();
};

void to_json(nlohmann::json& j, const StackingConfig& c);
void from_json(const nlohmann::json& j, StackingConfig& c);

/// Probabilistic binary classifier.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual void fit(const Matrix& X, std::span<const int> y, std::uint64_t seed) = 0;
  virtual std::vector<double> predict_proba(const Matrix& X) const = 0;
  virtual BaseKind kind() const = 0;
  virtual nlohmann::json to_json() const = 0;
  /// Impurity/gain importance per column, normalized to sum 1; empty if unsupported.
  virtual std::vector<double> feature_importance() const { return {}; }
};

std::unique_ptr<Classifier> make_classifier(BaseKind kind, const StackingConfig& config);
std::unique_ptr<Classifier> classifier_from_json(const nlohmann::json& j);

class LogisticModel final : public Classifier {
 public:
  explicit LogisticModel(LogisticParams params = {}) : params_(params) {}

  void fit(const Matrix& X, std::span<const int> y, std::uint64_t seed = 0) override;
  std::vector<double> predict_proba(const Matrix& X) const override;
  std::vector<double> decision_function(const Matrix& X) const;
  double decision(std::span<const double> x) const;
  BaseKind kind() const override { return BaseKind::kLinearLogistic; }
  nlohmann::json to_json() const override;
  static LogisticModel from_json(const nlohmann::json& j);

  const std::vector<double>& coef() const { return coef_; }
  double intercept() const { return intercept_; }

 private:
  LogisticParams params_;
  std::vector<double> mean_, scale_;
  std::vector<double> coef_;
  double intercept_ = 0.0;
};

class RandomForest final : public Classifier {
 public:
  explicit RandomForest(ForestParams params = {}) : params_(params) {}

  void fit(const Matrix& X, std::span<const int> y, std::uint64_t seed) override;
  std::vector<double> predict_proba(const Matrix& X) const override;
  BaseKind kind() const override { return BaseKind::kRandomForest; }
  nlohmann::json to_json() const override;
  static RandomForest from_json(const nlohmann::json& j);
  std::vector<double> feature_importance() const override { return importance_; }
  const std::vector<trees::Tree>& trees() const { return trees_; }

 private:
  ForestParams params_;
  std::vector<trees::Tree> trees_;
  std::vector<double> importance_;
};

/// Newton-step gradient boosting on log-loss. `binned` selects histogram split
/// finding; otherwise splits are exact over sorted feature values.
class GradientBoosting final : public Classifier {
 public:
  GradientBoosting(BoostParams params, bool binned) : params_(params), binned_(binned) {}

  void fit(const Matrix& X, std::span<const int> y, std::uint64_t seed) override;
  std::vector<double> predict_proba(const Matrix& X) const override;
  std::vector<double> raw_score(const Matrix& X) const;
  BaseKind kind() const override {
    return binned_ ? BaseKind::kHistGradientBoosting : BaseKind::kGradientBoostedTrees;
  }
  nlohmann::json to_json() const override;
  static GradientBoosting from_json(const nlohmann::json& j);
  std::vector<double> feature_importance() const override { return importance_; }

 private:
  BoostParams params_;
  bool binned_;
  double base_score_ = 0.0;
  std::vector<trees::Tree> trees_;
  std::vector<double> importance_;
};

/// Fold assignment with per-class shuffling so every fold keeps the class ratio.
std::vector<int> stratified_folds(std::span<const int> y, int n_folds, std::uint64_t seed);

/// Bookkeeping of the out-of-fold construction; not serialized.
struct StackingTrace {
  std::vector<int> fold_of_row;
  std::vector<std::vector<std::size_t>> train_rows;  // per fold: rows the fold's bases were fit on
  Matrix oof;                                        // [n x n_bases]
};

struct TrainingFingerprint {
  std::vector<std::string> dataset_tags;  // distinct, sorted
  std::size_t rows = 0;
  std::uint64_t seed = 0;
  std::string row_hash;
};

struct Prediction {
  std::vector<double> probability;
  std::vector<double> meta_logit;
};

class StackedModel {
 public:
  StackedModel() = default;

  Prediction predict(const Matrix& X) const;
  std::vector<double> predict_proba(const Matrix& X) const { return predict(X).probability; }
  /// Base-member probabilities [n x n_bases].
  Matrix base_probabilities(const Matrix& X) const;

  const StackingConfig& config() const { return config_; }
  const TrainingFingerprint& fingerprint() const { return fingerprint_; }
  const StackingTrace& trace() const { return trace_; }
  const std::vector<std::shared_ptr<const Classifier>>& bases() const { return bases_; }
  const LogisticModel& meta() const { return meta_; }
  std::size_t n_features() const { return n_features_; }
  bool specialist() const { return specialist_; }

  nlohmann::json to_json() const;
  static StackedModel from_json(const nlohmann::json& j);

 private:
  friend StackedModel fit_stacking(const Matrix&, std::span<const int>, const StackingConfig&,
                                   std::span<const std::string>, std::span<const std::string>);
  friend StackedModel fit_ragt_stacking(const Matrix&, std::span<const int>, std::span<const std::string>,
                                        const StackingConfig&, const std::string&, std::span<const std::string>);

  std::vector<std::shared_ptr<const Classifier>> bases_;
  LogisticModel meta_{LogisticParams{0.1, false, 100, 1e-10}};
  StackingConfig config_;
  TrainingFingerprint fingerprint_;
  StackingTrace trace_;
  std::size_t n_features_ = 0;
  bool specialist_ = false;
};

/// Out-of-fold stacking with a logistic meta-learner; bases are refit on all rows.
/// `dataset_tags` and `row_ids` feed the fingerprint and may be empty.
StackedModel fit_stacking(const Matrix& X, std::span<const int> y, const StackingConfig& config,
                          std::span<const std::string> dataset_tags = {}, std::span<const std::string> row_ids = {});

/// Same procedure restricted to rows whose dataset tag equals `tag`.
StackedModel fit_ragt_stacking(const Matrix& X, std::span<const int> y, std::span<const std::string> dataset_tags,
                               const StackingConfig& config, const std::string& tag = "ragtruth",
                               std::span<const std::string> row_ids = {});

/// Hash of a sorted id list, hex encoded.
std::string fingerprint_ids(std::vector<std::string> ids);

}  // namespace halluscope::learners
