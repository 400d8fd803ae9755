#include "halluscope/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "halluscope/error.hpp"
#include "halluscope/numeric.hpp"

namespace halluscope::learners {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(a)) ^ splitmix64(b + 0x1234567ULL));
}

void check_xy(const Matrix& X, std::span<const int> y, const char* who) {
  require(X.rows == y.size(), ErrorKind::kInvalidArgument, std::string(who) + ": row/label count mismatch");
  require(X.rows > 0, ErrorKind::kInvalidArgument, std::string(who) + ": no rows");
  for (int v : y)
    if (v != 0 && v != 1) fail(ErrorKind::kInvalidArgument, std::string(who) + ": labels must be 0/1");
}

// ---------------------------------------------------------------------------
// Random forest tree growth on binned codes.

struct ForestBuilder {
  const std::vector<std::vector<std::uint8_t>>& codes;
  const trees::FeatureBinner& binner;
  std::span<const int> y;
  const ForestParams& params;
  int mtry;

  struct Split {
    int feature = -1;
    int bin = -1;
    double score = 0.0;
  };

  // Maximizes sum over children of (pos^2 + neg^2) / n, equivalent to the Gini decrease.
  Split best_split(std::span<const std::size_t> rows, std::span<const int> features) const {
    const double n = static_cast<double>(rows.size());
    double pos = 0.0;
    for (auto r : rows) pos += y[r];
    const double parent = (pos * pos + (n - pos) * (n - pos)) / n;
    Split best;
    best.score = parent + 1e-12;
    std::vector<double> cnt, pcnt;
    std::vector<std::pair<std::uint8_t, int>> pairs;
    const int min_leaf = params.min_samples_leaf;
    for (int f : features) {
      const int nb = binner.n_bins(f);
      if (nb < 2) continue;
      const auto& col = codes[f];
      auto consider = [&](double nl, double pl, int bin) {
        const double nr = n - nl, pr = pos - pl;
        if (nl < min_leaf || nr < min_leaf) return;
        const double s = (pl * pl + (nl - pl) * (nl - pl)) / nl + (pr * pr + (nr - pr) * (nr - pr)) / nr;
        if (s > best.score) best = {f, bin, s};
      };
      if (rows.size() * 2 < static_cast<std::size_t>(nb)) {
        pairs.clear();
        for (auto r : rows) pairs.emplace_back(col[r], y[r]);
        std::sort(pairs.begin(), pairs.end());
        double nl = 0.0, pl = 0.0;
        for (std::size_t i = 0; i + 1 < pairs.size(); ++i) {
          nl += 1.0;
          pl += pairs[i].second;
          if (pairs[i + 1].first != pairs[i].first) consider(nl, pl, pairs[i].first);
        }
      } else {
        cnt.assign(nb, 0.0);
        pcnt.assign(nb, 0.0);
        for (auto r : rows) {
          cnt[col[r]] += 1.0;
          pcnt[col[r]] += y[r];
        }
        double nl = 0.0, pl = 0.0;
        for (int b = 0; b + 1 < nb; ++b) {
          nl += cnt[b];
          pl += pcnt[b];
          if (cnt[b] == 0.0) continue;
          consider(nl, pl, b);
        }
      }
    }
    best.score -= parent;
    return best;
  }

  trees::Tree grow(std::vector<std::size_t>& rows, std::mt19937_64& rng, std::vector<double>& importance) const {
    trees::Tree tree;
    struct Item {
      int node;
      std::size_t begin, end;
      int depth;
    };
    std::vector<Item> stack;
    tree.add_leaf(0.0);
    stack.push_back({0, 0, rows.size(), 0});
    std::vector<int> feats(codes.size());
    std::iota(feats.begin(), feats.end(), 0);
    const double root_n = static_cast<double>(rows.size());
    while (!stack.empty()) {
      const Item it = stack.back();
      stack.pop_back();
      std::span<std::size_t> node_rows(rows.data() + it.begin, it.end - it.begin);
      double pos = 0.0;
      for (auto r : node_rows) pos += y[r];
      const double n = static_cast<double>(node_rows.size());
      tree.value[it.node] = pos / n;
      if (pos == 0.0 || pos == n || node_rows.size() < static_cast<std::size_t>(2 * params.min_samples_leaf) ||
          (params.max_depth >= 0 && it.depth >= params.max_depth))
        continue;
      for (int k = 0; k < mtry; ++k) {
        std::uniform_int_distribution<int> pick(k, static_cast<int>(feats.size()) - 1);
        std::swap(feats[k], feats[pick(rng)]);
      }
      const Split s = best_split(node_rows, std::span<const int>(feats.data(), mtry));
      if (s.feature < 0) continue;
      const auto& col = codes[s.feature];
      auto mid = std::partition(node_rows.begin(), node_rows.end(),
                                [&](std::size_t r) { return col[r] <= s.bin; });
      const std::size_t split_at = it.begin + static_cast<std::size_t>(mid - node_rows.begin());
      importance[s.feature] += s.score / root_n;
      const int l = tree.add_leaf(0.0);
      const int r = tree.add_leaf(0.0);
      tree.feature[it.node] = s.feature;
      tree.threshold[it.node] = binner.edges(s.feature)[s.bin];
      tree.left[it.node] = l;
      tree.right[it.node] = r;
      stack.push_back({r, split_at, it.end, it.depth + 1});
      stack.push_back({l, it.begin, split_at, it.depth + 1});
    }
    return tree;
  }
};

void normalize(std::vector<double>& v) {
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  if (s > 0.0)
    for (auto& x : v) x /= s;
}

json forest_params_json(const ForestParams& p) {
  return {{"n_trees", p.n_trees}, {"max_depth", p.max_depth}, {"min_samples_leaf", p.min_samples_leaf},
          {"max_bins", p.max_bins}};
}

ForestParams forest_params_from(const json& j) {
  ForestParams p;
  p.n_trees = j.value("n_trees", p.n_trees);
  p.max_depth = j.value("max_depth", p.max_depth);
  p.min_samples_leaf = j.value("min_samples_leaf", p.min_samples_leaf);
  p.max_bins = j.value("max_bins", p.max_bins);
  return p;
}

json boost_params_json(const BoostParams& p) {
  return {{"n_trees", p.n_trees},           {"max_depth", p.max_depth},
          {"learning_rate", p.learning_rate}, {"l2", p.l2},
          {"min_samples_leaf", p.min_samples_leaf}, {"min_child_weight", p.min_child_weight},
          {"max_bins", p.max_bins}};
}

BoostParams boost_params_from(const json& j, BoostParams p) {
  p.n_trees = j.value("n_trees", p.n_trees);
  p.max_depth = j.value("max_depth", p.max_depth);
  p.learning_rate = j.value("learning_rate", p.learning_rate);
  p.l2 = j.value("l2", p.l2);
  p.min_samples_leaf = j.value("min_samples_leaf", p.min_samples_leaf);
  p.min_child_weight = j.value("min_child_weight", p.min_child_weight);
  p.max_bins = j.value("max_bins", p.max_bins);
  return p;
}

json logistic_params_json(const LogisticParams& p) {
  return {{"C", p.C}, {"standardize", p.standardize}, {"max_iter", p.max_iter}, {"tol", p.tol}};
}

LogisticParams logistic_params_from(const json& j, LogisticParams p = {}) {
  p.C = j.value("C", p.C);
  p.standardize = j.value("standardize", p.standardize);
  p.max_iter = j.value("max_iter", p.max_iter);
  p.tol = j.value("tol", p.tol);
  return p;
}

}  // namespace

std::string to_string(BaseKind kind) {
  switch (kind) {
    case BaseKind::kLinearLogistic: return "linear-logistic";
    case BaseKind::kRandomForest: return "random-forest";
    case BaseKind::kHistGradientBoosting: return "histogram-gradient-boosting";
    case BaseKind::kGradientBoostedTrees: return "gradient-boosted-trees";
  }
  return "unknown";
}

BaseKind base_kind_from_string(const std::string& s) {
  for (auto k : {BaseKind::kLinearLogistic, BaseKind::kRandomForest, BaseKind::kHistGradientBoosting,
                 BaseKind::kGradientBoostedTrees})
    if (to_string(k) == s) return k;
  fail(ErrorKind::kConfig, "unknown base learner kind '" + s + "'");
}

BoostParams hist_boost_defaults() {
  BoostParams p;
  p.l2 = 0.0;
  p.min_samples_leaf = 20;
  p.min_child_weight = 1e-3;
  p.max_bins = 255;
  return p;
}

BoostParams exact_boost_defaults() {
  BoostParams p;
  p.l2 = 1.0;
  p.min_samples_leaf = 1;
  p.min_child_weight = 1.0;
  return p;
}

void to_json(json& j, const StackingConfig& c) {
  std::vector<std::string> kinds;
  for (auto k : c.base_kinds) kinds.push_back(to_string(k));
  j = json{{"n_folds", c.n_folds},
           {"meta_C", c.meta_C},
           {"seed", c.seed},
           {"base_kinds", kinds},
           {"linear", logistic_params_json(c.linear)},
           {"forest", forest_params_json(c.forest)},
           {"hist", boost_params_json(c.hist)},
           {"gbt", boost_params_json(c.gbt)}};
}

void from_json(const json& j, StackingConfig& c) {
  c = StackingConfig{};
  c.n_folds = j.value("n_folds", c.n_folds);
  c.meta_C = j.value("meta_C", c.meta_C);
  c.seed = j.value("seed", c.seed);
  if (j.contains("base_kinds")) {
    c.base_kinds.clear();
    for (const auto& k : j.at("base_kinds")) c.base_kinds.push_back(base_kind_from_string(k.get<std::string>()));
  }
  if (j.contains("linear")) c.linear = logistic_params_from(j.at("linear"));
  if (j.contains("forest")) c.forest = forest_params_from(j.at("forest"));
  if (j.contains("hist")) c.hist = boost_params_from(j.at("hist"), hist_boost_defaults());
  if (j.contains("gbt")) c.gbt = boost_params_from(j.at("gbt"), exact_boost_defaults());
}

// ---------------------------------------------------------------------------
// Logistic regression: Newton iterations on the L2-penalized log-loss.

void LogisticModel::fit(const Matrix& X, std::span<const int> y, std::uint64_t) {
  check_xy(X, y, "logistic");
  require(params_.C > 0.0, ErrorKind::kInvalidArgument, "logistic: C must be > 0");
  const std::size_t n = X.rows, d = X.cols;
  mean_.assign(d, 0.0);
  scale_.assign(d, 1.0);
  if (params_.standardize) {
    for (std::size_t c = 0; c < d; ++c) {
      const auto col = X.column(c);
      mean_[c] = numeric::mean(col);
      const double sd = std::sqrt(numeric::variance(col));
      scale_[c] = sd > 1e-12 ? sd : 1.0;
    }
  }
  Eigen::MatrixXd Z(n, d + 1);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) Z(r, c) = (X(r, c) - mean_[c]) / scale_[c];
    Z(r, d) = 1.0;
  }
  Eigen::VectorXd yv(n);
  for (std::size_t r = 0; r < n; ++r) yv(r) = y[r];
  const double C = params_.C;

  auto loss = [&](const Eigen::VectorXd& beta) {
    const Eigen::VectorXd z = Z * beta;
    double l = 0.5 * beta.head(d).squaredNorm();
    for (std::size_t r = 0; r < n; ++r) {
      const double zi = z(r);
      const double softplus = zi > 0 ? zi + std::log1p(std::exp(-zi)) : std::log1p(std::exp(zi));
      l += C * (softplus - yv(r) * zi);
    }
    return l;
  };

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
  double current = loss(beta);
  for (int iter = 0; iter < params_.max_iter; ++iter) {
    const Eigen::VectorXd z = Z * beta;
    Eigen::VectorXd p(n), w(n);
    for (std::size_t r = 0; r < n; ++r) {
      p(r) = numeric::sigmoid(z(r));
      w(r) = std::max(p(r) * (1.0 - p(r)), 1e-12);
    }
    Eigen::VectorXd grad = C * (Z.transpose() * (p - yv));
    grad.head(d) += beta.head(d);
    Eigen::MatrixXd H = C * (Z.transpose() * w.asDiagonal() * Z);
    for (std::size_t k = 0; k < d; ++k) H(k, k) += 1.0;
    H(d, d) += 1e-10;
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    double t = 1.0;
    Eigen::VectorXd next = beta - step;
    double next_loss = loss(next);
    while (next_loss > current && t > 1e-8) {
      t *= 0.5;
      next = beta - t * step;
      next_loss = loss(next);
    }
    if (next_loss > current) break;
    const double moved = (t * step).cwiseAbs().maxCoeff();
    beta = next;
    current = next_loss;
    if (moved < params_.tol) break;
  }
  coef_.assign(beta.data(), beta.data() + d);
  intercept_ = beta(d);
}

double LogisticModel::decision(std::span<const double> x) const {
  double z = intercept_;
  for (std::size_t c = 0; c < coef_.size(); ++c) z += coef_[c] * (x[c] - mean_[c]) / scale_[c];
  return z;
}

std::vector<double> LogisticModel::decision_function(const Matrix& X) const {
  require(X.cols == coef_.size(), ErrorKind::kInvalidArgument, "logistic: column count mismatch");
  std::vector<double> out(X.rows);
  for (std::size_t r = 0; r < X.rows; ++r) out[r] = decision(X.row(r));
  return out;
}

std::vector<double> LogisticModel::predict_proba(const Matrix& X) const {
  auto z = decision_function(X);
  for (auto& v : z) v = numeric::sigmoid(v);
  return z;
}

json LogisticModel::to_json() const {
  return {{"kind", to_string(kind())}, {"params", logistic_params_json(params_)}, {"mean", mean_},
          {"scale", scale_},           {"coef", coef_},                           {"intercept", intercept_}};
}

LogisticModel LogisticModel::from_json(const json& j) {
  LogisticModel m(logistic_params_from(j.at("params")));
  m.mean_ = j.at("mean").get<std::vector<double>>();
  m.scale_ = j.at("scale").get<std::vector<double>>();
  m.coef_ = j.at("coef").get<std::vector<double>>();
  m.intercept_ = j.at("intercept").get<double>();
  if (m.mean_.size() != m.coef_.size() || m.scale_.size() != m.coef_.size())
    fail(ErrorKind::kFormat, "logistic: inconsistent parameter lengths");
  return m;
}

// ---------------------------------------------------------------------------
// Random forest

void RandomForest::fit(const Matrix& X, std::span<const int> y, std::uint64_t seed) {
  check_xy(X, y, "random-forest");
  const trees::FeatureBinner binner(X, params_.max_bins);
  const auto codes = binner.transform(X);
  const int mtry = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(X.cols))));
  ForestBuilder builder{codes, binner, y, params_, mtry};
  trees_.clear();
  importance_.assign(X.cols, 0.0);
  std::vector<std::size_t> rows(X.rows);
  for (int t = 0; t < params_.n_trees; ++t) {
    std::mt19937_64 rng(derive_seed(seed, 0xF0, static_cast<std::uint64_t>(t)));
    std::uniform_int_distribution<std::size_t> draw(0, X.rows - 1);
    for (auto& r : rows) r = draw(rng);
    std::vector<double> imp(X.cols, 0.0);
    trees_.push_back(builder.grow(rows, rng, imp));
    normalize(imp);
    for (std::size_t c = 0; c < X.cols; ++c) importance_[c] += imp[c];
  }
  normalize(importance_);
}

std::vector<double> RandomForest::predict_proba(const Matrix& X) const {
  std::vector<double> out(X.rows, 0.0);
  for (std::size_t r = 0; r < X.rows; ++r) {
    const auto x = X.row(r);
    double s = 0.0;
    for (const auto& t : trees_) s += t.predict(x);
    out[r] = trees_.empty() ? 0.5 : s / trees_.size();
  }
  return out;
}

json RandomForest::to_json() const {
  json ts = json::array();
  for (const auto& t : trees_) ts.push_back(t);
  return {{"kind", to_string(kind())}, {"params", forest_params_json(params_)}, {"trees", ts},
          {"importance", importance_}};
}

RandomForest RandomForest::from_json(const json& j) {
  RandomForest m(forest_params_from(j.at("params")));
  for (const auto& t : j.at("trees")) m.trees_.push_back(t.get<trees::Tree>());
  m.importance_ = j.value("importance", std::vector<double>{});
  return m;
}

// ---------------------------------------------------------------------------
// Gradient boosting

namespace {

struct NodeStats {
  double G = 0.0, H = 0.0;
  double count = 0.0;
};

struct BoostSplit {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
  int bin = -1;
};

double leaf_score(double G, double H, double l2) { return G * G / (H + l2); }

}  // namespace

void GradientBoosting::fit(const Matrix& X, std::span<const int> y, std::uint64_t) {
  check_xy(X, y, binned_ ? "hist-boosting" : "gbt");
  const std::size_t n = X.rows, d = X.cols;
  double rate = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  rate = std::clamp(rate, 1e-6, 1.0 - 1e-6);
  base_score_ = std::log(rate / (1.0 - rate));
  trees_.clear();
  importance_.assign(d, 0.0);

  trees::FeatureBinner binner;
  std::vector<std::vector<std::uint8_t>> codes;
  std::vector<std::vector<std::uint32_t>> sorted;
  std::vector<std::vector<double>> cols(d);
  for (std::size_t f = 0; f < d; ++f) cols[f] = X.column(f);
  if (binned_) {
    binner = trees::FeatureBinner(X, params_.max_bins);
    codes = binner.transform(X);
  } else {
    sorted.resize(d);
    for (std::size_t f = 0; f < d; ++f) {
      sorted[f].resize(n);
      std::iota(sorted[f].begin(), sorted[f].end(), 0u);
      std::stable_sort(sorted[f].begin(), sorted[f].end(),
                       [&](std::uint32_t a, std::uint32_t b) { return cols[f][a] < cols[f][b]; });
    }
  }

  std::vector<double> F(n, base_score_), g(n), h(n);
  std::vector<int> node_of(n);
  const double l2 = params_.l2;
  const double min_leaf = params_.min_samples_leaf;
  const double min_hess = params_.min_child_weight;

  for (int it = 0; it < params_.n_trees; ++it) {
    for (std::size_t r = 0; r < n; ++r) {
      const double p = numeric::sigmoid(F[r]);
      g[r] = p - y[r];
      h[r] = std::max(p * (1.0 - p), 1e-16);
    }
    trees::Tree tree;
    tree.add_leaf(0.0);
    std::fill(node_of.begin(), node_of.end(), 0);
    std::vector<int> active{0};
    std::vector<NodeStats> stats(1);
    for (std::size_t r = 0; r < n; ++r) {
      stats[0].G += g[r];
      stats[0].H += h[r];
      stats[0].count += 1.0;
    }

    for (int depth = 0; depth < params_.max_depth && !active.empty(); ++depth) {
      // slot_of maps tree node -> position in `active`, -1 if not splitting any more.
      std::vector<int> slot_of(tree.size(), -1);
      for (std::size_t k = 0; k < active.size(); ++k) slot_of[active[k]] = static_cast<int>(k);
      std::vector<BoostSplit> best(active.size());
      std::vector<double> parent(active.size());
      for (std::size_t k = 0; k < active.size(); ++k) {
        const auto& s = stats[active[k]];
        parent[k] = leaf_score(s.G, s.H, l2);
      }
      auto consider = [&](std::size_t k, int f, double GL, double HL, double cL, double thr, int bin) {
        const auto& s = stats[active[k]];
        const double GR = s.G - GL, HR = s.H - HL, cR = s.count - cL;
        if (cL < min_leaf || cR < min_leaf || HL < min_hess || HR < min_hess) return;
        const double gain = leaf_score(GL, HL, l2) + leaf_score(GR, HR, l2) - parent[k];
        if (gain > best[k].gain + 1e-12) best[k] = {gain, f, thr, bin};
      };

      if (binned_) {
        std::vector<double> hg, hh, hc;
        for (std::size_t f = 0; f < d; ++f) {
          const int nb = binner.n_bins(f);
          if (nb < 2) continue;
          hg.assign(active.size() * nb, 0.0);
          hh.assign(active.size() * nb, 0.0);
          hc.assign(active.size() * nb, 0.0);
          const auto& col = codes[f];
          for (std::size_t r = 0; r < n; ++r) {
            const int k = slot_of[node_of[r]];
            if (k < 0) continue;
            const std::size_t at = static_cast<std::size_t>(k) * nb + col[r];
            hg[at] += g[r];
            hh[at] += h[r];
            hc[at] += 1.0;
          }
          for (std::size_t k = 0; k < active.size(); ++k) {
            double GL = 0.0, HL = 0.0, cL = 0.0;
            for (int b = 0; b + 1 < nb; ++b) {
              const std::size_t at = k * nb + b;
              GL += hg[at];
              HL += hh[at];
              cL += hc[at];
              if (hc[at] == 0.0) continue;
              consider(k, static_cast<int>(f), GL, HL, cL, binner.edges(f)[b], b);
            }
          }
        }
      } else {
        std::vector<double> GL(active.size()), HL(active.size()), cL(active.size()), last(active.size());
        std::vector<char> has_last(active.size());
        for (std::size_t f = 0; f < d; ++f) {
          std::fill(GL.begin(), GL.end(), 0.0);
          std::fill(HL.begin(), HL.end(), 0.0);
          std::fill(cL.begin(), cL.end(), 0.0);
          std::fill(has_last.begin(), has_last.end(), 0);
          const auto& col = cols[f];
          for (auto r : sorted[f]) {
            const int k = slot_of[node_of[r]];
            if (k < 0) continue;
            const double v = col[r];
            if (has_last[k] && v > last[k])
              consider(static_cast<std::size_t>(k), static_cast<int>(f), GL[k], HL[k], cL[k], 0.5 * (last[k] + v),
                       -1);
            GL[k] += g[r];
            HL[k] += h[r];
            cL[k] += 1.0;
            last[k] = v;
            has_last[k] = 1;
          }
        }
      }

      std::vector<int> next_active;
      std::vector<int> left_of(tree.size(), -1);
      for (std::size_t k = 0; k < active.size(); ++k) {
        if (best[k].feature < 0) continue;
        const int node = active[k];
        const int l = tree.add_leaf(0.0);
        const int r = tree.add_leaf(0.0);
        tree.feature[node] = best[k].feature;
        tree.threshold[node] = best[k].threshold;
        tree.left[node] = l;
        tree.right[node] = r;
        left_of[node] = l;
        importance_[best[k].feature] += best[k].gain;
        next_active.push_back(l);
        next_active.push_back(r);
      }
      stats.resize(tree.size());
      for (auto node : next_active) stats[node] = {};
      for (std::size_t r = 0; r < n; ++r) {
        const int node = node_of[r];
        if (node >= static_cast<int>(left_of.size()) || left_of[node] < 0) continue;
        const bool go_left = cols[tree.feature[node]][r] <= tree.threshold[node];
        const int child = go_left ? tree.left[node] : tree.right[node];
        node_of[r] = child;
        stats[child].G += g[r];
        stats[child].H += h[r];
        stats[child].count += 1.0;
      }
      active = std::move(next_active);
    }

    for (std::size_t node = 0; node < tree.size(); ++node) {
      if (tree.feature[node] >= 0) continue;
      const auto& s = stats[node];
      tree.value[node] = -params_.learning_rate * s.G / (s.H + l2 + 1e-12);
    }
    for (std::size_t r = 0; r < n; ++r) F[r] += tree.value[node_of[r]];
    trees_.push_back(std::move(tree));
  }
  normalize(importance_);
}

std::vector<double> GradientBoosting::raw_score(const Matrix& X) const {
  std::vector<double> out(X.rows, base_score_);
  for (std::size_t r = 0; r < X.rows; ++r) {
    const auto x = X.row(r);
    for (const auto& t : trees_) out[r] += t.predict(x);
  }
  return out;
}

std::vector<double> GradientBoosting::predict_proba(const Matrix& X) const {
  auto s = raw_score(X);
  for (auto& v : s) v = numeric::sigmoid(v);
  return s;
}

json GradientBoosting::to_json() const {
  json ts = json::array();
  for (const auto& t : trees_) ts.push_back(t);
  return {{"kind", to_string(kind())},
          {"params", boost_params_json(params_)},
          {"base_score", base_score_},
          {"trees", ts},
          {"importance", importance_}};
}

GradientBoosting GradientBoosting::from_json(const json& j) {
  const auto kind = base_kind_from_string(j.at("kind").get<std::string>());
  const bool binned = kind == BaseKind::kHistGradientBoosting;
  GradientBoosting m(boost_params_from(j.at("params"), binned ? hist_boost_defaults() : exact_boost_defaults()),
                     binned);
  m.base_score_ = j.at("base_score").get<double>();
  for (const auto& t : j.at("trees")) m.trees_.push_back(t.get<trees::Tree>());
  m.importance_ = j.value("importance", std::vector<double>{});
  return m;
}

std::unique_ptr<Classifier> make_classifier(BaseKind kind, const StackingConfig& config) {
  switch (kind) {
    case BaseKind::kLinearLogistic: return std::make_unique<LogisticModel>(config.linear);
    case BaseKind::kRandomForest: return std::make_unique<RandomForest>(config.forest);
    case BaseKind::kHistGradientBoosting: return std::make_unique<GradientBoosting>(config.hist, true);
    case BaseKind::kGradientBoostedTrees: return std::make_unique<GradientBoosting>(config.gbt, false);
  }
  fail(ErrorKind::kInvalidArgument, "make_classifier: unknown kind");
}

std::unique_ptr<Classifier> classifier_from_json(const json& j) {
  const auto kind = base_kind_from_string(j.at("kind").get<std::string>());
  switch (kind) {
    case BaseKind::kLinearLogistic: return std::make_unique<LogisticModel>(LogisticModel::from_json(j));
    case BaseKind::kRandomForest: return std::make_unique<RandomForest>(RandomForest::from_json(j));
    default: return std::make_unique<GradientBoosting>(GradientBoosting::from_json(j));
  }
}

// ---------------------------------------------------------------------------
// Stacking

std::vector<int> stratified_folds(std::span<const int> y, int n_folds, std::uint64_t seed) {
  require(n_folds >= 2, ErrorKind::kInvalidArgument, "stratified_folds: n_folds must be >= 2");
  std::vector<int> fold(y.size(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0xF01D));
  for (int cls : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) fold[idx[k]] = static_cast<int>(k % n_folds);
  }
  return fold;
}

std::string fingerprint_ids(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  std::uint64_t hash = 0xcbf29ce484222325ULL;  // FNV-1a
  for (const auto& id : ids) {
    for (unsigned char c : id) {
      hash ^= c;
      hash *= 0x100000001b3ULL;
    }
    hash ^= 0xff;
    hash *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << hash;
  return os.str();
}

Matrix StackedModel::base_probabilities(const Matrix& X) const {
  require(X.cols == n_features_, ErrorKind::kInvalidArgument,
          "predict: dimension mismatch (model expects " + std::to_string(n_features_) + " columns, got " +
              std::to_string(X.cols) + ")");
  Matrix P(X.rows, bases_.size());
  for (std::size_t b = 0; b < bases_.size(); ++b) {
    const auto p = bases_[b]->predict_proba(X);
    for (std::size_t r = 0; r < X.rows; ++r) P(r, b) = p[r];
  }
  return P;
}

Prediction StackedModel::predict(const Matrix& X) const {
  const Matrix P = base_probabilities(X);
  Prediction out;
  out.meta_logit = meta_.decision_function(P);
  out.probability.resize(out.meta_logit.size());
  for (std::size_t i = 0; i < out.meta_logit.size(); ++i) out.probability[i] = numeric::sigmoid(out.meta_logit[i]);
  return out;
}

json StackedModel::to_json() const {
  json bases = json::array();
  for (const auto& b : bases_) bases.push_back(b->to_json());
  return {{"format", "halluscope-model"},
          {"version", 1},
          {"specialist", specialist_},
          {"n_features", n_features_},
          {"config", config_},
          {"fingerprint",
           {{"dataset_tags", fingerprint_.dataset_tags},
            {"rows", fingerprint_.rows},
            {"seed", fingerprint_.seed},
            {"row_hash", fingerprint_.row_hash}}},
          {"bases", bases},
          {"meta", meta_.to_json()}};
}

StackedModel StackedModel::from_json(const json& j) {
  if (j.value("format", std::string{}) != "halluscope-model" || j.value("version", 0) != 1)
    fail(ErrorKind::kFormat, "model artifact: unsupported format or version");
  StackedModel m;
  try {
    m.specialist_ = j.at("specialist").get<bool>();
    m.n_features_ = j.at("n_features").get<std::size_t>();
    m.config_ = j.at("config").get<StackingConfig>();
    const auto& fp = j.at("fingerprint");
    m.fingerprint_.dataset_tags = fp.at("dataset_tags").get<std::vector<std::string>>();
    m.fingerprint_.rows = fp.at("rows").get<std::size_t>();
    m.fingerprint_.seed = fp.at("seed").get<std::uint64_t>();
    m.fingerprint_.row_hash = fp.at("row_hash").get<std::string>();
    for (const auto& b : j.at("bases")) m.bases_.push_back(classifier_from_json(b));
    m.meta_ = LogisticModel::from_json(j.at("meta"));
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("model artifact: ") + e.what());
  }
  if (m.meta_.coef().size() != m.bases_.size()) fail(ErrorKind::kFormat, "model artifact: meta/base count mismatch");
  return m;
}

StackedModel fit_stacking(const Matrix& X, std::span<const int> y, const StackingConfig& config,
                          std::span<const std::string> dataset_tags, std::span<const std::string> row_ids) {
  check_xy(X, y, "fit_stacking");
  require(config.n_folds >= 2, ErrorKind::kInvalidArgument, "fit_stacking: n_folds must be >= 2");
  require(config.meta_C > 0.0, ErrorKind::kInvalidArgument, "fit_stacking: meta C must be > 0");
  require(!config.base_kinds.empty(), ErrorKind::kInvalidArgument, "fit_stacking: no base learners");
  std::vector<std::size_t> bad;
  for (std::size_t r = 0; r < X.rows; ++r)
    for (double v : X.row(r))
      if (!std::isfinite(v)) {
        bad.push_back(r);
        break;
      }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "fit_stacking: non-finite rows rejected:";
    for (std::size_t i = 0; i < bad.size() && i < 20; ++i) os << ' ' << bad[i];
    if (bad.size() > 20) os << " ...";
    fail(ErrorKind::kValidation, os.str());
  }
  const auto n_pos = static_cast<int>(std::count(y.begin(), y.end(), 1));
  const auto n_neg = static_cast<int>(y.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) fail(ErrorKind::kValidation, "fit_stacking: both classes required");
  if (std::min(n_pos, n_neg) < config.n_folds)
    fail(ErrorKind::kValidation, "fit_stacking: each class needs at least n_folds rows");

  StackedModel model;
  model.config_ = config;
  model.n_features_ = X.cols;
  const std::size_t n_bases = config.base_kinds.size();
  auto& trace = model.trace_;
  trace.fold_of_row = stratified_folds(y, config.n_folds, config.seed);
  trace.oof = Matrix(X.rows, n_bases);
  trace.train_rows.resize(config.n_folds);

  for (int k = 0; k < config.n_folds; ++k) {
    std::vector<std::size_t> train, held;
    for (std::size_t r = 0; r < X.rows; ++r) (trace.fold_of_row[r] == k ? held : train).push_back(r);
    const Matrix Xtr = X.select_rows(train), Xho = X.select_rows(held);
    std::vector<int> ytr;
    for (auto r : train) ytr.push_back(y[r]);
    for (std::size_t b = 0; b < n_bases; ++b) {
      auto clf = make_classifier(config.base_kinds[b], config);
      clf->fit(Xtr, ytr, derive_seed(config.seed, 100 + b, static_cast<std::uint64_t>(k)));
      const auto p = clf->predict_proba(Xho);
      for (std::size_t i = 0; i < held.size(); ++i) trace.oof(held[i], b) = p[i];
    }
    trace.train_rows[k] = std::move(train);
  }

  model.meta_ = LogisticModel(LogisticParams{config.meta_C, false, 100, 1e-10});
  model.meta_.fit(trace.oof, y);

  for (std::size_t b = 0; b < n_bases; ++b) {
    auto clf = make_classifier(config.base_kinds[b], config);
    clf->fit(X, y, derive_seed(config.seed, 100 + b, 0xFFFF));
    model.bases_.push_back(std::move(clf));
  }

  auto& fp = model.fingerprint_;
  fp.rows = X.rows;
  fp.seed = config.seed;
  std::set<std::string> tags(dataset_tags.begin(), dataset_tags.end());
  fp.dataset_tags.assign(tags.begin(), tags.end());
  if (!row_ids.empty()) fp.row_hash = fingerprint_ids({row_ids.begin(), row_ids.end()});
  return model;
}

StackedModel fit_ragt_stacking(const Matrix& X, std::span<const int> y, std::span<const std::string> dataset_tags,
                               const StackingConfig& config, const std::string& tag,
                               std::span<const std::string> row_ids) {
  require(dataset_tags.size() == X.rows, ErrorKind::kInvalidArgument, "fit_ragt_stacking: tag count mismatch");
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < X.rows; ++r)
    if (dataset_tags[r] == tag) keep.push_back(r);
  if (keep.empty()) fail(ErrorKind::kValidation, "fit_ragt_stacking: no rows with dataset tag '" + tag + "'");
  std::vector<int> ys;
  std::vector<std::string> tags, ids;
  for (auto r : keep) {
    ys.push_back(y[r]);
    tags.push_back(dataset_tags[r]);
    if (!row_ids.empty()) ids.push_back(row_ids[r]);
  }
  StackedModel m = fit_stacking(X.select_rows(keep), ys, config, tags, ids);
  m.specialist_ = true;
  return m;
}

}  // namespace halluscope::learners
