#include "halluscope/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <set>

#include <spdlog/spdlog.h>

#include "halluscope/error.hpp"
#include "halluscope/eval.hpp"
#include "halluscope/numeric.hpp"

namespace halluscope::calibration {

using nlohmann::json;

namespace {

// Batch scoring would otherwise repeat the same warning per row.
void warn_once(const std::string& key, const std::string& msg) {
  static std::mutex mu;
  static std::set<std::string> seen;
  std::lock_guard lock(mu);
  if (seen.insert(key).second) spdlog::warn("{}", msg);
}

}  // namespace

double apply_temperature(double meta_logit, double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorKind::kInvalidArgument,
          "temperature must be positive");
  return numeric::sigmoid(meta_logit / temperature);
}

std::vector<double> apply_temperature(std::span<const double> meta_logits, double temperature) {
  std::vector<double> out(meta_logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_temperature(meta_logits[i], temperature);
  return out;
}

double IsotonicMap::operator()(double s) const {
  require(!breakpoints.empty(), ErrorKind::kInvalidArgument, "isotonic map is empty");
  if (s <= breakpoints.front()) return values.front();
  if (s >= breakpoints.back()) return values.back();
  const auto hi = static_cast<std::size_t>(std::upper_bound(breakpoints.begin(), breakpoints.end(), s) -
                                           breakpoints.begin());
  const std::size_t lo = hi - 1;
  const double t = (s - breakpoints[lo]) / (breakpoints[hi] - breakpoints[lo]);
  return values[lo] + t * (values[hi] - values[lo]);
}

std::vector<double> IsotonicMap::apply(std::span<const double> scores) const {
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*this)(scores[i]);
  return out;
}

IsotonicMap fit_isotonic(std::span<const double> scores, std::span<const int> labels, const std::string& fit_source,
                         const IsotonicOptions& options) {
  require(scores.size() == labels.size(), ErrorKind::kInvalidArgument, "fit_isotonic: size mismatch");
  require(scores.size() >= options.min_pairs, ErrorKind::kValidation,
          "fit_isotonic: needs at least " + std::to_string(options.min_pairs) + " pairs");
  const auto n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos == 0 || n_pos == static_cast<long>(labels.size()))
    fail(ErrorKind::kValidation, "fit_isotonic: both classes required");
  for (double s : scores)
    if (!std::isfinite(s)) fail(ErrorKind::kValidation, "fit_isotonic: non-finite score");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });

  struct Block {
    double sum, weight;
    std::size_t first, last;  // range of distinct-score indices
  };
  std::vector<double> knots;
  std::vector<Block> blocks;
  for (auto i : order) {
    if (knots.empty() || scores[i] != knots.back()) {
      knots.push_back(scores[i]);
      blocks.push_back({0.0, 0.0, knots.size() - 1, knots.size() - 1});
    }
    blocks.back().sum += labels[i];
    blocks.back().weight += 1.0;
  }
  std::vector<Block> stack;
  for (const auto& b : blocks) {
    stack.push_back(b);
    while (stack.size() > 1) {
      auto& top = stack.back();
      auto& prev = stack[stack.size() - 2];
      if (prev.sum / prev.weight <= top.sum / top.weight) break;
      prev.sum += top.sum;
      prev.weight += top.weight;
      prev.last = top.last;
      stack.pop_back();
    }
  }
  IsotonicMap m;
  m.fit_source = fit_source;
  m.breakpoints = knots;
  m.values.resize(knots.size());
  for (const auto& b : stack)
    for (std::size_t k = b.first; k <= b.last; ++k) m.values[k] = b.sum / b.weight;
  return m;
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::kQA: return "qa";
    case Regime::kClaim: return "claim";
    case Regime::kGlobal: return "global";
  }
  return "global";
}

Regime regime_from_string(const std::string& s) {
  if (s == "qa") return Regime::kQA;
  if (s == "claim") return Regime::kClaim;
  if (s == "global") return Regime::kGlobal;
  fail(ErrorKind::kFormat, "unknown regime '" + s + "'");
}

Regime RegimeRules::regime_of(const std::string& tag) const {
  for (const auto& p : qa_prefixes)
    if (tag.rfind(p, 0) == 0) return Regime::kQA;
  if (std::find(claim_tags.begin(), claim_tags.end(), tag) != claim_tags.end()) return Regime::kClaim;
  return Regime::kGlobal;
}

const IsotonicMap& CalibrationBundle::map_for(Regime r) const {
  auto it = maps.find(r);
  if (it == maps.end() || it->second.fallback) it = maps.find(Regime::kGlobal);
  if (it == maps.end()) fail(ErrorKind::kMissingArtifact, "calibration bundle has no global map");
  return it->second.map;
}

std::vector<std::string> CalibrationBundle::fitting_overlap(std::span<const std::string> ids) const {
  std::vector<std::string> out;
  for (const auto& id : ids) {
    for (const auto& [r, fit] : maps) {
      if (std::binary_search(fit.sample_ids.begin(), fit.sample_ids.end(), id)) {
        out.push_back(id);
        break;
      }
    }
  }
  return out;
}

CalibrationBundle fit_calibration(std::span<const CalibrationRow> rows, const CalibrationOptions& options) {
  CalibrationBundle b;
  b.temperature = options.temperature;
  b.regime_rules = options.regime_rules;
  b.routing_rules = options.routing_rules;

  std::map<Regime, std::vector<std::size_t>> members;
  std::vector<double> p(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    p[i] = apply_temperature(rows[i].meta_logit, b.temperature);
    members[b.regime_rules.regime_of(rows[i].dataset_tag)].push_back(i);
  }
  const IsotonicOptions iso{options.min_pairs};
  auto fit_on = [&](Regime r, const std::vector<std::size_t>& idx) {
    std::vector<double> s;
    std::vector<int> y;
    RegimeFit fit;
    for (auto i : idx) {
      s.push_back(p[i]);
      y.push_back(rows[i].label);
      fit.sample_ids.push_back(rows[i].sample_id);
    }
    std::sort(fit.sample_ids.begin(), fit.sample_ids.end());
    fit.map = fit_isotonic(s, y, to_string(r), iso);
    return fit;
  };

  std::vector<std::size_t> all(rows.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  b.maps[Regime::kGlobal] = fit_on(Regime::kGlobal, all);
  for (Regime r : {Regime::kQA, Regime::kClaim}) {
    const auto& idx = members[r];
    long pos = 0;
    for (auto i : idx) pos += rows[i].label;
    if (idx.size() < options.min_pairs || pos == 0 || pos == static_cast<long>(idx.size())) {
      if (!idx.empty())
        spdlog::warn("calibration: regime {} has {} usable rows; falling back to the global map", to_string(r),
                     idx.size());
      RegimeFit fb;
      fb.fallback = true;
      b.maps[r] = fb;
      continue;
    }
    b.maps[r] = fit_on(r, idx);
  }

  std::vector<double> ragt, halu;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].dataset_tag == b.routing_rules.specialist_domain) ragt.push_back(p[i]);
    if (b.regime_rules.regime_of(rows[i].dataset_tag) == Regime::kQA) halu.push_back(p[i]);
  }
  if (!ragt.empty() && !halu.empty()) {
    b.ks_ragtruth_halueval = eval::ks_distance(ragt, halu);
    if (b.ks_ragtruth_halueval > options.ks_threshold) {
      b.ks_warning = true;
      spdlog::warn("calibration: KS distance between ragtruth and halueval scores is {:.3f} (> {:.2f})",
                   b.ks_ragtruth_halueval, options.ks_threshold);
    }
  }

  std::vector<double> calibrated(rows.size());
  std::vector<int> y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    calibrated[i] = b.map_for(b.regime_rules.regime_of(rows[i].dataset_tag))(p[i]);
    y[i] = rows[i].label;
  }
  b.threshold = eval::best_f1_threshold(calibrated, y);
  return b;
}

Calibrated calibrate(double probability, const SampleMeta& meta, const CalibrationBundle& bundle) {
  Calibrated c;
  c.regime = bundle.regime_rules.regime_of(meta.dataset_tag);
  if (c.regime == Regime::kGlobal) {
    c.defaulted = true;
    if (meta.dataset_tag.empty())
      warn_once("calibrate:", "calibrate: samples without a dataset tag use the global map");
    else
      warn_once("calibrate:" + meta.dataset_tag,
                "calibrate: dataset tag '" + meta.dataset_tag + "' has no regime; using the global map");
  }
  c.probability = bundle.map_for(c.regime)(probability);
  return c;
}

Routed route(const SampleMeta& meta, std::span<const std::string> registered, const RoutingRules& rules) {
  Routed r;
  if (meta.domain_tag.empty()) {
    r.defaulted = true;
    warn_once("route:", "route: samples without a domain tag go to the generalist");
  }
  r.model_id = meta.domain_tag == rules.specialist_domain ? kSpecialist : kGeneralist;
  if (std::find(registered.begin(), registered.end(), r.model_id) == registered.end())
    fail(ErrorKind::kMissingArtifact, "route: model '" + r.model_id + "' is not registered");
  return r;
}

double expected_calibration_error(std::span<const double> probs, std::span<const int> labels, int n_bins) {
  require(probs.size() == labels.size() && !probs.empty(), ErrorKind::kInvalidArgument, "ece: size mismatch");
  std::vector<double> conf(n_bins, 0.0), acc(n_bins, 0.0), cnt(n_bins, 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const int b = std::clamp(static_cast<int>(probs[i] * n_bins), 0, n_bins - 1);
    conf[b] += probs[i];
    acc[b] += labels[i];
    cnt[b] += 1.0;
  }
  double ece = 0.0;
  for (int b = 0; b < n_bins; ++b)
    if (cnt[b] > 0) ece += std::abs(acc[b] - conf[b]) / static_cast<double>(probs.size());
  return ece;
}

// ---------------------------------------------------------------------------

void to_json(json& j, const CalibrationBundle& b) {
  json maps = json::object();
  for (const auto& [r, fit] : b.maps) {
    maps[to_string(r)] = {{"breakpoints", fit.map.breakpoints},
                          {"values", fit.map.values},
                          {"fit_source", fit.map.fit_source},
                          {"fallback", fit.fallback},
                          {"fingerprint", fit.sample_ids}};
  }
  j = json{{"format", "halluscope-calibration"},
           {"version", 1},
           {"temperature", b.temperature},
           {"maps", maps},
           {"regime_rules", {{"qa_prefixes", b.regime_rules.qa_prefixes}, {"claim_tags", b.regime_rules.claim_tags}}},
           {"routing_rules", {{"specialist_domain", b.routing_rules.specialist_domain}}},
           {"threshold", b.threshold},
           {"ks_ragtruth_halueval", b.ks_ragtruth_halueval},
           {"ks_warning", b.ks_warning}};
}

void from_json(const json& j, CalibrationBundle& b) {
  if (j.value("format", std::string{}) != "halluscope-calibration")
    fail(ErrorKind::kFormat, "calibration bundle: unexpected format tag");
  try {
    b.temperature = j.at("temperature").get<double>();
    b.maps.clear();
    for (const auto& [name, m] : j.at("maps").items()) {
      RegimeFit fit;
      fit.map.breakpoints = m.at("breakpoints").get<std::vector<double>>();
      fit.map.values = m.at("values").get<std::vector<double>>();
      fit.map.fit_source = m.value("fit_source", name);
      fit.fallback = m.value("fallback", false);
      fit.sample_ids = m.value("fingerprint", std::vector<std::string>{});
      if (fit.map.breakpoints.size() != fit.map.values.size())
        fail(ErrorKind::kFormat, "calibration bundle: knot/value mismatch in " + name);
      b.maps[regime_from_string(name)] = std::move(fit);
    }
    const auto& rr = j.at("regime_rules");
    b.regime_rules.qa_prefixes = rr.at("qa_prefixes").get<std::vector<std::string>>();
    b.regime_rules.claim_tags = rr.at("claim_tags").get<std::vector<std::string>>();
    b.routing_rules.specialist_domain = j.at("routing_rules").at("specialist_domain").get<std::string>();
    b.threshold = j.at("threshold").get<double>();
    b.ks_ragtruth_halueval = j.value("ks_ragtruth_halueval", -1.0);
    b.ks_warning = j.value("ks_warning", false);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("calibration bundle: ") + e.what());
  }
  require(b.temperature > 0.0, ErrorKind::kFormat, "calibration bundle: temperature must be positive");
  if (!b.maps.count(Regime::kGlobal)) fail(ErrorKind::kFormat, "calibration bundle: missing global map");
}

}  // namespace halluscope::calibration
