#include "halluscope/signals.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "halluscope/error.hpp"
#include "halluscope/eval.hpp"
#include "halluscope/learners.hpp"

namespace halluscope {

using nlohmann::json;

namespace {

const std::vector<std::string>& trailing_scalars() {
  static const std::vector<std::string> names{"S6",  "S7a", "S7b", "S7c", "S8",  "S9",  "S10", "S11",
                                              "S12", "S13", "S14", "S15", "S16", "S17", "S18"};
  return names;
}

double window_mean_s1(const RawSignals& raw, const WindowSpec& w) {
  double s = 0.0;
  for (int l = w.start_layer; l < w.start_layer + w.length; ++l) s += raw.s1[l];
  return s / w.length;
}

double window_mean_heads(const std::vector<double>& per_head, int n_heads, const WindowSpec& w) {
  double s = 0.0;
  for (int l = w.start_layer; l < w.start_layer + w.length; ++l)
    for (int h = 0; h < n_heads; ++h) s += per_head[static_cast<std::size_t>(l) * n_heads + h];
  return s / (static_cast<double>(w.length) * n_heads);
}

json fit_json(const OrthoCoeffs& c) { return {{"slope", c.slope}, {"intercept", c.intercept}}; }
OrthoCoeffs fit_from(const json& j) { return {j.at("slope").get<double>(), j.at("intercept").get<double>()}; }

}  // namespace

// ---------------------------------------------------------------------------
// Per-sample signals

LayerSignals compute_layer_signals(const SampleCache& c) {
  require(!c.roles.answer_idx.empty(), ErrorKind::kValidation, "layer signals: empty answer_idx");
  const int nl = c.n_layers();
  LayerSignals out;
  out.s1.assign(nl, 0.0);
  out.s4.assign(nl, 0.0);
  const double na = static_cast<double>(c.n_answer());
  for (int l = 0; l < nl; ++l) {
    for (int tok : c.roles.answer_idx) {
      out.s1[l] += c.resid(l, tok);
      out.s4[l] += c.mlp(l, tok);
    }
    out.s1[l] /= na;
    out.s4[l] /= na;
  }
  out.s15 = numeric::slope_over_index(out.s1);
  return out;
}

AttentionSignals compute_attention_signals(const SampleCache& c) {
  const auto& src = c.roles.source_idx;
  require(src.size() >= 2, ErrorKind::kValidation, "attention signals: entropy needs at least two source tokens");
  require(!c.roles.answer_idx.empty(), ErrorKind::kValidation, "attention signals: empty answer_idx");
  const int nl = c.n_layers(), nh = c.n_heads(), na = c.n_answer();
  const double max_entropy = std::log(static_cast<double>(src.size()));
  AttentionSignals out;
  out.s2.assign(static_cast<std::size_t>(nl) * nh, 0.0);
  out.s3.assign(out.s2.size(), 0.0);
  out.tau.assign(na, 0.0);
  for (int l = 0; l < nl; ++l) {
    for (int h = 0; h < nh; ++h) {
      const std::size_t cell = static_cast<std::size_t>(l) * nh + h;
      for (int i = 0; i < na; ++i) {
        double mass = 0.0;
        for (int t : src) mass += c.attn(l, h, i, t);
        double ent = max_entropy;
        if (mass >= kEpsilon) {
          ent = 0.0;
          for (int t : src) {
            const double p = c.attn(l, h, i, t) / mass;
            if (p > 0.0) ent -= p * std::log(p);
          }
        }
        out.s2[cell] += mass;
        out.s3[cell] += ent;
        out.tau[i] += mass;
      }
      out.s2[cell] /= na;
      out.s3[cell] /= na;
    }
  }
  for (auto& t : out.tau) t /= static_cast<double>(nl) * nh;
  return out;
}

int depth_layer(double fraction, int n_layers) {
  const int idx = static_cast<int>(std::ceil(fraction * n_layers - 1e-12)) - 1;
  return std::clamp(idx, 0, n_layers - 1);
}

LogitSignals compute_logit_signals(const SampleCache& c) {
  require(!c.roles.answer_idx.empty(), ErrorKind::kValidation, "logit signals: empty answer_idx");
  const int nl = c.n_layers(), na = c.n_answer();
  std::vector<double> layer_mean(nl, 0.0);
  for (int l = 0; l < nl; ++l) {
    for (int i = 0; i < na; ++i) layer_mean[l] += c.lens(l, i);
    layer_mean[l] /= na;
  }
  LogitSignals out;
  for (double f : c.model.depth_fractions) out.s5.push_back(layer_mean[depth_layer(f, nl)]);
  double mean_final = 0.0;
  for (float v : c.final_logprob) mean_final += v;
  mean_final /= na;
  out.s6_raw = std::min(kPerplexityCap, std::exp(-mean_final));
  // Fewer than eight layers: the slope spans all of them.
  const int tail = std::min(kLogitSlopeLayers, nl);
  out.s13_raw = numeric::slope_over_index(std::span<const double>(layer_mean).subspan(nl - tail));
  return out;
}

std::vector<std::string> lexical_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

LexicalSignals compute_lexical_signals(const SampleTexts& texts) {
  const auto src = lexical_tokens(texts.source);
  if (src.empty()) fail(ErrorKind::kValidation, "lexical signals: empty source");
  const auto ans = lexical_tokens(texts.answer);
  const std::set<std::string> s(src.begin(), src.end()), a(ans.begin(), ans.end());
  std::size_t inter = 0;
  for (const auto& tok : a) inter += s.count(tok);
  const std::size_t uni = s.size() + a.size() - inter;
  LexicalSignals out;
  out.s9 = static_cast<double>(ans.size()) / static_cast<double>(src.size());
  out.s10 = static_cast<double>(inter) / static_cast<double>(uni);
  return out;
}

// ---------------------------------------------------------------------------
// RawSignals

double RawSignals::s2_mean() const { return numeric::mean(s2); }
double RawSignals::s4_mean() const { return numeric::mean(s4); }

std::vector<double> RawSignals::s2_by_layer() const {
  std::vector<double> out(n_layers, 0.0);
  for (int l = 0; l < n_layers; ++l) {
    for (int h = 0; h < n_heads; ++h) out[l] += s2[static_cast<std::size_t>(l) * n_heads + h];
    out[l] /= n_heads;
  }
  return out;
}

std::size_t raw_dimension(int n_layers, int n_heads, int n_depths) {
  return static_cast<std::size_t>(2 * n_layers * (1 + n_heads) + n_depths + 9);
}

std::vector<std::string> raw_names(int n_layers, int n_heads, const std::vector<double>& depth_fractions) {
  FeatureLayout layout{n_layers, n_heads, static_cast<int>(depth_fractions.size())};
  auto names = layout.names(depth_fractions);
  names.resize(layout.scalar_begin() + depth_fractions.size());
  for (const char* n : {"S6_raw", "S8", "S9", "S10", "S13_raw", "S15", "tau_min", "tau_var", "tau_slope"})
    names.emplace_back(n);
  return names;
}

std::vector<double> RawSignals::flatten() const {
  std::vector<double> v;
  v.reserve(raw_dimension(n_layers, n_heads, static_cast<int>(s5.size())));
  for (const auto* block : {&s1, &s4, &s2, &s3, &s5}) v.insert(v.end(), block->begin(), block->end());
  for (double x : {s6_raw, s8, s9, s10, s13_raw, s15, tau_min, tau_var, tau_slope}) v.push_back(x);
  return v;
}

RawSignals RawSignals::unflatten(std::span<const double> values, int n_layers, int n_heads, int n_depths) {
  require(values.size() == raw_dimension(n_layers, n_heads, n_depths), ErrorKind::kFormat,
          "raw signals: unexpected row length");
  RawSignals r;
  r.n_layers = n_layers;
  r.n_heads = n_heads;
  std::size_t at = 0;
  auto take = [&](std::vector<double>& dst, std::size_t n) {
    dst.assign(values.begin() + at, values.begin() + at + n);
    at += n;
  };
  const std::size_t cells = static_cast<std::size_t>(n_layers) * n_heads;
  take(r.s1, n_layers);
  take(r.s4, n_layers);
  take(r.s2, cells);
  take(r.s3, cells);
  take(r.s5, n_depths);
  for (double* x : {&r.s6_raw, &r.s8, &r.s9, &r.s10, &r.s13_raw, &r.s15, &r.tau_min, &r.tau_var, &r.tau_slope})
    *x = values[at++];
  return r;
}

RawSignals compute_raw_signals(const SampleCache& cache, double s8_external) {
  const auto report = validate_cache(cache);
  if (!report.ok()) fail(ErrorKind::kValidation, "sample " + cache.sample_id + ": " + report.summary());
  require(s8_external >= 0.0 && s8_external <= 1.0, ErrorKind::kInvalidArgument,
          "sample " + cache.sample_id + ": S8 must be in [0,1]");
  const auto layer = compute_layer_signals(cache);
  const auto att = compute_attention_signals(cache);
  const auto logit = compute_logit_signals(cache);
  const auto lex = compute_lexical_signals(cache.texts);
  RawSignals r;
  r.n_layers = cache.n_layers();
  r.n_heads = cache.n_heads();
  r.s1 = layer.s1;
  r.s4 = layer.s4;
  r.s15 = layer.s15;
  r.s2 = att.s2;
  r.s3 = att.s3;
  r.tau_min = *std::min_element(att.tau.begin(), att.tau.end());
  r.tau_var = numeric::variance(att.tau);
  r.tau_slope = numeric::slope_over_index(att.tau);
  r.s5 = logit.s5;
  r.s6_raw = logit.s6_raw;
  r.s13_raw = logit.s13_raw;
  r.s8 = s8_external;
  r.s9 = lex.s9;
  r.s10 = lex.s10;
  return r;
}

// ---------------------------------------------------------------------------
// Fitted statistics

double orthogonalize(double x, double y, const OrthoCoeffs& coeffs) {
  return x - (coeffs.slope * y + coeffs.intercept);
}

double grounding_ratio(const RawSignals& raw, const WindowSpec& window, double eps) {
  return window_mean_heads(raw.s2, raw.n_heads, window) / (window_mean_heads(raw.s3, raw.n_heads, window) + eps);
}

WindowSelection select_fixed_window(const std::vector<RawSignals>& train, std::span<const int> labels,
                                    std::uint64_t seed) {
  require(!train.empty() && train.size() == labels.size(), ErrorKind::kInvalidArgument,
          "select_fixed_window: row/label mismatch");
  const int nl = train.front().n_layers;
  WindowSelection sel;
  if (nl < kWindowLength) {
    spdlog::warn("select_fixed_window: only {} layers; window spans all layers", nl);
    sel.window = {0, nl};
    sel.fallback = true;
    return sel;
  }
  const auto n_pos = std::count(labels.begin(), labels.end(), 1);
  const auto n_neg = static_cast<long>(labels.size()) - n_pos;
  require(train.size() >= 30, ErrorKind::kValidation, "select_fixed_window: needs at least 30 labeled samples");
  require(std::min(n_pos, n_neg) >= 3, ErrorKind::kValidation, "select_fixed_window: both classes required");

  const auto folds = learners::stratified_folds(labels, 3, seed);
  double best = -1.0;
  for (int start = 0; start + kWindowLength <= nl; ++start) {
    const WindowSpec w{start, kWindowLength};
    Matrix X(train.size(), 2);
    for (std::size_t i = 0; i < train.size(); ++i) {
      X(i, 0) = window_mean_s1(train[i], w);
      X(i, 1) = window_mean_heads(train[i].s2, train[i].n_heads, w);
    }
    double auc_sum = 0.0;
    for (int k = 0; k < 3; ++k) {
      std::vector<std::size_t> tr, va;
      for (std::size_t i = 0; i < train.size(); ++i) (folds[i] == k ? va : tr).push_back(i);
      std::vector<int> ytr, yva;
      for (auto i : tr) ytr.push_back(labels[i]);
      for (auto i : va) yva.push_back(labels[i]);
      learners::LogisticModel probe(learners::LogisticParams{1.0, true, 100, 1e-10});
      probe.fit(X.select_rows(tr), ytr);
      auc_sum += eval::roc_auc(probe.decision_function(X.select_rows(va)), yva);
    }
    const double auc = auc_sum / 3.0;
    sel.cv_auc.push_back(auc);
    if (auc > best) {  // strict: ties keep the smallest start
      best = auc;
      sel.window = w;
    }
  }
  return sel;
}

AHIWeights fit_ahi(const std::vector<RawSignals>& train, std::span<const int> labels) {
  require(!train.empty() && train.size() == labels.size(), ErrorKind::kInvalidArgument, "fit_ahi: row/label mismatch");
  AHIWeights a;
  a.n_layers = train.front().n_layers;
  a.n_heads = train.front().n_heads;
  const std::size_t cells = static_cast<std::size_t>(a.n_layers) * a.n_heads;
  a.mu0.assign(cells, 0.0);
  a.mu1.assign(cells, 0.0);
  a.sigma.assign(cells, 0.0);
  double n0 = 0.0, n1 = 0.0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto& mu = labels[i] == 1 ? a.mu1 : a.mu0;
    (labels[i] == 1 ? n1 : n0) += 1.0;
    for (std::size_t c = 0; c < cells; ++c) mu[c] += train[i].s2[c];
  }
  require(n0 > 0 && n1 > 0, ErrorKind::kValidation, "fit_ahi: both classes required");
  for (std::size_t c = 0; c < cells; ++c) {
    a.mu0[c] /= n0;
    a.mu1[c] /= n1;
  }
  std::vector<double> ss(cells, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& mu = labels[i] == 1 ? a.mu1 : a.mu0;
    for (std::size_t c = 0; c < cells; ++c) {
      const double d = train[i].s2[c] - mu[c];
      ss[c] += d * d;
    }
  }
  const double dof = std::max(1.0, n0 + n1 - 2.0);
  a.w.assign(cells, 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < cells; ++c) {
    a.sigma[c] = std::max(std::sqrt(ss[c] / dof), kEpsilon);
    a.w[c] = std::abs(a.mu0[c] - a.mu1[c]) / a.sigma[c];
    total += a.w[c];
  }
  if (total > 0.0) {
    for (auto& w : a.w) w /= total;
  } else {
    std::fill(a.w.begin(), a.w.end(), 1.0 / static_cast<double>(cells));
  }
  a.sign = 1.0;
  std::vector<double> score(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) score[i] = ahi_score(train[i].s2, a);
  if (eval::roc_auc(score, labels) < 0.5) a.sign = -1.0;
  return a;
}

double ahi_score(std::span<const double> s2, const AHIWeights& weights) {
  require(s2.size() == weights.w.size(), ErrorKind::kInvalidArgument, "ahi_score: head count mismatch");
  double s = 0.0;
  for (std::size_t c = 0; c < s2.size(); ++c) s += weights.w[c] * s2[c];
  return weights.sign * s;
}

TrainStats fit_train_stats(const std::vector<RawSignals>& train, std::span<const int> labels,
                           const FitStatsOptions& options) {
  require(!train.empty() && train.size() == labels.size(), ErrorKind::kInvalidArgument,
          "fit_train_stats: row/label mismatch");
  const auto n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos == 0 || n_pos == static_cast<long>(labels.size()))
    fail(ErrorKind::kValidation, "fit_train_stats: single-class training data");
  TrainStats st;
  st.n_layers = train.front().n_layers;
  st.n_heads = train.front().n_heads;
  st.n_train = train.size();
  st.include_ahi = options.include_ahi;
  for (const auto& r : train)
    if (r.n_layers != st.n_layers || r.n_heads != st.n_heads || r.s5.size() != train.front().s5.size())
      fail(ErrorKind::kValidation, "fit_train_stats: inconsistent shapes across samples");

  if (options.window) {
    const auto& w = *options.window;
    require(w.start_layer >= 0 && w.length >= 1 && w.start_layer + w.length <= st.n_layers, ErrorKind::kConfig,
            "window override outside the model's layers");
    st.window = w;
  } else {
    st.window = select_fixed_window(train, labels, options.seed).window;
  }
  st.ahi = fit_ahi(train, labels);

  const std::size_t n = train.size();
  std::vector<double> s2m(n), s4m(n), s6(n), s13(n), s14(n), t_min(n), t_var(n), t_slope(n);
  for (std::size_t i = 0; i < n; ++i) {
    s2m[i] = train[i].s2_mean();
    s4m[i] = train[i].s4_mean();
    s6[i] = train[i].s6_raw;
    s13[i] = train[i].s13_raw;
    s14[i] = grounding_ratio(train[i], st.window, st.epsilon);
    t_min[i] = train[i].tau_min;
    t_var[i] = train[i].tau_var;
    t_slope[i] = train[i].tau_slope;
  }
  st.s2_mean_mu = numeric::mean(s2m);
  st.s2_mean_sd = std::max(std::sqrt(numeric::variance(s2m)), st.epsilon);
  st.s4_mean_mu = numeric::mean(s4m);
  st.s4_mean_sd = std::max(std::sqrt(numeric::variance(s4m)), st.epsilon);
  st.s6_on_s13 = numeric::ols(s13, s6);
  st.s13_on_s6 = numeric::ols(s6, s13);
  st.s14_on_s2 = numeric::ols(s2m, s14);
  st.s16_on_s2 = numeric::ols(s2m, t_min);
  st.s17_on_s2 = numeric::ols(s2m, t_var);
  st.s18_on_s2 = numeric::ols(s2m, t_slope);
  if (!options.sample_ids.empty()) st.fingerprint = learners::fingerprint_ids(options.sample_ids);
  return st;
}

// ---------------------------------------------------------------------------
// Layout and assembly

std::size_t feature_dimension(int n_layers, int n_heads, int n_depths) {
  return FeatureLayout{n_layers, n_heads, n_depths}.size();
}

std::size_t FeatureLayout::scalar(std::string_view name) const {
  if (name.size() > 3 && name.substr(0, 3) == "S5[") {
    const int k = std::stoi(std::string(name.substr(3)));
    require(k >= 0 && k < n_depths, ErrorKind::kInvalidArgument, "layout: S5 index out of range");
    return scalar_begin() + k;
  }
  const auto& names = trailing_scalars();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) fail(ErrorKind::kInvalidArgument, "layout: unknown scalar '" + std::string(name) + "'");
  return scalar_begin() + n_depths + static_cast<std::size_t>(it - names.begin());
}

std::vector<std::string> FeatureLayout::scalar_names(const std::vector<double>&) const {
  std::vector<std::string> out;
  for (int k = 0; k < n_depths; ++k) out.push_back("S5[" + std::to_string(k) + "]");
  for (const auto& n : trailing_scalars()) out.push_back(n);
  return out;
}

std::vector<std::string> FeatureLayout::names(const std::vector<double>& depth_fractions) const {
  std::vector<std::string> out;
  out.reserve(size());
  for (int l = 0; l < n_layers; ++l) out.push_back("S1[" + std::to_string(l) + "]");
  for (int l = 0; l < n_layers; ++l) out.push_back("S4[" + std::to_string(l) + "]");
  for (const char* fam : {"S2", "S3"})
    for (int l = 0; l < n_layers; ++l)
      for (int h = 0; h < n_heads; ++h) out.push_back(std::string(fam) + "[" + std::to_string(l) + "," + std::to_string(h) + "]");
  for (auto& n : scalar_names(depth_fractions)) out.push_back(std::move(n));
  return out;
}

std::vector<std::string> FeatureLayout::families() const {
  std::vector<std::string> out;
  out.reserve(size());
  out.insert(out.end(), n_layers, "S1");
  out.insert(out.end(), n_layers, "S4");
  out.insert(out.end(), static_cast<std::size_t>(n_layers) * n_heads, "S2");
  out.insert(out.end(), static_cast<std::size_t>(n_layers) * n_heads, "S3");
  out.insert(out.end(), n_depths, "S5");
  for (const auto& n : trailing_scalars()) out.push_back(n.rfind("S7", 0) == 0 ? "S7" : n);
  return out;
}

FeatureVector assemble_features(const RawSignals& raw, const TrainStats& st) {
  if (raw.n_layers != st.n_layers || raw.n_heads != st.n_heads || raw.s5.size() != st.depth_fractions.size())
    fail(ErrorKind::kValidation, "assemble_features: sample shape does not match fitted statistics");
  const FeatureLayout layout{st.n_layers, st.n_heads, static_cast<int>(st.depth_fractions.size())};
  FeatureVector fv;
  fv.values.assign(layout.size(), 0.0);
  auto& v = fv.values;
  for (int l = 0; l < st.n_layers; ++l) {
    v[layout.s1(l)] = raw.s1[l];
    v[layout.s4(l)] = raw.s4[l];
    for (int h = 0; h < st.n_heads; ++h) {
      v[layout.s2(l, h)] = raw.s2[static_cast<std::size_t>(l) * st.n_heads + h];
      v[layout.s3(l, h)] = raw.s3[static_cast<std::size_t>(l) * st.n_heads + h];
    }
  }
  for (std::size_t k = 0; k < raw.s5.size(); ++k) v[layout.scalar_begin() + k] = raw.s5[k];

  const double eps = st.epsilon;
  const double s2m = raw.s2_mean();
  const double z2 = (s2m - st.s2_mean_mu) / st.s2_mean_sd;
  const double z4 = (raw.s4_mean() - st.s4_mean_mu) / st.s4_mean_sd;
  auto set = [&](const char* name, double value) {
    if (!std::isfinite(value)) fail(ErrorKind::kValidation, std::string("non-finite signal ") + name);
    v[layout.scalar(name)] = value;
  };
  set("S6", orthogonalize(raw.s6_raw, raw.s13_raw, st.s6_on_s13));
  set("S7a", z2 * z4);
  set("S7b", z4 - z2);
  set("S7c", z4 / (std::abs(z2) + eps));
  set("S8", raw.s8);
  set("S9", raw.s9);
  set("S10", raw.s10);
  set("S11", window_mean_s1(raw, st.window));
  set("S12", window_mean_heads(raw.s2, raw.n_heads, st.window));
  set("S13", orthogonalize(raw.s13_raw, raw.s6_raw, st.s13_on_s6));
  set("S14", orthogonalize(grounding_ratio(raw, st.window, eps), s2m, st.s14_on_s2));
  set("S15", raw.s15);
  set("S16", orthogonalize(raw.tau_min, s2m, st.s16_on_s2));
  set("S17", orthogonalize(raw.tau_var, s2m, st.s17_on_s2));
  set("S18", orthogonalize(raw.tau_slope, s2m, st.s18_on_s2));
  for (std::size_t i = 0; i < layout.scalar_begin() + raw.s5.size(); ++i)
    if (!std::isfinite(v[i])) fail(ErrorKind::kValidation, "non-finite per-layer signal at column " + std::to_string(i));
  fv.ahi = ahi_score(raw.s2, st.ahi);
  if (!std::isfinite(fv.ahi)) fail(ErrorKind::kValidation, "non-finite signal AHI");
  return fv;
}

std::vector<double> model_input(const FeatureVector& fv, const TrainStats& stats) {
  auto x = fv.values;
  if (stats.include_ahi) x.push_back(fv.ahi);
  return x;
}

FeatureVector assemble_features(const SampleCache& cache, const TrainStats& stats, double s8_external) {
  return assemble_features(compute_raw_signals(cache, s8_external), stats);
}

// ---------------------------------------------------------------------------
// Serialization

void to_json(json& j, const WindowSpec& w) { j = json{{"start_layer", w.start_layer}, {"length", w.length}}; }

void from_json(const json& j, WindowSpec& w) {
  w.start_layer = j.at("start_layer").get<int>();
  w.length = j.value("length", kWindowLength);
}

void to_json(json& j, const TrainStats& s) {
  j = json{{"format", "halluscope-train-stats"},
           {"version", 1},
           {"n_layers", s.n_layers},
           {"n_heads", s.n_heads},
           {"depth_fractions", s.depth_fractions},
           {"window", s.window},
           {"ahi",
            {{"w", s.ahi.w}, {"sign", s.ahi.sign}, {"mu0", s.ahi.mu0}, {"mu1", s.ahi.mu1}, {"sigma", s.ahi.sigma}}},
           {"standardize",
            {{"s2_mean", {{"mean", s.s2_mean_mu}, {"std", s.s2_mean_sd}}},
             {"s4_mean", {{"mean", s.s4_mean_mu}, {"std", s.s4_mean_sd}}}}},
           {"orthogonalize",
            {{"s6_on_s13", fit_json(s.s6_on_s13)},
             {"s13_on_s6", fit_json(s.s13_on_s6)},
             {"s14_on_s2mean", fit_json(s.s14_on_s2)},
             {"s16_on_s2mean", fit_json(s.s16_on_s2)},
             {"s17_on_s2mean", fit_json(s.s17_on_s2)},
             {"s18_on_s2mean", fit_json(s.s18_on_s2)}}},
           {"epsilon", s.epsilon},
           {"n_train", s.n_train},
           {"fingerprint", s.fingerprint},
           {"include_ahi", s.include_ahi}};
}

void from_json(const json& j, TrainStats& s) {
  if (j.value("format", std::string{}) != "halluscope-train-stats")
    fail(ErrorKind::kFormat, "train stats: unexpected format tag");
  try {
    s.n_layers = j.at("n_layers").get<int>();
    s.n_heads = j.at("n_heads").get<int>();
    s.depth_fractions = j.at("depth_fractions").get<std::vector<double>>();
    s.window = j.at("window").get<WindowSpec>();
    const auto& a = j.at("ahi");
    s.ahi.n_layers = s.n_layers;
    s.ahi.n_heads = s.n_heads;
    s.ahi.w = a.at("w").get<std::vector<double>>();
    s.ahi.sign = a.at("sign").get<double>();
    s.ahi.mu0 = a.at("mu0").get<std::vector<double>>();
    s.ahi.mu1 = a.at("mu1").get<std::vector<double>>();
    s.ahi.sigma = a.at("sigma").get<std::vector<double>>();
    const auto& z = j.at("standardize");
    s.s2_mean_mu = z.at("s2_mean").at("mean").get<double>();
    s.s2_mean_sd = z.at("s2_mean").at("std").get<double>();
    s.s4_mean_mu = z.at("s4_mean").at("mean").get<double>();
    s.s4_mean_sd = z.at("s4_mean").at("std").get<double>();
    const auto& o = j.at("orthogonalize");
    s.s6_on_s13 = fit_from(o.at("s6_on_s13"));
    s.s13_on_s6 = fit_from(o.at("s13_on_s6"));
    s.s14_on_s2 = fit_from(o.at("s14_on_s2mean"));
    s.s16_on_s2 = fit_from(o.at("s16_on_s2mean"));
    s.s17_on_s2 = fit_from(o.at("s17_on_s2mean"));
    s.s18_on_s2 = fit_from(o.at("s18_on_s2mean"));
    s.epsilon = j.value("epsilon", kEpsilon);
    s.n_train = j.value("n_train", std::size_t{0});
    s.fingerprint = j.value("fingerprint", std::string{});
    s.include_ahi = j.value("include_ahi", false);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("train stats: ") + e.what());
  }
  if (s.ahi.w.size() != static_cast<std::size_t>(s.n_layers) * s.n_heads)
    fail(ErrorKind::kFormat, "train stats: AHI weight count mismatch");
}

}  // namespace halluscope
