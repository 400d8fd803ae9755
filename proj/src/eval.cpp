#include "halluscope/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "halluscope/error.hpp"
#include "halluscope/numeric.hpp"
#include "halluscope/signals.hpp"

namespace halluscope::eval {

using nlohmann::json;

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), ErrorKind::kInvalidArgument, "roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += mid_rank;
    i = j;
  }
  for (int y : labels) n_pos += (y == 1);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) fail(ErrorKind::kInvalidArgument, "roc_auc: both classes required");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double oriented_auc(double auc) { return std::max(auc, 1.0 - auc); }

ConfusionMetrics f1_balacc(std::span<const double> scores, std::span<const int> labels, double threshold) {
  require(scores.size() == labels.size(), ErrorKind::kInvalidArgument, "f1_balacc: size mismatch");
  ConfusionMetrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      pred ? ++m.tp : ++m.fn;
    } else {
      pred ? ++m.fp : ++m.tn;
    }
  }
  auto ratio = [&](int num, int den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / den;
  };
  const double precision = ratio(m.tp, m.tp + m.fp);
  const double recall = ratio(m.tp, m.tp + m.fn);
  if (precision + recall > 0.0) {
    m.f1 = 2.0 * precision * recall / (precision + recall);
  } else {
    m.f1 = 0.0;
    m.degenerate = true;
  }
  const double tpr = recall;
  const double tnr = ratio(m.tn, m.tn + m.fp);
  m.balanced_accuracy = 0.5 * (tpr + tnr);
  return m;
}

double best_f1_threshold(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size() && !scores.empty(), ErrorKind::kInvalidArgument,
          "best_f1_threshold: bad input");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  int total_pos = 0;
  for (int y : labels) total_pos += (y == 1);
  int tp = 0, fp = 0;
  double best_f1 = -1.0, best_thr = scores[order.front()];
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      labels[order[j]] == 1 ? ++tp : ++fp;
      ++j;
    }
    const double f1 = (tp == 0) ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + (total_pos - tp));
    if (f1 > best_f1) {
      best_f1 = f1;
      best_thr = scores[order[i]];
    }
    i = j;
  }
  return best_thr;
}

double ks_distance(std::span<const double> a, std::span<const double> b) {
  require(!a.empty() && !b.empty(), ErrorKind::kInvalidArgument, "ks_distance: empty input");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < sa.size() || j < sb.size()) {
    double x;
    if (j >= sb.size() || (i < sa.size() && sa[i] <= sb[j])) {
      x = sa[i];
    } else {
      x = sb[j];
    }
    while (i < sa.size() && sa[i] <= x) ++i;
    while (j < sb.size() && sb[j] <= x) ++j;
    const double fa = static_cast<double>(i) / sa.size();
    const double fb = static_cast<double>(j) / sb.size();
    d = std::max(d, std::abs(fa - fb));
  }
  return d;
}

double null_auc_se(std::size_t n_pos, std::size_t n_neg) {
  const double p = static_cast<double>(n_pos), q = static_cast<double>(n_neg);
  return std::sqrt((p + q + 1.0) / (12.0 * p * q));
}

MetricReport metric_report(std::span<const double> scores, std::span<const int> labels, double threshold) {
  MetricReport r;
  r.n = scores.size();
  require(r.n > 0, ErrorKind::kInvalidArgument, "metric_report: no rows");
  std::size_t pos = 0;
  for (int y : labels) pos += (y == 1);
  r.positive_rate = static_cast<double>(pos) / r.n;
  r.auc = roc_auc(scores, labels);
  const auto cm = f1_balacc(scores, labels, threshold);
  r.f1 = cm.f1;
  r.balanced_accuracy = cm.balanced_accuracy;
  r.threshold = threshold;
  r.degenerate = cm.degenerate;
  return r;
}

GroupBreakdown group_breakdown(std::span<const double> scores, std::span<const int> labels,
                               std::span<const std::string> group_tags, double threshold) {
  require(scores.size() == labels.size() && scores.size() == group_tags.size(), ErrorKind::kInvalidArgument,
          "group_breakdown: size mismatch");
  std::map<std::string, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < group_tags.size(); ++i) rows[group_tags[i]].push_back(i);
  GroupBreakdown out;
  for (const auto& [group, idx] : rows) {
    std::vector<double> s;
    std::vector<int> y;
    for (auto i : idx) {
      s.push_back(scores[i]);
      y.push_back(labels[i]);
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == static_cast<long>(y.size())) {
      spdlog::warn("group '{}' lacks one class; skipped", group);
      out.skipped.push_back(group);
      continue;
    }
    out.groups.push_back({group, metric_report(s, y, threshold)});
  }
  return out;
}

std::vector<GroupDelta> compare_groups(const GroupBreakdown& a, const GroupBreakdown& b) {
  std::vector<GroupDelta> out;
  for (const auto& ga : a.groups) {
    for (const auto& gb : b.groups) {
      if (ga.group != gb.group) continue;
      out.push_back({ga.group, ga.report.auc, gb.report.auc, gb.report.auc - ga.report.auc});
    }
  }
  return out;
}

std::vector<std::string> synthetic_groups(std::size_t n, std::size_t group_size, std::uint64_t seed) {
  require(group_size > 0, ErrorKind::kInvalidArgument, "synthetic_groups: group_size must be > 0");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::string> tags(n);
  for (std::size_t pos = 0; pos < n; ++pos) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "g%02zu", pos / group_size);
    tags[order[pos]] = buf;
  }
  return tags;
}

StabilityReport signal_stability(const std::vector<std::string>& names, const std::vector<std::vector<double>>& test,
                                 std::span<const int> labels_test, const std::vector<std::vector<double>>& ood,
                                 std::span<const int> labels_ood) {
  require(test.size() == labels_test.size() && ood.size() == labels_ood.size(), ErrorKind::kInvalidArgument,
          "signal_stability: row/label count mismatch");
  for (const auto& row : test)
    if (row.size() != names.size()) fail(ErrorKind::kInvalidArgument, "signal_stability: layout mismatch (test)");
  for (const auto& row : ood)
    if (row.size() != names.size()) fail(ErrorKind::kInvalidArgument, "signal_stability: layout mismatch (ood)");

  StabilityReport rep;
  std::vector<double> col_t(test.size()), col_o(ood.size());
  for (std::size_t k = 0; k < names.size(); ++k) {
    for (std::size_t i = 0; i < test.size(); ++i) col_t[i] = test[i][k];
    for (std::size_t i = 0; i < ood.size(); ++i) col_o[i] = ood[i][k];
    SignalStability s;
    s.name = names[k];
    s.test_auc = roc_auc(col_t, labels_test);
    s.ood_auc = roc_auc(col_o, labels_ood);
    s.gap = std::abs(s.test_auc - s.ood_auc);
    s.inverted = (s.test_auc - 0.5) * (s.ood_auc - 0.5) < 0.0;
    rep.inverted_count += s.inverted;
    rep.signals.push_back(s);
  }
  rep.ranked_by_gap.resize(rep.signals.size());
  std::iota(rep.ranked_by_gap.begin(), rep.ranked_by_gap.end(), 0);
  std::stable_sort(rep.ranked_by_gap.begin(), rep.ranked_by_gap.end(),
                   [&](std::size_t a, std::size_t b) { return rep.signals[a].gap > rep.signals[b].gap; });
  return rep;
}

DepthMap depth_map(const std::vector<std::vector<double>>& layer_s2, std::span<const int> labels,
                   std::span<const std::string> task_tags) {
  require(layer_s2.size() == labels.size() && labels.size() == task_tags.size(), ErrorKind::kInvalidArgument,
          "depth_map: size mismatch");
  require(!layer_s2.empty(), ErrorKind::kInvalidArgument, "depth_map: no samples");
  DepthMap out;
  out.n_layers = static_cast<int>(layer_s2.front().size());
  std::map<std::string, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < task_tags.size(); ++i) rows[task_tags[i]].push_back(i);

  for (const auto& [task, idx] : rows) {
    std::vector<int> y;
    for (auto i : idx) y.push_back(labels[i]);
    const auto pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    if (pos == 0 || pos == y.size()) {
      spdlog::warn("depth_map: task '{}' has a single class; excluded", task);
      out.excluded.push_back(task);
      continue;
    }
    TaskDepth td;
    td.task = task;
    std::vector<double> col(idx.size());
    double best = -1.0;
    for (int l = 0; l < out.n_layers; ++l) {
      for (std::size_t k = 0; k < idx.size(); ++k) col[k] = layer_s2[idx[k]].at(l);
      const double auc = roc_auc(col, y);
      td.layer_auc.push_back(auc);
      if (oriented_auc(auc) > best) {  // strict: ties keep the shallowest layer
        best = oriented_auc(auc);
        td.best_layer = l;
      }
    }
    td.best_oriented_auc = best;
    td.depth_fraction = static_cast<double>(td.best_layer) / out.n_layers;
    td.no_peak = (best - 0.5) < 3.0 * null_auc_se(pos, y.size() - pos);
    out.tasks.push_back(std::move(td));
  }
  if (out.tasks.size() < 2) spdlog::warn("depth_map: fewer than two usable tasks");
  return out;
}

DepthMap depth_map(const std::vector<SampleCache>& caches, std::span<const int> labels,
                   std::span<const std::string> task_tags) {
  std::vector<std::vector<double>> layer_s2;
  layer_s2.reserve(caches.size());
  for (const auto& c : caches) {
    const auto att = compute_attention_signals(c);
    std::vector<double> per_layer(c.n_layers(), 0.0);
    for (int l = 0; l < c.n_layers(); ++l) {
      for (int h = 0; h < c.n_heads(); ++h) per_layer[l] += att.s2[static_cast<std::size_t>(l) * c.n_heads() + h];
      per_layer[l] /= c.n_heads();
    }
    layer_s2.push_back(std::move(per_layer));
  }
  return depth_map(layer_s2, labels, task_tags);
}

// ---------------------------------------------------------------------------
// Serialization

void to_json(json& j, const MetricReport& r) {
  j = json{{"auc", r.auc},
           {"f1", r.f1},
           {"balanced_accuracy", r.balanced_accuracy},
           {"threshold", r.threshold},
           {"n", r.n},
           {"positive_rate", r.positive_rate},
           {"degenerate", r.degenerate}};
}

void from_json(const json& j, MetricReport& r) {
  r.auc = j.at("auc").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
  r.threshold = j.at("threshold").get<double>();
  r.n = j.at("n").get<std::size_t>();
  r.positive_rate = j.at("positive_rate").get<double>();
  r.degenerate = j.value("degenerate", false);
}

void to_json(json& j, const GroupBreakdown& g) {
  j = json::object();
  json groups = json::object();
  for (const auto& gr : g.groups) groups[gr.group] = gr.report;
  j["groups"] = groups;
  j["skipped"] = g.skipped;
}

void to_json(json& j, const GroupDelta& d) {
  j = json{{"group", d.group}, {"auc_a", d.auc_a}, {"auc_b", d.auc_b}, {"delta", d.delta}};
}

void to_json(json& j, const StabilityReport& r) {
  json sigs = json::array();
  for (const auto& s : r.signals)
    sigs.push_back({{"name", s.name},
                    {"test_auc", s.test_auc},
                    {"ood_auc", s.ood_auc},
                    {"gap", s.gap},
                    {"inverted", s.inverted}});
  json ranked = json::array();
  for (auto k : r.ranked_by_gap) {
    const auto& s = r.signals[k];
    ranked.push_back({{"name", s.name},
                      {"test_auc_oriented", oriented_auc(s.test_auc)},
                      {"ood_auc_oriented", oriented_auc(s.ood_auc)},
                      {"gap", s.gap}});
  }
  j = json{{"signals", sigs}, {"ranked_gaps", ranked}, {"inverted_count", r.inverted_count}};
}

void from_json(const json& j, StabilityReport& r) {
  r = {};
  for (const auto& s : j.at("signals")) {
    r.signals.push_back({s.at("name").get<std::string>(), s.at("test_auc").get<double>(),
                         s.at("ood_auc").get<double>(), s.at("gap").get<double>(), s.at("inverted").get<bool>()});
  }
  r.inverted_count = j.at("inverted_count").get<std::size_t>();
  for (const auto& g : j.at("ranked_gaps")) {
    const auto name = g.at("name").get<std::string>();
    for (std::size_t k = 0; k < r.signals.size(); ++k)
      if (r.signals[k].name == name) r.ranked_by_gap.push_back(k);
  }
}

void to_json(json& j, const DepthMap& d) {
  json tasks = json::array();
  for (const auto& t : d.tasks)
    tasks.push_back({{"task", t.task},
                     {"layer_auc", t.layer_auc},
                     {"best_layer", t.best_layer},
                     {"depth_fraction", t.depth_fraction},
                     {"best_oriented_auc", t.best_oriented_auc},
                     {"no_peak", t.no_peak}});
  j = json{{"n_layers", d.n_layers}, {"tasks", tasks}, {"excluded", d.excluded}};
}

void from_json(const json& j, DepthMap& d) {
  d = {};
  d.n_layers = j.at("n_layers").get<int>();
  d.excluded = j.at("excluded").get<std::vector<std::string>>();
  for (const auto& t : j.at("tasks")) {
    TaskDepth td;
    td.task = t.at("task").get<std::string>();
    td.layer_auc = t.at("layer_auc").get<std::vector<double>>();
    td.best_layer = t.at("best_layer").get<int>();
    td.depth_fraction = t.at("depth_fraction").get<double>();
    td.best_oriented_auc = t.at("best_oriented_auc").get<double>();
    td.no_peak = t.at("no_peak").get<bool>();
    d.tasks.push_back(std::move(td));
  }
}

void append_rows(std::vector<ReportRow>& rows, const std::string& system, const std::string& split,
                 const std::string& group, const MetricReport& r) {
  rows.push_back({system, split, group, "auc", r.auc});
  rows.push_back({system, split, group, "f1", r.f1});
  rows.push_back({system, split, group, "balanced_accuracy", r.balanced_accuracy});
  rows.push_back({system, split, group, "threshold", r.threshold});
  rows.push_back({system, split, group, "n", static_cast<double>(r.n)});
  rows.push_back({system, split, group, "positive_rate", r.positive_rate});
}

std::string to_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "system,split,group,metric,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    os << r.system << ',' << r.split << ',' << r.group << ',' << r.metric << ',' << buf << '\n';
  }
  return os.str();
}

std::vector<ReportRow> parse_csv(const std::string& text) {
  std::vector<ReportRow> rows;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  if (line != "system,split,group,metric,value") fail(ErrorKind::kFormat, "report csv: unexpected header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) fail(ErrorKind::kFormat, "report csv: bad row '" + line + "'");
    rows.push_back({cells[0], cells[1], cells[2], cells[3], std::stod(cells[4])});
  }
  return rows;
}

}  // namespace halluscope::eval
