#include "halluscope/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "halluscope/error.hpp"
#include "halluscope/eval.hpp"
#include "halluscope/numeric.hpp"

namespace halluscope::pipeline {

using nlohmann::json;
namespace cal = calibration;

// ---------------------------------------------------------------------------
// Configuration

void Paths::resolve() {
  auto set = [&](fs::path& p, const char* name) {
    if (p.empty()) p = work_dir / name;
  };
  set(cache, "cache");
  set(ood_cache, "cache_ood");
  set(features, "features/raw.hsf");
  set(ood_features, "features/raw_ood.hsf");
  set(stats, "train_stats.json");
  set(models, "models");
  set(bundle, "calibration.json");
  set(predictions, "predictions.jsonl");
  set(reports, "reports");
}

S8Source S8Source::parse(const std::string& text) {
  S8Source s;
  if (text == "metadata") {
    s.kind = S8Kind::kMetadata;
  } else if (text == "constant") {
    s.kind = S8Kind::kConstant;
  } else if (text.rfind("plugin:", 0) == 0 && text.size() > 7) {
    s.kind = S8Kind::kPlugin;
    s.command = text.substr(7);
  } else {
    fail(ErrorKind::kConfig, "s8 source must be 'metadata', 'constant' or 'plugin:<command>', got '" + text + "'");
  }
  return s;
}

std::string S8Source::str() const {
  switch (kind) {
    case S8Kind::kMetadata: return "metadata";
    case S8Kind::kConstant: return "constant";
    case S8Kind::kPlugin: return "plugin:" + command;
  }
  return "metadata";
}

void PipelineConfig::validate() const {
  require(split.train > 0 && split.val > 0 && split.test > 0 &&
              std::abs(split.train + split.val + split.test - 1.0) < 1e-9,
          ErrorKind::kConfig, "split fractions must be positive and sum to 1");
  require(calibration.temperature > 0.0, ErrorKind::kConfig, "calibration.temperature must be positive");
  require(stacking.n_folds >= 2, ErrorKind::kConfig, "stacking.n_folds must be >= 2");
  require(stacking.meta_C > 0.0, ErrorKind::kConfig, "stacking.meta_C must be positive");
  require(!stacking.base_kinds.empty(), ErrorKind::kConfig, "stacking.base_kinds is empty");
  if (window_start) require(*window_start >= 0, ErrorKind::kConfig, "window start must be >= 0");
  if (fixed_threshold)
    require(*fixed_threshold >= 0.0 && *fixed_threshold <= 1.0, ErrorKind::kConfig, "threshold must be in [0,1]");
  require(synth.mode == "mixture" || synth.mode == "plant", ErrorKind::kConfig,
          "synth.mode must be 'mixture' or 'plant'");
  if (synth.mode == "plant") synth::validate_spec(synth.plant);
}

namespace {

const std::set<std::string> kTopKeys{"work_dir", "paths",     "seed",        "window",    "s8_source",
                                     "synth",    "split",     "stacking",    "calibration", "threshold", "include_ahi"};

fs::path path_in(const json& j, const char* key, const fs::path& base) {
  if (!j.contains(key) || j.at(key).is_null()) return {};
  fs::path p = j.at(key).get<std::string>();
  return p.is_absolute() ? p : base / p;
}

}  // namespace

PipelineConfig config_from_json(const json& j, const fs::path& base) {
  if (!j.is_object()) fail(ErrorKind::kConfig, "config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!kTopKeys.count(k)) fail(ErrorKind::kConfig, "unknown config key '" + k + "'");
  PipelineConfig c;
  try {
    if (j.contains("work_dir")) c.paths.work_dir = path_in(j, "work_dir", base);
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      c.paths.cache = path_in(p, "cache", base);
      c.paths.ood_cache = path_in(p, "ood_cache", base);
      c.paths.features = path_in(p, "features", base);
      c.paths.ood_features = path_in(p, "ood_features", base);
      c.paths.stats = path_in(p, "stats", base);
      c.paths.models = path_in(p, "models", base);
      c.paths.bundle = path_in(p, "bundle", base);
      c.paths.predictions = path_in(p, "predictions", base);
      c.paths.reports = path_in(p, "reports", base);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("window") && !j.at("window").is_null()) c.window_start = j.at("window").get<int>();
    c.include_ahi = j.value("include_ahi", c.include_ahi);
    if (j.contains("s8_source")) c.s8 = S8Source::parse(j.at("s8_source").get<std::string>());
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      c.synth.mode = s.value("mode", c.synth.mode);
      if (s.contains("mixture")) c.synth.mixture = s.at("mixture").get<synth::MixtureSpec>();
      if (s.contains("plant")) c.synth.plant = s.at("plant").get<synth::PlantSpec>();
      c.synth.write_ood = s.value("write_ood", c.synth.write_ood);
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      c.split.train = s.value("train", c.split.train);
      c.split.val = s.value("val", c.split.val);
      c.split.test = s.value("test", c.split.test);
    }
    if (j.contains("stacking")) c.stacking = j.at("stacking").get<learners::StackingConfig>();
    if (j.contains("calibration")) {
      const auto& s = j.at("calibration");
      c.calibration.temperature = s.value("temperature", c.calibration.temperature);
      c.calibration.min_pairs = s.value("min_pairs", c.calibration.min_pairs);
      c.calibration.ks_threshold = s.value("ks_threshold", c.calibration.ks_threshold);
      if (s.contains("qa_prefixes"))
        c.calibration.regime_rules.qa_prefixes = s.at("qa_prefixes").get<std::vector<std::string>>();
      if (s.contains("claim_tags"))
        c.calibration.regime_rules.claim_tags = s.at("claim_tags").get<std::vector<std::string>>();
      if (s.contains("specialist_domain"))
        c.calibration.routing_rules.specialist_domain = s.at("specialist_domain").get<std::string>();
    }
    if (j.contains("threshold") && !j.at("threshold").is_null()) {
      const auto& t = j.at("threshold");
      if (t.is_string()) {
        if (t.get<std::string>() != "validation-max-f1")
          fail(ErrorKind::kConfig, "threshold must be a number or 'validation-max-f1'");
      } else {
        c.fixed_threshold = t.get<double>();
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kConfig) throw;
    fail(ErrorKind::kConfig, std::string("config: ") + e.what());
  }
  c.paths.resolve();
  c.validate();
  return c;
}

json config_to_json(const PipelineConfig& c) {
  json j{{"work_dir", c.paths.work_dir.string()},
         {"paths",
          {{"cache", c.paths.cache.string()},
           {"ood_cache", c.paths.ood_cache.string()},
           {"features", c.paths.features.string()},
           {"ood_features", c.paths.ood_features.string()},
           {"stats", c.paths.stats.string()},
           {"models", c.paths.models.string()},
           {"bundle", c.paths.bundle.string()},
           {"predictions", c.paths.predictions.string()},
           {"reports", c.paths.reports.string()}}},
         {"seed", c.seed},
         {"window", c.window_start ? json(*c.window_start) : json(nullptr)},
         {"s8_source", c.s8.str()},
         {"include_ahi", c.include_ahi},
         {"synth", {{"mode", c.synth.mode}, {"mixture", c.synth.mixture}, {"plant", c.synth.plant}, {"write_ood", c.synth.write_ood}}},
         {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
         {"stacking", c.stacking},
         {"calibration",
          {{"temperature", c.calibration.temperature},
           {"min_pairs", c.calibration.min_pairs},
           {"ks_threshold", c.calibration.ks_threshold},
           {"qa_prefixes", c.calibration.regime_rules.qa_prefixes},
           {"claim_tags", c.calibration.regime_rules.claim_tags},
           {"specialist_domain", c.calibration.routing_rules.specialist_domain}}},
         {"threshold", c.fixed_threshold ? json(*c.fixed_threshold) : json("validation-max-f1")}};
  return j;
}

PipelineConfig load_config(const std::optional<fs::path>& path) {
  std::optional<fs::path> p = path;
  if (!p) {
    if (const char* env = std::getenv("HALLUSCOPE_CONFIG"); env && *env) p = fs::path(env);
  }
  if (!p) return config_from_json(json::object());
  if (!fs::exists(*p)) fail(ErrorKind::kConfig, "config file not found: " + p->string());
  std::ifstream in(*p);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, "config " + p->string() + ": " + e.what());
  }
  return config_from_json(j, p->has_parent_path() ? p->parent_path() : fs::path("."));
}

json read_json(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) fail(ErrorKind::kMissingArtifact, what + " not found: " + path.string());
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, what + " " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// S8

namespace {

double s8_from_meta(const std::string& id, const SampleMeta& meta) {
  if (!meta.entailment_score)
    fail(ErrorKind::kValidation, "sample " + id + ": s8 source 'metadata' needs meta.entailment_score");
  const double s = *meta.entailment_score;
  require(s >= 0.0 && s <= 1.0, ErrorKind::kValidation, "sample " + id + ": entailment_score outside [0,1]");
  return 1.0 - s;
}

std::vector<double> run_plugin(const std::string& command, const std::vector<std::string>& ids,
                               const std::vector<SampleTexts>& texts) {
  const auto dir = fs::temp_directory_path();
  const auto stamp = std::to_string(std::hash<std::string>{}(command)) + "_" + std::to_string(ids.size());
  const auto in_path = dir / ("halluscope_s8_in_" + stamp + ".jsonl");
  const auto out_path = dir / ("halluscope_s8_out_" + stamp + ".jsonl");
  {
    std::ofstream in(in_path, std::ios::trunc);
    for (std::size_t i = 0; i < ids.size(); ++i)
      in << json{{"sample_id", ids[i]}, {"source", texts[i].source}, {"question", texts[i].question},
                 {"answer", texts[i].answer}}
                .dump()
         << '\n';
  }
  const std::string full = command + " < '" + in_path.string() + "' > '" + out_path.string() + "'";
  const int rc = std::system(full.c_str());
  fs::remove(in_path);
  if (rc != 0) {
    fs::remove(out_path);
    fail(ErrorKind::kValidation, "s8 plugin exited with status " + std::to_string(rc));
  }
  std::map<std::string, double> scores;
  std::ifstream out(out_path);
  std::string line;
  while (std::getline(out, line)) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      scores[j.at("sample_id").get<std::string>()] = j.at("score").get<double>();
    } catch (const json::exception& e) {
      fs::remove(out_path);
      fail(ErrorKind::kValidation, std::string("s8 plugin output: ") + e.what());
    }
  }
  fs::remove(out_path);
  std::vector<double> s8(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = scores.find(ids[i]);
    if (it == scores.end()) fail(ErrorKind::kValidation, "s8 plugin returned no score for " + ids[i]);
    require(it->second >= 0.0 && it->second <= 1.0, ErrorKind::kValidation,
            "s8 plugin score outside [0,1] for " + ids[i]);
    s8[i] = 1.0 - it->second;
  }
  return s8;
}

}  // namespace

std::vector<double> s8_values(const std::vector<SampleRecord>& records, const S8Source& source) {
  std::vector<double> out(records.size(), 0.5);
  switch (source.kind) {
    case S8Kind::kConstant: break;
    case S8Kind::kMetadata:
      for (std::size_t i = 0; i < records.size(); ++i) out[i] = s8_from_meta(records[i].sample_id, records[i].meta);
      break;
    case S8Kind::kPlugin: {
      std::vector<std::string> ids;
      std::vector<SampleTexts> texts;
      for (const auto& r : records) {
        ids.push_back(r.sample_id);
        texts.push_back(r.texts);
      }
      out = run_plugin(source.command, ids, texts);
      break;
    }
  }
  return out;
}

double s8_value(const SampleCache& sample, const S8Source& source) {
  switch (source.kind) {
    case S8Kind::kConstant: return 0.5;
    case S8Kind::kMetadata: return s8_from_meta(sample.sample_id, sample.meta);
    case S8Kind::kPlugin: return run_plugin(source.command, {sample.sample_id}, {sample.texts}).front();
  }
  return 0.5;
}

// ---------------------------------------------------------------------------
// Tables

features::FeatureTable extract_table(const fs::path& cache_dir, const S8Source& s8, bool assign_splits,
                                     std::uint64_t seed, const features::SplitFractions& split) {
  const CacheReader reader(cache_dir);
  require(reader.size() > 0, ErrorKind::kValidation, "cache " + cache_dir.string() + " has no samples");
  const auto& model = reader.model();
  const auto s8v = s8_values(reader.records(), s8);
  features::FeatureTable t;
  t.n_layers = model.n_layers;
  t.n_heads = model.n_heads;
  t.depth_fractions = model.depth_fractions;
  t.columns = raw_names(model.n_layers, model.n_heads, model.depth_fractions);
  t.values = Matrix(reader.size(), raw_dimension(model.n_layers, model.n_heads,
                                                 static_cast<int>(model.depth_fractions.size())));
  for (std::size_t i = 0; i < reader.size(); ++i) {
    const auto sample = reader.load(i);
    const auto flat = compute_raw_signals(sample, s8v[i]).flatten();
    std::copy(flat.begin(), flat.end(), t.values.row(i).begin());
    t.rows.push_back({sample.sample_id, sample.meta, features::kUnsplit});
  }
  if (assign_splits) {
    std::vector<SampleMeta> meta;
    for (const auto& r : t.rows) meta.push_back(r.meta);
    const auto s = features::stratified_split(meta, seed, split);
    for (std::size_t i = 0; i < s.size(); ++i) t.rows[i].split = s[i];
  }
  return t;
}

namespace {

RawSignals raw_row(const features::FeatureTable& t, std::size_t i) {
  return RawSignals::unflatten(t.values.row(i), t.n_layers, t.n_heads, static_cast<int>(t.depth_fractions.size()));
}

}  // namespace

Matrix assemble_rows(const features::FeatureTable& raw, std::span<const std::size_t> idx, const TrainStats& stats,
                     std::vector<double>* ahi) {
  Matrix X(idx.size(), feature_dimension(stats.n_layers, stats.n_heads, static_cast<int>(stats.depth_fractions.size())) +
                           (stats.include_ahi ? 1 : 0));
  if (ahi) ahi->assign(idx.size(), 0.0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto fv = assemble_features(raw_row(raw, idx[k]), stats);
    const auto x = model_input(fv, stats);
    std::copy(x.begin(), x.end(), X.row(k).begin());
    if (ahi) (*ahi)[k] = fv.ahi;
  }
  return X;
}

// ---------------------------------------------------------------------------
// Detector

json to_json(const PredictRecord& r) {
  return json{{"schema_version", kPredictSchemaVersion},
              {"sample_id", r.sample_id},
              {"model_used", r.model_used},
              {"meta_logit", r.meta_logit},
              {"raw", r.raw},
              {"calibrated", r.calibrated},
              {"decision", r.decision},
              {"regime", r.regime}};
}

Detector::Detector(TrainStats stats, learners::StackedModel generalist,
                   std::optional<learners::StackedModel> specialist, cal::CalibrationBundle bundle, S8Source s8)
    : stats_(std::move(stats)),
      generalist_(std::move(generalist)),
      specialist_(std::move(specialist)),
      bundle_(std::move(bundle)),
      s8_(std::move(s8)) {}

namespace {

fs::path model_path(const PipelineConfig& c, const char* id) { return c.paths.models / (std::string(id) + ".json"); }

}  // namespace

Detector Detector::load(const PipelineConfig& c) {
  auto stats = read_json(c.paths.stats, "train stats").get<TrainStats>();
  auto gen = learners::StackedModel::from_json(read_json(model_path(c, cal::kGeneralist), "stacking model"));
  std::optional<learners::StackedModel> spec;
  if (fs::exists(model_path(c, cal::kSpecialist)))
    spec = learners::StackedModel::from_json(read_json(model_path(c, cal::kSpecialist), "specialist model"));
  auto bundle = read_json(c.paths.bundle, "calibration bundle").get<cal::CalibrationBundle>();
  return Detector(std::move(stats), std::move(gen), std::move(spec), std::move(bundle), c.s8);
}

std::vector<std::string> Detector::registered() const {
  std::vector<std::string> r{cal::kGeneralist};
  if (specialist_) r.emplace_back(cal::kSpecialist);
  return r;
}

PredictRecord Detector::detect(const std::string& sample_id, const RawSignals& raw, const SampleMeta& meta) const {
  const auto x = model_input(assemble_features(raw, stats_), stats_);
  Matrix X(1, x.size());
  std::copy(x.begin(), x.end(), X.row(0).begin());
  const auto reg = registered();
  const auto routed = cal::route(meta, reg, bundle_.routing_rules);
  const auto& model = routed.model_id == cal::kSpecialist ? *specialist_ : generalist_;
  const auto pred = model.predict(X);
  PredictRecord r;
  r.sample_id = sample_id;
  r.model_used = routed.model_id;
  r.meta_logit = pred.meta_logit[0];
  r.raw = pred.probability[0];
  const auto c = cal::calibrate(cal::apply_temperature(r.meta_logit, bundle_.temperature), meta, bundle_);
  r.calibrated = c.probability;
  r.regime = cal::to_string(c.regime);
  r.decision = r.calibrated >= bundle_.threshold ? 1 : 0;
  return r;
}

PredictRecord Detector::detect(const SampleCache& sample) const {
  return detect(sample.sample_id, compute_raw_signals(sample, s8_value(sample, s8_)), sample.meta);
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const PipelineConfig& c) {
  std::vector<SampleCache> samples, ood;
  json notes{{"generator", "halluscope-synth"}, {"mode", c.synth.mode}};
  if (c.synth.mode == "plant") {
    auto spec = c.synth.plant;
    samples = synth::generate(spec);
    if (c.synth.write_ood) {
      auto s = synth::shifted(spec);
      s.seed = spec.seed + 1;
      s.id_prefix = spec.id_prefix + "-ood";
      ood = synth::generate(s);
    }
    notes["plant"] = spec;
  } else {
    const auto& mix = c.synth.mixture;
    samples = synth::generate_mixture(mix);
    if (c.synth.write_ood) {
      auto m = mix;
      m.seed = mix.seed + 1;
      m.n_samples = std::max<std::size_t>(mix.n_samples / 2, 2);
      for (auto& comp : m.components) {
        comp.spec.shift = true;
        comp.spec.id_prefix += "-ood";
      }
      ood = synth::generate_mixture(m);
    }
    notes["mixture"] = mix;
  }
  const auto s = write_cache(samples, c.paths.cache, notes);
  spdlog::info("synth: wrote {} samples to {}", s.n_samples, c.paths.cache.string());
  if (!ood.empty()) {
    notes["shift"] = true;
    const auto so = write_cache(ood, c.paths.ood_cache, notes);
    spdlog::info("synth: wrote {} shifted samples to {}", so.n_samples, c.paths.ood_cache.string());
  }
}

void cmd_extract(const PipelineConfig& c) {
  const CacheReader probe(c.paths.cache);
  bool labeled = true;
  for (const auto& r : probe.records()) labeled = labeled && r.meta.label.has_value();
  if (!labeled) spdlog::warn("extract: unlabeled samples present; no train/val/test split assigned");
  const auto t = extract_table(c.paths.cache, c.s8, labeled, c.seed, c.split);
  features::write_table(t, c.paths.features);
  spdlog::info("extract: {} x {} raw signals -> {}", t.values.rows, t.values.cols, c.paths.features.string());
  if (fs::exists(c.paths.ood_cache / "manifest.json")) {
    const auto o = extract_table(c.paths.ood_cache, c.s8, false, c.seed);
    features::write_table(o, c.paths.ood_features);
    spdlog::info("extract: {} shifted rows -> {}", o.values.rows, c.paths.ood_features.string());
  }
}

void cmd_fit_stats(const PipelineConfig& c) {
  const auto t = features::read_table(c.paths.features);
  const auto idx = t.rows_in(features::kTrain);
  require(!idx.empty(), ErrorKind::kValidation, "fit-stats: no training rows in " + c.paths.features.string());
  std::vector<RawSignals> train;
  for (auto i : idx) train.push_back(raw_row(t, i));
  const auto y = t.labels(idx);
  FitStatsOptions opt;
  opt.seed = c.seed;
  opt.sample_ids = t.ids(idx);
  opt.include_ahi = c.include_ahi;
  if (c.window_start) opt.window = WindowSpec{*c.window_start, std::min(kWindowLength, t.n_layers - *c.window_start)};
  auto stats = fit_train_stats(train, y, opt);
  stats.depth_fractions = t.depth_fractions;
  write_json(c.paths.stats, stats);
  spdlog::info("fit-stats: window starts at layer {} (length {})", stats.window.start_layer, stats.window.length);
}

void cmd_train(const PipelineConfig& c) {
  const auto t = features::read_table(c.paths.features);
  const auto stats = read_json(c.paths.stats, "train stats").get<TrainStats>();
  const auto idx = t.rows_in(features::kTrain);
  require(!idx.empty(), ErrorKind::kValidation, "train: no training rows");
  const auto X = assemble_rows(t, idx, stats);
  const auto y = t.labels(idx);
  const auto ids = t.ids(idx);
  std::vector<std::string> tags;
  for (auto i : idx) tags.push_back(t.rows[i].meta.dataset_tag);
  auto cfg = c.stacking;
  cfg.seed = c.seed;
  const auto gen = learners::fit_stacking(X, y, cfg, tags, ids);
  fs::create_directories(c.paths.models);
  write_json(model_path(c, cal::kGeneralist), gen.to_json());
  spdlog::info("train: stacking fitted on {} rows", X.rows);

  const auto& tag = c.calibration.routing_rules.specialist_domain;
  std::size_t n_tag = 0, pos_tag = 0;
  for (std::size_t k = 0; k < idx.size(); ++k)
    if (tags[k] == tag) {
      ++n_tag;
      pos_tag += static_cast<std::size_t>(y[k]);
    }
  const auto min_class = static_cast<std::size_t>(cfg.n_folds);
  const auto spec_path = model_path(c, cal::kSpecialist);
  if (pos_tag >= min_class && n_tag - pos_tag >= min_class) {
    const auto spec = learners::fit_ragt_stacking(X, y, tags, cfg, tag, ids);
    write_json(spec_path, spec.to_json());
    spdlog::info("train: specialist fitted on {} '{}' rows", n_tag, tag);
  } else {
    if (fs::exists(spec_path)) fs::remove(spec_path);
    spdlog::warn("train: too few '{}' rows ({}) for the specialist; only stacking is registered", tag, n_tag);
  }
}

namespace {

struct Scored {
  std::vector<std::size_t> idx;
  std::vector<std::string> model_used;
  std::vector<double> logit, raw, tempered;
};

/// Routes each row and returns its model's meta-logit and probability.
Scored score_routed(const features::FeatureTable& t, std::span<const std::size_t> idx, const TrainStats& stats,
                    const learners::StackedModel& gen, const learners::StackedModel* spec,
                    const cal::RoutingRules& rules, double temperature) {
  Scored s;
  s.idx.assign(idx.begin(), idx.end());
  const auto X = assemble_rows(t, idx, stats);
  const auto pg = gen.predict(X);
  std::optional<learners::Prediction> ps;
  if (spec) ps = spec->predict(X);
  std::vector<std::string> reg{cal::kGeneralist};
  if (spec) reg.emplace_back(cal::kSpecialist);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto r = cal::route(t.rows[idx[k]].meta, reg, rules);
    const bool sp = r.model_id == cal::kSpecialist;
    s.model_used.push_back(r.model_id);
    s.logit.push_back(sp ? ps->meta_logit[k] : pg.meta_logit[k]);
    s.raw.push_back(sp ? ps->probability[k] : pg.probability[k]);
    s.tempered.push_back(cal::apply_temperature(s.logit.back(), temperature));
  }
  return s;
}

std::optional<learners::StackedModel> load_specialist(const PipelineConfig& c) {
  if (!fs::exists(model_path(c, cal::kSpecialist))) return std::nullopt;
  return learners::StackedModel::from_json(read_json(model_path(c, cal::kSpecialist), "specialist model"));
}

}  // namespace

void cmd_calibrate(const PipelineConfig& c) {
  const auto t = features::read_table(c.paths.features);
  const auto stats = read_json(c.paths.stats, "train stats").get<TrainStats>();
  const auto gen = learners::StackedModel::from_json(read_json(model_path(c, cal::kGeneralist), "stacking model"));
  const auto spec = load_specialist(c);
  const auto idx = t.rows_in(features::kVal);
  require(!idx.empty(), ErrorKind::kValidation, "calibrate: no validation rows");
  const auto y = t.labels(idx);
  const auto s = score_routed(t, idx, stats, gen, spec ? &*spec : nullptr, c.calibration.routing_rules,
                              c.calibration.temperature);
  std::vector<cal::CalibrationRow> rows;
  for (std::size_t k = 0; k < idx.size(); ++k)
    rows.push_back({t.rows[idx[k]].sample_id, s.logit[k], y[k], t.rows[idx[k]].meta.dataset_tag});
  auto bundle = cal::fit_calibration(rows, c.calibration);
  if (c.fixed_threshold) bundle.threshold = *c.fixed_threshold;
  const auto overlap = bundle.fitting_overlap(t.ids(t.rows_in(features::kTest)));
  if (!overlap.empty()) fail(ErrorKind::kValidation, "calibrate: fitting rows overlap the test split");
  write_json(c.paths.bundle, bundle);
  spdlog::info("calibrate: threshold {:.4f} from {} validation rows", bundle.threshold, rows.size());
}

void cmd_predict(const PipelineConfig& c, const std::optional<fs::path>& cache_dir) {
  const auto det = Detector::load(c);
  const fs::path dir = cache_dir.value_or(c.paths.cache);
  const auto t = extract_table(dir, c.s8, false, c.seed);
  if (c.paths.predictions.has_parent_path()) fs::create_directories(c.paths.predictions.parent_path());
  std::ofstream out(c.paths.predictions, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + c.paths.predictions.string());
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    out << to_json(det.detect(t.rows[i].sample_id, raw_row(t, i), t.rows[i].meta)).dump() << '\n';
  spdlog::info("predict: {} records -> {}", t.rows.size(), c.paths.predictions.string());
}

namespace {

json signal_aucs(const features::FeatureTable& t, std::span<const std::size_t> idx, const TrainStats& stats,
                 std::span<const int> y, std::vector<eval::ReportRow>& rows) {
  std::vector<double> ahi;
  const auto X = assemble_rows(t, idx, stats, &ahi);
  const FeatureLayout layout{stats.n_layers, stats.n_heads, static_cast<int>(stats.depth_fractions.size())};
  json out = json::array();
  const auto names = layout.scalar_names(stats.depth_fractions);
  for (std::size_t k = 0; k < names.size(); ++k) {
    const double auc = eval::roc_auc(X.column(layout.scalar_begin() + k), y);
    out.push_back({{"signal", names[k]}, {"auc", auc}});
    rows.push_back({"signal", features::kTest, names[k], "auc", auc});
  }
  std::vector<double> s2m(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) s2m[k] = raw_row(t, idx[k]).s2_mean();
  for (const auto& [name, v] : {std::pair<std::string, const std::vector<double>*>{"AHI", &ahi}, {"S2mean", &s2m}}) {
    const double auc = eval::roc_auc(*v, y);
    out.push_back({{"signal", name}, {"auc", auc}});
    rows.push_back({"signal", features::kTest, name, "auc", auc});
  }
  return out;
}

}  // namespace

std::map<std::string, double> family_importance(const learners::StackedModel& model, const TrainStats& stats) {
  const FeatureLayout layout{stats.n_layers, stats.n_heads, static_cast<int>(stats.depth_fractions.size())};
  auto fam = layout.families();
  if (stats.include_ahi) fam.emplace_back("AHI");
  std::map<std::string, double> out;
  for (const auto& base : model.bases()) {
    if (base->kind() != learners::BaseKind::kRandomForest) continue;
    const auto imp = base->feature_importance();
    require(imp.size() == fam.size(), ErrorKind::kValidation, "forest importance does not match the feature layout");
    for (std::size_t k = 0; k < imp.size(); ++k) out[fam[k]] += imp[k];
  }
  return out;
}

void cmd_evaluate(const PipelineConfig& c) {
  const auto t = features::read_table(c.paths.features);
  const auto test = t.rows_in(features::kTest);
  const auto val = t.rows_in(features::kVal);
  if (test.empty() || !t.fully_labeled(test)) fail(ErrorKind::kValidation, "labels required on the test split");
  const auto det = Detector::load(c);
  const auto& stats = det.stats();
  const auto& bundle = det.bundle();
  const auto gen = learners::StackedModel::from_json(read_json(model_path(c, cal::kGeneralist), "stacking model"));
  const auto spec = load_specialist(c);
  const auto y = t.labels(test);
  const auto yv = t.labels(val);

  std::vector<eval::ReportRow> rows;
  json report{{"schema_version", kReportSchemaVersion}, {"n_test", test.size()}, {"n_val", val.size()}};

  // Single systems: thresholds frozen at the validation max-F1 point.
  const auto Xt = assemble_rows(t, test, stats);
  const auto Xv = assemble_rows(t, val, stats);
  const auto pg = gen.predict_proba(Xt);
  const auto pgv = gen.predict_proba(Xv);
  const auto rg = eval::metric_report(pg, y, eval::best_f1_threshold(pgv, yv));
  report["systems"]["stacking"] = rg;
  report["forest_importance"] = family_importance(gen, stats);
  eval::append_rows(rows, "stacking", features::kTest, "all", rg);

  // Routed and calibrated.
  const auto s = score_routed(t, test, stats, gen, spec ? &*spec : nullptr, bundle.routing_rules, bundle.temperature);
  std::vector<double> calibrated(test.size());
  for (std::size_t k = 0; k < test.size(); ++k)
    calibrated[k] = cal::calibrate(s.tempered[k], t.rows[test[k]].meta, bundle).probability;
  const auto rr = eval::metric_report(s.raw, y, 0.5);
  const auto rc = eval::metric_report(calibrated, y, bundle.threshold);
  report["systems"]["routed_raw"] = rr;
  report["systems"]["routed_calibrated"] = rc;
  eval::append_rows(rows, "routed_raw", features::kTest, "all", rr);
  eval::append_rows(rows, "routed_calibrated", features::kTest, "all", rc);

  // Specialist against the generalist on the specialist's domain.
  const auto& tag = bundle.routing_rules.specialist_domain;
  std::vector<double> a, b;
  std::vector<int> yt;
  for (std::size_t k = 0; k < test.size(); ++k)
    if (t.rows[test[k]].meta.dataset_tag == tag) {
      a.push_back(pg[k]);
      yt.push_back(y[k]);
    }
  if (spec && !yt.empty()) {
    const auto ps = spec->predict_proba(Xt);
    for (std::size_t k = 0; k < test.size(); ++k)
      if (t.rows[test[k]].meta.dataset_tag == tag) b.push_back(ps[k]);
    const auto n_pos = std::count(yt.begin(), yt.end(), 1);
    if (n_pos > 0 && n_pos < static_cast<long>(yt.size())) {
      const double auc_g = eval::roc_auc(a, yt), auc_s = eval::roc_auc(b, yt);
      report["specialist"] = {{"group", tag}, {"n", yt.size()}, {"stacking_auc", auc_g}, {"ragt_stacking_auc", auc_s},
                              {"delta", auc_s - auc_g}};
      rows.push_back({"stacking", features::kTest, tag, "auc", auc_g});
      rows.push_back({"ragt_stacking", features::kTest, tag, "auc", auc_s});
    }
  }

  // Breakdowns of the calibrated system.
  std::vector<std::string> by_dataset, by_group;
  for (auto i : test) {
    by_dataset.push_back(t.rows[i].meta.dataset_tag.empty() ? "untagged" : t.rows[i].meta.dataset_tag);
    by_group.push_back(t.rows[i].meta.group_tag.empty() ? "untagged" : t.rows[i].meta.group_tag);
  }
  const auto gd = eval::group_breakdown(calibrated, y, by_dataset, bundle.threshold);
  const auto gg = eval::group_breakdown(calibrated, y, by_group, bundle.threshold);
  report["groups"] = {{"dataset", gd}, {"generator", gg}};
  for (const auto& g : gd.groups) eval::append_rows(rows, "routed_calibrated", features::kTest, "dataset:" + g.group, g.report);
  for (const auto& g : gg.groups)
    eval::append_rows(rows, "routed_calibrated", features::kTest, "generator:" + g.group, g.report);

  // Calibration diagnostics on the fitting split and the leakage guard.
  std::vector<double> tv, cv;
  {
    const auto sv = score_routed(t, val, stats, gen, spec ? &*spec : nullptr, bundle.routing_rules, bundle.temperature);
    for (std::size_t k = 0; k < val.size(); ++k) {
      tv.push_back(sv.tempered[k]);
      cv.push_back(cal::calibrate(sv.tempered[k], t.rows[val[k]].meta, bundle).probability);
    }
  }
  report["calibration"] = {{"temperature", bundle.temperature},
                           {"threshold", bundle.threshold},
                           {"ece_val_tempered", cal::expected_calibration_error(tv, yv)},
                           {"ece_val_calibrated", cal::expected_calibration_error(cv, yv)},
                           {"ks_ragtruth_halueval", bundle.ks_ragtruth_halueval},
                           {"ks_warning", bundle.ks_warning},
                           {"test_overlap", bundle.fitting_overlap(t.ids(test)).size()}};

  report["signals"] = signal_aucs(t, test, stats, y, rows);
  fs::create_directories(c.paths.reports);
  write_json(c.paths.reports / "report.json", report);
  std::ofstream csv(c.paths.reports / "report.csv", std::ios::trunc);
  csv << eval::to_csv(rows);
  spdlog::info("evaluate: test AUC {:.4f} (routed, calibrated) -> {}", rc.auc, (c.paths.reports / "report.json").string());
}

void cmd_analyze(const PipelineConfig& c) {
  const auto t = features::read_table(c.paths.features);
  const auto stats = read_json(c.paths.stats, "train stats").get<TrainStats>();
  fs::create_directories(c.paths.reports);

  // Depth map over every labeled row.
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    if (t.rows[i].meta.label) labeled.push_back(i);
  if (labeled.empty()) fail(ErrorKind::kValidation, "labels required");
  std::vector<std::vector<double>> layer_s2;
  std::vector<std::string> tasks;
  for (auto i : labeled) {
    layer_s2.push_back(raw_row(t, i).s2_by_layer());
    tasks.push_back(t.rows[i].meta.task_tag.empty() ? "untagged" : t.rows[i].meta.task_tag);
  }
  const auto dm = eval::depth_map(layer_s2, t.labels(labeled), tasks);
  write_json(c.paths.reports / "depth_map.json", json{{"schema_version", kReportSchemaVersion}, {"depth_map", dm}});

  // Stability between the test split and the shifted set.
  json stability{{"schema_version", kReportSchemaVersion}};
  if (!fs::exists(c.paths.ood_features)) {
    spdlog::warn("analyze: no shifted feature matrix at {}; stability skipped", c.paths.ood_features.string());
    stability["skipped"] = "no shifted data";
  } else {
    const auto o = features::read_table(c.paths.ood_features);
    std::vector<std::size_t> all_o(o.rows.size());
    for (std::size_t i = 0; i < all_o.size(); ++i) all_o[i] = i;
    if (!o.fully_labeled(all_o)) fail(ErrorKind::kValidation, "labels required on the shifted set");
    const auto test = t.rows_in(features::kTest);
    const FeatureLayout layout{stats.n_layers, stats.n_heads, static_cast<int>(stats.depth_fractions.size())};
    auto names = layout.scalar_names(stats.depth_fractions);
    names.emplace_back("AHI");
    auto columns = [&](const features::FeatureTable& tab, std::span<const std::size_t> idx) {
      std::vector<double> ahi;
      const auto X = assemble_rows(tab, idx, stats, &ahi);
      std::vector<std::vector<double>> out(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto r = X.row(i);
        out[i].assign(r.begin() + static_cast<std::ptrdiff_t>(layout.scalar_begin()), r.end());
        out[i].push_back(ahi[i]);
      }
      return out;
    };
    const auto rep = eval::signal_stability(names, columns(t, test), t.labels(test), columns(o, all_o), o.labels(all_o));
    stability["stability"] = rep;
  }
  write_json(c.paths.reports / "stability.json", stability);
  spdlog::info("analyze: reports in {}", c.paths.reports.string());
}

}  // namespace halluscope::pipeline
