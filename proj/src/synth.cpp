#include "halluscope/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <numeric>
#include <random>

#include "halluscope/error.hpp"

namespace halluscope::synth {

using nlohmann::json;

namespace {

constexpr int kVocab = 2000;
constexpr double kSampleNoise = 0.15;
constexpr double kHeadNoise = 0.5;
constexpr double kTokenNoise = 0.5;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double logit(double p) { return std::log(p / (1.0 - p)); }
double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::string word(int k) { return "w" + std::to_string(k); }

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

std::string format_id(const std::string& prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return prefix + "-" + buf;
}

}  // namespace

EffectSizes EffectSizes::none() {
  EffectSizes e;
  return e;
}

void validate_spec(const PlantSpec& s) {
  const auto& e = s.effects;
  for (double v : {e.attn_gap, e.entropy_gap, e.resid_plateau, e.mlp_boost, e.lens_early_commit, e.lexical_gap,
                   e.external_gap, e.informative_head_fraction})
    require(v >= 0.0 && std::isfinite(v), ErrorKind::kConfig, "plant spec: effect sizes must be non-negative");
  require(s.positive_rate > 0.0 && s.positive_rate < 1.0, ErrorKind::kConfig,
          "plant spec: positive_rate must be in (0,1)");
  require(s.n_samples >= 2, ErrorKind::kConfig, "plant spec: need at least two samples");
  require(s.noise_scale >= 0.0, ErrorKind::kConfig, "plant spec: noise_scale must be non-negative");
  require(s.base_mass > 0.0 && s.base_mass < 1.0, ErrorKind::kConfig, "plant spec: base_mass must be in (0,1)");
  require(s.base_mass - e.attn_gap > 0.0, ErrorKind::kConfig,
          "plant spec: attn_gap pushes source mass outside (0,1)");
  require(e.resid_plateau <= 1.0, ErrorKind::kConfig, "plant spec: resid_plateau must be <= 1");
  require(e.lexical_gap <= 1.0, ErrorKind::kConfig, "plant spec: lexical_gap must be <= 1");
  require(e.lens_early_commit <= 0.5, ErrorKind::kConfig, "plant spec: lens_early_commit must be <= 0.5");
  require(e.informative_head_fraction <= 1.0, ErrorKind::kConfig, "plant spec: informative_head_fraction must be <= 1");
  require(e.band_lo >= 0.0 && e.band_lo < e.band_hi && e.band_hi <= 1.0, ErrorKind::kConfig,
          "plant spec: informative layer band must satisfy 0 <= lo < hi <= 1");
  require(s.source_len >= 2 && s.question_len >= 1 && s.answer_len >= 1, ErrorKind::kConfig,
          "plant spec: segment lengths too small");
  const auto report = validate_model_spec(s.model);
  if (!report.ok()) fail(ErrorKind::kConfig, "plant spec: " + report.summary());
}

std::vector<int> informative_cells(const PlantSpec& s) {
  const int nl = s.model.n_layers, nh = s.model.n_heads;
  std::vector<int> band;
  for (int l = 0; l < nl; ++l) {
    const double depth = (l + 0.5) / nl;
    if (depth >= s.effects.band_lo && depth <= s.effects.band_hi)
      for (int h = 0; h < nh; ++h) band.push_back(l * nh + h);
  }
  if (band.empty()) {
    const int l = std::clamp(static_cast<int>(0.5 * (s.effects.band_lo + s.effects.band_hi) * nl), 0, nl - 1);
    for (int h = 0; h < nh; ++h) band.push_back(l * nh + h);
  }
  const int want = std::max(1, static_cast<int>(std::lround(s.effects.informative_head_fraction * nl * nh)));
  if (want >= static_cast<int>(band.size())) return band;
  std::vector<int> out;
  const double stride = static_cast<double>(band.size()) / want;
  for (int k = 0; k < want; ++k) {
    const auto at = (static_cast<std::size_t>(k * stride) + s.head_offset) % band.size();
    out.push_back(band[at]);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<int> plant_labels(const PlantSpec& s) {
  const std::size_t n = s.n_samples;
  auto n_pos = static_cast<std::size_t>(std::llround(s.positive_rate * static_cast<double>(n)));
  n_pos = std::clamp<std::size_t>(n_pos, 1, n - 1);
  std::vector<int> y(n, 0);
  std::fill(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
  std::mt19937_64 rng(splitmix(s.seed ^ 0x6c6162656c73ULL));
  std::shuffle(y.begin(), y.end(), rng);
  return y;
}

SampleCache generate_sample(const PlantSpec& s, std::size_t index, int y) {
  std::mt19937_64 rng(splitmix(splitmix(s.seed) + index + 1));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> vocab(0, kVocab - 1);
  const double ns = s.noise_scale;
  const auto& e = s.effects;

  const int nl = s.model.n_layers, nh = s.model.n_heads;
  const int src = s.source_len * (s.shift ? 3 : 1);
  const int q = s.question_len, na = s.answer_len;
  const int total = src + 1 + q + 1 + na;
  const int ans0 = src + q + 2;

  SampleCache c;
  c.sample_id = format_id(s.id_prefix, index);
  c.model = s.model;
  c.roles.total_len = total;
  for (int t = 0; t < src; ++t) c.roles.source_idx.push_back(t);
  for (int t = 0; t < q; ++t) c.roles.question_idx.push_back(src + 1 + t);
  for (int t = 0; t < na; ++t) c.roles.answer_idx.push_back(ans0 + t);

  // Attention rows for answer tokens.
  const auto cells = informative_cells(s);
  std::vector<char> informative(static_cast<std::size_t>(nl) * nh, 0);
  for (int cell : cells) informative[cell] = 1;
  const double sample_shift = kSampleNoise * ns * gauss(rng);
  c.attn_block.assign(static_cast<std::size_t>(nl) * nh * na * total, 0.0f);
  std::vector<double> qw(src);
  for (int l = 0; l < nl; ++l) {
    for (int h = 0; h < nh; ++h) {
      const bool inf = y == 1 && informative[static_cast<std::size_t>(l) * nh + h];
      const double base = logit(s.base_mass - (inf ? e.attn_gap : 0.0));
      const double conc = 1.0 + (inf ? e.entropy_gap : 0.0);
      const double head_shift = kHeadNoise * ns * gauss(rng);
      double z = 0.0;
      for (int t = 0; t < src; ++t) z += (qw[t] = std::exp(conc * gauss(rng)));
      for (auto& w : qw) w /= z;
      for (int i = 0; i < na; ++i) {
        const int pos = ans0 + i;
        const double m = sigmoid(base + sample_shift + head_shift + kTokenNoise * ns * gauss(rng));
        const double rest = (1.0 - m) / static_cast<double>(pos + 1 - src);
        float* row = &c.attn_block[c.attn_index(l, h, i, 0)];
        for (int t = 0; t < src; ++t) row[t] = static_cast<float>(m * qw[t]);
        for (int t = src; t <= pos; ++t) row[t] = static_cast<float>(rest);
      }
    }
  }

  // Residual and MLP norms over every position.
  const double rho = y == 1 ? e.resid_plateau : 0.0;
  const double resid_level = 0.2 * ns * gauss(rng);
  const double mlp_level = 0.2 * ns * gauss(rng) + (y == 1 ? s.mlp_direction * e.mlp_boost : 0.0);
  c.resid_norms.resize(static_cast<std::size_t>(nl) * total);
  c.mlp_norms.resize(c.resid_norms.size());
  for (int l = 0; l < nl; ++l) {
    const double t = nl > 1 ? static_cast<double>(l) / (nl - 1) : 1.0;
    const double trend = 1.5 * ((1.0 - rho) * t + rho * std::min(t / 0.4, 1.0));
    for (int tok = 0; tok < total; ++tok) {
      const std::size_t k = static_cast<std::size_t>(l) * total + tok;
      c.resid_norms[k] = static_cast<float>(10.0 * std::exp(trend + resid_level + 0.1 * ns * gauss(rng)));
      c.mlp_norms[k] = static_cast<float>(2.0 * std::exp(mlp_level + 0.3 * ns * gauss(rng)));
    }
  }

  // Logit-lens trajectory: log-prob of the realized token rises after a commit layer.
  const double commit = (0.6 - (y == 1 ? e.lens_early_commit : 0.0)) * (nl - 1);
  const double width = std::max(0.1 * nl, 0.5);
  const double hi = std::log(6.0), lo = std::log(0.2);
  const double lens_level = 0.15 * ns * gauss(rng);
  c.lens_logprob.resize(static_cast<std::size_t>(nl) * na);
  for (int l = 0; l < nl; ++l) {
    const double qv = sigmoid((l - commit) / width);
    for (int i = 0; i < na; ++i)
      c.lens_logprob[static_cast<std::size_t>(l) * na + i] =
          static_cast<float>(-std::exp(hi - (hi - lo) * qv + lens_level + 0.2 * ns * gauss(rng)));
  }
  const double q_final = sigmoid((nl - 1 - commit) / width);
  c.final_logprob.resize(na);
  for (int i = 0; i < na; ++i)
    c.final_logprob[i] = static_cast<float>(-std::exp(hi - (hi - lo) * q_final + lens_level + 0.2 * ns * gauss(rng)));

  // Texts: answer words copied from the source at a class-dependent rate.
  std::vector<std::string> source_words(src), question_words(q), answer_words(na);
  for (auto& w : source_words) w = word(vocab(rng));
  for (auto& w : question_words) w = word(vocab(rng));
  double p_copy = y == 1 ? 0.5 - 0.5 * e.lexical_gap : 0.5 + 0.5 * e.lexical_gap;
  if (s.shift && y == 0) p_copy /= 3.0;
  std::uniform_int_distribution<int> pick(0, src - 1);
  for (auto& w : answer_words) w = unif(rng) < p_copy ? source_words[pick(rng)] : word(vocab(rng));
  c.texts = {join(source_words), join(question_words), join(answer_words)};

  c.meta.dataset_tag = s.dataset_tag;
  c.meta.domain_tag = s.domain_tag;
  c.meta.task_tag = s.task_tag;
  c.meta.group_tag = s.group_tag;
  c.meta.label = y;
  c.meta.entailment_score = sigmoid(gauss(rng) - (y == 1 ? e.external_gap : 0.0));
  return c;
}

std::vector<SampleCache> generate(const PlantSpec& spec) {
  validate_spec(spec);
  const auto y = plant_labels(spec);
  std::vector<SampleCache> out;
  out.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) out.push_back(generate_sample(spec, i, y[i]));
  return out;
}

PlantSpec shifted(PlantSpec spec) {
  spec.shift = true;
  return spec;
}

std::vector<SampleCache> generate_mixture(const MixtureSpec& mix) {
  require(!mix.components.empty(), ErrorKind::kConfig, "mixture: no components");
  require(mix.n_groups >= 1, ErrorKind::kConfig, "mixture: n_groups must be >= 1");
  double total_w = 0.0;
  for (const auto& c : mix.components) {
    require(c.weight > 0.0, ErrorKind::kConfig, "mixture: component weights must be positive");
    require(c.spec.model == mix.components.front().spec.model, ErrorKind::kConfig,
            "mixture: components must share one model spec");
    total_w += c.weight;
  }
  // Largest-remainder allocation.
  const std::size_t k = mix.components.size();
  std::vector<std::size_t> counts(k);
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = mix.components[i].weight / total_w * static_cast<double>(mix.n_samples);
    counts[i] = static_cast<std::size_t>(exact);
    assigned += counts[i];
    rem.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < mix.n_samples; ++r, ++assigned) ++counts[rem[r % k].second];

  std::vector<std::pair<std::size_t, std::size_t>> slots;  // (component, local index)
  std::vector<PlantSpec> specs;
  std::vector<std::vector<int>> labels;
  for (std::size_t i = 0; i < k; ++i) {
    PlantSpec s = mix.components[i].spec;
    s.n_samples = counts[i];
    s.seed = splitmix(mix.seed * 1315423911ULL + i);
    if (counts[i] == 0) {
      specs.push_back(s);
      labels.emplace_back();
      continue;
    }
    validate_spec(s);
    labels.push_back(plant_labels(s));
    specs.push_back(s);
    for (std::size_t j = 0; j < counts[i]; ++j) slots.emplace_back(i, j);
  }
  std::mt19937_64 rng(splitmix(mix.seed ^ 0x6d6978ULL));
  std::shuffle(slots.begin(), slots.end(), rng);
  std::uniform_int_distribution<int> group(0, mix.n_groups - 1);
  std::vector<SampleCache> out;
  out.reserve(slots.size());
  for (const auto& [ci, j] : slots) {
    auto c = generate_sample(specs[ci], j, labels[ci][j]);
    const int g = group(rng);
    if (c.meta.group_tag.empty()) c.meta.group_tag = "gen" + std::to_string(g);
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

MixtureComponent component(const std::string& prefix, const std::string& dataset, const std::string& domain,
                           const std::string& task, double weight, double lo, double hi) {
  MixtureComponent c;
  c.weight = weight;
  c.spec.id_prefix = prefix;
  c.spec.dataset_tag = dataset;
  c.spec.domain_tag = domain;
  c.spec.task_tag = task;
  c.spec.effects.band_lo = lo;
  c.spec.effects.band_hi = hi;
  c.spec.effects.informative_head_fraction = 0.3;
  return c;
}

}  // namespace

MixtureSpec benchmark_mixture(std::size_t n, std::uint64_t seed) {
  MixtureSpec m;
  m.n_samples = n;
  m.seed = seed;
  auto rt = component("rt", "ragtruth", "ragtruth", "rag", 0.30, 0.5, 0.9);
  rt.spec.mlp_direction = -1.0;
  rt.spec.head_offset = 1;
  m.components.push_back(rt);
  m.components.push_back(component("hq", "halueval_qa", "halueval", "qa", 0.25, 0.15, 0.55));
  m.components.push_back(component("mh", "medhallu", "medhallu", "medical", 0.15, 0.3, 0.7));
  m.components.push_back(component("mc", "minicheck", "minicheck", "claim", 0.15, 0.6, 1.0));
  m.components.push_back(component("an", "anli", "anli", "claim", 0.15, 0.6, 1.0));
  return m;
}

MixtureSpec two_distribution_fixture(std::size_t n, std::uint64_t seed) {
  MixtureSpec m;
  m.n_samples = n;
  m.seed = seed;
  auto set = [](MixtureComponent& c) {
    auto& e = c.spec.effects;
    e = EffectSizes::none();
    e.attn_gap = 0.06;
    e.mlp_boost = 0.35;
    e.informative_head_fraction = 0.25;
  };
  auto rt = component("rt", "ragtruth", "ragtruth", "rag", 0.4, 0.55, 0.95);
  set(rt);
  rt.spec.effects.band_lo = 0.55;
  rt.spec.effects.band_hi = 0.95;
  rt.spec.mlp_direction = -1.0;
  auto gen = component("hq", "halueval_qa", "halueval", "qa", 0.6, 0.05, 0.45);
  set(gen);
  gen.spec.effects.band_lo = 0.05;
  gen.spec.effects.band_hi = 0.45;
  m.components = {rt, gen};
  return m;
}

// ---------------------------------------------------------------------------

void to_json(json& j, const EffectSizes& e) {
  j = json{{"attn_gap", e.attn_gap},
           {"entropy_gap", e.entropy_gap},
           {"resid_plateau", e.resid_plateau},
           {"mlp_boost", e.mlp_boost},
           {"lens_early_commit", e.lens_early_commit},
           {"lexical_gap", e.lexical_gap},
           {"external_gap", e.external_gap},
           {"informative_head_fraction", e.informative_head_fraction},
           {"informative_layer_band", {e.band_lo, e.band_hi}}};
}

void from_json(const json& j, EffectSizes& e) {
  e.attn_gap = j.value("attn_gap", e.attn_gap);
  e.entropy_gap = j.value("entropy_gap", e.entropy_gap);
  e.resid_plateau = j.value("resid_plateau", e.resid_plateau);
  e.mlp_boost = j.value("mlp_boost", e.mlp_boost);
  e.lens_early_commit = j.value("lens_early_commit", e.lens_early_commit);
  e.lexical_gap = j.value("lexical_gap", e.lexical_gap);
  e.external_gap = j.value("external_gap", e.external_gap);
  e.informative_head_fraction = j.value("informative_head_fraction", e.informative_head_fraction);
  if (j.contains("informative_layer_band")) {
    const auto band = j.at("informative_layer_band").get<std::vector<double>>();
    require(band.size() == 2, ErrorKind::kConfig, "informative_layer_band must have two entries");
    e.band_lo = band[0];
    e.band_hi = band[1];
  }
}

void to_json(json& j, const PlantSpec& s) {
  j = json{{"n_samples", s.n_samples},
           {"positive_rate", s.positive_rate},
           {"model", s.model},
           {"effects", s.effects},
           {"noise_scale", s.noise_scale},
           {"seed", s.seed},
           {"source_len", s.source_len},
           {"question_len", s.question_len},
           {"answer_len", s.answer_len},
           {"base_mass", s.base_mass},
           {"mlp_direction", s.mlp_direction},
           {"head_offset", s.head_offset},
           {"shift", s.shift},
           {"id_prefix", s.id_prefix},
           {"dataset_tag", s.dataset_tag},
           {"domain_tag", s.domain_tag},
           {"task_tag", s.task_tag},
           {"group_tag", s.group_tag}};
}

void from_json(const json& j, PlantSpec& s) {
  s.n_samples = j.value("n_samples", s.n_samples);
  s.positive_rate = j.value("positive_rate", s.positive_rate);
  if (j.contains("model")) s.model = j.at("model").get<ModelSpec>();
  if (j.contains("effects")) j.at("effects").get_to(s.effects);
  s.noise_scale = j.value("noise_scale", s.noise_scale);
  s.seed = j.value("seed", s.seed);
  s.source_len = j.value("source_len", s.source_len);
  s.question_len = j.value("question_len", s.question_len);
  s.answer_len = j.value("answer_len", s.answer_len);
  s.base_mass = j.value("base_mass", s.base_mass);
  s.mlp_direction = j.value("mlp_direction", s.mlp_direction);
  s.head_offset = j.value("head_offset", s.head_offset);
  s.shift = j.value("shift", s.shift);
  s.id_prefix = j.value("id_prefix", s.id_prefix);
  s.dataset_tag = j.value("dataset_tag", s.dataset_tag);
  s.domain_tag = j.value("domain_tag", s.domain_tag);
  s.task_tag = j.value("task_tag", s.task_tag);
  s.group_tag = j.value("group_tag", s.group_tag);
}

void to_json(json& j, const MixtureSpec& m) {
  json comps = json::array();
  for (const auto& c : m.components) comps.push_back({{"weight", c.weight}, {"spec", c.spec}});
  j = json{{"n_samples", m.n_samples}, {"seed", m.seed}, {"n_groups", m.n_groups}, {"components", comps}};
}

void from_json(const json& j, MixtureSpec& m) {
  m.n_samples = j.value("n_samples", m.n_samples);
  m.seed = j.value("seed", m.seed);
  m.n_groups = j.value("n_groups", m.n_groups);
  m.components.clear();
  if (!j.contains("components")) {
    m.components = benchmark_mixture(m.n_samples, m.seed).components;
    return;
  }
  for (const auto& c : j.at("components")) {
    MixtureComponent mc;
    mc.weight = c.value("weight", 1.0);
    if (c.contains("spec")) c.at("spec").get_to(mc.spec);
    m.components.push_back(std::move(mc));
  }
}

}  // namespace halluscope::synth
