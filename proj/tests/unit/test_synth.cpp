#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "halluscope/error.hpp"
#include "halluscope/eval.hpp"
#include "halluscope/signals.hpp"
#include "halluscope/synth.hpp"

using namespace halluscope;
using namespace halluscope::synth;

namespace {

struct Extracted {
  std::vector<RawSignals> raw;
  std::vector<int> y;
};

Extracted extract(const std::vector<SampleCache>& caches) {
  Extracted e;
  for (const auto& s : caches) {
    e.raw.push_back(compute_raw_signals(s, 1.0 - s.meta.entailment_score.value_or(0.5)));
    e.y.push_back(*s.meta.label);
  }
  return e;
}

double s2_mean_auc(const Extracted& e) {
  std::vector<double> v;
  for (const auto& r : e.raw) v.push_back(r.s2_mean());
  return eval::roc_auc(v, e.y);
}

}  // namespace

TEST_SUITE("synth") {
  TEST_CASE("deterministic per seed and per index") {
    PlantSpec spec;
    spec.n_samples = 30;
    spec.seed = 42;
    const auto a = generate(spec);
    const auto b = generate(spec);
    CHECK(a == b);
    spec.seed = 43;
    CHECK_FALSE(generate(spec) == a);
    spec.seed = 42;
    CHECK(generate_sample(spec, 7, *a[7].meta.label) == a[7]);
    for (const auto& s : a) CHECK(validate_cache(s).ok());
  }

  TEST_CASE("labels have the exact positive count") {
    PlantSpec spec;
    spec.n_samples = 101;
    spec.positive_rate = 0.3;
    const auto y = plant_labels(spec);
    CHECK(std::count(y.begin(), y.end(), 1) == 30);
    CHECK(y == plant_labels(spec));
  }

  TEST_CASE("infeasible specs are rejected") {
    PlantSpec spec;
    SUBCASE("mass pushed out of range") {
      spec.effects.attn_gap = 0.6;
      CHECK_THROWS_AS(generate(spec), Error);
    }
    SUBCASE("negative effect") {
      spec.effects.mlp_boost = -0.1;
      CHECK_THROWS_AS(validate_spec(spec), Error);
    }
    SUBCASE("positive rate") {
      spec.positive_rate = 1.0;
      CHECK_THROWS_AS(validate_spec(spec), Error);
    }
    SUBCASE("band") {
      spec.effects.band_lo = 0.8;
      spec.effects.band_hi = 0.2;
      CHECK_THROWS_AS(validate_spec(spec), Error);
    }
  }

  TEST_CASE("informative cells") {
    PlantSpec spec;
    spec.effects.informative_head_fraction = 1.0;
    CHECK(informative_cells(spec).size() == 48);
    spec.effects.informative_head_fraction = 0.1;
    CHECK(informative_cells(spec).size() == 5);
    spec.effects.informative_head_fraction = 1.0;
    spec.effects.band_lo = 0.5;
    spec.effects.band_hi = 1.0;
    const auto cells = informative_cells(spec);
    CHECK(cells.size() == 24);
    CHECK(cells.front() == 6 * 4);
  }

  TEST_CASE("shift mode lengthens the source") {
    PlantSpec spec;
    spec.n_samples = 10;
    const auto base = generate(spec);
    const auto shift = generate(shifted(spec));
    for (std::size_t i = 0; i < base.size(); ++i) {
      CHECK(shift[i].roles.source_idx.size() == 3 * base[i].roles.source_idx.size());
      CHECK(validate_cache(shift[i]).ok());
    }
  }

  TEST_CASE("null generator gives chance-level single signals") {
    PlantSpec spec;
    spec.effects = EffectSizes::none();
    spec.seed = 11;
    const auto e = extract(generate(spec));
    REQUIRE(e.raw.size() == 2000);
    FeatureLayout layout{12, 4, 4};
    TrainStats st;
    st.n_layers = 12;
    st.n_heads = 4;
    st.window = {0, 7};
    st.ahi.w.assign(48, 1.0 / 48);
    std::vector<std::vector<double>> cols(19);
    std::vector<double> s2m, s4m;
    for (const auto& r : e.raw) {
      const auto v = assemble_features(r, st).values;
      for (int k = 0; k < 19; ++k) cols[k].push_back(v[layout.scalar_begin() + k]);
      s2m.push_back(r.s2_mean());
      s4m.push_back(r.s4_mean());
    }
    cols.push_back(s2m);
    cols.push_back(s4m);
    for (const auto& c : cols) {
      const double auc = eval::roc_auc(c, e.y);
      CHECK(auc >= 0.45);
      CHECK(auc <= 0.55);
    }
  }

  TEST_CASE("S2-mean separation grows with attn_gap") {
    PlantSpec spec;
    spec.effects = EffectSizes::none();
    spec.n_samples = 1000;
    spec.seed = 3;
    double prev = 0.0;
    for (double gap : {0.0, 0.1, 0.2}) {
      spec.effects.attn_gap = gap;
      const double auc = 1.0 - s2_mean_auc(extract(generate(spec)));
      CHECK(auc >= prev);
      prev = auc;
    }
    CHECK(prev > 0.85);
  }

  TEST_CASE("mixture allocation and tags") {
    const auto mix = benchmark_mixture(1000, 2);
    const auto caches = generate_mixture(mix);
    REQUIRE(caches.size() == 1000);
    std::map<std::string, int> per_tag;
    std::set<std::string> ids, groups;
    for (const auto& s : caches) {
      ++per_tag[s.meta.dataset_tag];
      ids.insert(s.sample_id);
      groups.insert(s.meta.group_tag);
      CHECK(s.meta.label.has_value());
    }
    CHECK(ids.size() == 1000);
    CHECK(per_tag["ragtruth"] == 300);
    CHECK(per_tag["halueval_qa"] == 250);
    CHECK(per_tag.size() == 5);
    CHECK(groups.size() == 6);
    CHECK(generate_mixture(mix) == caches);

    const auto two = two_distribution_fixture(500, 1);
    std::map<std::string, int> t;
    for (const auto& s : generate_mixture(two)) ++t[s.meta.dataset_tag];
    CHECK(t["ragtruth"] == 200);
    CHECK(t["halueval_qa"] == 300);
  }

  TEST_CASE("json round-trips") {
    PlantSpec spec;
    spec.effects.attn_gap = 0.17;
    spec.shift = true;
    spec.dataset_tag = "x";
    const nlohmann::json j = spec;
    CHECK(nlohmann::json(j.get<PlantSpec>()) == j);
    const nlohmann::json m = benchmark_mixture(100, 9);
    CHECK(nlohmann::json(m.get<MixtureSpec>()) == m);
  }
}
