#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "halluscope/error.hpp"
#include "halluscope/eval.hpp"
#include "halluscope/numeric.hpp"
#include "halluscope/signals.hpp"
#include "halluscope/synth.hpp"
#include "oracle.hpp"

using namespace halluscope;
using doctest::Approx;

namespace {

TrainStats plain_stats(int n_layers, int n_heads) {
  TrainStats st;
  st.n_layers = n_layers;
  st.n_heads = n_heads;
  st.window = {0, std::min(kWindowLength, n_layers)};
  st.ahi.n_layers = n_layers;
  st.ahi.n_heads = n_heads;
  const std::size_t cells = static_cast<std::size_t>(n_layers) * n_heads;
  st.ahi.w.assign(cells, 1.0 / cells);
  st.ahi.mu0.assign(cells, 0.0);
  st.ahi.mu1.assign(cells, 0.0);
  st.ahi.sigma.assign(cells, 1.0);
  return st;
}

std::string join(int first, int n, const std::string& stem) {
  std::string out;
  for (int i = 0; i < n; ++i) out += stem + std::to_string(first + i) + " ";
  return out;
}

// Per-head S2 with class separation only in [lo, hi] layers.
std::vector<RawSignals> banded_rows(int n, int n_layers, int n_heads, int lo, int hi, double gap,
                                    std::vector<int>& labels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<RawSignals> rows;
  labels.clear();
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    auto r = fixtures::blank_raw(n_layers, n_heads);
    for (int l = 0; l < n_layers; ++l) {
      r.s1[l] = 10.0 + noise(rng);
      for (int h = 0; h < n_heads; ++h)
        r.s2[static_cast<std::size_t>(l) * n_heads + h] = 0.5 + noise(rng) - (l >= lo && l <= hi ? gap * y : 0.0);
    }
    rows.push_back(r);
    labels.push_back(y);
  }
  return rows;
}

}  // namespace

TEST_SUITE("signals") {
  TEST_CASE("layer signals") {
    SUBCASE("constant residual norms") {
      auto s = fixtures::uniform_sample(4, 2, 3, 1, 2);
      std::fill(s.resid_norms.begin(), s.resid_norms.end(), 3.0f);
      const auto out = compute_layer_signals(s);
      for (double v : out.s1) CHECK(v == 3.0);
      CHECK(out.s15 == Approx(0.0));
    }
    SUBCASE("linear layer means") {
      auto s = fixtures::uniform_sample(3, 1, 2, 0, 2);
      for (int l = 0; l < 3; ++l)
        for (int t = 0; t < s.seq_len(); ++t) s.resid_norms[l * s.seq_len() + t] = static_cast<float>(l + 1);
      CHECK(compute_layer_signals(s).s15 == Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("random 4x6 against the OLS oracle") {
      std::mt19937_64 rng(5);
      std::uniform_real_distribution<float> u(0.0f, 20.0f);
      auto s = fixtures::uniform_sample(4, 1, 2, 1, 3);
      REQUIRE(s.seq_len() == 6);
      for (auto& v : s.resid_norms) v = u(rng);
      for (auto& v : s.mlp_norms) v = u(rng);
      const auto out = compute_layer_signals(s);
      std::vector<double> x{0, 1, 2, 3};
      CHECK(std::abs(out.s15 - oracle::ols_slope(x, out.s1)) < 1e-9);
      double m = 0.0;
      for (int tok : s.roles.answer_idx) m += s.mlp(2, tok);
      CHECK(out.s4[2] == Approx(m / 3.0));
    }
    SUBCASE("empty answer") {
      auto s = fixtures::uniform_sample(2, 1, 2, 0, 1);
      s.roles.answer_idx.clear();
      CHECK_THROWS_AS(compute_layer_signals(s), Error);
    }
  }

  TEST_CASE("attention signals") {
    SUBCASE("uniform over T=10 with four source tokens") {
      const auto s = fixtures::uniform_sample(3, 2, 4, 3, 3);
      REQUIRE(s.seq_len() == 10);
      const auto out = compute_attention_signals(s);
      for (double v : out.s2) CHECK(v == Approx(0.4).epsilon(1e-6));
      for (double v : out.s3) CHECK(v == Approx(std::log(4.0)).epsilon(1e-6));
      for (double v : out.tau) CHECK(v == Approx(0.4).epsilon(1e-6));
    }
    SUBCASE("all mass on one source token") {
      auto s = fixtures::uniform_sample(2, 2, 4, 1, 2);
      std::fill(s.attn_block.begin(), s.attn_block.end(), 0.0f);
      for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 2; ++h)
          for (int i = 0; i < 2; ++i) s.attn_block[s.attn_index(l, h, i, 2)] = 1.0f;
      const auto out = compute_attention_signals(s);
      for (double v : out.s2) CHECK(v == 1.0);
      for (double v : out.s3) CHECK(v == 0.0);
    }
    SUBCASE("no source mass counts as maximal entropy") {
      auto s = fixtures::uniform_sample(1, 1, 3, 0, 1);
      std::fill(s.attn_block.begin(), s.attn_block.end(), 0.0f);
      s.attn_block[s.attn_index(0, 0, 0, 3)] = 1.0f;
      const auto out = compute_attention_signals(s);
      CHECK(out.s2[0] == 0.0);
      CHECK(out.s3[0] == Approx(std::log(3.0)));
    }
    SUBCASE("random rows against the entropy oracle") {
      std::mt19937_64 rng(11);
      std::gamma_distribution<double> g(0.7, 1.0);
      auto s = fixtures::uniform_sample(3, 2, 6, 2, 4);
      const int t_len = s.seq_len();
      for (int l = 0; l < 3; ++l)
        for (int h = 0; h < 2; ++h)
          for (int i = 0; i < 4; ++i) {
            std::vector<double> w(t_len);
            double sum = 0.0;
            for (auto& x : w) sum += (x = g(rng));
            for (int t = 0; t < t_len; ++t) s.attn_block[s.attn_index(l, h, i, t)] = static_cast<float>(w[t] / sum);
          }
      const auto out = compute_attention_signals(s);
      for (int l = 0; l < 3; ++l)
        for (int h = 0; h < 2; ++h) {
          double ent = 0.0;
          for (int i = 0; i < 4; ++i) {
            std::vector<double> p;
            double mass = 0.0;
            for (int t : s.roles.source_idx) mass += s.attn(l, h, i, t);
            for (int t : s.roles.source_idx) p.push_back(s.attn(l, h, i, t) / mass);
            ent += oracle::entropy(p);
          }
          CHECK(std::abs(out.s3[l * 2 + h] - ent / 4.0) < 1e-6);
          CHECK(out.s3[l * 2 + h] <= std::log(6.0) + 1e-12);
        }
    }
    SUBCASE("one source token leaves entropy undefined") {
      CHECK_THROWS_AS(compute_attention_signals(fixtures::uniform_sample(2, 1, 1, 1, 2)), Error);
    }
  }

  TEST_CASE("logit signals") {
    SUBCASE("certain tokens") {
      auto s = fixtures::uniform_sample(8, 1, 2, 0, 2);
      std::fill(s.final_logprob.begin(), s.final_logprob.end(), 0.0f);
      CHECK(compute_logit_signals(s).s6_raw == 1.0);
    }
    SUBCASE("perplexity capped at 100") {
      auto s = fixtures::uniform_sample(8, 1, 2, 0, 2);
      std::fill(s.final_logprob.begin(), s.final_logprob.end(), -10.0f);
      CHECK(compute_logit_signals(s).s6_raw == 100.0);
    }
    SUBCASE("linear lens trajectory over the last eight layers") {
      auto s = fixtures::uniform_sample(12, 1, 2, 0, 2);
      for (int l = 0; l < 12; ++l)
        for (int i = 0; i < 2; ++i) s.lens_logprob[l * 2 + i] = (l < 4 ? -20.0f : -10.0f + 0.5f * l) + (i ? 0.25f : -0.25f);
      CHECK(compute_logit_signals(s).s13_raw == Approx(0.5).epsilon(1e-9));
    }
    SUBCASE("fewer than eight layers use all of them") {
      auto s = fixtures::uniform_sample(5, 1, 2, 0, 1);
      for (int l = 0; l < 5; ++l) s.lens_logprob[l] = -5.0f + 0.25f * l;
      CHECK(compute_logit_signals(s).s13_raw == Approx(0.25).epsilon(1e-9));
    }
    SUBCASE("depth fractions round up") {
      CHECK(depth_layer(0.25, 10) == 2);
      CHECK(depth_layer(0.50, 10) == 4);
      CHECK(depth_layer(0.75, 10) == 7);
      CHECK(depth_layer(1.00, 10) == 9);
      CHECK(depth_layer(0.25, 28) == 6);
      CHECK(depth_layer(0.25, 1) == 0);
      auto s = fixtures::uniform_sample(10, 1, 2, 0, 1);
      for (int l = 0; l < 10; ++l) s.lens_logprob[l] = -static_cast<float>(l);
      const auto out = compute_logit_signals(s);
      CHECK(out.s5 == std::vector<double>{-2, -4, -7, -9});
    }
  }

  TEST_CASE("lexical signals") {
    CHECK(compute_lexical_signals({"The cat sat", "", "the CAT sat"}).s10 == 1.0);
    CHECK(compute_lexical_signals({"The cat sat", "", "the CAT sat"}).s9 == 1.0);
    CHECK(compute_lexical_signals({"a b c", "", "d e"}).s10 == 0.0);
    // 20 source tokens over 15 types, 10 answer tokens, 5 shared types, 20 types in the union.
    const std::string source = join(0, 5, "W") + join(0, 10, "s") + join(0, 5, "s");
    const std::string answer = join(0, 5, "w") + join(0, 5, "a");
    const auto out = compute_lexical_signals({source, "q", answer});
    CHECK(out.s9 == Approx(0.5));
    CHECK(out.s10 == Approx(0.25));
    CHECK(std::abs(out.s10 - oracle::jaccard(lexical_tokens(answer), lexical_tokens(source))) < 1e-12);
    CHECK_THROWS_AS(compute_lexical_signals({"   ", "q", "a"}), Error);
  }

  TEST_CASE("feature dimension") {
    CHECK(feature_dimension(28, 24) == 1419);
    CHECK(feature_dimension(1, 1) == 23);
    const auto st = plain_stats(1, 1);
    const auto raw = compute_raw_signals(fixtures::uniform_sample(1, 1, 2, 1, 2), 0.5);
    CHECK(assemble_features(raw, st).values.size() == 23);
    const FeatureLayout layout{28, 24, 4};
    CHECK(layout.names({0.25, 0.5, 0.75, 1.0}).size() == 1419);
    CHECK(layout.families().size() == 1419);
    CHECK(layout.scalar("S18") == 1418);
    CHECK(layout.scalar("S6") == layout.scalar_begin() + 4);
    CHECK_THROWS_AS(layout.scalar("S19"), Error);
  }

  TEST_CASE("assembly of a uniform sample") {
    const auto s = fixtures::uniform_sample(8, 2, 4, 1, 3);
    const auto raw = compute_raw_signals(s, 0.3);
    CHECK(raw.tau_var == 0.0);
    CHECK(raw.tau_slope == Approx(0.0));
    const auto st = plain_stats(8, 2);
    const auto fv = assemble_features(raw, st);
    const FeatureLayout layout{8, 2, 4};
    CHECK(fv.values[layout.scalar("S17")] == 0.0);
    CHECK(fv.values[layout.scalar("S18")] == Approx(0.0));
    CHECK(fv.values[layout.scalar("S8")] == 0.3);
    CHECK(fv.values[layout.scalar("S12")] == Approx(0.5));
    CHECK(fv.values[layout.s2(3, 1)] == Approx(0.5));
    CHECK(fv.ahi == Approx(0.5));
    CHECK(model_input(fv, st).size() == fv.values.size());
    auto with = st;
    with.include_ahi = true;
    CHECK(model_input(fv, with).size() == fv.values.size() + 1);
    CHECK(model_input(fv, with).back() == fv.ahi);
  }

  TEST_CASE("raw signal bounds on generated data") {
    synth::PlantSpec spec;
    spec.n_samples = 60;
    spec.effects.attn_gap = 0.2;
    for (const auto& s : synth::generate(spec)) {
      const auto raw = compute_raw_signals(s, 0.5);
      for (double v : raw.s2) CHECK((v >= 0.0 && v <= 1.0));
      for (double v : raw.s3) CHECK((v >= 0.0 && v <= std::log(16.0) + 1e-9));
      CHECK((raw.s6_raw >= 1.0 && raw.s6_raw <= 100.0));
      CHECK((raw.s10 >= 0.0 && raw.s10 <= 1.0));
      const auto tau = compute_attention_signals(s).tau;
      for (double t : tau) CHECK((t >= 0.0 && t <= 1.0));
      const auto back = RawSignals::unflatten(raw.flatten(), raw.n_layers, raw.n_heads, 4);
      CHECK(back.flatten() == raw.flatten());
    }
  }

  TEST_CASE("non-finite values name the signal") {
    const auto st = plain_stats(2, 1);
    auto raw = compute_raw_signals(fixtures::uniform_sample(2, 1, 2, 1, 2), 0.5);
    raw.s9 = std::nan("");
    try {
      assemble_features(raw, st);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("S9") != std::string::npos);
    }
    CHECK_THROWS_AS(compute_raw_signals(fixtures::uniform_sample(2, 1, 2, 1, 2), 1.5), Error);
  }

  TEST_CASE("orthogonalize") {
    CHECK(orthogonalize(3.5, 2.0, {0.0, 0.0}) == 3.5);
    CHECK(orthogonalize(3.0, 2.0, {1.0, 0.0}) == 1.0);
    CHECK(orthogonalize(3.0, 2.0, {0.5, 1.0}) == 1.0);
  }

  TEST_CASE("fitted statistics") {
    synth::PlantSpec spec;
    spec.n_samples = 300;
    spec.seed = 7;
    std::vector<RawSignals> rows;
    std::vector<int> y;
    for (const auto& s : synth::generate(spec)) {
      rows.push_back(compute_raw_signals(s, 1.0 - s.meta.entailment_score.value_or(0.5)));
      y.push_back(*s.meta.label);
    }
    const auto st = fit_train_stats(rows, y);
    CHECK(st.n_train == 300);
    CHECK(st.s2_mean_sd > 0.0);
    CHECK(st.s4_mean_sd > 0.0);
    CHECK(st.window.length == kWindowLength);
    CHECK(st.window.start_layer + st.window.length <= 12);

    SUBCASE("orthogonalized signals are uncorrelated with their regressors") {
      const FeatureLayout layout{12, 4, 4};
      std::vector<double> s6, s13, s14, s16, s17, s18, s2m, s6raw, s13raw;
      for (const auto& r : rows) {
        const auto v = assemble_features(r, st).values;
        s6.push_back(v[layout.scalar("S6")]);
        s13.push_back(v[layout.scalar("S13")]);
        s14.push_back(v[layout.scalar("S14")]);
        s16.push_back(v[layout.scalar("S16")]);
        s17.push_back(v[layout.scalar("S17")]);
        s18.push_back(v[layout.scalar("S18")]);
        s2m.push_back(r.s2_mean());
        s6raw.push_back(r.s6_raw);
        s13raw.push_back(r.s13_raw);
      }
      CHECK(std::abs(numeric::pearson(s6, s13raw)) < 1e-6);
      CHECK(std::abs(numeric::pearson(s13, s6raw)) < 1e-6);
      for (const auto* x : {&s14, &s16, &s17, &s18}) CHECK(std::abs(numeric::pearson(*x, s2m)) < 1e-6);
    }
    SUBCASE("json round-trip") {
      auto copy = st;
      copy.include_ahi = true;
      const nlohmann::json j = copy;
      const auto back = j.get<TrainStats>();
      CHECK(nlohmann::json(back) == j);
      CHECK(back.include_ahi);
      auto bad = j;
      bad["format"] = "other";
      CHECK_THROWS_AS(bad.get<TrainStats>(), Error);
    }
    SUBCASE("window override") {
      FitStatsOptions opt;
      opt.window = WindowSpec{3, 7};
      CHECK(fit_train_stats(rows, y, opt).window == WindowSpec{3, 7});
      opt.window = WindowSpec{8, 7};
      CHECK_THROWS_AS(fit_train_stats(rows, y, opt), Error);
    }
    SUBCASE("single class") {
      std::vector<int> ones(rows.size(), 1);
      CHECK_THROWS_AS(fit_train_stats(rows, ones), Error);
    }
  }

  TEST_CASE("AHI weights") {
    SUBCASE("equal class means give uniform weights") {
      std::vector<RawSignals> rows;
      std::vector<int> y;
      std::mt19937_64 rng(3);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (int i = 0; i < 20; ++i) {
        auto r = fixtures::blank_raw(3, 2);
        for (auto& v : r.s2) v = u(rng);
        rows.push_back(r);
        rows.push_back(r);
        y.push_back(0);
        y.push_back(1);
      }
      const auto a = fit_ahi(rows, y);
      for (double w : a.w) CHECK(w == Approx(1.0 / 6.0));
    }
    SUBCASE("a single informative head takes all the weight") {
      std::vector<RawSignals> rows;
      std::vector<int> y;
      std::mt19937_64 rng(4);
      std::uniform_real_distribution<double> u(0.0, 0.5);
      for (int i = 0; i < 20; ++i) {
        auto r = fixtures::blank_raw(3, 2);
        for (auto& v : r.s2) v = u(rng);
        auto r1 = r;
        r1.s2[4] += 1.0;
        rows.push_back(r);
        rows.push_back(r1);
        y.push_back(0);
        y.push_back(1);
      }
      const auto a = fit_ahi(rows, y);
      CHECK(a.w[4] == Approx(1.0));
      CHECK(a.sign == 1.0);
      CHECK(std::abs(a.mu1[4] - a.mu0[4]) == Approx(1.0));
    }
    SUBCASE("anti-correlated data flips the sign") {
      std::vector<int> y;
      const auto rows = banded_rows(200, 4, 3, 0, 3, 0.1, y, 9);
      const auto a = fit_ahi(rows, y);
      CHECK(a.sign == -1.0);
      std::vector<double> score, s2m;
      for (const auto& r : rows) {
        score.push_back(ahi_score(r.s2, a));
        s2m.push_back(r.s2_mean());
      }
      CHECK(eval::roc_auc(s2m, y) < 0.5);
      CHECK(eval::roc_auc(score, y) >= 0.5);
      double total = 0.0;
      for (double w : a.w) {
        CHECK(w >= 0.0);
        total += w;
      }
      CHECK(total == Approx(1.0));
    }
    SUBCASE("permuting zero-weight heads leaves the score unchanged") {
      AHIWeights a;
      a.n_layers = 2;
      a.n_heads = 3;
      a.w = {0.0, 0.7, 0.0, 0.0, 0.0, 0.3};
      std::vector<double> s2{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
      const double base = ahi_score(s2, a);
      std::swap(s2[0], s2[2]);
      std::swap(s2[3], s2[4]);
      std::swap(s2[2], s2[3]);
      CHECK(ahi_score(s2, a) == base);
    }
  }

  TEST_CASE("fixed window selection") {
    SUBCASE("planted band at layers 5-11 of 16") {
      std::vector<int> y;
      const auto rows = banded_rows(240, 16, 2, 5, 11, 0.03, y, 1);
      const auto sel = select_fixed_window(rows, y);
      CHECK(sel.cv_auc.size() == 10);
      CHECK(sel.window.start_layer >= 4);
      CHECK(sel.window.start_layer <= 6);
      CHECK_FALSE(sel.fallback);
    }
    SUBCASE("identical windows tie at start 0") {
      std::vector<RawSignals> rows;
      std::vector<int> y;
      std::mt19937_64 rng(2);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (int i = 0; i < 60; ++i) {
        auto r = fixtures::blank_raw(12, 2);
        std::fill(r.s1.begin(), r.s1.end(), u(rng));
        std::fill(r.s2.begin(), r.s2.end(), u(rng));
        rows.push_back(r);
        y.push_back(i % 2);
      }
      CHECK(select_fixed_window(rows, y).window.start_layer == 0);
    }
    SUBCASE("fewer than seven layers span the model") {
      std::vector<int> y;
      const auto rows = banded_rows(40, 5, 2, 0, 4, 0.1, y, 1);
      const auto sel = select_fixed_window(rows, y);
      CHECK(sel.fallback);
      CHECK(sel.window == WindowSpec{0, 5});
    }
    SUBCASE("too few samples") {
      std::vector<int> y;
      const auto rows = banded_rows(20, 10, 2, 0, 4, 0.1, y, 1);
      CHECK_THROWS_AS(select_fixed_window(rows, y), Error);
    }
  }
}
