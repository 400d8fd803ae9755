#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halluscope/cache_io.hpp"

namespace halluscope::synth {

/// Class differences planted into hallucinated (label 1) samples.
struct EffectSizes {
  double attn_gap = 0.0;          // lower source mass in informative cells
  double entropy_gap = 0.0;       // sharper source attention (lower entropy)
  double resid_plateau = 0.0;     // in [0,1]; early residual-norm plateau
  double mlp_boost = 0.0;         // higher MLP output norms (log scale)
  double lens_early_commit = 0.0; // fraction of depth the lens commits earlier
  double lexical_gap = 0.0;       // lower answer/source word overlap
  double external_gap = 0.0;      // lower entailment score (logit scale)
  double informative_head_fraction = 1.0;
  double band_lo = 0.0;  // informative layer band, as depth fractions
  double band_hi = 1.0;

  static EffectSizes none();
};

struct PlantSpec {
  std::size_t n_samples = 2000;
  double positive_rate = 0.5;
  ModelSpec model{"synth-12x4", 12, 4, {0.25, 0.50, 0.75, 1.00}};
  EffectSizes effects{0.04, 0.1, 0.1, 0.06, 0.03, 0.3, 0.0, 1.0, 0.0, 1.0};
  double noise_scale = 1.0;
  std::uint64_t seed = 0;

  int source_len = 16;
  int question_len = 4;
  int answer_len = 8;
  double base_mass = 0.5;
  double mlp_direction = 1.0;  // -1 reverses the MLP effect
  int head_offset = 0;         // rotates the informative-cell stride
  bool shift = false;          // long-source scenario with rescaled lexical overlap

  std::string id_prefix = "syn";
  std::string dataset_tag;
  std::string domain_tag;
  std::string task_tag;
  std::string group_tag;
};

void to_json(nlohmann::json& j, const EffectSizes& e);
void from_json(const nlohmann::json& j, EffectSizes& e);
void to_json(nlohmann::json& j, const PlantSpec& s);
void from_json(const nlohmann::json& j, PlantSpec& s);

/// Throws on negative effects, positive_rate outside (0,1), or masses outside (0,1).
void validate_spec(const PlantSpec& spec);

/// Informative (layer, head) cells as flat indices layer * n_heads + head.
std::vector<int> informative_cells(const PlantSpec& spec);

/// Exactly round(n * positive_rate) positives, in seeded order.
std::vector<int> plant_labels(const PlantSpec& spec);

/// One sample from its own seed stream; independent of every other index.
SampleCache generate_sample(const PlantSpec& spec, std::size_t index, int label);

std::vector<SampleCache> generate(const PlantSpec& spec);

/// Long-source copy of `spec`.
PlantSpec shifted(PlantSpec spec);

struct MixtureComponent {
  PlantSpec spec;  // n_samples and seed are taken from the mixture
  double weight = 1.0;
};

struct MixtureSpec {
  std::size_t n_samples = 2000;
  std::uint64_t seed = 0;
  std::vector<MixtureComponent> components;
  int n_groups = 6;  // generator-style group tags "gen0".."gen5"
};

void to_json(nlohmann::json& j, const MixtureSpec& m);
void from_json(const nlohmann::json& j, MixtureSpec& m);

/// Components get counts proportional to weight; samples are interleaved in seeded order.
std::vector<SampleCache> generate_mixture(const MixtureSpec& mix);

/// Five tagged sources resembling the benchmark mix, each with its own layer band.
MixtureSpec benchmark_mixture(std::size_t n_samples, std::uint64_t seed);

/// A ragtruth-tagged component whose signals differ in direction and location
/// from the majority component.
MixtureSpec two_distribution_fixture(std::size_t n_samples, std::uint64_t seed);

}  // namespace halluscope::synth
