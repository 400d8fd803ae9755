#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halluscope/cache_io.hpp"
#include "halluscope/matrix.hpp"

namespace halluscope::features {

inline constexpr const char* kTrain = "train";
inline constexpr const char* kVal = "val";
inline constexpr const char* kTest = "test";
inline constexpr const char* kUnsplit = "none";

struct RowInfo {
  std::string sample_id;
  SampleMeta meta;
  std::string split = kUnsplit;
};

/// Signal matrix with per-row bookkeeping. On disk:
///   <path>             u64 LE header length, JSON header, float32 LE rows x cols
///   <path>.rows.jsonl  one RowInfo per line
struct FeatureTable {
  std::string kind = "raw-signals";
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> depth_fractions;
  std::vector<std::string> columns;
  std::string stats_fingerprint;  // set once the table has been used to fit statistics
  Matrix values;
  std::vector<RowInfo> rows;

  std::vector<std::size_t> rows_in(const std::string& split) const;
  bool fully_labeled(std::span<const std::size_t> idx) const;
  std::vector<int> labels(std::span<const std::size_t> idx) const;
  std::vector<std::string> ids(std::span<const std::size_t> idx) const;
};

void write_table(const FeatureTable& t, const std::filesystem::path& path);
FeatureTable read_table(const std::filesystem::path& path);

struct SplitFractions {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

/// Seeded split stratified by (dataset tag, label).
std::vector<std::string> stratified_split(const std::vector<SampleMeta>& meta, std::uint64_t seed,
                                          const SplitFractions& fractions = {});

void to_json(nlohmann::json& j, const RowInfo& r);
void from_json(const nlohmann::json& j, RowInfo& r);

}  // namespace halluscope::features
