#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace halluscope {

inline constexpr int kCacheFormatVersion = 1;

struct ModelSpec {
  std::string model_id;
  int n_layers = 1;
  int n_heads = 1;
  std::vector<double> depth_fractions{0.25, 0.50, 0.75, 1.00};

  bool operator==(const ModelSpec&) const = default;
};

struct TokenRoles {
  int total_len = 0;
  std::vector<int> source_idx;
  std::vector<int> question_idx;
  std::vector<int> answer_idx;  // ordered

  bool operator==(const TokenRoles&) const = default;
};

struct SampleTexts {
  std::string source;
  std::string question;
  std::string answer;

  bool operator==(const SampleTexts&) const = default;
};

struct SampleMeta {
  std::string dataset_tag;
  std::string domain_tag;
  std::string task_tag;
  std::string group_tag;
  std::optional<int> label;  // 0 faithful, 1 hallucinated
  // External entailment score (e.g. an HHEM-style model); S8 = 1 - score.
  std::optional<double> entailment_score;

  bool operator==(const SampleMeta&) const = default;
};

/// One sample's activation capture. Tensors are float32, row-major:
///   resid_norms, mlp_norms  [n_layers x T]
///   attn_block              [n_layers x n_heads x |answer| x T]
///   lens_logprob            [n_layers x |answer|]
///   final_logprob           [|answer|]
struct SampleCache {
  std::string sample_id;
  ModelSpec model;
  TokenRoles roles;
  SampleTexts texts;
  std::vector<float> resid_norms;
  std::vector<float> mlp_norms;
  std::vector<float> attn_block;
  std::vector<float> lens_logprob;
  std::vector<float> final_logprob;
  SampleMeta meta;

  int n_layers() const { return model.n_layers; }
  int n_heads() const { return model.n_heads; }
  int seq_len() const { return roles.total_len; }
  int n_answer() const { return static_cast<int>(roles.answer_idx.size()); }

  std::size_t attn_index(int layer, int head, int row, int col) const {
    return ((static_cast<std::size_t>(layer) * n_heads() + head) * n_answer() + row) * seq_len() + col;
  }
  float attn(int layer, int head, int row, int col) const { return attn_block[attn_index(layer, head, row, col)]; }
  float resid(int layer, int tok) const { return resid_norms[static_cast<std::size_t>(layer) * seq_len() + tok]; }
  float mlp(int layer, int tok) const { return mlp_norms[static_cast<std::size_t>(layer) * seq_len() + tok]; }
  float lens(int layer, int row) const { return lens_logprob[static_cast<std::size_t>(layer) * n_answer() + row]; }

  bool operator==(const SampleCache&) const = default;
};

struct Violation {
  std::string code;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool has(const std::string& code) const;
  std::string summary(std::size_t max_items = 5) const;
};

ValidationReport validate_model_spec(const ModelSpec& model);
ValidationReport validate_cache(const SampleCache& sample);

struct ManifestSummary {
  std::filesystem::path manifest_path;
  std::filesystem::path blob_path;
  std::size_t n_samples = 0;
  std::uint64_t blob_bytes = 0;
  std::vector<std::uint64_t> attn_block_bytes;  // per sample
};

/// Capture notes recorded verbatim in the manifest (attention normalization,
/// residual tap point, template hash, ...).
using CaptureNotes = nlohmann::json;

ManifestSummary write_cache(const std::vector<SampleCache>& samples, const std::filesystem::path& dir,
                            const CaptureNotes& notes = nlohmann::json::object());

struct TensorEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

/// Manifest-level record: everything except the tensor payload.
struct SampleRecord {
  std::string sample_id;
  TokenRoles roles;
  SampleTexts texts;
  SampleMeta meta;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
  std::uint32_t crc32 = 0;
  std::vector<TensorEntry> tensors;
};

/// Lazily loads samples from a cache directory. Opening reads only the
/// manifest; tensors are read per sample on demand.
class CacheReader {
 public:
  explicit CacheReader(const std::filesystem::path& dir);

  const ModelSpec& model() const { return model_; }
  const nlohmann::json& capture_notes() const { return notes_; }
  std::size_t size() const { return records_.size(); }
  const SampleRecord& record(std::size_t i) const { return records_.at(i); }
  const std::vector<SampleRecord>& records() const { return records_; }
  std::optional<std::size_t> find(const std::string& sample_id) const;

  SampleCache load(std::size_t i) const;
  std::vector<SampleCache> load_all() const;

  std::uint64_t blob_bytes() const { return blob_bytes_; }

 private:
  std::filesystem::path dir_;
  std::filesystem::path blob_path_;
  ModelSpec model_;
  nlohmann::json notes_;
  std::uint64_t blob_bytes_ = 0;
  std::vector<SampleRecord> records_;
};

std::vector<SampleCache> read_cache(const std::filesystem::path& dir);

// JSON conversions shared by the manifest, inline service payloads and tools.
void to_json(nlohmann::json& j, const ModelSpec& m);
void from_json(const nlohmann::json& j, ModelSpec& m);
void to_json(nlohmann::json& j, const TokenRoles& r);
void from_json(const nlohmann::json& j, TokenRoles& r);
void to_json(nlohmann::json& j, const SampleTexts& t);
void from_json(const nlohmann::json& j, SampleTexts& t);
void to_json(nlohmann::json& j, const SampleMeta& m);
void from_json(const nlohmann::json& j, SampleMeta& m);

/// Inline capture: the full sample, tensors as flat float arrays.
nlohmann::json sample_to_json(const SampleCache& sample);
SampleCache sample_from_json(const nlohmann::json& j);

}  // namespace halluscope
