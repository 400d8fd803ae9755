#include "halluscope/cache_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <zlib.h>

#include "halluscope/error.hpp"

namespace halluscope {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kBlobName = "tensors.bin";
constexpr const char* kFormatName = "halluscope-cache";
constexpr double kRowSumTolerance = 1e-4;
constexpr std::size_t kMaxPerCode = 8;

static_assert(sizeof(float) == 4, "float32 wire type");

std::uint32_t crc_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void append_le(std::string& out, const std::vector<float>& values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  std::memcpy(out.data() + start, values.data(), values.size() * 4);
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = start; i < out.size(); i += 4) std::reverse(out.begin() + i, out.begin() + i + 4);
  }
}

std::vector<float> decode_le(const char* data, std::size_t nbytes) {
  std::vector<float> values(nbytes / 4);
  std::memcpy(values.data(), data, nbytes);
  if constexpr (std::endian::native == std::endian::big) {
    auto* bytes = reinterpret_cast<char*>(values.data());
    for (std::size_t i = 0; i < nbytes; i += 4) std::reverse(bytes + i, bytes + i + 4);
  }
  return values;
}

struct Reporter {
  ValidationReport report;
  std::vector<std::pair<std::string, std::size_t>> counts;

  void add(const std::string& code, const std::string& message) {
    auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& c) { return c.first == code; });
    if (it == counts.end()) {
      counts.emplace_back(code, 0);
      it = counts.end() - 1;
    }
    if (++it->second <= kMaxPerCode) report.violations.push_back({code, message});
  }
};

std::vector<std::int64_t> shape_of(const SampleCache& s, const std::string& name) {
  const std::int64_t nl = s.n_layers(), nh = s.n_heads(), t = s.seq_len(), a = s.n_answer();
  if (name == "resid_norms" || name == "mlp_norms") return {nl, t};
  if (name == "attn_block") return {nl, nh, a, t};
  if (name == "lens_logprob") return {nl, a};
  return {a};
}

std::size_t product(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(std::max<std::int64_t>(d, 0));
  return n;
}

const std::vector<float>& tensor_of(const SampleCache& s, const std::string& name) {
  if (name == "resid_norms") return s.resid_norms;
  if (name == "mlp_norms") return s.mlp_norms;
  if (name == "attn_block") return s.attn_block;
  if (name == "lens_logprob") return s.lens_logprob;
  return s.final_logprob;
}

std::vector<float>& tensor_of(SampleCache& s, const std::string& name) {
  return const_cast<std::vector<float>&>(tensor_of(static_cast<const SampleCache&>(s), name));
}

const std::vector<std::string>& tensor_names() {
  static const std::vector<std::string> names{"resid_norms", "mlp_norms", "attn_block", "lens_logprob",
                                              "final_logprob"};
  return names;
}

template <typename T>
T get_required(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) fail(ErrorKind::kFormat, "manifest: missing '" + std::string(key) + "' in " + where);
  return j.at(key).get<T>();
}

}  // namespace

bool ValidationReport::has(const std::string& code) const {
  return std::any_of(violations.begin(), violations.end(), [&](const Violation& v) { return v.code == code; });
}

std::string ValidationReport::summary(std::size_t max_items) const {
  std::ostringstream os;
  for (std::size_t i = 0; i < violations.size() && i < max_items; ++i) {
    if (i) os << "; ";
    os << violations[i].message;
  }
  if (violations.size() > max_items) os << "; (+" << violations.size() - max_items << " more)";
  return os.str();
}

ValidationReport validate_model_spec(const ModelSpec& model) {
  Reporter r;
  if (model.n_layers < 1) r.add("model", "n_layers must be >= 1");
  if (model.n_heads < 1) r.add("model", "n_heads must be >= 1");
  const auto& f = model.depth_fractions;
  if (f.empty()) {
    r.add("model", "depth_fractions empty");
  } else {
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (!(f[i] > 0.0 && f[i] <= 1.0)) r.add("model", "depth fraction outside (0,1]");
      if (i > 0 && !(f[i] > f[i - 1])) r.add("model", "depth_fractions not strictly increasing");
    }
    if (f.back() != 1.0) r.add("model", "last depth fraction must be 1.0");
  }
  return r.report;
}

ValidationReport validate_cache(const SampleCache& s) {
  Reporter r;
  for (auto& v : validate_model_spec(s.model).violations) r.add(v.code, v.message);
  if (!r.report.ok()) return r.report;

  const auto& roles = s.roles;
  const int t_len = roles.total_len;
  if (t_len < 1) r.add("roles", "total_len must be >= 1");
  if (roles.answer_idx.empty()) r.add("roles", "answer_idx empty");
  if (roles.source_idx.empty()) r.add("roles", "source_idx empty");
  bool disjoint = true;
  for (const auto* set : {&roles.source_idx, &roles.question_idx, &roles.answer_idx}) {
    std::set<int> local;
    for (int idx : *set) {
      if (idx < 0 || idx >= t_len) r.add("roles", "token index " + std::to_string(idx) + " outside [0, T)");
      if (!local.insert(idx).second) r.add("roles", "duplicate token index " + std::to_string(idx));
    }
  }
  {
    std::set<int> src(roles.source_idx.begin(), roles.source_idx.end());
    std::set<int> q(roles.question_idx.begin(), roles.question_idx.end());
    for (int a : roles.answer_idx)
      if (src.count(a) || q.count(a)) disjoint = false;
    for (int x : roles.question_idx)
      if (src.count(x)) disjoint = false;
  }
  if (!disjoint) r.add("roles", "roles not disjoint");
  if (!r.report.ok()) return r.report;

  bool shapes_ok = true;
  for (const auto& name : tensor_names()) {
    const std::size_t expect = product(shape_of(s, name));
    if (tensor_of(s, name).size() != expect) {
      r.add("shape", name + " has " + std::to_string(tensor_of(s, name).size()) + " values, expected " +
                         std::to_string(expect));
      shapes_ok = false;
    }
  }
  if (!shapes_ok) return r.report;

  const int nl = s.n_layers(), nh = s.n_heads(), na = s.n_answer();
  for (const auto* name : {"resid_norms", "mlp_norms"}) {
    for (float v : tensor_of(s, name)) {
      if (!std::isfinite(v)) {
        r.add("finite", std::string(name) + " contains non-finite value");
      } else if (v < 0.0f) {
        r.add("norm", std::string(name) + " contains negative norm");
      }
    }
  }
  for (const auto* name : {"lens_logprob", "final_logprob"}) {
    for (float v : tensor_of(s, name)) {
      if (!std::isfinite(v)) {
        r.add("finite", std::string(name) + " contains non-finite value");
      } else if (v > 0.0f) {
        r.add("logprob", "log-probability > 0 in " + std::string(name));
      }
    }
  }
  for (int l = 0; l < nl; ++l) {
    for (int h = 0; h < nh; ++h) {
      for (int i = 0; i < na; ++i) {
        double sum = 0.0;
        bool range_ok = true;
        for (int t = 0; t < t_len; ++t) {
          const float a = s.attn(l, h, i, t);
          if (!(a >= 0.0f && a <= 1.0f)) range_ok = false;
          sum += a;
        }
        const std::string where =
            "layer " + std::to_string(l) + " head " + std::to_string(h) + " row " + std::to_string(i);
        if (!range_ok) r.add("attn_range", "attention entry outside [0,1] at " + where);
        if (!(std::abs(sum - 1.0) <= kRowSumTolerance)) {
          std::ostringstream os;
          os << "attention row sums to " << sum << " at " << where;
          r.add("attn_row_sum", os.str());
        }
      }
    }
  }
  return r.report;
}

// ---------------------------------------------------------------------------
// JSON conversions

void to_json(json& j, const ModelSpec& m) {
  j = json{{"model_id", m.model_id},
           {"n_layers", m.n_layers},
           {"n_heads", m.n_heads},
           {"depth_fractions", m.depth_fractions}};
}

void from_json(const json& j, ModelSpec& m) {
  m.model_id = j.value("model_id", std::string{});
  m.n_layers = j.at("n_layers").get<int>();
  m.n_heads = j.at("n_heads").get<int>();
  if (j.contains("depth_fractions")) m.depth_fractions = j.at("depth_fractions").get<std::vector<double>>();
}

void to_json(json& j, const TokenRoles& r) {
  j = json{{"total_len", r.total_len},
           {"source_idx", r.source_idx},
           {"question_idx", r.question_idx},
           {"answer_idx", r.answer_idx}};
}

void from_json(const json& j, TokenRoles& r) {
  r.total_len = j.at("total_len").get<int>();
  r.source_idx = j.at("source_idx").get<std::vector<int>>();
  r.question_idx = j.value("question_idx", std::vector<int>{});
  r.answer_idx = j.at("answer_idx").get<std::vector<int>>();
}

void to_json(json& j, const SampleTexts& t) {
  j = json{{"source", t.source}, {"question", t.question}, {"answer", t.answer}};
}

void from_json(const json& j, SampleTexts& t) {
  t.source = j.value("source", std::string{});
  t.question = j.value("question", std::string{});
  t.answer = j.value("answer", std::string{});
}

void to_json(json& j, const SampleMeta& m) {
  j = json{{"dataset_tag", m.dataset_tag},
           {"domain_tag", m.domain_tag},
           {"task_tag", m.task_tag},
           {"group_tag", m.group_tag}};
  j["label"] = m.label ? json(*m.label) : json(nullptr);
  if (m.entailment_score) j["entailment_score"] = *m.entailment_score;
}

void from_json(const json& j, SampleMeta& m) {
  m.dataset_tag = j.value("dataset_tag", std::string{});
  m.domain_tag = j.value("domain_tag", std::string{});
  m.task_tag = j.value("task_tag", std::string{});
  m.group_tag = j.value("group_tag", std::string{});
  m.label.reset();
  if (j.contains("label") && !j.at("label").is_null()) m.label = j.at("label").get<int>();
  m.entailment_score.reset();
  if (j.contains("entailment_score") && !j.at("entailment_score").is_null())
    m.entailment_score = j.at("entailment_score").get<double>();
}

json sample_to_json(const SampleCache& s) {
  json j{{"sample_id", s.sample_id}, {"model", s.model}, {"roles", s.roles}, {"texts", s.texts}, {"meta", s.meta}};
  for (const auto& name : tensor_names()) j[name] = tensor_of(s, name);
  return j;
}

SampleCache sample_from_json(const json& j) {
  SampleCache s;
  try {
    s.sample_id = j.value("sample_id", std::string{"inline"});
    s.model = j.at("model").get<ModelSpec>();
    s.roles = j.at("roles").get<TokenRoles>();
    if (j.contains("texts")) s.texts = j.at("texts").get<SampleTexts>();
    if (j.contains("meta")) s.meta = j.at("meta").get<SampleMeta>();
    for (const auto& name : tensor_names()) tensor_of(s, name) = j.at(name).get<std::vector<float>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("inline capture: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Writing

ManifestSummary write_cache(const std::vector<SampleCache>& samples, const fs::path& dir, const CaptureNotes& notes) {
  require(!samples.empty(), ErrorKind::kInvalidArgument, "write_cache: no samples");
  const ModelSpec& model = samples.front().model;
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (!(s.model == model))
      fail(ErrorKind::kValidation, "write_cache: sample " + s.sample_id + " has a different model spec");
    if (!ids.insert(s.sample_id).second)
      fail(ErrorKind::kValidation, "write_cache: duplicate sample_id " + s.sample_id);
    const auto report = validate_cache(s);
    if (!report.ok()) fail(ErrorKind::kValidation, "write_cache: sample " + s.sample_id + ": " + report.summary());
  }

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "write_cache: cannot create " + dir.string() + ": " + ec.message());

  ManifestSummary summary;
  summary.manifest_path = dir / kManifestName;
  summary.blob_path = dir / kBlobName;
  summary.n_samples = samples.size();

  std::ofstream blob(summary.blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) fail(ErrorKind::kIo, "write_cache: cannot open " + summary.blob_path.string());

  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& s : samples) {
    std::string bytes;
    json tensors = json::array();
    for (const auto& name : tensor_names()) {
      const std::uint64_t start = bytes.size();
      append_le(bytes, tensor_of(s, name));
      const std::uint64_t nbytes = bytes.size() - start;
      tensors.push_back({{"name", name}, {"shape", shape_of(s, name)}, {"offset", offset + start}, {"nbytes", nbytes}});
      if (name == "attn_block") summary.attn_block_bytes.push_back(nbytes);
    }
    blob.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!blob) fail(ErrorKind::kIo, "write_cache: write failed for " + summary.blob_path.string());
    table.push_back({{"sample_id", s.sample_id},
                     {"offset", offset},
                     {"nbytes", bytes.size()},
                     {"crc32", crc_of(bytes.data(), bytes.size())},
                     {"roles", s.roles},
                     {"texts", s.texts},
                     {"meta", s.meta},
                     {"tensors", tensors}});
    offset += bytes.size();
  }
  blob.close();
  summary.blob_bytes = offset;

  json manifest{{"format", kFormatName},
                {"format_version", kCacheFormatVersion},
                {"dtype", "float32"},
                {"byte_order", "little"},
                {"layout", "row-major"},
                {"model", model},
                {"capture", notes},
                {"blob", kBlobName},
                {"blob_bytes", offset},
                {"samples", table}};
  std::ofstream out(summary.manifest_path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "write_cache: cannot open " + summary.manifest_path.string());
  out << manifest.dump(1) << '\n';
  if (!out) fail(ErrorKind::kIo, "write_cache: write failed for " + summary.manifest_path.string());
  return summary;
}

// ---------------------------------------------------------------------------
// Reading

CacheReader::CacheReader(const fs::path& dir) : dir_(dir) {
  const fs::path manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) fail(ErrorKind::kMissingArtifact, "no manifest in " + dir.string());
  std::ifstream in(manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, "manifest parse error: " + std::string(e.what()));
  }
  try {
    if (manifest.value("format", std::string{}) != kFormatName)
      fail(ErrorKind::kFormat, "manifest: unexpected format tag");
    const int version = get_required<int>(manifest, "format_version", "manifest");
    if (version != kCacheFormatVersion)
      fail(ErrorKind::kFormat, "manifest: unsupported format_version " + std::to_string(version));
    model_ = manifest.at("model").get<ModelSpec>();
    notes_ = manifest.value("capture", json::object());
    blob_path_ = dir / manifest.value("blob", std::string{kBlobName});
    blob_bytes_ = get_required<std::uint64_t>(manifest, "blob_bytes", "manifest");
    for (const auto& row : manifest.at("samples")) {
      SampleRecord rec;
      rec.sample_id = get_required<std::string>(row, "sample_id", "sample table");
      rec.offset = get_required<std::uint64_t>(row, "offset", rec.sample_id);
      rec.nbytes = get_required<std::uint64_t>(row, "nbytes", rec.sample_id);
      rec.crc32 = get_required<std::uint32_t>(row, "crc32", rec.sample_id);
      rec.roles = row.at("roles").get<TokenRoles>();
      rec.texts = row.value("texts", json::object()).get<SampleTexts>();
      rec.meta = row.value("meta", json::object()).get<SampleMeta>();
      for (const auto& t : row.at("tensors")) {
        TensorEntry e;
        e.name = t.at("name").get<std::string>();
        e.shape = t.at("shape").get<std::vector<std::int64_t>>();
        e.offset = t.at("offset").get<std::uint64_t>();
        e.nbytes = t.at("nbytes").get<std::uint64_t>();
        rec.tensors.push_back(std::move(e));
      }
      records_.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, "manifest: " + std::string(e.what()));
  }
  if (!fs::exists(blob_path_)) fail(ErrorKind::kMissingArtifact, "missing tensor blob " + blob_path_.string());
  const auto actual = fs::file_size(blob_path_);
  if (actual < blob_bytes_)
    fail(ErrorKind::kFormat, "truncated blob: " + std::to_string(actual) + " bytes, manifest declares " +
                                 std::to_string(blob_bytes_));
}

std::optional<std::size_t> CacheReader::find(const std::string& sample_id) const {
  for (std::size_t i = 0; i < records_.size(); ++i)
    if (records_[i].sample_id == sample_id) return i;
  return std::nullopt;
}

SampleCache CacheReader::load(std::size_t i) const {
  const SampleRecord& rec = records_.at(i);
  const auto file_bytes = fs::file_size(blob_path_);
  if (rec.offset > file_bytes || rec.nbytes > file_bytes - rec.offset || rec.offset + rec.nbytes > blob_bytes_)
    fail(ErrorKind::kFormat, "sample " + rec.sample_id + ": byte range outside blob (bounds error)");

  std::string bytes(rec.nbytes, '\0');
  std::ifstream in(blob_path_, std::ios::binary);
  in.seekg(static_cast<std::streamoff>(rec.offset));
  in.read(bytes.data(), static_cast<std::streamsize>(rec.nbytes));
  if (!in) fail(ErrorKind::kIo, "sample " + rec.sample_id + ": short read");
  if (crc_of(bytes.data(), bytes.size()) != rec.crc32)
    fail(ErrorKind::kFormat, "sample " + rec.sample_id + ": checksum failure");

  SampleCache s;
  s.sample_id = rec.sample_id;
  s.model = model_;
  s.roles = rec.roles;
  s.texts = rec.texts;
  s.meta = rec.meta;
  for (const auto& name : tensor_names()) {
    auto it = std::find_if(rec.tensors.begin(), rec.tensors.end(), [&](const TensorEntry& e) { return e.name == name; });
    if (it == rec.tensors.end()) fail(ErrorKind::kFormat, "sample " + rec.sample_id + ": missing tensor " + name);
    if (it->offset < rec.offset || it->offset + it->nbytes > rec.offset + rec.nbytes || it->nbytes % 4 != 0)
      fail(ErrorKind::kFormat, "sample " + rec.sample_id + ": tensor " + name + " outside sample range (bounds error)");
    if (product(it->shape) * 4 != it->nbytes || it->shape != shape_of(s, name))
      fail(ErrorKind::kFormat, "sample " + rec.sample_id + ": tensor " + name + " shape mismatch");
    tensor_of(s, name) = decode_le(bytes.data() + (it->offset - rec.offset), it->nbytes);
  }
  return s;
}

std::vector<SampleCache> CacheReader::load_all() const {
  std::vector<SampleCache> out;
  out.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) out.push_back(load(i));
  return out;
}

std::vector<SampleCache> read_cache(const fs::path& dir) { return CacheReader(dir).load_all(); }

}  // namespace halluscope
