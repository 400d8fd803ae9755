#include "halluscope/feature_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "halluscope/error.hpp"

namespace halluscope::features {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "feature files assume a little-endian host");

namespace {

fs::path sidecar(const fs::path& p) { return fs::path(p.string() + ".rows.jsonl"); }

}  // namespace

std::vector<std::size_t> FeatureTable::rows_in(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].split == split) out.push_back(i);
  return out;
}

bool FeatureTable::fully_labeled(std::span<const std::size_t> idx) const {
  return std::all_of(idx.begin(), idx.end(), [&](auto i) { return rows[i].meta.label.has_value(); });
}

std::vector<int> FeatureTable::labels(std::span<const std::size_t> idx) const {
  std::vector<int> y;
  y.reserve(idx.size());
  for (auto i : idx) {
    if (!rows[i].meta.label) fail(ErrorKind::kValidation, "labels required: sample " + rows[i].sample_id + " has none");
    y.push_back(*rows[i].meta.label);
  }
  return y;
}

std::vector<std::string> FeatureTable::ids(std::span<const std::size_t> idx) const {
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(rows[i].sample_id);
  return out;
}

void to_json(json& j, const RowInfo& r) { j = json{{"sample_id", r.sample_id}, {"split", r.split}, {"meta", r.meta}}; }

void from_json(const json& j, RowInfo& r) {
  r.sample_id = j.at("sample_id").get<std::string>();
  r.split = j.value("split", std::string(kUnsplit));
  r.meta = j.value("meta", json::object()).get<SampleMeta>();
}

void write_table(const FeatureTable& t, const fs::path& path) {
  require(t.values.rows == t.rows.size(), ErrorKind::kInvalidArgument, "feature table: row count mismatch");
  require(t.columns.empty() || t.columns.size() == t.values.cols, ErrorKind::kInvalidArgument,
          "feature table: column name count mismatch");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const json header{{"format", "halluscope-features"},
                    {"version", 1},
                    {"kind", t.kind},
                    {"dtype", "float32"},
                    {"byte_order", "little"},
                    {"rows", t.values.rows},
                    {"cols", t.values.cols},
                    {"n_layers", t.n_layers},
                    {"n_heads", t.n_heads},
                    {"depth_fractions", t.depth_fractions},
                    {"columns", t.columns},
                    {"stats_fingerprint", t.stats_fingerprint}};
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  const std::uint64_t len = h.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  const std::vector<float> payload(t.values.data.begin(), t.values.data.end());
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) fail(ErrorKind::kIo, "short write to " + path.string());

  std::ofstream rows(sidecar(path), std::ios::trunc);
  if (!rows) fail(ErrorKind::kIo, "cannot write " + sidecar(path).string());
  for (const auto& r : t.rows) rows << json(r).dump() << '\n';
}

FeatureTable read_table(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::kMissingArtifact, "feature matrix not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len == 0 || len > (1u << 26)) fail(ErrorKind::kFormat, "feature matrix: bad header length");
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  if (!in) fail(ErrorKind::kFormat, "feature matrix: truncated header");
  FeatureTable t;
  std::size_t n_rows = 0, n_cols = 0;
  try {
    const auto header = json::parse(h);
    if (header.value("format", std::string{}) != "halluscope-features" || header.value("version", 0) != 1)
      fail(ErrorKind::kFormat, "feature matrix: unsupported format");
    if (header.value("dtype", std::string{}) != "float32")
      fail(ErrorKind::kFormat, "feature matrix: unsupported dtype");
    t.kind = header.at("kind").get<std::string>();
    n_rows = header.at("rows").get<std::size_t>();
    n_cols = header.at("cols").get<std::size_t>();
    t.n_layers = header.at("n_layers").get<int>();
    t.n_heads = header.at("n_heads").get<int>();
    t.depth_fractions = header.at("depth_fractions").get<std::vector<double>>();
    t.columns = header.at("columns").get<std::vector<std::string>>();
    t.stats_fingerprint = header.value("stats_fingerprint", std::string{});
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("feature matrix header: ") + e.what());
  }
  std::vector<float> payload(n_rows * n_cols);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!in) fail(ErrorKind::kFormat, "feature matrix: truncated payload");
  t.values = Matrix(n_rows, n_cols);
  std::copy(payload.begin(), payload.end(), t.values.data.begin());

  std::ifstream rows(sidecar(path));
  if (!rows) fail(ErrorKind::kMissingArtifact, "feature row sidecar not found: " + sidecar(path).string());
  std::string line;
  while (std::getline(rows, line)) {
    if (line.empty()) continue;
    try {
      t.rows.push_back(json::parse(line).get<RowInfo>());
    } catch (const json::exception& e) {
      fail(ErrorKind::kFormat, std::string("feature row sidecar: ") + e.what());
    }
  }
  if (t.rows.size() != n_rows) fail(ErrorKind::kFormat, "feature row sidecar: row count does not match the matrix");
  return t;
}

std::vector<std::string> stratified_split(const std::vector<SampleMeta>& meta, std::uint64_t seed,
                                          const SplitFractions& f) {
  require(f.train > 0 && f.val > 0 && f.test > 0 && std::abs(f.train + f.val + f.test - 1.0) < 1e-9,
          ErrorKind::kConfig, "split fractions must be positive and sum to 1");
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < meta.size(); ++i) {
    if (!meta[i].label) fail(ErrorKind::kValidation, "labels required to split the data");
    strata[{meta[i].dataset_tag, *meta[i].label}].push_back(i);
  }
  std::vector<std::string> out(meta.size(), kTrain);
  std::mt19937_64 rng(seed ^ 0x73706c6974ULL);
  for (auto& [key, idx] : strata) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_val = static_cast<std::size_t>(std::llround(n * f.val));
    const auto n_test = static_cast<std::size_t>(std::llround(n * f.test));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (k < n_val)
        out[idx[k]] = kVal;
      else if (k < n_val + n_test)
        out[idx[k]] = kTest;
    }
  }
  return out;
}

}  // namespace halluscope::features
