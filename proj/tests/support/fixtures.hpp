#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "halluscope/cache_io.hpp"
#include "halluscope/pipeline.hpp"
#include "halluscope/signals.hpp"

namespace fixtures {

/// Uniform attention, unit norms, log-probs of -1. Source tokens come first,
/// then the question, then the answer.
halluscope::SampleCache uniform_sample(int n_layers, int n_heads, int n_source, int n_question, int n_answer,
                                       const std::string& id = "s0");

/// Fresh empty directory under the system temp dir; removed by the destructor.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "hs");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Raw signals with every field set, for layouts that do not depend on values.
halluscope::RawSignals blank_raw(int n_layers, int n_heads, int n_depths = 4);

/// Mixture pipeline config under `work_dir` with small tree ensembles.
halluscope::pipeline::PipelineConfig small_config(const std::filesystem::path& work_dir, std::size_t n_samples = 400);

/// small_config run from synth through analyze, once per process.
const halluscope::pipeline::PipelineConfig& trained_pipeline();

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, const std::string& text);

}  // namespace fixtures
