#include "fixtures.hpp"

#include <atomic>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "halluscope/synth.hpp"

namespace fixtures {

namespace fs = std::filesystem;
using namespace halluscope;

SampleCache uniform_sample(int n_layers, int n_heads, int n_source, int n_question, int n_answer,
                           const std::string& id) {
  SampleCache s;
  s.sample_id = id;
  s.model = ModelSpec{"fixture", n_layers, n_heads, {0.25, 0.50, 0.75, 1.00}};
  const int t_len = n_source + n_question + n_answer;
  s.roles.total_len = t_len;
  int tok = 0;
  for (int i = 0; i < n_source; ++i) s.roles.source_idx.push_back(tok++);
  for (int i = 0; i < n_question; ++i) s.roles.question_idx.push_back(tok++);
  for (int i = 0; i < n_answer; ++i) s.roles.answer_idx.push_back(tok++);
  s.texts = {"the cat sat on the mat", "where", "the cat"};
  const std::size_t lt = static_cast<std::size_t>(n_layers) * t_len;
  s.resid_norms.assign(lt, 1.0f);
  s.mlp_norms.assign(lt, 1.0f);
  s.attn_block.assign(static_cast<std::size_t>(n_layers) * n_heads * n_answer * t_len, 1.0f / t_len);
  s.lens_logprob.assign(static_cast<std::size_t>(n_layers) * n_answer, -1.0f);
  s.final_logprob.assign(n_answer, -1.0f);
  s.meta.label = 0;
  return s;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter.fetch_add(1)));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

RawSignals blank_raw(int n_layers, int n_heads, int n_depths) {
  RawSignals r;
  r.n_layers = n_layers;
  r.n_heads = n_heads;
  r.s1.assign(n_layers, 1.0);
  r.s4.assign(n_layers, 1.0);
  r.s2.assign(static_cast<std::size_t>(n_layers) * n_heads, 0.5);
  r.s3.assign(static_cast<std::size_t>(n_layers) * n_heads, 1.0);
  r.s5.assign(n_depths, -1.0);
  return r;
}

pipeline::PipelineConfig small_config(const fs::path& work_dir, std::size_t n_samples) {
  pipeline::PipelineConfig c;
  c.paths.work_dir = work_dir;
  c.paths.resolve();
  c.synth.mixture = synth::benchmark_mixture(n_samples, 0);
  c.stacking.forest.n_trees = 40;
  c.stacking.hist.n_trees = 40;
  c.stacking.gbt.n_trees = 40;
  c.calibration.min_pairs = 20;
  return c;
}

const pipeline::PipelineConfig& trained_pipeline() {
  static TempDir dir("hs_pipeline");
  static const pipeline::PipelineConfig c = [] {
    auto cfg = small_config(dir.path());
    pipeline::cmd_synth(cfg);
    pipeline::cmd_extract(cfg);
    pipeline::cmd_fit_stats(cfg);
    pipeline::cmd_train(cfg);
    pipeline::cmd_calibrate(cfg);
    pipeline::cmd_predict(cfg);
    pipeline::cmd_evaluate(cfg);
    pipeline::cmd_analyze(cfg);
    return cfg;
  }();
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

}  // namespace fixtures
