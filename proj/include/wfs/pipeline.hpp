#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wfs/carn.hpp"
#include "wfs/gp.hpp"
#include "wfs/scenario.hpp"
#include "wfs/wavesim.hpp"

namespace wfs {

namespace fs = std::filesystem;

struct GpSettings {
  Kernel kernel = Kernel::matern(1.0, 1.0, 1.5);
  double sigma_n2 = 1e-8;
  /// Fit on RGB renders (C=3) when true, on the signed u_x field (C=1) otherwise.
  bool rgb = true;
  /// Evidence-maximization steps before fitting; 0 keeps the configured kernel.
  int optimize_steps = 0;
};

struct SrSettings {
  bool enabled = true;
  CarnConfig carn;
  TrainConfig train;
  Index pairs = 50;
  Index lr_patch = 32;
  /// Existing checkpoint to reuse instead of training.
  std::string checkpoint;
};

/// Everything a run depends on besides the master seed.
struct PipelineConfig {
  ParameterSpec spec = material_spec();
  Shape shape = Shape::Circle;
  Plate plate;
  SimConfig sim;
  /// Output steps kept on disk, each an independent GP family.
  std::vector<Index> store_steps{270, 300};
  Index n_train = 50;
  Index n_val = 30;
  GpSettings gp;
  SrSettings sr;

  void validate() const;
};

/// Canonical JSON text. Identical configs give identical bytes.
std::string config_to_text(const PipelineConfig& cfg);
/// Keys present in the text override the corresponding fields of base.
PipelineConfig config_from_text(const std::string& text, const PipelineConfig& base = {});
PipelineConfig load_config(const fs::path& path, const PipelineConfig& base = {});

/// Example I (material uncertainty) or II (adds r_c), at desk or full scale.
PipelineConfig example_config(int example, bool desk);

std::uint64_t fnv1a64(const std::uint8_t* bytes, std::size_t size);
std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes);
std::uint64_t fnv1a64(const std::string& text);
std::string hex64(std::uint64_t v);

struct SnapshotRef {
  Index step = 0;
  double time = 0.0;
  std::string path;  // relative to the manifest's directory
  std::uint64_t hash = 0;
};

struct ManifestRow {
  std::string id;
  ParameterSample sample;  // sample.seed is the realization seed
  std::vector<SnapshotRef> snapshots;

  const SnapshotRef& at_step(Index step) const;
};

struct DatasetManifest {
  std::string split;  // "train" or "validation"
  std::string config_hash;
  std::vector<ManifestRow> rows;

  std::string to_text() const;
  static DatasetManifest from_text(const std::string& text);
  void save(const fs::path& path) const;
  static DatasetManifest load(const fs::path& path);

  /// Unique ids, and every snapshot exists, parses and matches its hash.
  void verify(const fs::path& root) const;
  Eigen::MatrixXd inputs(const ParameterSpec& spec) const;
};

/// Throws Errc::config when an id or a parameter realization appears in both.
void check_disjoint(const DatasetManifest& train, const DatasetManifest& validation);

struct ManifestPair {
  DatasetManifest train;
  DatasetManifest validation;
};

fs::path train_manifest_path(const fs::path& dir);
fs::path validation_manifest_path(const fs::path& dir);
fs::path gp_model_path(const fs::path& dir, Index step);

/// Samples, simulates and stores n_train + n_val realizations under out.
ManifestPair cmd_generate(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& out);

/// One persisted GP family per configured step. The validation manifest, when
/// given, is checked for disjointness first.
std::vector<fs::path> cmd_fit(const PipelineConfig& cfg, const fs::path& train_manifest,
                              const fs::path& out,
                              const std::optional<fs::path>& validation_manifest = {});

struct PredictOutputs {
  fs::path mean;
  fs::path mean_ppm;
  std::optional<fs::path> enhanced;
  std::optional<fs::path> enhanced_ppm;
};

PredictOutputs cmd_predict(const fs::path& model, const Eigen::VectorXd& xi,
                           const std::optional<fs::path>& sr_checkpoint, const fs::path& out);

/// RGB render of a GP mean in its model's representation, clamped to [0, 1].
Field render_prediction(const BasicField<double>& mean, bool rgb_mode);

struct ReportRow {
  std::string id;
  Index step = 0;
  double time = 0.0;
  double gp_ssim = 0.0;        // in the model's representation
  double gp_ssim_field = 0.0;  // on the signed u_x field, C=1
  std::optional<double> sr_ssim;
};

struct RunReport {
  std::string label;
  std::string config_text;
  std::vector<ReportRow> rows;

  double mean_gp() const;
  double mean_gp(Index step) const;
  double mean_gp_field() const;
  std::optional<double> mean_sr() const;

  std::string to_text() const;
  std::string to_csv() const;
};

/// Scores every validation realization at every model's step.
RunReport cmd_assess(const PipelineConfig& cfg, const fs::path& validation_manifest,
                     const std::vector<fs::path>& models,
                     const std::optional<fs::path>& sr_checkpoint, const fs::path& out,
                     const std::string& label = "assess");

struct TrainSrOutputs {
  fs::path checkpoint;
  fs::path trace_csv;
  std::vector<double> trace;
};

/// (LR, HR) patch pairs: random HR crops of size 2 lr_patch taken from the
/// RGB renders of the listed snapshots, LR by bilinear downsampling.
std::vector<SrPair<float>> sr_corpus(const PipelineConfig& cfg, std::uint64_t seed,
                                     const std::vector<fs::path>& manifests);

TrainSrOutputs cmd_train_sr(const PipelineConfig& cfg, std::uint64_t seed,
                            const std::vector<fs::path>& manifests, const fs::path& out);

struct ReplicateOutputs {
  std::vector<RunReport> reports;  // one per shape
  std::optional<fs::path> checkpoint;
};

/// generate, train or load the SR network, fit and assess for every inclusion
/// shape of the example. cfg is usually example_config(example, desk).
ReplicateOutputs cmd_replicate(int example, const PipelineConfig& cfg, std::uint64_t seed,
                               const fs::path& out);

}  // namespace wfs
