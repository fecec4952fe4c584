#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "evsve/events.hpp"
#include "evsve/fusion.hpp"
#include "evsve/io.hpp"
#include "evsve/smoke.hpp"
#include "evsve/stereo.hpp"
#include "evsve/sve.hpp"

namespace evsve {

inline constexpr const char* kToolVersion = "evsve 1.0.0";

// Declarative run description. Empty input paths fall back to the artifacts
// of the simulate stage inside the output directory.
struct PipelineConfig {
  fs::path base_dir;  // relative input paths resolve against this

  struct Inputs {
    fs::path mosaic;
    fs::path events_left;
    fs::path events_right;
    fs::path calibration;
    fs::path scene;  // simulate only
  } inputs;

  std::uint64_t seed = 1;

  // Mosaic description.
  std::array<double, 4> transmittances{1.0, 0.25, 0.0625, 0.015625};
  int bit_depth = 16;
  SveOptions sve;

  SmokeOptions smoke;
  FusionOptions fusion;

  ExtractParams extract;
  bool visibility_auto = true;  // theta_vis from the segmentation
  std::array<double, 2> sync_offset_us{0.0, 0.0};

  MatchParams match;
  ScaleMode scale_mode = ScaleMode::kConsistent;
  // P1, P2 image points per view; unset means take them from the simulation.
  bool column_set = false;
  std::array<std::array<Vec2, 2>, 2> column_px{};

  double histogram_bin_mm = 0.25;

  void validate() const;
  fs::path resolve(const fs::path& p) const;
};

PipelineConfig default_pipeline_config();
// Unknown keys and out-of-range values raise ConfigError.
PipelineConfig config_from_json(const Json& json, const fs::path& base_dir);
PipelineConfig load_pipeline_config(const fs::path& path);
Json config_to_json(const PipelineConfig& config);
// FNV-1a 64 over the canonical (sorted-key, compact) JSON of the config.
std::uint64_t config_hash(const PipelineConfig& config);
std::uint64_t fnv1a64(std::string_view bytes);

enum class Stage { kSimulate, kReconstruct, kSmoke, kFuse, kExtract, kMeasure, kReport };
std::string_view stage_name(Stage stage);

struct StageResult {
  Stage stage = Stage::kSimulate;
  Json fragment;          // what the stage wrote to <out>/<stage>/fragment.json
  double seconds = 0.0;   // wall time, never written to disk
};

// Each stage reads its inputs from files and writes its artifacts plus a
// fragment.json under <out>/<stage name>/.
StageResult run_stage(Stage stage, const PipelineConfig& config, const fs::path& out);
// Simulate (when no mosaic input is configured) followed by every stage.
std::vector<StageResult> run_pipeline(const PipelineConfig& config, const fs::path& out,
                                      const std::function<void(const StageResult&)>& on_stage = {});

// Artifact locations inside the output directory.
namespace artifacts {
fs::path sim_mosaic(const fs::path& out);
fs::path sim_events(const fs::path& out, View view);
fs::path sim_calibration(const fs::path& out);
fs::path sim_column(const fs::path& out);
fs::path sim_scene(const fs::path& out);
fs::path exposure(const fs::path& out, int k);
fs::path stack_meta(const fs::path& out);
fs::path smoke_f(const fs::path& out);
fs::path smoke_labels(const fs::path& out);
fs::path smoke_meta(const fs::path& out);
fs::path hdr(const fs::path& out);
fs::path observations(const fs::path& out, View view);
fs::path measurements(const fs::path& out);
fs::path report(const fs::path& out);
fs::path size_histogram_plot(const fs::path& out);
fs::path dh_plot(const fs::path& out);
}  // namespace artifacts

// Stage-file loaders, shared with tests.
ExposureStack load_stack(const fs::path& out);
SmokeMap load_smoke(const fs::path& out);

// Stereo step of the measure stage on in-memory observations.
struct MeasureOutput {
  std::vector<ParticleMeasurement> measurements;
  MatchResult matches;
};
MeasureOutput measure_observations(const std::vector<ParticleObservation>& left,
                                   const std::vector<ParticleObservation>& right,
                                   const StereoRig& rig, const ColumnAxis& column,
                                   const MatchParams& match, ScaleMode mode);

// Polygon area after removing lens distortion from every vertex.
double undistorted_area(const CameraModel& cam, const Polygon& polygon);

// Column axis from P1/P2 image points in both views.
ColumnAxis triangulate_column(const StereoRig& rig, const std::array<std::array<Vec2, 2>, 2>& px);

// Plot rendering used by the report stage.
RgbImage plot_size_histogram(const SizeHistogram& hist);
RgbImage plot_dh_vs_time(std::span<const ParticleMeasurement> measurements);

}  // namespace evsve
