#include "evsve/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include "evsve/synth.hpp"

namespace evsve {

// ---- config ----------------------------------------------------------------

namespace {

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return key == a; });
    if (!known) throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read_field(const Json& j, const char* key, T& target, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void read_path(const Json& j, const char* key, fs::path& target) {
  std::string s;
  read_field(j, key, s, "inputs");
  if (!s.empty()) target = s;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

Json px_pairs_json(const std::array<Vec2, 2>& pts) {
  return Json::array({{pts[0].x(), pts[0].y()}, {pts[1].x(), pts[1].y()}});
}

std::array<Vec2, 2> px_pairs_from(const Json& j, const std::string& where) {
  std::array<std::array<double, 2>, 2> raw{};
  try {
    raw = j.get<std::array<std::array<double, 2>, 2>>();
  } catch (const Json::exception&) {
    throw ConfigError(where + ": expected [[u, v], [u, v]]");
  }
  return {Vec2(raw[0][0], raw[0][1]), Vec2(raw[1][0], raw[1][1])};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

fs::path PipelineConfig::resolve(const fs::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return base_dir / p;
}

void PipelineConfig::validate() const {
  for (const auto* p : {&inputs.mosaic, &inputs.events_left, &inputs.events_right,
                        &inputs.calibration, &inputs.scene}) {
    if (!p->empty() && !fs::exists(resolve(*p))) {
      throw InputError("missing input: " + resolve(*p).string());
    }
  }
  for (double tau : transmittances) require(tau > 0.0 && tau <= 1.0, "sve.transmittances must lie in (0, 1]");
  require(bit_depth >= 8 && bit_depth <= 16, "sve.bit_depth must lie in [8, 16]");
  try {
    sve.layout.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("sve.layout: ") + e.what());
  }
  require(sve.saturation_fraction > 0.0 && sve.saturation_fraction <= 1.0,
          "sve.saturation_fraction must lie in (0, 1]");
  const auto& w = smoke.weights;
  for (double x : {w.brightness, w.contrast, w.channel, w.variance}) {
    require(x >= 0.0 && x <= 1.0, "smoke.weights must each lie in [0, 1]");
  }
  require(std::abs(w.sum() - 1.0) <= 1e-9, "smoke.weights must sum to 1");
  require(smoke.regions >= 1 && smoke.regions <= 16, "smoke.regions must lie in [1, 16]");
  require(smoke.window >= 1 && smoke.window % 2 == 1, "smoke.window must be odd and >= 1");
  require(smoke.epsilon > 0.0, "smoke.epsilon must be positive");
  require(fusion.weights.psi > 0.0, "fusion.psi must be positive");
  require(fusion.weights.delta > 0.0, "fusion.delta must be positive");
  require(fusion.weights.epsilon > 0.0, "fusion.epsilon must be positive");
  require(fusion.weights.feather >= 0, "fusion.feather must be >= 0");
  require(fusion.levels >= 1 && fusion.levels <= 16, "fusion.levels must lie in [1, 16]");
  require(fusion.retinex.radius >= 0, "fusion.retinex_radius must be >= 0");
  require(fusion.retinex.regularization > 0.0, "fusion.retinex_regularization must be positive");
  require(extract.cluster.spatial_radius > 0.0, "events.spatial_radius must be positive");
  require(extract.cluster.temporal_radius_us > 0.0, "events.temporal_radius_us must be positive");
  require(extract.cluster.min_core >= 1, "events.min_core must be >= 1");
  require(extract.window_us > 0.0, "events.window_us must be positive");
  require(extract.classify.positive_fraction > 0.5 && extract.classify.positive_fraction <= 1.0,
          "events.positive_fraction must lie in (0.5, 1]");
  require(visibility_auto || (extract.gate.visibility >= 0.0 && extract.gate.visibility <= 1.0),
          "events.visibility must be \"auto\" or lie in [0, 1]");
  require(extract.contour.alpha > 0.0, "events.alpha must be positive");
  for (double s : sync_offset_us) {
    require(s >= 0.0 && s <= kMaxSyncOffsetUs, "events.sync_offset_us must lie in [0, 12]");
  }
  require(match.max_epipolar_px > 0.0, "stereo.max_epipolar_px must be positive");
  require(match.max_dt_us >= 0.0, "stereo.max_dt_us must be >= 0");
  require(histogram_bin_mm > 0.0, "report.bin_width_mm must be positive");
}

PipelineConfig default_pipeline_config() { return PipelineConfig{}; }

PipelineConfig config_from_json(const Json& json, const fs::path& base_dir) {
  PipelineConfig c;
  c.base_dir = base_dir;
  check_keys(json, {"seed", "inputs", "sve", "smoke", "fusion", "events", "stereo", "report"}, "config");
  read_field(json, "seed", c.seed, "config");
  if (json.contains("inputs")) {
    const Json& j = json.at("inputs");
    check_keys(j, {"mosaic", "events_left", "events_right", "calibration", "scene"}, "inputs");
    read_path(j, "mosaic", c.inputs.mosaic);
    read_path(j, "events_left", c.inputs.events_left);
    read_path(j, "events_right", c.inputs.events_right);
    read_path(j, "calibration", c.inputs.calibration);
    read_path(j, "scene", c.inputs.scene);
  }
  if (json.contains("sve")) {
    const Json& j = json.at("sve");
    check_keys(j, {"transmittances", "layout", "bit_depth", "radiometric_rescale", "saturation_fraction"}, "sve");
    read_field(j, "transmittances", c.transmittances, "sve");
    read_field(j, "layout", c.sve.layout.exposure_at_position, "sve");
    read_field(j, "bit_depth", c.bit_depth, "sve");
    read_field(j, "radiometric_rescale", c.sve.radiometric_rescale, "sve");
    read_field(j, "saturation_fraction", c.sve.saturation_fraction, "sve");
  }
  if (json.contains("smoke")) {
    const Json& j = json.at("smoke");
    check_keys(j, {"weights", "regions", "window", "epsilon"}, "smoke");
    if (j.contains("weights")) {
      std::array<double, 4> w{};
      read_field(j, "weights", w, "smoke");
      c.smoke.weights = {w[0], w[1], w[2], w[3]};
    }
    read_field(j, "regions", c.smoke.regions, "smoke");
    read_field(j, "window", c.smoke.window, "smoke");
    read_field(j, "epsilon", c.smoke.epsilon, "smoke");
  }
  if (json.contains("fusion")) {
    const Json& j = json.at("fusion");
    check_keys(j, {"psi", "delta", "levels", "epsilon", "feather", "bins", "retinex_radius",
                   "retinex_regularization"}, "fusion");
    read_field(j, "psi", c.fusion.weights.psi, "fusion");
    read_field(j, "delta", c.fusion.weights.delta, "fusion");
    read_field(j, "levels", c.fusion.levels, "fusion");
    read_field(j, "epsilon", c.fusion.weights.epsilon, "fusion");
    c.fusion.retinex.epsilon = c.fusion.weights.epsilon;
    read_field(j, "feather", c.fusion.weights.feather, "fusion");
    read_field(j, "bins", c.fusion.weights.bins, "fusion");
    read_field(j, "retinex_radius", c.fusion.retinex.radius, "fusion");
    read_field(j, "retinex_regularization", c.fusion.retinex.regularization, "fusion");
  }
  if (json.contains("events")) {
    const Json& j = json.at("events");
    check_keys(j, {"spatial_radius", "temporal_radius_us", "min_core", "window_us",
                   "positive_fraction", "visibility", "alpha", "sync_offset_us"}, "events");
    read_field(j, "spatial_radius", c.extract.cluster.spatial_radius, "events");
    read_field(j, "temporal_radius_us", c.extract.cluster.temporal_radius_us, "events");
    read_field(j, "min_core", c.extract.cluster.min_core, "events");
    read_field(j, "window_us", c.extract.window_us, "events");
    read_field(j, "positive_fraction", c.extract.classify.positive_fraction, "events");
    read_field(j, "alpha", c.extract.contour.alpha, "events");
    read_field(j, "sync_offset_us", c.sync_offset_us, "events");
    if (j.contains("visibility")) {
      const Json& v = j.at("visibility");
      if (v.is_string()) {
        require(v.get<std::string>() == "auto", "events.visibility must be \"auto\" or a number");
        c.visibility_auto = true;
      } else if (v.is_number()) {
        c.visibility_auto = false;
        c.extract.gate.visibility = v.get<double>();
      } else {
        throw ConfigError("events.visibility must be \"auto\" or a number");
      }
    }
  }
  if (json.contains("stereo")) {
    const Json& j = json.at("stereo");
    check_keys(j, {"max_epipolar_px", "max_dt_us", "scale_mode", "column"}, "stereo");
    read_field(j, "max_epipolar_px", c.match.max_epipolar_px, "stereo");
    read_field(j, "max_dt_us", c.match.max_dt_us, "stereo");
    if (j.contains("scale_mode")) {
      std::string mode;
      read_field(j, "scale_mode", mode, "stereo");
      require(mode == "consistent" || mode == "literal", "stereo.scale_mode must be consistent or literal");
      c.scale_mode = mode == "literal" ? ScaleMode::kLiteral : ScaleMode::kConsistent;
    }
    if (j.contains("column") && !j.at("column").is_null()) {
      const Json& col = j.at("column");
      check_keys(col, {"left", "right"}, "stereo.column");
      require(col.contains("left") && col.contains("right"), "stereo.column needs left and right points");
      c.column_px[0] = px_pairs_from(col.at("left"), "stereo.column.left");
      c.column_px[1] = px_pairs_from(col.at("right"), "stereo.column.right");
      c.column_set = true;
    }
  }
  if (json.contains("report")) {
    const Json& j = json.at("report");
    check_keys(j, {"bin_width_mm"}, "report");
    read_field(j, "bin_width_mm", c.histogram_bin_mm, "report");
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  const Json json = read_json(path);
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  return config_from_json(json, base);
}

Json config_to_json(const PipelineConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["inputs"] = {{"mosaic", c.inputs.mosaic.generic_string()},
                 {"events_left", c.inputs.events_left.generic_string()},
                 {"events_right", c.inputs.events_right.generic_string()},
                 {"calibration", c.inputs.calibration.generic_string()},
                 {"scene", c.inputs.scene.generic_string()}};
  j["sve"] = {{"transmittances", c.transmittances},
              {"layout", c.sve.layout.exposure_at_position},
              {"bit_depth", c.bit_depth},
              {"radiometric_rescale", c.sve.radiometric_rescale},
              {"saturation_fraction", c.sve.saturation_fraction}};
  const auto& w = c.smoke.weights;
  j["smoke"] = {{"weights", {w.brightness, w.contrast, w.channel, w.variance}},
                {"regions", c.smoke.regions},
                {"window", c.smoke.window},
                {"epsilon", c.smoke.epsilon}};
  j["fusion"] = {{"psi", c.fusion.weights.psi},
                 {"delta", c.fusion.weights.delta},
                 {"levels", c.fusion.levels},
                 {"epsilon", c.fusion.weights.epsilon},
                 {"feather", c.fusion.weights.feather},
                 {"bins", c.fusion.weights.bins},
                 {"retinex_radius", c.fusion.retinex.radius},
                 {"retinex_regularization", c.fusion.retinex.regularization}};
  j["events"] = {{"spatial_radius", c.extract.cluster.spatial_radius},
                 {"temporal_radius_us", c.extract.cluster.temporal_radius_us},
                 {"min_core", c.extract.cluster.min_core},
                 {"window_us", c.extract.window_us},
                 {"positive_fraction", c.extract.classify.positive_fraction},
                 {"alpha", c.extract.contour.alpha},
                 {"sync_offset_us", c.sync_offset_us}};
  if (c.visibility_auto) {
    j["events"]["visibility"] = "auto";
  } else {
    j["events"]["visibility"] = c.extract.gate.visibility;
  }
  j["stereo"] = {{"max_epipolar_px", c.match.max_epipolar_px},
                 {"max_dt_us", c.match.max_dt_us},
                 {"scale_mode", c.scale_mode == ScaleMode::kLiteral ? "literal" : "consistent"}};
  if (c.column_set) {
    j["stereo"]["column"] = {{"left", px_pairs_json(c.column_px[0])},
                             {"right", px_pairs_json(c.column_px[1])}};
  } else {
    j["stereo"]["column"] = nullptr;
  }
  j["report"] = {{"bin_width_mm", c.histogram_bin_mm}};
  return j;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const PipelineConfig& config) {
  // nlohmann objects are key-sorted, so dump() is canonical.
  return fnv1a64(config_to_json(config).dump());
}

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::kSimulate: return "simulate";
    case Stage::kReconstruct: return "reconstruct";
    case Stage::kSmoke: return "smoke";
    case Stage::kFuse: return "fuse";
    case Stage::kExtract: return "extract";
    case Stage::kMeasure: return "measure";
    case Stage::kReport: return "report";
  }
  return "unknown";
}

// ---- artifact layout -------------------------------------------------------

namespace artifacts {
fs::path sim_mosaic(const fs::path& out) { return out / "simulate" / "mosaic.png"; }
fs::path sim_events(const fs::path& out, View view) {
  return out / "simulate" / ("events_" + std::string(view_name(view)) + ".evt");
}
fs::path sim_calibration(const fs::path& out) { return out / "simulate" / "calibration.json"; }
fs::path sim_column(const fs::path& out) { return out / "simulate" / "column.json"; }
fs::path sim_scene(const fs::path& out) { return out / "simulate" / "scene.json"; }
fs::path exposure(const fs::path& out, int k) {
  return out / "reconstruct" / ("exposure_" + std::to_string(k) + ".pfm");
}
fs::path saturation(const fs::path& out, int k) {
  return out / "reconstruct" / ("saturated_" + std::to_string(k) + ".png");
}
fs::path stack_meta(const fs::path& out) { return out / "reconstruct" / "stack.json"; }
fs::path smoke_f(const fs::path& out) { return out / "smoke" / "likelihood.pfm"; }
fs::path smoke_labels(const fs::path& out) { return out / "smoke" / "labels.png"; }
fs::path smoke_meta(const fs::path& out) { return out / "smoke" / "smoke.json"; }
fs::path hdr(const fs::path& out) { return out / "fuse" / "hdr.pfm"; }
fs::path observations(const fs::path& out, View view) {
  return out / "extract" / ("observations_" + std::string(view_name(view)) + ".json");
}
fs::path measurements(const fs::path& out) { return out / "measure" / "measurements.csv"; }
fs::path report(const fs::path& out) { return out / "report" / "report.json"; }
fs::path size_histogram_plot(const fs::path& out) { return out / "report" / "size_histogram.png"; }
fs::path dh_plot(const fs::path& out) { return out / "report" / "dh_vs_time.png"; }
}  // namespace artifacts

namespace {

fs::path fragment_path(const fs::path& out, Stage stage) {
  return out / std::string(stage_name(stage)) / "fragment.json";
}

// Configured input, or the simulate artifact when none is configured.
fs::path input_or_sim(const PipelineConfig& config, const fs::path& configured,
                      const fs::path& simulated, const char* what) {
  const fs::path p = configured.empty() ? simulated : config.resolve(configured);
  if (!fs::exists(p)) throw InputError(std::string("missing ") + what + ": " + p.string());
  return p;
}

void require_artifact(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw InputError(std::string("missing ") + what + ": " + p.string());
}

Calibration stage_calibration(const PipelineConfig& config, const fs::path& out) {
  return load_calibration(
      input_or_sim(config, config.inputs.calibration, artifacts::sim_calibration(out), "calibration"));
}

Json region_stats_json(const std::vector<RegionStats>& stats) {
  Json out = Json::array();
  for (const auto& s : stats) {
    out.push_back({{"mean", s.mean}, {"variance", s.variance}, {"pixels", s.pixels}});
  }
  return out;
}

// ---- stages ----------------------------------------------------------------

Json stage_simulate(const PipelineConfig& config, const fs::path& out) {
  SceneTruth scene = default_scene();
  SimConfig sim = default_sim_config();
  if (!config.inputs.scene.empty()) {
    scene_from_json(read_json(config.resolve(config.inputs.scene)), scene, sim);
  }
  // The pipeline config is authoritative for the mosaic description and seed.
  sim.seed = config.seed;
  sim.transmittances = config.transmittances;
  sim.bit_depth = config.bit_depth;
  sim.validate();

  const RawSveMosaic mosaic = render_exposures(scene, sim, config.sve.layout);
  write_png16(artifacts::sim_mosaic(out), mosaic.values);

  Json fragment;
  for (View view : {View::kLeft, View::kRight}) {
    const auto raw = simulate_raw_events(scene, view, sim);
    write_bytes(artifacts::sim_events(out, view), format_event_binary(raw));
    fragment["raw_events_" + std::string(view_name(view))] = raw.size();
  }

  Calibration calib;
  calib.rig = scene.rig;
  calib.registration[0] = scene_registration(scene, View::kLeft);
  calib.registration[1] = scene_registration(scene, View::kRight);
  save_calibration(artifacts::sim_calibration(out), calib);

  Json column;
  for (View view : {View::kLeft, View::kRight}) {
    const CameraModel& cam = scene.camera(view);
    column[std::string(view_name(view))] =
        px_pairs_json({project(cam, scene.column.p1), project(cam, scene.column.p2)});
  }
  write_json(artifacts::sim_column(out), column);
  write_json(artifacts::sim_scene(out), scene_to_json(scene, sim));

  fragment["mosaic"] = {{"width", mosaic.width()}, {"height", mosaic.height()}};
  fragment["particles"] = scene.particles.size();
  fragment["smoke_puffs"] = scene.smoke.size();
  fragment["seed"] = sim.seed;
  return fragment;
}

Json stage_reconstruct(const PipelineConfig& config, const fs::path& out) {
  const fs::path path = input_or_sim(config, config.inputs.mosaic, artifacts::sim_mosaic(out), "mosaic");
  RawSveMosaic mosaic;
  mosaic.values = read_image(path);
  mosaic.transmittances = config.transmittances;
  mosaic.bit_depth = config.bit_depth;
  const ExposureStack stack = reconstruct_stack(mosaic, config.sve);
  Json meta;
  meta["transmittances"] = stack.transmittances();
  meta["full_scale"] = stack.full_scale();
  meta["width"] = stack.width();
  meta["height"] = stack.height();
  meta["means"] = stack.means();
  Json saturated = Json::array();
  for (int k = 0; k < stack.count(); ++k) {
    write_pfm(artifacts::exposure(out, k), stack.image(k));
    const MaskImage& m = stack.saturated().at(k);
    Image<std::uint8_t> png(m.width(), m.height());
    std::size_t n = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      png[i] = m[i] ? 255 : 0;
      n += m[i] ? 1 : 0;
    }
    write_png8(artifacts::saturation(out, k), png);
    saturated.push_back(n);
  }
  meta["saturated_pixels"] = saturated;
  write_json(artifacts::stack_meta(out), meta);
  return meta;
}

Json stage_smoke(const PipelineConfig& config, const fs::path& out) {
  const ExposureStack stack = load_stack(out);
  const SmokeMap smoke = build_smoke_map(stack, config.smoke);
  write_pfm(artifacts::smoke_f(out), smoke.f);
  Image<std::uint8_t> labels(smoke.labels.width(), smoke.labels.height());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(smoke.labels[i]);
  write_png8(artifacts::smoke_labels(out), labels);
  Image<std::uint8_t> preview(labels.width(), labels.height());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    preview[i] = static_cast<std::uint8_t>(255 * labels[i] / std::max(smoke.regions, 1));
  }
  write_png8(out / "smoke" / "labels_preview.png", preview);
  const auto& w = smoke.weights;
  Json meta;
  meta["weights"] = {w.brightness, w.contrast, w.channel, w.variance};
  meta["regions"] = smoke.regions;
  meta["thresholds"] = smoke.thresholds;
  meta["region_stats"] = region_stats_json(smoke.region_stats);
  meta["warnings"] = smoke.warnings;
  write_json(artifacts::smoke_meta(out), meta);
  return meta;
}

Json stage_fuse(const PipelineConfig& config, const fs::path& out) {
  const ExposureStack stack = load_stack(out);
  require_artifact(artifacts::smoke_labels(out), "smoke labels");
  const ImageD raw_labels = read_png(artifacts::smoke_labels(out));
  LabelImage labels(raw_labels.width(), raw_labels.height());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(raw_labels[i]);
  const HdrImage hdr = fuse_stack(stack, labels, config.fusion);
  write_pfm(artifacts::hdr(out), hdr.values);
  write_png8(out / "fuse" / "hdr_preview.png", tone_map(hdr.values));
  Json meta;
  meta["width"] = hdr.values.width();
  meta["height"] = hdr.values.height();
  meta["exposures"] = stack.count();
  meta["levels"] = config.fusion.levels;
  meta["min"] = image_min(hdr.values);
  meta["max"] = image_max(hdr.values);
  return meta;
}

Json counts_json(const ExtractCounts& c) {
  return {{"events_in", c.events_in},         {"events_clustered", c.events_clustered},
          {"events_gated", c.events_gated},   {"clusters", c.clusters},
          {"clusters_gated", c.clusters_gated}, {"observations", c.observations},
          {"degenerate", c.degenerate},       {"unclassifiable", c.unclassifiable}};
}

Json stage_extract(const PipelineConfig& config, const fs::path& out) {
  const Calibration calib = stage_calibration(config, out);
  require_artifact(artifacts::hdr(out), "HDR frame");
  HdrImage hdr;
  hdr.values = read_pfm(artifacts::hdr(out));
  hdr.provenance = "fuse";
  const SmokeMap smoke = load_smoke(out);
  if (!smoke.f.same_shape(hdr.values)) throw DimensionError("smoke map and HDR frame differ in size");

  ExtractParams params = config.extract;
  Json fragment;
  if (config.visibility_auto) {
    params.gate.visibility = smoke.thresholds.empty() ? 1.0 : smoke.thresholds.back();
    if (smoke.thresholds.empty()) fragment["warnings"].push_back("single smoke region; visibility gate open");
  }
  fragment["visibility"] = params.gate.visibility;

  for (View view : {View::kLeft, View::kRight}) {
    const int v = view == View::kLeft ? 0 : 1;
    const std::string name(view_name(view));
    const fs::path configured = v == 0 ? config.inputs.events_left : config.inputs.events_right;
    const fs::path path =
        input_or_sim(config, configured, artifacts::sim_events(out, view), ("events_" + name).c_str());
    const CameraModel& cam = v == 0 ? calib.rig.left : calib.rig.right;
    const EventStream stream = load_stream(path, view, cam.width, cam.height, config.sync_offset_us[v]);
    const HdrPrior prior = make_hdr_prior(hdr, smoke, calib.registration_of(view));
    const ExtractResult result = extract_observations(stream, prior, params);
    const auto& c = result.counts;
    if (!(c.events_gated <= c.events_clustered && c.events_clustered <= c.events_in)) {
      throw InvariantError("extract/" + name + ": event counts inconsistent (gated " +
                           std::to_string(c.events_gated) + ", clustered " +
                           std::to_string(c.events_clustered) + ", in " + std::to_string(c.events_in) + ")");
    }
    write_json(artifacts::observations(out, view), observations_to_json(result.observations));
    fragment[name] = counts_json(c);
    if (!stream.warnings.empty()) fragment[name]["warnings"] = stream.warnings;
  }
  return fragment;
}

Json stage_measure(const PipelineConfig& config, const fs::path& out) {
  const Calibration calib = stage_calibration(config, out);
  std::array<std::vector<ParticleObservation>, 2> obs;
  for (View view : {View::kLeft, View::kRight}) {
    const fs::path p = artifacts::observations(out, view);
    require_artifact(p, "observations");
    obs[view == View::kLeft ? 0 : 1] = observations_from_json(read_json(p));
  }
  std::array<std::array<Vec2, 2>, 2> column_px = config.column_px;
  if (!config.column_set) {
    const fs::path p = artifacts::sim_column(out);
    require_artifact(p, "column points (stereo.column)");
    const Json j = read_json(p);
    column_px[0] = px_pairs_from(j.at("left"), "column.left");
    column_px[1] = px_pairs_from(j.at("right"), "column.right");
  }
  const ColumnAxis column = triangulate_column(calib.rig, column_px);
  const MeasureOutput m =
      measure_observations(obs[0], obs[1], calib.rig, column, config.match, config.scale_mode);
  write_text(artifacts::measurements(out), format_measurements_csv(m.measurements));

  Json matches = Json::array();
  for (const auto& s : m.matches.matches) {
    matches.push_back({{"left", s.left}, {"right", s.right}, {"epipolar_px", s.epipolar_px}, {"dt_us", s.dt_us}});
  }
  write_json(out / "measure" / "matches.json", matches);
  Json fragment;
  fragment["matches"] = m.matches.matches.size();
  fragment["measurements"] = m.measurements.size();
  fragment["unmatched_left"] = m.matches.unmatched_left.size();
  fragment["unmatched_right"] = m.matches.unmatched_right.size();
  fragment["column"] = {{"p1", {column.p1.x(), column.p1.y(), column.p1.z()}},
                        {"p2", {column.p2.x(), column.p2.y(), column.p2.z()}}};
  if (m.measurements.empty()) fragment["note"] = "zero matched particles";
  const std::size_t rejected = m.matches.matches.size() - m.measurements.size();
  if (rejected > 0) fragment["rejected_numeric"] = rejected;
  return fragment;
}

Json read_fragment(const fs::path& out, Stage stage) {
  const fs::path p = fragment_path(out, stage);
  return fs::exists(p) ? read_json(p) : Json();
}

Json stage_report(const PipelineConfig& config, const fs::path& out) {
  const fs::path csv = artifacts::measurements(out);
  require_artifact(csv, "measurements");
  const auto ms = parse_measurements_csv(read_text(csv));

  std::vector<double> radii;
  for (const auto& m : ms) radii.push_back(m.re);
  SizeHistogram hist;
  hist.bin_width = config.histogram_bin_mm;
  // An empty run still gets a report; the histogram is left empty.
  if (!radii.empty()) hist = size_histogram(radii, config.histogram_bin_mm);
  write_png_rgb(artifacts::size_histogram_plot(out), plot_size_histogram(hist));
  write_png_rgb(artifacts::dh_plot(out), plot_dh_vs_time(ms));

  Json report;
  report["tool_version"] = kToolVersion;
  report["config_hash"] = hex64(config_hash(config));
  report["seed"] = config.seed;
  report["measurements_csv"] = fs::relative(csv, out).generic_string();
  report["measurements"] = ms.size();

  Json counts = {{"events_in", 0}, {"events_clustered", 0}, {"events_gated", 0},
                 {"clusters", 0}, {"clusters_gated", 0}, {"observations", 0}};
  const Json ex = read_fragment(out, Stage::kExtract);
  for (const char* view : {"left", "right"}) {
    if (!ex.contains(view)) continue;
    for (auto& [key, value] : counts.items()) {
      value = value.get<std::uint64_t>() + ex.at(view).value(key, std::uint64_t{0});
    }
  }
  const Json me = read_fragment(out, Stage::kMeasure);
  counts["particles_matched"] = me.value("matches", std::uint64_t{0});
  report["counts"] = counts;
  if (ms.empty()) report["note"] = "zero matched particles";

  report["size_histogram"] = {{"bin_width_mm", hist.bin_width},
                              {"origin_mm", hist.origin},
                              {"counts", hist.counts},
                              {"modes_mm", hist.modes}};

  Json stages = Json::object();
  for (Stage s : {Stage::kSimulate, Stage::kReconstruct, Stage::kSmoke, Stage::kFuse,
                  Stage::kExtract, Stage::kMeasure}) {
    const Json f = read_fragment(out, s);
    if (!f.is_null()) stages[std::string(stage_name(s))] = f;
  }
  report["stages"] = stages;

  // Ground truth is only trusted when the frames came from the simulator.
  if (config.inputs.mosaic.empty() && fs::exists(artifacts::sim_scene(out))) {
    SceneTruth scene = default_scene();
    SimConfig sim = default_sim_config();
    scene_from_json(read_json(artifacts::sim_scene(out)), scene, sim);
    const EvaluationReport ev = evaluate_run(scene, ms);
    Json particles = Json::array();
    for (const auto& p : ev.particles) {
      double dh_max = 0.0, re_max = 0.0;
      for (double e : p.dh_error) dh_max = std::max(dh_max, std::abs(e));
      for (double e : p.re_rel_error) re_max = std::max(re_max, std::abs(e));
      particles.push_back({{"id", p.id}, {"detections", p.detections},
                           {"dh_abs_max_mm", dh_max}, {"re_rel_max", re_max}});
    }
    report["evaluation"] = {{"particles", particles},
                            {"measurements", ev.measurements},
                            {"false_positives", ev.false_positives},
                            {"detection_rate", ev.detection_rate},
                            {"dh_abs_p50_mm", ev.dh_abs_p50},
                            {"dh_abs_p95_mm", ev.dh_abs_p95},
                            {"dh_abs_max_mm", ev.dh_abs_max},
                            {"re_rel_p50", ev.re_rel_p50},
                            {"re_rel_p95", ev.re_rel_p95},
                            {"re_rel_max", ev.re_rel_max}};
  }
  write_json(artifacts::report(out), report);
  return {{"measurements", ms.size()}, {"modes_mm", hist.modes}};
}

template <typename E>
[[noreturn]] void rethrow_with_stage(Stage stage, const E& e) {
  throw E(std::string(stage_name(stage)) + ": " + e.what());
}

}  // namespace

// ---- shared loaders --------------------------------------------------------

ExposureStack load_stack(const fs::path& out) {
  const fs::path meta_path = artifacts::stack_meta(out);
  require_artifact(meta_path, "exposure stack");
  const Json meta = read_json(meta_path);
  const auto taus = meta.at("transmittances").get<std::vector<double>>();
  std::vector<ImageD> images;
  std::vector<MaskImage> masks;
  for (std::size_t k = 0; k < taus.size(); ++k) {
    const int ki = static_cast<int>(k);
    require_artifact(artifacts::exposure(out, ki), "exposure");
    images.push_back(read_pfm(artifacts::exposure(out, ki)));
    const fs::path sat = artifacts::saturation(out, ki);
    if (fs::exists(sat)) {
      const ImageD m = read_png(sat);
      MaskImage mask(m.width(), m.height());
      for (std::size_t i = 0; i < m.size(); ++i) mask[i] = m[i] > 0 ? 1 : 0;
      masks.push_back(std::move(mask));
    }
  }
  if (masks.size() != images.size()) masks.clear();
  return ExposureStack(std::move(images), taus, meta.value("full_scale", 0.0), std::move(masks));
}

SmokeMap load_smoke(const fs::path& out) {
  require_artifact(artifacts::smoke_meta(out), "smoke map");
  require_artifact(artifacts::smoke_f(out), "smoke likelihood");
  require_artifact(artifacts::smoke_labels(out), "smoke labels");
  const Json meta = read_json(artifacts::smoke_meta(out));
  SmokeMap smoke;
  smoke.f = read_pfm(artifacts::smoke_f(out));
  const ImageD labels = read_png(artifacts::smoke_labels(out));
  smoke.labels = LabelImage(labels.width(), labels.height());
  for (std::size_t i = 0; i < labels.size(); ++i) smoke.labels[i] = static_cast<int>(labels[i]);
  const auto w = meta.at("weights").get<std::array<double, 4>>();
  smoke.weights = {w[0], w[1], w[2], w[3]};
  smoke.regions = meta.at("regions").get<int>();
  smoke.thresholds = meta.at("thresholds").get<std::vector<double>>();
  for (const Json& s : meta.at("region_stats")) {
    smoke.region_stats.push_back(
        {s.at("mean").get<double>(), s.at("variance").get<double>(), s.at("pixels").get<std::size_t>()});
  }
  smoke.warnings = meta.value("warnings", std::vector<std::string>{});
  return smoke;
}

double undistorted_area(const CameraModel& cam, const Polygon& polygon) {
  Polygon p;
  p.reserve(polygon.size());
  for (const Vec2& q : polygon) p.push_back(undistort_pixel(cam, q));
  return polygon_area(p);
}

ColumnAxis triangulate_column(const StereoRig& rig, const std::array<std::array<Vec2, 2>, 2>& px) {
  ColumnAxis axis;
  axis.p1 = triangulate(rig, px[0][0], px[1][0]).point;
  axis.p2 = triangulate(rig, px[0][1], px[1][1]).point;
  axis.validate();
  return axis;
}

MeasureOutput measure_observations(const std::vector<ParticleObservation>& left,
                                   const std::vector<ParticleObservation>& right,
                                   const StereoRig& rig, const ColumnAxis& column,
                                   const MatchParams& match, ScaleMode mode) {
  std::vector<StereoCandidate> cl, cr;
  for (const auto& o : left) cl.push_back({o.contour.centroid, o.t0});
  for (const auto& o : right) cr.push_back({o.contour.centroid, o.t0});
  MeasureOutput out;
  out.matches = epipolar_match(cl, cr, rig, match);
  for (const auto& m : out.matches.matches) {
    const auto& l = left[static_cast<std::size_t>(m.left)];
    const auto& r = right[static_cast<std::size_t>(m.right)];
    try {
      out.measurements.push_back(measure_particle(
          rig, column, l.contour.centroid, r.contour.centroid, undistorted_area(rig.left, l.contour.polygon),
          undistorted_area(rig.right, r.contour.polygon), 0.5 * (l.t_ref + r.t_ref), mode));
    } catch (const NumericError&) {
      // A pair that cannot be triangulated is dropped, not fatal.
    }
  }
  std::stable_sort(out.measurements.begin(), out.measurements.end(),
                   [](const ParticleMeasurement& a, const ParticleMeasurement& b) {
                     if (a.t_us != b.t_us) return a.t_us < b.t_us;
                     return a.centroid.x() < b.centroid.x();
                   });
  return out;
}

StageResult run_stage(Stage stage, const PipelineConfig& config, const fs::path& out) {
  const auto start = std::chrono::steady_clock::now();
  StageResult result;
  result.stage = stage;
  try {
    fs::create_directories(out / std::string(stage_name(stage)));
    switch (stage) {
      case Stage::kSimulate: result.fragment = stage_simulate(config, out); break;
      case Stage::kReconstruct: result.fragment = stage_reconstruct(config, out); break;
      case Stage::kSmoke: result.fragment = stage_smoke(config, out); break;
      case Stage::kFuse: result.fragment = stage_fuse(config, out); break;
      case Stage::kExtract: result.fragment = stage_extract(config, out); break;
      case Stage::kMeasure: result.fragment = stage_measure(config, out); break;
      case Stage::kReport: result.fragment = stage_report(config, out); break;
    }
  } catch (const InvariantError& e) {
    rethrow_with_stage(stage, e);
  } catch (const NumericError& e) {
    rethrow_with_stage(stage, e);
  } catch (const InputError& e) {
    rethrow_with_stage(stage, e);
  } catch (const Json::exception& e) {
    throw InputError(std::string(stage_name(stage)) + ": malformed artifact: " + e.what());
  } catch (const fs::filesystem_error& e) {
    throw InputError(std::string(stage_name(stage)) + ": " + e.what());
  }
  write_json(fragment_path(out, stage), result.fragment);
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::vector<StageResult> run_pipeline(const PipelineConfig& config, const fs::path& out,
                                      const std::function<void(const StageResult&)>& on_stage) {
  std::vector<Stage> stages;
  if (config.inputs.mosaic.empty()) stages.push_back(Stage::kSimulate);
  for (Stage s : {Stage::kReconstruct, Stage::kSmoke, Stage::kFuse, Stage::kExtract,
                  Stage::kMeasure, Stage::kReport}) {
    stages.push_back(s);
  }
  std::vector<StageResult> results;
  for (Stage s : stages) {
    results.push_back(run_stage(s, config, out));
    if (on_stage) on_stage(results.back());
  }
  return results;
}

}  // namespace evsve
