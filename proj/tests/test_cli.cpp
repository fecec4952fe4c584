#include <gtest/gtest.h>

#include <cstdlib>
#include <map>
#include <random>
#include <string>

#include "evsve/pipeline.hpp"
#include "test_support.hpp"

namespace evsve {
namespace {

std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_bytes(e.path());
  }
  return out;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(EVSVE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Small scene written to disk plus a config that points at it.
fs::path small_scene_config(const fs::path& dir) {
  const SceneTruth scene = testing::small_scene(8);
  write_json(dir / "scene.json", scene_to_json(scene, default_sim_config()));
  write_json(dir / "config.json", Json{{"seed", 11}, {"inputs", {{"scene", "scene.json"}}}});
  return dir / "config.json";
}

// ---- io ----

TEST(Io, Png16RoundTrip) {
  const fs::path dir = testing::scratch_dir("png");
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> d(0, 65535);
  ImageD img(37, 21);
  for (double& v : img.pixels()) v = d(rng);
  write_png16(dir / "a.png", img);
  EXPECT_TRUE(read_png(dir / "a.png") == img);
  EXPECT_TRUE(read_image(dir / "a.png") == img);
  ImageD clipped(2, 1);
  clipped(0, 0) = -5.0;
  clipped(1, 0) = 1e6;
  write_png16(dir / "b.png", clipped);
  const ImageD back = read_png(dir / "b.png");
  EXPECT_EQ(back(0, 0), 0.0);
  EXPECT_EQ(back(1, 0), 65535.0);
  fs::remove_all(dir);
}

TEST(Io, PfmRoundTripOfFloatValues) {
  const fs::path dir = testing::scratch_dir("pfm");
  std::mt19937_64 rng(2);
  ImageD img = testing::random_image(19, 23, rng, -1e3, 1e5);
  for (double& v : img.pixels()) v = static_cast<float>(v);
  write_pfm(dir / "a.pfm", img);
  EXPECT_TRUE(read_pfm(dir / "a.pfm") == img);
  EXPECT_TRUE(read_image(dir / "a.pfm") == img);
  fs::remove_all(dir);
}

TEST(Io, MissingFileIsInputError) {
  EXPECT_THROW(read_bytes("/nonexistent/evsve/file.bin"), InputError);
  EXPECT_THROW(read_png("/nonexistent/evsve/file.png"), InputError);
  EXPECT_THROW(load_calibration("/nonexistent/evsve/calib.json"), InputError);
}

TEST(Io, CalibrationRoundTripIsLossless) {
  const fs::path dir = testing::scratch_dir("calib");
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const Calibration calib = testing::random_calibration(rng);
    EXPECT_TRUE(testing::same_calibration(calibration_from_json(calibration_to_json(calib)), calib));
    save_calibration(dir / "c.json", calib);
    EXPECT_TRUE(testing::same_calibration(load_calibration(dir / "c.json"), calib));
  }
  fs::remove_all(dir);
}

TEST(Io, CalibrationValidated) {
  std::mt19937_64 rng(4);
  Calibration calib = testing::random_calibration(rng);
  Json j = calibration_to_json(calib);
  calib.registration[1] = Homography::Zero();
  EXPECT_THROW(calibration_from_json(calibration_to_json(calib)), InvariantError);
  j.erase("left");
  EXPECT_THROW(calibration_from_json(j), InputError);
}

TEST(Io, SceneRoundTrip) {
  const SceneTruth scene = default_scene();
  SimConfig cfg = default_sim_config();
  cfg.jitter_px = 0.25;
  cfg.seed = 99;
  const Json j = scene_to_json(scene, cfg);
  SceneTruth back;
  SimConfig back_cfg;
  scene_from_json(j, back, back_cfg);
  EXPECT_EQ(scene_to_json(back, back_cfg), j);
  EXPECT_EQ(back.particles.size(), 3u);
  EXPECT_EQ(back_cfg.seed, 99u);
}

TEST(Io, ObservationsRoundTrip) {
  std::vector<ParticleObservation> obs(2);
  obs[0].view = View::kRight;
  obs[0].t0 = 100;
  obs[0].t1 = 900;
  obs[0].t_ref = 500.25;
  obs[0].state = ParticleState::kPartial;
  obs[0].velocity = Vec2(0.125, -3.5);
  obs[0].velocity_known = true;
  obs[0].contour.polygon = {Vec2(0, 0), Vec2(4, 0), Vec2(4, 3)};
  obs[0].contour.centroid = Vec2(8.0 / 3.0, 1.0);
  obs[0].contour.pixel_area = 6.0;
  obs[0].cluster_events = 321;
  obs[1].state = ParticleState::kExtinguished;
  obs[1].eccentric = true;
  const Json j = observations_to_json(obs);
  const auto back = observations_from_json(j);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(observations_to_json(back), j);
  EXPECT_EQ(back[0].contour.polygon.size(), 3u);
  EXPECT_EQ(back[0].t_ref, 500.25);
  EXPECT_EQ(back[0].state, ParticleState::kPartial);
  EXPECT_TRUE(back[1].eccentric);
}

TEST(Io, MeasurementCsvRoundTrip) {
  ParticleMeasurement m;
  m.t_us = 1234.5;
  m.centroid = Vec3(-2.25, 3.5, 110.125);
  m.dh = 15.94;
  m.re_left = 0.98;
  m.re_right = 1.02;
  m.re = 1.0;
  m.reprojection_error = 0.031;
  const std::string csv = format_measurements_csv(std::vector<ParticleMeasurement>{m, m});
  const auto back = parse_measurements_csv(csv);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].t_us, m.t_us);
  EXPECT_EQ(back[1].centroid, m.centroid);
  EXPECT_NEAR(back[1].dh, m.dh, 1e-12);
  EXPECT_NEAR(back[1].re, m.re, 1e-12);
  EXPECT_EQ(format_measurements_csv(back), csv);
  EXPECT_TRUE(parse_measurements_csv(format_measurements_csv({})).empty());
  EXPECT_THROW(parse_measurements_csv("t,x\n1,2\n"), ParseError);
}

// ---- config ----

TEST(Config, DefaultsValidateAndRoundTrip) {
  const PipelineConfig c = default_pipeline_config();
  EXPECT_NO_THROW(c.validate());
  const PipelineConfig back = config_from_json(config_to_json(c), ".");
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(config_from_json(Json{{"sede", 1}}, "."), ConfigError);
  EXPECT_THROW(config_from_json(Json{{"smoke", {{"weigths", {0.25, 0.25, 0.25, 0.25}}}}}, "."), ConfigError);
}

TEST(Config, OutOfRangeRejected) {
  EXPECT_THROW(config_from_json(Json{{"smoke", {{"weights", {0.5, 0.5, 0.5, 0.5}}}}}, "."), ConfigError);
  EXPECT_THROW(config_from_json(Json{{"smoke", {{"window", 4}}}}, "."), ConfigError);
  EXPECT_THROW(config_from_json(Json{{"sve", {{"transmittances", {1.0, 0.5, 0.0, 0.25}}}}}, "."), ConfigError);
  EXPECT_THROW(config_from_json(Json{{"fusion", {{"levels", 0}}}}, "."), ConfigError);
  EXPECT_THROW(config_from_json(Json{{"seed", "one"}}, "."), ConfigError);
}

TEST(Config, HashTracksContent) {
  PipelineConfig a = default_pipeline_config();
  PipelineConfig b = a;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 2;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

// ---- stages ----

TEST(Stages, FuseSingleExposureIsIdentity) {
  const fs::path out = testing::scratch_dir("fuse1");
  std::mt19937_64 rng(5);
  ImageD img = testing::random_image(64, 48, rng, 1.0, 60000.0);
  for (double& v : img.pixels()) v = static_cast<float>(v);
  fs::create_directories(out / "reconstruct");
  fs::create_directories(out / "smoke");
  write_pfm(artifacts::exposure(out, 0), img);
  write_json(artifacts::stack_meta(out), Json{{"transmittances", {1.0}}, {"full_scale", 65535.0}});
  write_png8(artifacts::smoke_labels(out), Image<std::uint8_t>(64, 48, 0));
  run_stage(Stage::kFuse, default_pipeline_config(), out);
  const ImageD fused = read_pfm(artifacts::hdr(out));
  ASSERT_TRUE(fused.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) ASSERT_NEAR(fused[i], img[i], 1e-3 * img[i]);
  fs::remove_all(out);
}

TEST(Stages, MeasureWithNoMatchesWritesHeaderOnly) {
  const fs::path out = testing::scratch_dir("measure0");
  Calibration calib;
  calib.rig = reference_rig();
  fs::create_directories(out / "simulate");
  fs::create_directories(out / "extract");
  save_calibration(artifacts::sim_calibration(out), calib);
  const SceneTruth scene = default_scene();
  Json column;
  for (View view : {View::kLeft, View::kRight}) {
    const CameraModel& cam = scene.camera(view);
    const Vec2 a = project(cam, scene.column.p1), b = project(cam, scene.column.p2);
    column[view == View::kLeft ? "left" : "right"] = {{a.x(), a.y()}, {b.x(), b.y()}};
  }
  write_json(artifacts::sim_column(out), column);
  for (View view : {View::kLeft, View::kRight}) write_json(artifacts::observations(out, view), Json::array());

  const StageResult r = run_stage(Stage::kMeasure, default_pipeline_config(), out);
  EXPECT_EQ(r.fragment.at("note"), "zero matched particles");
  EXPECT_EQ(r.fragment.at("measurements"), 0);
  const std::string csv = read_text(artifacts::measurements(out));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
  EXPECT_EQ(csv.rfind("t_us,", 0), 0u);

  run_stage(Stage::kReport, default_pipeline_config(), out);
  const Json report = read_json(artifacts::report(out));
  EXPECT_EQ(report.at("note"), "zero matched particles");
  EXPECT_EQ(report.at("measurements"), 0);
  EXPECT_TRUE(report.at("size_histogram").at("modes_mm").empty());
  fs::remove_all(out);
}

TEST(Stages, MissingUpstreamArtifactIsInputError) {
  const fs::path out = testing::scratch_dir("missing");
  EXPECT_THROW(run_stage(Stage::kReconstruct, default_pipeline_config(), out), InputError);
  EXPECT_THROW(run_stage(Stage::kSmoke, default_pipeline_config(), out), InputError);
  EXPECT_THROW(run_stage(Stage::kMeasure, default_pipeline_config(), out), InputError);
  fs::remove_all(out);
}

TEST(Stages, RunWritesEveryStageFragment) {
  const fs::path dir = testing::scratch_dir("runall");
  const PipelineConfig config = load_pipeline_config(small_scene_config(dir));
  const auto results = run_pipeline(config, dir / "out");
  ASSERT_EQ(results.size(), 7u);
  for (const auto& r : results) EXPECT_TRUE(fs::exists(dir / "out" / std::string(stage_name(r.stage)) / "fragment.json"));
  const Json report = read_json(artifacts::report(dir / "out"));
  EXPECT_EQ(report.at("seed"), 11);
  EXPECT_EQ(report.at("tool_version"), kToolVersion);
  EXPECT_TRUE(report.contains("evaluation"));
  fs::remove_all(dir);
}

// ---- command line ----

TEST(Cli, ExitCodes) {
  const fs::path dir = testing::scratch_dir("cli");
  EXPECT_EQ(cli("--help"), 0);
  EXPECT_EQ(cli(""), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_EQ(cli("run --config " + (dir / "absent.json").string()), 2);
  write_json(dir / "bad.json", Json{{"smoke", {{"regions", 0}}}});
  EXPECT_EQ(cli("--config " + (dir / "bad.json").string() + " run --out " + (dir / "o").string()), 2);
  write_text(dir / "broken.json", "{ not json");
  EXPECT_EQ(cli("--config " + (dir / "broken.json").string() + " run --out " + (dir / "o").string()), 2);
  EXPECT_EQ(cli("--out " + (dir / "empty").string() + " reconstruct"), 2);
  write_json(dir / "badmosaic.json", Json{{"inputs", {{"mosaic", "mosaic.png"}}}});
  write_text(dir / "mosaic.png", "not a png");
  EXPECT_EQ(cli("--config " + (dir / "badmosaic.json").string() + " --out " + (dir / "m").string() + " reconstruct"), 2);
  fs::remove_all(dir);
}

TEST(Cli, StagedRunMatchesRun) {
  const fs::path dir = testing::scratch_dir("staged");
  const std::string config = small_scene_config(dir).string();
  ASSERT_EQ(cli("--config " + config + " --threads 2 --out " + (dir / "a").string() + " run"), 0);
  for (const char* stage : {"simulate", "reconstruct", "smoke", "fuse", "extract", "measure", "report"}) {
    ASSERT_EQ(cli("--config " + config + " --out " + (dir / "b").string() + " " + stage), 0) << stage;
  }
  const auto a = tree(dir / "a");
  const auto b = tree(dir / "b");
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) {
    ASSERT_TRUE(b.count(name)) << name;
    EXPECT_TRUE(b.at(name) == bytes) << name;
  }
  fs::remove_all(dir);
}

TEST(Cli, SeedFlagOverridesConfig) {
  const fs::path dir = testing::scratch_dir("seed");
  const std::string config = small_scene_config(dir).string();
  ASSERT_EQ(cli("--config " + config + " --seed 5 --out " + (dir / "o").string() + " simulate"), 0);
  EXPECT_EQ(read_json(dir / "o" / "simulate" / "fragment.json").at("seed"), 5);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace evsve
