#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "evsve/events.hpp"
#include "evsve/image.hpp"
#include "evsve/stereo.hpp"
#include "evsve/synth.hpp"

namespace evsve {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// Whole-file helpers; missing files raise InputError naming the path.
std::string read_text(const fs::path& path);
std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_text(const fs::path& path, std::string_view text);
void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes);
Json read_json(const fs::path& path);
// Pretty-printed, trailing newline.
void write_json(const fs::path& path, const Json& json);

// Grayscale PNG, 8 or 16 bit on read; 16 bit on write (rounded, clipped).
ImageD read_png(const fs::path& path);
void write_png16(const fs::path& path, const ImageD& img);
void write_png8(const fs::path& path, const Image<std::uint8_t>& img);

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
  RgbImage() = default;
  RgbImage(int w, int h, std::array<std::uint8_t, 3> fill);
  void set(int x, int y, std::array<std::uint8_t, 3> c);
};
void write_png_rgb(const fs::path& path, const RgbImage& img);

// Single-channel portable float map ("Pf", little-endian, bottom-up rows).
ImageD read_pfm(const fs::path& path);
void write_pfm(const fs::path& path, const ImageD& img);

// PNG or PFM, chosen by content.
ImageD read_image(const fs::path& path);

// 8-bit preview: 99th-percentile normalisation, gamma 1/2.2.
Image<std::uint8_t> tone_map(const ImageD& img);

// Per-view camera plus the event->SVE registration homography.
struct Calibration {
  StereoRig rig;
  std::array<Homography, 2> registration{Homography::Identity(), Homography::Identity()};
  const Homography& registration_of(View view) const {
    return registration[view == View::kLeft ? 0 : 1];
  }
  void validate() const;
};

Json camera_to_json(const CameraModel& cam);
CameraModel camera_from_json(const Json& json);
Json calibration_to_json(const Calibration& calib);
Calibration calibration_from_json(const Json& json);
Calibration load_calibration(const fs::path& path);
void save_calibration(const fs::path& path, const Calibration& calib);

// Scene description: geometry, particles, smoke and sensor settings.
Json scene_to_json(const SceneTruth& scene, const SimConfig& config);
void scene_from_json(const Json& json, SceneTruth& scene, SimConfig& config);

Json observations_to_json(std::span<const ParticleObservation> observations);
std::vector<ParticleObservation> observations_from_json(const Json& json);

// t_us,x_mm,y_mm,z_mm,dh_mm,re_left_mm,re_right_mm,re_mm,reproj_px
std::string format_measurements_csv(std::span<const ParticleMeasurement> measurements);
std::vector<ParticleMeasurement> parse_measurements_csv(std::string_view text);

}  // namespace evsve
