#include "evsve/io.hpp"

#include <png.h>

#include <Eigen/LU>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace evsve {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("missing input: " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  const std::string text = read_text(path);
  return {text.begin(), text.end()};
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw InputError("cannot write " + path.string());
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  write_text(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte);
  }
}

void write_json(const fs::path& path, const Json& json) { write_text(path, json.dump(2) + "\n"); }

// ---- PNG -------------------------------------------------------------------

namespace {

struct PngReadSource {
  const std::vector<std::uint8_t>* bytes;
  std::size_t offset;
};

void png_read_from_memory(png_structp png, png_bytep out, png_size_t count) {
  auto* src = static_cast<PngReadSource*>(png_get_io_ptr(png));
  if (src->offset + count > src->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(out, src->bytes->data() + src->offset, count);
  src->offset += count;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t count) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + count);
}

void png_flush_noop(png_structp) {}

// Decodes into `pixels` (16-bit samples); returns false on any libpng error.
// No objects with destructors live across the setjmp.
bool decode_gray_png(const std::vector<std::uint8_t>& bytes, int* width, int* height,
                     std::vector<std::uint16_t>* pixels, std::string* error) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  PngReadSource src{&bytes, 0};
  png_bytep* rows = nullptr;
  if (setjmp(png_jmpbuf(png))) {
    std::free(rows);
    png_destroy_read_struct(&png, &info, nullptr);
    *error = "corrupt PNG";
    return false;
  }
  png_set_read_fn(png, &src, png_read_from_memory);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    *error = "PNG is not single-channel grayscale";
    return false;
  }
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  pixels->assign(static_cast<std::size_t>(w) * h, 0);
  std::vector<std::uint8_t> buffer(rowbytes * h);
  rows = static_cast<png_bytep*>(std::malloc(sizeof(png_bytep) * h));
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  std::free(rows);
  png_destroy_read_struct(&png, &info, nullptr);
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      const std::uint8_t* p = buffer.data() + y * rowbytes;
      (*pixels)[y * w + x] = depth == 16 ? static_cast<std::uint16_t>(p[2 * x] << 8 | p[2 * x + 1])
                                         : p[x];
    }
  }
  *width = static_cast<int>(w);
  *height = static_cast<int>(h);
  return true;
}

bool encode_png(int width, int height, int depth, int color, const std::vector<std::uint8_t>& data,
                std::vector<std::uint8_t>* out) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  png_bytep* rows = nullptr;
  if (setjmp(png_jmpbuf(png))) {
    std::free(rows);
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth,
               color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t rowbytes = data.size() / static_cast<std::size_t>(std::max(height, 1));
  rows = static_cast<png_bytep*>(std::malloc(sizeof(png_bytep) * std::max(height, 1)));
  for (int y = 0; y < height; ++y) {
    rows[y] = const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * rowbytes);
  }
  png_write_image(png, rows);
  png_write_end(png, nullptr);
  std::free(rows);
  png_destroy_write_struct(&png, &info);
  return true;
}

void write_png_data(const fs::path& path, int width, int height, int depth, int color,
                    const std::vector<std::uint8_t>& data) {
  if (width <= 0 || height <= 0) throw DimensionError("cannot write an empty PNG");
  std::vector<std::uint8_t> out;
  if (!encode_png(width, height, depth, color, data, &out)) {
    throw InputError("PNG encoding failed: " + path.string());
  }
  write_bytes(path, out);
}

}  // namespace

ImageD read_png(const fs::path& path) {
  const auto bytes = read_bytes(path);
  int w = 0, h = 0;
  std::vector<std::uint16_t> pixels;
  std::string error;
  if (!decode_gray_png(bytes, &w, &h, &pixels, &error)) {
    throw InputError(path.string() + ": " + (error.empty() ? "PNG decode failed" : error));
  }
  ImageD img(w, h);
  for (std::size_t i = 0; i < pixels.size(); ++i) img[i] = pixels[i];
  return img;
}

void write_png16(const fs::path& path, const ImageD& img) {
  std::vector<std::uint8_t> data(img.size() * 2);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(std::round(img[i]), 0.0, 65535.0);
    const auto q = static_cast<std::uint16_t>(std::isfinite(v) ? v : 0.0);
    data[2 * i] = static_cast<std::uint8_t>(q >> 8);
    data[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
  }
  write_png_data(path, img.width(), img.height(), 16, PNG_COLOR_TYPE_GRAY, data);
}

void write_png8(const fs::path& path, const Image<std::uint8_t>& img) {
  std::vector<std::uint8_t> data(img.pixels().begin(), img.pixels().end());
  write_png_data(path, img.width(), img.height(), 8, PNG_COLOR_TYPE_GRAY, data);
}

RgbImage::RgbImage(int w, int h, std::array<std::uint8_t, 3> fill) : width(w), height(h) {
  if (w < 0 || h < 0) throw DimensionError("negative image size");
  rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + i);
}

void RgbImage::set(int x, int y, std::array<std::uint8_t, 3> c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  std::copy(c.begin(), c.end(), rgb.begin() + i);
}

void write_png_rgb(const fs::path& path, const RgbImage& img) {
  write_png_data(path, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, img.rgb);
}

// ---- PFM -------------------------------------------------------------------

ImageD read_pfm(const fs::path& path) {
  const auto bytes = read_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  if (token() != "Pf") throw ParseError(path.string() + ": not a grayscale PFM", 0);
  int w = 0, h = 0;
  double scale = 0.0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    scale = std::stod(token());
  } catch (const std::exception&) {
    throw ParseError(path.string() + ": bad PFM header", pos);
  }
  ++pos;  // single whitespace before the raster
  if (w <= 0 || h <= 0 || scale == 0.0) throw ParseError(path.string() + ": bad PFM header", pos);
  const std::size_t need = static_cast<std::size_t>(w) * h * 4;
  if (bytes.size() < pos + need) throw ParseError(path.string() + ": truncated PFM", bytes.size());
  const bool little = scale < 0.0;
  ImageD img(w, h);
  for (int row = 0; row < h; ++row) {
    for (int x = 0; x < w; ++x) {
      const std::uint8_t* p = bytes.data() + pos + (static_cast<std::size_t>(row) * w + x) * 4;
      std::uint32_t bits = little ? (p[0] | p[1] << 8 | p[2] << 16 | std::uint32_t(p[3]) << 24)
                                  : (p[3] | p[2] << 8 | p[1] << 16 | std::uint32_t(p[0]) << 24);
      img(x, h - 1 - row) = std::bit_cast<float>(bits);
    }
  }
  return img;
}

void write_pfm(const fs::path& path, const ImageD& img) {
  const std::string header =
      "Pf\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n-1.0\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.size() * 4);
  for (int row = img.height() - 1; row >= 0; --row) {
    for (int x = 0; x < img.width(); ++x) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(img(x, row)));
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
    }
  }
  write_bytes(path, out);
}

ImageD read_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("missing input: " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] == 'P' && magic[1] == 'f') return read_pfm(path);
  return read_png(path);
}

Image<std::uint8_t> tone_map(const ImageD& img) {
  Image<std::uint8_t> out(img.width(), img.height());
  if (img.empty()) return out;
  std::vector<double> sorted(img.pixels().begin(), img.pixels().end());
  const auto k = static_cast<std::size_t>(0.99 * static_cast<double>(sorted.size() - 1));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  const double hi = sorted[k];
  if (!(hi > 0.0)) return out;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img[i] / hi, 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::pow(v, 1.0 / 2.2)));
  }
  return out;
}

// ---- calibration -----------------------------------------------------------

namespace {

template <typename T>
T required(const Json& json, const char* key, const std::string& where) {
  if (!json.contains(key)) throw ConfigError(where + ": missing field '" + key + "'");
  try {
    return json.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <typename T>
T optional(const Json& json, const char* key, T fallback) {
  if (!json.contains(key) || json.at(key).is_null()) return fallback;
  try {
    return json.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

Json vec3_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from(const Json& json, const std::string& where) {
  if (!json.is_array() || json.size() != 3) throw ConfigError(where + ": expected 3 numbers");
  return {json[0].get<double>(), json[1].get<double>(), json[2].get<double>()};
}

Json mat3_json(const Mat3& m) {
  Json out = Json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.push_back(m(r, c));
  return out;
}

Mat3 mat3_from(const Json& json, const std::string& where) {
  if (!json.is_array() || json.size() != 9) throw ConfigError(where + ": expected 9 numbers");
  Mat3 m;
  for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = json[i].get<double>();
  return m;
}

ParticleState parse_state(const std::string& name) {
  for (auto s : {ParticleState::kCombusting, ParticleState::kExtinguished, ParticleState::kPartial,
                 ParticleState::kUnclassifiable}) {
    if (state_name(s) == name) return s;
  }
  throw ConfigError("unknown particle state '" + name + "'");
}

}  // namespace

void Calibration::validate() const {
  rig.validate();
  for (const auto& h : registration) {
    if (!h.allFinite() || std::abs(h.determinant()) < 1e-12) {
      throw InvariantError("registration homography is singular");
    }
  }
}

Json camera_to_json(const CameraModel& cam) {
  Json j;
  j["f"] = cam.focal;
  j["cx"] = cam.principal.x();
  j["cy"] = cam.principal.y();
  j["distortion"] = cam.distortion;
  j["R"] = mat3_json(cam.rotation);
  j["t"] = vec3_json(cam.translation);
  j["mu"] = cam.pixel_pitch;
  j["width"] = cam.width;
  j["height"] = cam.height;
  return j;
}

CameraModel camera_from_json(const Json& json) {
  const std::string where = "camera";
  if (!json.is_object()) throw ConfigError("camera entry must be an object");
  CameraModel cam;
  cam.focal = required<double>(json, "f", where);
  cam.principal = Vec2(required<double>(json, "cx", where), required<double>(json, "cy", where));
  cam.distortion = required<std::array<double, 5>>(json, "distortion", where);
  if (!json.contains("R")) throw ConfigError("camera: missing field 'R'");
  cam.rotation = mat3_from(json.at("R"), "camera.R");
  if (!json.contains("t")) throw ConfigError("camera: missing field 't'");
  cam.translation = vec3_from(json.at("t"), "camera.t");
  // Both spellings of the pixel pitch are accepted.
  if (json.contains("mu")) {
    cam.pixel_pitch = json.at("mu").get<double>();
  } else if (json.contains("µ")) {
    cam.pixel_pitch = json.at("µ").get<double>();
  }
  cam.width = optional<int>(json, "width", 0);
  cam.height = optional<int>(json, "height", 0);
  cam.validate();
  return cam;
}

Json calibration_to_json(const Calibration& calib) {
  Json j;
  Json left = camera_to_json(calib.rig.left);
  left["registration"] = mat3_json(calib.registration[0]);
  Json right = camera_to_json(calib.rig.right);
  right["registration"] = mat3_json(calib.registration[1]);
  j["left"] = left;
  j["right"] = right;
  return j;
}

Calibration calibration_from_json(const Json& json) {
  if (!json.is_object() || !json.contains("left") || !json.contains("right")) {
    throw ConfigError("calibration needs 'left' and 'right' cameras");
  }
  Calibration calib;
  calib.rig.left = camera_from_json(json.at("left"));
  calib.rig.right = camera_from_json(json.at("right"));
  if (json.at("left").contains("registration")) {
    calib.registration[0] = mat3_from(json.at("left").at("registration"), "left.registration");
  }
  if (json.at("right").contains("registration")) {
    calib.registration[1] = mat3_from(json.at("right").at("registration"), "right.registration");
  }
  calib.validate();
  return calib;
}

Calibration load_calibration(const fs::path& path) {
  try {
    return calibration_from_json(read_json(path));
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void save_calibration(const fs::path& path, const Calibration& calib) {
  write_json(path, calibration_to_json(calib));
}

// ---- scene -----------------------------------------------------------------

Json scene_to_json(const SceneTruth& scene, const SimConfig& config) {
  Json j;
  j["cameras"] = {{"left", camera_to_json(scene.rig.left)},
                  {"right", camera_to_json(scene.rig.right)},
                  {"sve", camera_to_json(scene.sve_camera)}};
  j["column"] = {{"p1", vec3_json(scene.column.p1)},
                 {"p2", vec3_json(scene.column.p2)},
                 {"radius", scene.column_radius},
                 {"length", scene.column_length},
                 {"radiance", scene.column_radiance}};
  j["background_gradient"] = scene.background_gradient;
  j["atmospheric_light"] = scene.atmospheric_light;
  Json particles = Json::array();
  for (const auto& p : scene.particles) {
    particles.push_back({{"id", p.id},
                         {"position", vec3_json(p.position)},
                         {"velocity", vec3_json(p.velocity)},
                         {"radius", p.radius},
                         {"state", std::string(state_name(p.state))},
                         {"sve_radiance", p.sve_radiance},
                         {"event_radiance", {p.event_radiance_start, p.event_radiance_end}},
                         {"wobble_mm", p.wobble_mm},
                         {"wobble_hz", p.wobble_hz}});
  }
  j["particles"] = particles;
  Json smoke = Json::array();
  for (const auto& s : scene.smoke) {
    smoke.push_back({{"center", vec3_json(s.center)},
                     {"velocity", vec3_json(s.velocity)},
                     {"radius", s.radius},
                     {"density", s.density},
                     {"turbulence", s.turbulence},
                     {"wavenumber", s.wavenumber},
                     {"rate_hz", s.rate_hz}});
  }
  j["smoke"] = smoke;
  j["texture_seed"] = scene.texture_seed;
  j["duration_us"] = scene.duration_us;
  j["pre_trigger_us"] = scene.pre_trigger_us;
  j["clock_offset_us"] = scene.clock_offset_us;
  j["sensor"] = {{"contrast_threshold", config.contrast_threshold},
                 {"noise_rate", config.noise_rate},
                 {"jitter_px", config.jitter_px},
                 {"transmittances", config.transmittances},
                 {"sve_gain", config.sve_gain},
                 {"bit_depth", config.bit_depth},
                 {"time_step_us", config.time_step_us},
                 {"edge_sigma_px", config.edge_sigma_px},
                 {"seed", config.seed}};
  return j;
}

// Fields absent from `json` keep the values already in `scene` / `config`.
void scene_from_json(const Json& json, SceneTruth& scene, SimConfig& config) {
  try {
    if (!json.is_object()) throw ConfigError("scene must be an object");
    if (json.contains("cameras")) {
      const Json& c = json.at("cameras");
      if (c.contains("left")) scene.rig.left = camera_from_json(c.at("left"));
      if (c.contains("right")) scene.rig.right = camera_from_json(c.at("right"));
      if (c.contains("sve")) scene.sve_camera = camera_from_json(c.at("sve"));
    }
    if (json.contains("column")) {
      const Json& c = json.at("column");
      if (c.contains("p1")) scene.column.p1 = vec3_from(c.at("p1"), "column.p1");
      if (c.contains("p2")) scene.column.p2 = vec3_from(c.at("p2"), "column.p2");
      scene.column_radius = optional(c, "radius", scene.column_radius);
      scene.column_length = optional(c, "length", scene.column_length);
      scene.column_radiance = optional(c, "radiance", scene.column_radiance);
    }
    scene.background_gradient = optional(json, "background_gradient", scene.background_gradient);
    scene.atmospheric_light = optional(json, "atmospheric_light", scene.atmospheric_light);
    if (json.contains("particles")) {
      scene.particles.clear();
      for (const Json& p : json.at("particles")) {
        ParticleTruth t;
        t.id = optional(p, "id", static_cast<int>(scene.particles.size()) + 1);
        if (!p.contains("position")) throw ConfigError("particle: missing 'position'");
        t.position = vec3_from(p.at("position"), "particle.position");
        if (p.contains("velocity")) t.velocity = vec3_from(p.at("velocity"), "particle.velocity");
        t.radius = optional(p, "radius", t.radius);
        t.state = parse_state(optional<std::string>(p, "state", "combusting"));
        t.sve_radiance = optional(p, "sve_radiance", t.sve_radiance);
        const auto er = optional<std::array<double, 2>>(
            p, "event_radiance", {t.event_radiance_start, t.event_radiance_end});
        t.event_radiance_start = er[0];
        t.event_radiance_end = er[1];
        t.wobble_mm = optional(p, "wobble_mm", t.wobble_mm);
        t.wobble_hz = optional(p, "wobble_hz", t.wobble_hz);
        scene.particles.push_back(t);
      }
    }
    if (json.contains("smoke")) {
      scene.smoke.clear();
      for (const Json& s : json.at("smoke")) {
        SmokePuff puff;
        if (!s.contains("center")) throw ConfigError("smoke: missing 'center'");
        puff.center = vec3_from(s.at("center"), "smoke.center");
        if (s.contains("velocity")) puff.velocity = vec3_from(s.at("velocity"), "smoke.velocity");
        puff.radius = optional(s, "radius", puff.radius);
        puff.density = optional(s, "density", puff.density);
        puff.turbulence = optional(s, "turbulence", puff.turbulence);
        puff.wavenumber = optional(s, "wavenumber", puff.wavenumber);
        puff.rate_hz = optional(s, "rate_hz", puff.rate_hz);
        scene.smoke.push_back(puff);
      }
    }
    scene.texture_seed = optional(json, "texture_seed", scene.texture_seed);
    scene.duration_us = optional(json, "duration_us", scene.duration_us);
    scene.pre_trigger_us = optional(json, "pre_trigger_us", scene.pre_trigger_us);
    scene.clock_offset_us = optional(json, "clock_offset_us", scene.clock_offset_us);
    if (json.contains("sensor")) {
      const Json& s = json.at("sensor");
      config.contrast_threshold = optional(s, "contrast_threshold", config.contrast_threshold);
      config.noise_rate = optional(s, "noise_rate", config.noise_rate);
      config.jitter_px = optional(s, "jitter_px", config.jitter_px);
      config.transmittances = optional(s, "transmittances", config.transmittances);
      config.sve_gain = optional(s, "sve_gain", config.sve_gain);
      config.bit_depth = optional(s, "bit_depth", config.bit_depth);
      config.time_step_us = optional(s, "time_step_us", config.time_step_us);
      config.edge_sigma_px = optional(s, "edge_sigma_px", config.edge_sigma_px);
      config.seed = optional(s, "seed", config.seed);
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  scene.validate();
  config.validate();
}

// ---- observations ----------------------------------------------------------

Json observations_to_json(std::span<const ParticleObservation> observations) {
  Json out = Json::array();
  for (const auto& o : observations) {
    Json poly = Json::array();
    for (const Vec2& p : o.contour.polygon) poly.push_back({p.x(), p.y()});
    out.push_back({{"view", std::string(view_name(o.view))},
                   {"t0", o.t0},
                   {"t1", o.t1},
                   {"t_ref", o.t_ref},
                   {"state", std::string(state_name(o.state))},
                   {"centroid", {o.contour.centroid.x(), o.contour.centroid.y()}},
                   {"pixel_area", o.contour.pixel_area},
                   {"convex_fallback", o.contour.convex_fallback},
                   {"polygon", poly},
                   {"velocity", {o.velocity.x(), o.velocity.y()}},
                   {"velocity_known", o.velocity_known},
                   {"eccentric", o.eccentric},
                   {"cluster_events", o.cluster_events}});
  }
  return out;
}

std::vector<ParticleObservation> observations_from_json(const Json& json) {
  if (!json.is_array()) throw ConfigError("observations must be an array");
  std::vector<ParticleObservation> out;
  try {
    for (const Json& j : json) {
      ParticleObservation o;
      const std::string view = j.at("view").get<std::string>();
      if (view != view_name(View::kLeft) && view != view_name(View::kRight)) {
        throw ConfigError("observation: unknown view '" + view + "'");
      }
      o.view = view == view_name(View::kLeft) ? View::kLeft : View::kRight;
      o.t0 = j.at("t0").get<double>();
      o.t1 = j.at("t1").get<double>();
      o.t_ref = j.at("t_ref").get<double>();
      o.state = parse_state(j.at("state").get<std::string>());
      const auto c = j.at("centroid").get<std::array<double, 2>>();
      o.contour.centroid = Vec2(c[0], c[1]);
      o.contour.pixel_area = j.at("pixel_area").get<double>();
      o.contour.convex_fallback = optional(j, "convex_fallback", false);
      for (const auto& p : j.at("polygon")) {
        const auto q = p.get<std::array<double, 2>>();
        o.contour.polygon.emplace_back(q[0], q[1]);
      }
      const auto v = optional<std::array<double, 2>>(j, "velocity", {0.0, 0.0});
      o.velocity = Vec2(v[0], v[1]);
      o.velocity_known = optional(j, "velocity_known", false);
      o.eccentric = optional(j, "eccentric", false);
      o.cluster_events = optional<std::size_t>(j, "cluster_events", 0);
      out.push_back(std::move(o));
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("observations: ") + e.what());
  }
  return out;
}

// ---- measurements ----------------------------------------------------------

namespace {
constexpr const char* kMeasurementHeader =
    "t_us,x_mm,y_mm,z_mm,dh_mm,re_left_mm,re_right_mm,re_mm,reproj_px";
}

std::string format_measurements_csv(std::span<const ParticleMeasurement> measurements) {
  std::string out = std::string(kMeasurementHeader) + "\n";
  char line[512];
  for (const auto& m : measurements) {
    std::snprintf(line, sizeof line, "%.3f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", m.t_us,
                  m.centroid.x(), m.centroid.y(), m.centroid.z(), m.dh, m.re_left, m.re_right,
                  m.re, m.reprojection_error);
    out += line;
  }
  return out;
}

std::vector<ParticleMeasurement> parse_measurements_csv(std::string_view text) {
  std::vector<ParticleMeasurement> out;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(pos, end - pos));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t line_start = pos;
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != kMeasurementHeader) throw ParseError("unexpected measurement header", line_start);
      header = false;
      continue;
    }
    std::array<double, 9> v{};
    std::stringstream ss(line);
    std::string field;
    std::size_t n = 0;
    while (std::getline(ss, field, ',')) {
      if (n >= v.size()) throw ParseError("too many measurement fields", line_start);
      char* tail = nullptr;
      v[n] = std::strtod(field.c_str(), &tail);
      if (field.empty() || *tail != '\0') throw ParseError("bad number '" + field + "'", line_start);
      ++n;
    }
    if (n != v.size()) throw ParseError("expected 9 measurement fields", line_start);
    ParticleMeasurement m;
    m.t_us = v[0];
    m.centroid = Vec3(v[1], v[2], v[3]);
    m.dh = v[4];
    m.re_left = v[5];
    m.re_right = v[6];
    m.re = v[7];
    m.reprojection_error = v[8];
    out.push_back(m);
  }
  if (header) throw ParseError("missing measurement header", 0);
  return out;
}

}  // namespace evsve
