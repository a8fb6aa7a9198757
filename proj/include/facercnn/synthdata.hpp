#pragma once

// Seeded "blob-face" scenes. A face is a bright filled ellipse with two dark
// eye dots and a dark mouth arc; distractors are plain ellipses and
// rectangles drawn with the same intensity statistics. Every scene is a pure
// function of (spec.seed, index).
//
// Geometry is generated on a half-pixel grid so that box corners and sizes
// are exact binary fractions and survive text round trips bit-for-bit.
// Pixel values are quantized to 1/255 steps so P5 files reproduce the
// in-memory image exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "facercnn/eval.hpp"
#include "facercnn/geometry.hpp"
#include "facercnn/tensor.hpp"

namespace facercnn {

struct SceneSpec {
  int image_w = 64, image_h = 64;
  int faces_min = 1, faces_max = 3;
  double face_size_min = 8, face_size_max = 28;  // face height in pixels
  double noise_sigma = 0.04;
  int distractors_min = 1, distractors_max = 3;
  std::uint64_t seed = 7;

  void validate() const {
    if (image_w < 8 || image_h < 8) throw std::invalid_argument("scene dimensions must be >= 8");
    if (faces_min < 0 || faces_max < faces_min) throw std::invalid_argument("scene face count range is invalid");
    if (face_size_min < 8) throw std::invalid_argument("face_size_min must be >= 8 px");
    if (face_size_max < face_size_min) throw std::invalid_argument("face_size_max must be >= face_size_min");
    if (face_size_max > std::min(image_w, image_h)) throw std::invalid_argument("face_size_max exceeds the image");
    if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be >= 0");
    if (distractors_min < 0 || distractors_max < distractors_min)
      throw std::invalid_argument("scene distractor count range is invalid");
  }
};

struct Scene {
  Tensor image;  // {1, H, W}, values in [0, 1]
  std::vector<Box> gts;
};

namespace detail {

inline constexpr double kFaceAspect = 1.3;  // mean height / width

// Supersampled coverage renderer.
class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(int x, int y) { return px_[static_cast<std::size_t>(y) * w_ + x]; }

  template <class Inside>
  void paint(const Box& bounds, double value, Inside&& inside) {
    constexpr int ss = 4;
    const int x0 = std::max(0, static_cast<int>(std::floor(bounds.x1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(bounds.y1)));
    const int x1 = std::min(w_, static_cast<int>(std::ceil(bounds.x2)));
    const int y1 = std::min(h_, static_cast<int>(std::ceil(bounds.y2)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < ss; ++sy)
          for (int sx = 0; sx < ss; ++sx)
            hits += inside(x + (sx + 0.5) / ss, y + (sy + 0.5) / ss) ? 1 : 0;
        if (hits == 0) continue;
        const double cov = static_cast<double>(hits) / (ss * ss);
        at(x, y) = at(x, y) * (1 - cov) + value * cov;
      }
    }
  }

  void ellipse(double cx, double cy, double rx, double ry, double value) {
    paint(Box::from_center(cx, cy, 2 * rx, 2 * ry), value, [=](double x, double y) {
      const double u = (x - cx) / rx, v = (y - cy) / ry;
      return u * u + v * v <= 1.0;
    });
  }

  const std::vector<double>& pixels() const { return px_; }

 private:
  int w_, h_;
  std::vector<double> px_;
};

inline double snap_half(double v) { return std::round(v * 2.0) / 2.0; }

}  // namespace detail

/// Renders scene `index` of `spec`. Throws when faces cannot be placed within
/// the retry budget.
inline Scene generate_scene(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5eedu};
  std::mt19937_64 rng(seq);
  const auto uni = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const auto uint_in = [&rng](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

  const int w = spec.image_w, h = spec.image_h;
  detail::Canvas canvas(w, h);
  const double base = uni(0.1, 0.35), gx = uni(-0.08, 0.08), gy = uni(-0.08, 0.08);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) canvas.at(x, y) = base + gx * ((x + 0.5) / w - 0.5) + gy * ((y + 0.5) / h - 0.5);

  constexpr int kRetries = 200;
  const int n_faces = uint_in(spec.faces_min, spec.faces_max);
  std::vector<Box> faces;
  for (int f = 0; f < n_faces; ++f) {
    bool placed = false;
    for (int attempt = 0; attempt < kRetries && !placed; ++attempt) {
      const double fh = detail::snap_half(uni(spec.face_size_min, spec.face_size_max));
      const double fw = std::max(1.0, detail::snap_half(fh / uni(1.2, 1.4)));
      if (fw > w || fh > h) continue;
      const double cx = detail::snap_half(uni(fw / 2, w - fw / 2));
      const double cy = detail::snap_half(uni(fh / 2, h - fh / 2));
      const Box b = Box::from_center(cx, cy, fw, fh);
      if (b.x1 < 0 || b.y1 < 0 || b.x2 > w || b.y2 > h) continue;
      const bool clear = std::all_of(faces.begin(), faces.end(), [&](const Box& o) { return iou(o, b) < 0.2; });
      if (!clear) continue;
      faces.push_back(b);
      placed = true;
    }
    if (!placed)
      throw std::runtime_error("generate_scene: could not place face " + std::to_string(f) + " of scene " +
                               std::to_string(index) + " (spec too crowded)");
  }

  // Distractors never touch a face; they are skipped when there is no room.
  const int n_distractors = uint_in(spec.distractors_min, spec.distractors_max);
  std::vector<Box> others;
  for (int d = 0; d < n_distractors; ++d) {
    for (int attempt = 0; attempt < kRetries; ++attempt) {
      const double dh = detail::snap_half(uni(spec.face_size_min, spec.face_size_max));
      const double dw = std::max(2.0, detail::snap_half(dh * uni(0.6, 1.4)));
      if (dw > w) continue;
      const Box b = Box::from_center(detail::snap_half(uni(dw / 2, w - dw / 2)),
                                     detail::snap_half(uni(dh / 2, h - dh / 2)), dw, dh);
      const bool clear =
          std::all_of(faces.begin(), faces.end(), [&](const Box& o) { return intersection_area(o, b) == 0; }) &&
          std::all_of(others.begin(), others.end(), [&](const Box& o) { return iou(o, b) < 0.2; });
      if (!clear) continue;
      others.push_back(b);
      const double value = uni(0.6, 0.85);
      if (uni(0, 1) < 0.6) {
        canvas.ellipse(b.center_x(), b.center_y(), dw / 2, dh / 2, value);
      } else {
        canvas.paint(b, value, [&](double x, double y) { return x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2; });
      }
      break;
    }
  }

  for (const Box& b : faces) {
    const double fw = b.width(), fh = b.height(), cx = b.center_x(), cy = b.center_y();
    const double skin = uni(0.6, 0.85);
    canvas.ellipse(cx, cy, fw / 2, fh / 2, skin);
    const double dark = std::max(0.0, skin - uni(0.3, 0.4));
    const double eye_r = std::max(0.9, 0.1 * fw);
    canvas.ellipse(cx - 0.22 * fw, cy - 0.1 * fh, eye_r, eye_r, dark);
    canvas.ellipse(cx + 0.22 * fw, cy - 0.1 * fh, eye_r, eye_r, dark);
    const double mr = 0.28 * fw, mt = std::max(0.9, 0.08 * fw), my = cy + 0.05 * fh;
    canvas.paint(Box::from_center(cx, my, 2 * mr, 2 * mr), dark, [=](double x, double y) {
      const double r = std::hypot(x - cx, y - my);
      return r <= mr && r >= mr - mt && y > my + 0.45 * mr;
    });
  }

  Scene s;
  s.image = Tensor({1, h, w});
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto& px = canvas.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double v = std::clamp(px[i] + spec.noise_sigma * noise(rng), 0.0, 1.0);
    s.image.data[i] = std::round(v * 255.0) / 255.0;
  }
  s.gts = std::move(faces);
  return s;
}

// ---------------------------------------------------------------------------
// Portable graymap (P5, maxval 255)

inline void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.shape.size() != 3 || image.channels() != 1) throw std::invalid_argument("write_pgm: expected {1,H,W}");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P5\n" << image.width() << " " << image.height() << "\n255\n";
  std::string bytes(image.size(), '\0');
  for (std::size_t i = 0; i < image.size(); ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0)));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("I/O error writing " + path.string());
}

inline Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic;
  const auto skip_comments = [&f] {
    f >> std::ws;
    while (f.peek() == '#') {
      std::string line;
      std::getline(f, line);
      f >> std::ws;
    }
  };
  skip_comments();
  f >> w;
  skip_comments();
  f >> h;
  skip_comments();
  f >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error(path.string() + ": not an 8-bit P5 graymap");
  f.get();
  std::string bytes(static_cast<std::size_t>(w) * h, '\0');
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size())) throw std::runtime_error(path.string() + ": truncated");
  Tensor t({1, h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i)
    t.data[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / maxval;
  return t;
}

// ---------------------------------------------------------------------------
// Dataset files

struct ManifestEntry {
  std::string name;  // image key, e.g. "images/img_00003"
  std::vector<Box> gts;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::size_t face_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.gts.size();
    return n;
  }
};

inline constexpr const char* kWiderAnnotationFile = "wider_annotations.txt";
inline constexpr const char* kFddbAnnotationFile = "fddb_ellipses.txt";

inline std::string dataset_image_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/img_%05zu", i);
  return buf;
}

/// Axis-aligned ellipse inscribed in a face box, major axis first.
inline Ellipse box_to_ellipse(const Box& b) {
  const double rx = b.width() / 2, ry = b.height() / 2;
  if (ry >= rx) return {ry, rx, std::numbers::pi / 2, b.center_x(), b.center_y()};
  return {rx, ry, 0.0, b.center_x(), b.center_y()};
}

/// Writes `n_images` scenes as P5 files plus WIDER-style and FDDB-style
/// annotation files under `out_dir`.
inline Manifest write_dataset(const SceneSpec& spec, std::size_t n_images, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  Manifest m;
  std::vector<std::pair<std::string, std::vector<Box>>> wider;
  std::vector<std::pair<std::string, std::vector<Ellipse>>> fddb;
  for (std::size_t i = 0; i < n_images; ++i) {
    Scene s = generate_scene(spec, i);
    const std::string name = dataset_image_name(i);
    write_pgm(out_dir / (name + ".pgm"), s.image);
    wider.emplace_back(name + ".pgm", s.gts);
    std::vector<Ellipse> es;
    for (const Box& b : s.gts) es.push_back(box_to_ellipse(b));
    fddb.emplace_back(name, std::move(es));
    m.entries.push_back({name, std::move(s.gts)});
  }
  const auto write_text = [](const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
    if (!f) throw std::runtime_error("I/O error writing " + p.string());
  };
  write_text(out_dir / kWiderAnnotationFile, format_wider_annotations(wider));
  write_text(out_dir / kFddbAnnotationFile, format_fddb_annotations(fddb));
  return m;
}

/// Loads a dataset written by write_dataset (WIDER annotation + P5 images).
inline std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / kWiderAnnotationFile);
  if (!f) throw std::runtime_error("cannot open " + (dir / kWiderAnnotationFile).string());
  std::stringstream ss;
  ss << f.rdbuf();
  std::vector<Scene> out;
  for (auto& [key, boxes] : parse_wider_annotations(ss.str())) {
    Scene s;
    s.image = read_pgm(dir / (key + ".pgm"));
    s.gts = boxes;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace facercnn
