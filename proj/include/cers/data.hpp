#pragma once

// Data pipeline: 8-bit grayscale image IO (PGM P5 always; PNG when built
// with CERS_WITH_PNG), bilinear resizing, directory-based dataset loading,
// the synthetic shape dataset, and stratified train/val/test splitting.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#ifdef CERS_WITH_PNG
#include <png.h>
#endif

#include "cers/params.hpp"
#include "cers/tensor.hpp"

namespace cers {

struct LabeledSample {
  Tensor image;  // [1, H, W], values in [0, 1]
  int label = 0;
  std::string source_id;
};

struct Dataset {
  std::vector<LabeledSample> samples;
  std::vector<std::string> class_names;
  std::string provenance;
  Dim skipped = 0;  // unreadable files encountered during loading
};

// ---- PGM (P5) --------------------------------------------------------------

namespace detail {

inline int pgm_token(std::istream& in) {
  // Reads the next integer token, skipping whitespace and '#' comments.
  for (;;) {
    int c = in.peek();
    if (c == EOF) throw IoError("pgm: truncated header");
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  int v = 0;
  if (!(in >> v)) throw IoError("pgm: malformed header integer");
  return v;
}

}  // namespace detail

inline Tensor load_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("pgm: cannot open " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '5') throw IoError("pgm: not a P5 file: " + path);
  const int w = detail::pgm_token(f);
  const int h = detail::pgm_token(f);
  const int maxval = detail::pgm_token(f);
  if (w <= 0 || h <= 0) throw IoError("pgm: bad extents in " + path);
  if (maxval <= 0 || maxval > 255)
    throw IoError("pgm: only 8-bit maxval supported, got " + std::to_string(maxval) +
                  " in " + path);
  f.get();  // single whitespace byte after maxval
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<size_t>(f.gcount()) != raw.size())
    throw IoError("pgm: truncated payload in " + path);
  Tensor t({1, h, w});
  auto d = t.mut();
  const float inv = 1.0f / static_cast<float>(maxval);
  for (size_t i = 0; i < raw.size(); ++i) d[i] = raw[i] * inv;
  return t;
}

inline void save_pgm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 1)
    fail("pgm: expected [1,H,W] grayscale, got " + shape_str(img.shape()));
  const Dim h = img.dim(1), w = img.dim(2);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("pgm: cannot write " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  auto d = img.data();
  std::vector<unsigned char> raw(d.size());
  for (size_t i = 0; i < d.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, d[i]));
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!f) throw IoError("pgm: write failed for " + path);
}

// ---- PNG (optional) ----------------------------------------------------------

#ifdef CERS_WITH_PNG
inline Tensor load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw IoError("png: libpng initialization failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("png: decode error in " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);                 // palettes and low bit depths to 8-bit
  png_set_strip_16(png);               // 16-bit down to 8
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const png_uint_32 ch = png_get_channels(png, info);
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * ch);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + static_cast<size_t>(y) * w * ch;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  // Multichannel sources are mean-collapsed to grayscale.
  Tensor t({1, static_cast<Dim>(h), static_cast<Dim>(w)});
  auto d = t.mut();
  for (size_t i = 0; i < static_cast<size_t>(w) * h; ++i) {
    int acc = 0;
    for (png_uint_32 c = 0; c < ch; ++c) acc += raw[i * ch + c];
    d[i] = static_cast<float>(acc) / (255.0f * static_cast<float>(ch));
  }
  return t;
}
#endif

// ---- resize ------------------------------------------------------------------

inline Tensor bilinear_resize(const Tensor& img, Dim oh, Dim ow) {
  if (img.rank() != 3) fail("resize: expected [C,H,W], got " + shape_str(img.shape()));
  if (oh < 1 || ow < 1) fail("resize: target extents must be positive");
  const Dim c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == oh && w == ow) return img;
  Tensor out({c, oh, ow});
  auto src = img.data();
  auto dst = out.mut();
  const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
  for (Dim ch = 0; ch < c; ++ch)
    for (Dim y = 0; y < oh; ++y) {
      double fy = (y + 0.5) * sy - 0.5;
      fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
      const Dim y0 = static_cast<Dim>(fy);
      const Dim y1 = std::min(y0 + 1, h - 1);
      const double ay = fy - y0;
      for (Dim x = 0; x < ow; ++x) {
        double fx = (x + 0.5) * sx - 0.5;
        fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
        const Dim x0 = static_cast<Dim>(fx);
        const Dim x1 = std::min(x0 + 1, w - 1);
        const double ax = fx - x0;
        auto at = [&](Dim yy, Dim xx) {
          return static_cast<double>(src[(ch * h + yy) * w + xx]);
        };
        dst[(ch * oh + y) * ow + x] = static_cast<float>(
            (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) +
            ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1)));
      }
    }
  return out;
}

// ---- directory loader ----------------------------------------------------------

inline Dataset load_image_dataset(const std::string& root, Dim target_size,
                                  const std::vector<std::string>& class_order = {},
                                  std::ostream* warn = &std::cerr) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset: not a directory: " + root);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("dataset: no class directories under " + root);

  if (!class_order.empty()) {
    std::set<std::string> found(names.begin(), names.end());
    std::set<std::string> wanted(class_order.begin(), class_order.end());
    if (found != wanted)
      fail("dataset: class_order does not match the directories under " + root);
    names = class_order;
  }

  Dataset ds;
  ds.class_names = names;
  ds.provenance = root;
  for (size_t ci = 0; ci < names.size(); ++ci) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / names[ci]))
      if (e.is_regular_file()) files.push_back(e.path().filename().string());
    std::sort(files.begin(), files.end());
    Dim loaded = 0;
    for (const auto& fn : files) {
      const std::string path = (fs::path(root) / names[ci] / fn).string();
      const std::string id = names[ci] + "/" + fn;
      std::string ext = fs::path(fn).extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
      Tensor img;
      try {
        if (ext == ".pgm") {
          img = load_pgm(path);
        }
#ifdef CERS_WITH_PNG
        else if (ext == ".png") {
          img = load_png(path);
        }
#endif
        else {
          throw IoError("unsupported image type: " + path);
        }
      } catch (const IoError& e) {
        if (warn) *warn << "warning: skipping " << id << ": " << e.what() << "\n";
        ++ds.skipped;
        continue;
      }
      ds.samples.push_back(
          {bilinear_resize(img, target_size, target_size), static_cast<int>(ci), id});
      ++loaded;
    }
    if (loaded == 0)
      fail("dataset: class directory '" + names[ci] + "' has no readable images");
  }
  return ds;
}

// ---- synthetic dataset ----------------------------------------------------------

// Four shape classes on a noisy background: centered disk, centered ring,
// off-center disk, and background only. Geometry is sized so class-mean
// images stay separated well beyond the noise floor.
inline Dataset generate_synthetic(Dim per_class, Dim size, std::uint32_t seed) {
  if (size % 32 != 0) fail("synthetic: size must be divisible by 32");
  if (per_class < 1) fail("synthetic: per_class must be positive");
  Dataset ds;
  ds.class_names = {"disk", "ring", "offset_disk", "background"};
  ds.provenance = "synthetic:" + std::to_string(seed);
  const double s = static_cast<double>(size);
  const double cx = (s - 1) / 2.0, cy = (s - 1) / 2.0;
  const double amp = 0.94;

  for (int cls = 0; cls < 4; ++cls) {
    for (Dim i = 0; i < per_class; ++i) {
      // Per-sample generator derived from the dataset seed, so each sample is
      // reproducible independent of generation order.
      Rng rng(seed + 0x9e3779b9u * static_cast<std::uint32_t>(cls * per_class + i + 1));
      Tensor img({1, size, size});
      auto d = img.mut();
      for (auto& v : d)
        v = static_cast<float>(std::min(1.0, std::max(0.0, 0.06 + 0.05 * rng.normal())));

      auto add_disk = [&](double px, double py, double r) {
        for (Dim y = 0; y < size; ++y)
          for (Dim x = 0; x < size; ++x) {
            const double dist = std::hypot(x - px, y - py);
            const double m = std::min(1.0, std::max(0.0, r - dist + 0.5));
            if (m > 0) {
              auto& v = d[static_cast<size_t>(y * size + x)];
              v = static_cast<float>(std::min(1.0, v + amp * m));
            }
          }
      };
      auto add_ring = [&](double px, double py, double rin, double rout) {
        for (Dim y = 0; y < size; ++y)
          for (Dim x = 0; x < size; ++x) {
            const double dist = std::hypot(x - px, y - py);
            const double m = std::min({1.0, dist - rin + 0.5, rout - dist + 0.5});
            if (m > 0) {
              auto& v = d[static_cast<size_t>(y * size + x)];
              v = static_cast<float>(std::min(1.0, v + amp * std::max(0.0, m)));
            }
          }
      };
      auto jit = [&] { return 1.0 + rng.uniform(-0.04, 0.04); };

      switch (cls) {
        case 0:
          add_disk(cx + rng.uniform(-0.04, 0.04) * 0.36 * s,
                   cy + rng.uniform(-0.04, 0.04) * 0.36 * s, 0.36 * s * jit());
          break;
        case 1:
          add_ring(cx + rng.uniform(-0.04, 0.04) * 0.46 * s,
                   cy + rng.uniform(-0.04, 0.04) * 0.46 * s, 0.28 * s * jit(),
                   0.46 * s * jit());
          break;
        case 2:
          add_disk(cx + 0.18 * s * jit(), cy + 0.18 * s * jit(), 0.34 * s * jit());
          break;
        case 3:
          break;  // background noise only
      }
      char idbuf[64];
      std::snprintf(idbuf, sizeof(idbuf), "synthetic/%s/%04lld",
                    ds.class_names[static_cast<size_t>(cls)].c_str(),
                    static_cast<long long>(i));
      ds.samples.push_back({img, cls, idbuf});
    }
  }
  return ds;
}

// ---- split ----------------------------------------------------------------------

struct SplitPlan {
  double test_fraction = 0.30;
  double val_fraction = 0.20;  // of the post-test remainder
  std::uint32_t seed = 0;
};

struct SplitResult {
  Dataset train, val, test;
};

inline SplitResult split_dataset(const Dataset& ds, const SplitPlan& plan) {
  if (plan.test_fraction <= 0 || plan.test_fraction >= 1)
    fail("split: test_fraction must be in (0,1)");
  if (plan.val_fraction < 0 || plan.val_fraction >= 1)
    fail("split: val_fraction must be in [0,1)");
  const Dim k = static_cast<Dim>(ds.class_names.size());
  std::vector<std::vector<size_t>> by_class(static_cast<size_t>(k));
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const int lbl = ds.samples[i].label;
    if (lbl < 0 || lbl >= k) fail("split: label outside class list");
    by_class[static_cast<size_t>(lbl)].push_back(i);
  }
  SplitResult out;
  for (Dataset* part : {&out.train, &out.val, &out.test}) {
    part->class_names = ds.class_names;
    part->provenance = ds.provenance;
  }
  Rng rng(plan.seed);
  for (Dim c = 0; c < k; ++c) {
    auto& idx = by_class[static_cast<size_t>(c)];
    if (idx.size() < 3)
      fail("split: class '" + ds.class_names[static_cast<size_t>(c)] +
           "' has fewer than 3 samples");
    rng.shuffle(idx);
    const size_t n = idx.size();
    const size_t n_test = static_cast<size_t>(std::floor(plan.test_fraction * n));
    const size_t n_rest = n - n_test;
    const size_t n_val = static_cast<size_t>(std::floor(plan.val_fraction * n_rest));
    for (size_t i = 0; i < n; ++i) {
      const LabeledSample& smp = ds.samples[idx[i]];
      if (i < n_test) out.test.samples.push_back(smp);
      else if (i < n_test + n_val) out.val.samples.push_back(smp);
      else out.train.samples.push_back(smp);
    }
  }
  return out;
}

inline void write_split_manifest(const SplitResult& split, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("manifest: cannot write " + path);
  for (const auto& [part, name] :
       {std::pair{&split.train, "train"}, {&split.val, "val"}, {&split.test, "test"}})
    for (const auto& s : part->samples) f << s.source_id << "," << name << "\n";
}

}  // namespace cers
