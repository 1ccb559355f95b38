#pragma once

#include <png.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "cpmamba/synth.hpp"

namespace cpmamba {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

namespace detail {

struct PngFile {
  std::FILE* f = nullptr;
  PngFile(const fs::path& p, const char* mode) : f(std::fopen(p.c_str(), mode)) {
    if (f == nullptr) throw IoError("cannot open " + p.string());
  }
  ~PngFile() {
    if (f != nullptr) std::fclose(f);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err != nullptr) *err = msg;
  png_longjmp(png, 1);
}

// rows: height rows of width * channels samples (bit_depth 8 or 16, big-endian
// for 16 as libpng expects).
inline void write_png(const fs::path& path, std::size_t height, std::size_t width, int color_type, int bit_depth,
                      const std::vector<std::uint8_t>& bytes) {
  PngFile file(path, "wb");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, nullptr);
  if (png == nullptr) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  const std::size_t row_bytes = bytes.size() / height;
  std::vector<png_bytep> rows(height);
  for (std::size_t r = 0; r < height; ++r) rows[r] = const_cast<png_bytep>(bytes.data() + r * row_bytes);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("writing " + path.string() + ": " + err);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct RawPng {
  std::size_t height = 0, width = 0;
  int color_type = 0, bit_depth = 0;
  std::vector<std::uint8_t> bytes;
};

inline RawPng read_png(const fs::path& path) {
  PngFile file(path, "rb");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IoError(path.string() + " is not a PNG");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, nullptr);
  if (png == nullptr) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  RawPng out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("reading " + path.string() + ": " + err);
  }
  png_init_io(png, file.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.color_type = png_get_color_type(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  out.bytes.resize(row_bytes * out.height);
  rows.resize(out.height);
  for (std::size_t r = 0; r < out.height; ++r) rows[r] = out.bytes.data() + r * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace detail

/// (3, H, W) image in [0, 1] as 8-bit RGB.
inline void write_png_rgb8(const fs::path& path, const Tensor<float>& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw DimensionError("RGB PNG needs (3, H, W), got " + to_string(image.shape()));
  const std::size_t h = image.size(1), w = image.size(2);
  std::vector<std::uint8_t> bytes(h * w * 3);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      bytes[p * 3 + c] =
          static_cast<std::uint8_t>(std::lround(std::clamp(image[c * h * w + p], 0.0f, 1.0f) * 255.0f));
  detail::write_png(path, h, w, PNG_COLOR_TYPE_RGB, 8, bytes);
}

inline Tensor<float> read_png_rgb8(const fs::path& path) {
  auto raw = detail::read_png(path);
  if (raw.color_type != PNG_COLOR_TYPE_RGB || raw.bit_depth != 8) throw IoError(path.string() + ": expected 8-bit RGB");
  const std::size_t h = raw.height, w = raw.width;
  Tensor<float> img({3, h, w});
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * h * w + p] = static_cast<float>(raw.bytes[p * 3 + c]) / 255.0f;
  return img;
}

/// Single-channel 16-bit PNG; values must lie in [0, 65535].
inline void write_png_gray16(const fs::path& path, const Grid<int>& g) {
  std::vector<std::uint8_t> bytes(g.size() * 2);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const int v = g.values[i];
    if (v < 0 || v > 65535) throw IoError("value " + std::to_string(v) + " does not fit a 16-bit PNG");
    bytes[2 * i] = static_cast<std::uint8_t>(v >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
  }
  detail::write_png(path, g.height, g.width, PNG_COLOR_TYPE_GRAY, 16, bytes);
}

inline Grid<int> read_png_gray16(const fs::path& path) {
  auto raw = detail::read_png(path);
  if (raw.color_type != PNG_COLOR_TYPE_GRAY || (raw.bit_depth != 16 && raw.bit_depth != 8)) {
    throw IoError(path.string() + ": expected single-channel 8- or 16-bit PNG");
  }
  Grid<int> g(raw.height, raw.width, 0);
  for (std::size_t i = 0; i < g.size(); ++i)
    g.values[i] = raw.bit_depth == 16 ? (raw.bytes[2 * i] << 8) | raw.bytes[2 * i + 1] : raw.bytes[i];
  return g;
}

/// Rows of space-separated integers, one line per row.
inline void write_text_grid(const fs::path& path, const Grid<int>& g) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) out << (c ? " " : "") << g.at(r, c);
    out << '\n';
  }
}

inline Grid<int> read_text_grid(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  Grid<int> g;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<int> row;
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw IoError(path.string() + ": bad integer '" + tok + "'");
      row.push_back(v);
    }
    if (g.height == 0) g.width = row.size();
    if (row.size() != g.width) throw IoError(path.string() + ": ragged row " + std::to_string(g.height + 1));
    g.values.insert(g.values.end(), row.begin(), row.end());
    ++g.height;
  }
  return g;
}

/// Class mask from a 16-bit PNG or a text grid, chosen by extension.
inline ClassMask read_class_mask(const fs::path& path) {
  return path.extension() == ".png" ? read_png_gray16(path) : read_text_grid(path);
}

// ---------------------------------------------------------------------------
// Tensor blob: one text line "cpmamba-tensor 1 <f32|f64> <rank> <d0> ... \n"
// followed by numel little-endian IEEE values, row-major.

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  static_assert(std::endian::native == std::endian::little, "tensor blobs assume a little-endian host");
  out << "cpmamba-tensor 1 " << dtype_name<T>() << ' ' << t.dim();
  for (auto d : t.shape()) out << ' ' << d;
  out << '\n';
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!out) throw IoError("tensor write failed");
}

template <class T>
Tensor<T> read_tensor(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw IoError("missing tensor header");
  std::istringstream hs(header);
  std::string magic, dtype;
  int version = 0;
  std::size_t rank = 0;
  hs >> magic >> version >> dtype >> rank;
  if (magic != "cpmamba-tensor" || version != 1) throw IoError("bad tensor header '" + header + "'");
  if (dtype != dtype_name<T>()) throw IoError("tensor dtype " + dtype + ", expected " + dtype_name<T>());
  Shape shape(rank);
  for (auto& d : shape)
    if (!(hs >> d)) throw IoError("truncated tensor shape");
  Tensor<T> t(shape);
  in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != t.numel() * sizeof(T)) throw IoError("truncated tensor data");
  return t;
}

// ---------------------------------------------------------------------------
// Dataset directory:
//   manifest.txt            header comment lines, then "sample <index> <seed> <stem>"
//   images/<stem>.png       8-bit RGB
//   instances/<stem>.png    16-bit instance ids
//   instances/<stem>.txt    class table, "<id> <class>" per line
//   classes/<stem>.png      16-bit class ids

inline std::string sample_stem(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return buf;
}

inline void write_class_table(const fs::path& path, const InstanceMask& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t k = 0; k < m.count(); ++k) out << k + 1 << ' ' << m.classes[k] << '\n';
}

inline std::vector<int> read_class_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<int> classes;
  std::size_t id = 0;
  int cls = 0;
  while (in >> id >> cls) {
    if (id != classes.size() + 1) throw IoError(path.string() + ": ids must be listed 1..K in order");
    classes.push_back(cls);
  }
  return classes;
}

inline void write_instance_mask(const fs::path& png_path, const InstanceMask& m) {
  write_png_gray16(png_path, m.ids);
  write_class_table(fs::path(png_path).replace_extension(".txt"), m);
}

inline InstanceMask read_instance_mask(const fs::path& png_path) {
  InstanceMask m;
  m.ids = read_png_gray16(png_path);
  m.classes = read_class_table(fs::path(png_path).replace_extension(".txt"));
  m.validate();
  return m;
}

/// Writes `samples` under `dir`; `header` lines are emitted as comments.
inline void write_dataset(const fs::path& dir, const std::vector<Sample>& samples, const std::vector<std::string>& header) {
  std::error_code ec;
  for (const char* sub : {"images", "instances", "classes"}) {
    fs::create_directories(dir / sub, ec);
    if (ec) throw IoError("cannot create " + (dir / sub).string() + ": " + ec.message());
  }
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.txt").string());
  for (const auto& line : header) manifest << "# " << line << '\n';
  for (const auto& s : samples) {
    const std::string stem = sample_stem(s.index);
    write_png_rgb8(dir / "images" / (stem + ".png"), s.image);
    write_instance_mask(dir / "instances" / (stem + ".png"), s.instances);
    write_png_gray16(dir / "classes" / (stem + ".png"), s.classes);
    manifest << "sample " << s.index << ' ' << s.seed << ' ' << stem << '\n';
  }
  if (!manifest) throw IoError("manifest write failed");
}

/// Files referenced by a dataset manifest, relative to the dataset root.
inline std::vector<std::string> dataset_files(const std::string& stem) {
  return {"images/" + stem + ".png", "instances/" + stem + ".png", "instances/" + stem + ".txt",
          "classes/" + stem + ".png"};
}

inline std::vector<Sample> read_dataset(const fs::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("no manifest.txt in " + dir.string());
  std::vector<Sample> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag, stem;
    Sample s;
    if (!(ls >> tag >> s.index >> s.seed >> stem) || tag != "sample") throw IoError("bad manifest line '" + line + "'");
    s.image = read_png_rgb8(dir / "images" / (stem + ".png"));
    s.instances = read_instance_mask(dir / "instances" / (stem + ".png"));
    s.classes = read_png_gray16(dir / "classes" / (stem + ".png"));
    if (!s.instances.ids.same_dims(s.classes) || s.image.size(1) != s.classes.height ||
        s.image.size(2) != s.classes.width) {
      throw IoError("sample " + stem + ": image and masks disagree in size");
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("dataset " + dir.string() + " lists no samples");
  return out;
}

/// Header comment lines of a manifest.
inline std::vector<std::string> read_manifest_header(const fs::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("no manifest.txt in " + dir.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(manifest, line))
    if (line.rfind("# ", 0) == 0) out.push_back(line.substr(2));
  return out;
}

}  // namespace cpmamba
