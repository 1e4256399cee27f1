#pragma once

#include <png.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/data.hpp"
#include "ugeforge/error.hpp"

namespace ugeforge {

// ---------------------------------------------------------------------------
// 8-bit PNG codec (gray for 1 channel, RGB for 3)

struct Image8 {
  int height = 0, width = 0, channels = 0;
  std::vector<unsigned char> pixels;  // H x W x C
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  UGE_REQUIRE(img.channels == 1 || img.channels == 3,
              "png: unsupported channel count " + std::to_string(img.channels));
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  UGE_REQUIRE(f != nullptr, "cannot write '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png encode failed for '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    auto* row = const_cast<unsigned char*>(img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels);
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image8 read_png(const std::filesystem::path& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  UGE_REQUIRE(f != nullptr, "cannot read image '" + path.string() + "'");
  unsigned char sig[8];
  UGE_REQUIRE(std::fread(sig, 1, 8, f.get()) == 8 && png_sig_cmp(sig, 0, 8) == 0,
              "corrupt image '" + path.string() + "': not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  Image8 img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("corrupt image '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth != 8 || (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_RGB)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("image '" + path.string() + "' is not 8-bit gray or RGB");
  }
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = color == PNG_COLOR_TYPE_GRAY ? 1 : 3;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  for (int y = 0; y < img.height; ++y)
    png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// ---------------------------------------------------------------------------
// Published protected-dataset layout:
//   <dir>/images/<idx>.png, <dir>/labels.csv (index,label), <dir>/manifest.json

struct PublishInfo {
  double rho = 0.0;
  nlohmann::json seeds = nlohmann::json::object();
  std::string config_hash;
};

inline std::string image_file_name(int index) { return std::to_string(index) + ".png"; }

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  UGE_REQUIRE(out.good(), "cannot write '" + path.string() + "'");
  out << text;
  UGE_REQUIRE(out.good(), "write failed for '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  UGE_REQUIRE(in.good(), "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes d_u as 8-bit PNGs (round-to-nearest of 255*pixel). Refuses when any
// sample of d_u leaves the l-inf ball around its reference sample.
inline nlohmann::json export_uge_dataset(const Dataset& d_u, const Dataset& x_reference,
                                         const std::filesystem::path& dir, const PublishInfo& info) {
  validate(d_u);
  UGE_REQUIRE(d_u.size() == x_reference.size() && d_u.sample_size() == x_reference.sample_size(),
              "export: protected and reference datasets are not aligned");
  const std::size_t ss = d_u.sample_size();
  for (int i = 0; i < d_u.size(); ++i) {
    UGE_REQUIRE(d_u.labels[i] == x_reference.labels[i], "export: label mismatch at record " + std::to_string(i));
    for (std::size_t j = 0; j < ss; ++j) {
      const double o = d_u.images[i * ss + j], x = x_reference.images[i * ss + j];
      UGE_REQUIRE(within_budget(o, x, info.rho),
                  "export: record " + std::to_string(i) + " violates the budget rho=" + std::to_string(info.rho) +
                      " (|dev|=" + std::to_string(std::abs(o - x)) + ")");
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  UGE_REQUIRE(!ec, "cannot create export directory '" + dir.string() + "': " + ec.message());

  Image8 img{d_u.height, d_u.width, d_u.channels, std::vector<unsigned char>(ss)};
  std::string csv = "index,label\n";
  for (int i = 0; i < d_u.size(); ++i) {
    for (std::size_t j = 0; j < ss; ++j)
      img.pixels[j] = static_cast<unsigned char>(std::lround(255.0 * d_u.images[i * ss + j]));
    write_png(dir / "images" / image_file_name(i), img);
    csv += std::to_string(i) + "," + std::to_string(d_u.labels[i]) + "\n";
  }
  write_text_file(dir / "labels.csv", csv);

  nlohmann::json manifest = {
      {"format", "ugeforge-uge-v1"},
      {"count", d_u.size()},
      {"height", d_u.height},
      {"width", d_u.width},
      {"channels", d_u.channels},
      {"class_names", d_u.class_names},
      {"rho", info.rho},
      {"seeds", info.seeds},
      {"config_hash", info.config_hash},
      {"quantization", "round(255*p)"},
      {"source_id", d_u.source_id},
  };
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

inline std::vector<std::pair<int, int>> read_labels_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  UGE_REQUIRE(std::getline(in, line) && line == "index,label",
              "'" + path.string() + "': missing header 'index,label'");
  std::vector<std::pair<int, int>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    int idx = 0, label = 0;
    const bool ok = comma != std::string::npos &&
                    std::from_chars(line.data(), line.data() + comma, idx).ec == std::errc() &&
                    std::from_chars(line.data() + comma + 1, line.data() + line.size(), label).ec == std::errc();
    UGE_REQUIRE(ok, "'" + path.string() + "' line " + std::to_string(lineno) + ": malformed row '" + line + "'");
    rows.emplace_back(idx, label);
  }
  return rows;
}

inline Dataset import_uge_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  UGE_REQUIRE(std::filesystem::exists(manifest_path), "import: missing manifest '" + manifest_path.string() + "'");
  const auto manifest = nlohmann::json::parse(read_text_file(manifest_path));
  const auto rows = read_labels_csv(dir / "labels.csv");
  const int count = manifest.at("count").get<int>();
  UGE_REQUIRE(static_cast<int>(rows.size()) == count,
              "import: labels.csv has " + std::to_string(rows.size()) + " rows but manifest count is " +
                  std::to_string(count));
  Dataset d;
  d.height = manifest.at("height").get<int>();
  d.width = manifest.at("width").get<int>();
  d.channels = manifest.at("channels").get<int>();
  d.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  d.source_id = manifest.value("source_id", std::string("uge:") + dir.string());
  d.split_tag = "uge";
  const std::size_t ss = d.sample_size();
  d.images.reserve(ss * count);
  for (const auto& [idx, label] : rows) {
    const Image8 img = read_png(dir / "images" / image_file_name(idx));
    UGE_REQUIRE(img.height == d.height && img.width == d.width && img.channels == d.channels,
                "import: image " + std::to_string(idx) + " has geometry " + std::to_string(img.height) + "x" +
                    std::to_string(img.width) + "x" + std::to_string(img.channels) + ", manifest says " +
                    std::to_string(d.height) + "x" + std::to_string(d.width) + "x" + std::to_string(d.channels));
    for (unsigned char p : img.pixels) d.images.push_back(p / 255.0);
    d.labels.push_back(label);
    d.source_index.push_back(idx);
  }
  validate(d);
  return d;
}

// ---------------------------------------------------------------------------
// Source resolution

// Parses "key=value,key=value" option lists used by synthetic sources.
inline std::map<std::string, std::string> parse_options(const std::string& s) {
  std::map<std::string, std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    UGE_REQUIRE(eq != std::string::npos, "malformed option '" + item + "'");
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

inline BlobsSpec parse_blobs_spec(const std::string& options) {
  BlobsSpec s;
  for (const auto& [k, v] : parse_options(options)) {
    if (k == "K") s.classes = std::stoi(v);
    else if (k == "N") s.count = std::stoi(v);
    else if (k == "H") s.height = s.width = std::stoi(v);
    else if (k == "W") s.width = std::stoi(v);
    else if (k == "C") s.channels = std::stoi(v);
    else if (k == "amp") s.amplitude = std::stod(v);
    else if (k == "noise") s.noise = std::stod(v);
    else if (k == "jitter") s.jitter = std::stod(v);
    else if (k == "sigma") s.blob_sigma = std::stod(v);
    else if (k == "seed") s.seed = std::stoull(v);
    else throw Error("blobs: unknown option '" + k + "'");
  }
  return s;
}

// Recognised sources:
//   synthetic:blobs[:K=4,N=2000,H=16,C=1,seed=7]   (also plain "blobs")
//   cifar10:<dir>[@train|@test]  cifar100:<dir>[@train|@test]
//   <dir> containing manifest.json (a published protected dataset)
//   <dir> containing data_batch_1.bin (CIFAR-10 train)
inline Dataset load_dataset(const std::string& source, long limit = -1) {
  auto starts = [&](std::string_view p) { return source.rfind(p, 0) == 0; };
  if (source == "blobs" || starts("blobs:") || starts("synthetic:blobs")) {
    const auto colon = source.find(':', starts("synthetic:") ? 10 : 0);
    const std::string opts = colon == std::string::npos ? "" : source.substr(colon + 1);
    Dataset d = make_blobs(parse_blobs_spec(opts == "blobs" ? "" : opts));
    validate(d);
    return d;
  }
  for (const bool c100 : {false, true}) {
    const std::string prefix = c100 ? "cifar100:" : "cifar10:";
    if (starts(prefix)) {
      std::string rest = source.substr(prefix.size());
      bool train = true;
      if (const auto at = rest.rfind('@'); at != std::string::npos) {
        const std::string part = rest.substr(at + 1);
        UGE_REQUIRE(part == "train" || part == "test", "unknown CIFAR split '" + part + "'");
        train = part == "train";
        rest = rest.substr(0, at);
      }
      return load_cifar(rest, c100, train, limit);
    }
  }
  const std::filesystem::path p(source);
  UGE_REQUIRE(std::filesystem::exists(p), "unreadable dataset source '" + source + "'");
  if (std::filesystem::exists(p / "manifest.json")) return import_uge_dataset(p);
  if (std::filesystem::exists(p / "data_batch_1.bin")) return load_cifar(p, false, true, limit);
  throw Error("unrecognised dataset source '" + source + "'");
}

}  // namespace ugeforge
