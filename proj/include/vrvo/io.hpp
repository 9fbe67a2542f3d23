#pragma once

// Dataset file formats: binary PGM (P5), PFM (Pf, little-endian, bottom-up),
// KITTI odometry pose files and the one-line calib.txt.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vrvo/geometry.hpp"

namespace vrvo::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    int c = in.peek();
    if (c == '#') {
      std::string dummy;
      std::getline(in, dummy);
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  in >> tok;
  return tok;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

}  // namespace detail

/// Writes intensities in [0, 1] as 8-bit P5 (rounded, clamped).
inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  auto out = detail::open_out(path);
  out << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  std::vector<unsigned char> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline Image read_pgm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  if (detail::next_token(in) != "P5") throw FormatError(path.string() + ": not a binary PGM");
  const int w = std::stoi(detail::next_token(in));
  const int h = std::stoi(detail::next_token(in));
  const int maxval = std::stoi(detail::next_token(in));
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError(path.string() + ": unsupported PGM header");
  in.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw FormatError(path.string() + ": truncated PGM");
  Image img(w, h);
  for (std::size_t i = 0; i < buf.size(); ++i) img[i] = buf[i] / 255.0;
  return img;
}

/// PFM "Pf" with scale -1 (little-endian), rows stored bottom-up.
/// Invalid entries are written as 0.
inline void write_pfm(const std::filesystem::path& path, const ScalarMap& map) {
  auto out = detail::open_out(path);
  out << "Pf\n" << map.width() << " " << map.height() << "\n-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(map.width()));
  for (int y = map.height() - 1; y >= 0; --y) {
    for (int x = 0; x < map.width(); ++x)
      row[x] = map.is_valid(x, y) ? static_cast<float>(map.values(x, y)) : 0.0f;
    for (float f : row) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

/// Reads a PFM map; entries that are non-finite or <= 0 are marked invalid.
inline ScalarMap read_pfm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  if (detail::next_token(in) != "Pf") throw FormatError(path.string() + ": not a grayscale PFM");
  const int w = std::stoi(detail::next_token(in));
  const int h = std::stoi(detail::next_token(in));
  const double scale = std::stod(detail::next_token(in));
  if (w <= 0 || h <= 0) throw FormatError(path.string() + ": bad PFM size");
  in.get();
  const bool little = scale < 0;
  ScalarMap map(w, h);
  for (int y = h - 1; y >= 0; --y) {
    for (int x = 0; x < w; ++x) {
      std::uint32_t bits;
      in.read(reinterpret_cast<char*>(&bits), sizeof bits);
      if (!in) throw FormatError(path.string() + ": truncated PFM");
      if ((std::endian::native == std::endian::little) != little) bits = __builtin_bswap32(bits);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      map.values(x, y) = f;
      map.valid(x, y) = (std::isfinite(f) && f > 0.0f) ? 1 : 0;
    }
  }
  return map;
}

/// KITTI odometry pose file: one row-major 3x4 camera-to-world matrix per line.
/// Values are written with 17 significant digits so reading back is exact.
inline void write_kitti_poses(const std::filesystem::path& path, const std::vector<Pose>& poses) {
  auto out = detail::open_out(path);
  out << std::setprecision(17);
  for (const Pose& p : poses) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out << p.rotation(r, c) << ' ';
      out << p.translation(r) << (r == 2 ? '\n' : ' ');
    }
  }
}

inline std::vector<Pose> read_kitti_poses(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::vector<Pose> poses;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    double v[12];
    for (double& x : v)
      if (!(ss >> x)) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 12 values");
    Pose p;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = v[r * 4 + c];
      p.translation(r) = v[r * 4 + 3];
    }
    poses.push_back(p);
  }
  return poses;
}

/// calib.txt: "fx fy cx cy baseline". Image size comes from the images.
inline void write_calib(const std::filesystem::path& path, const StereoRig& rig) {
  auto out = detail::open_out(path);
  const auto& k = rig.intrinsics;
  out << std::setprecision(17) << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' '
      << rig.baseline << '\n';
}

inline StereoRig read_calib(const std::filesystem::path& path, int width, int height) {
  auto in = detail::open_in(path);
  StereoRig rig;
  auto& k = rig.intrinsics;
  if (!(in >> k.fx >> k.fy >> k.cx >> k.cy >> rig.baseline))
    throw FormatError(path.string() + ": expected 'fx fy cx cy baseline'");
  k.width = width;
  k.height = height;
  rig.validate();
  return rig;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = detail::open_out(path);
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// FNV-1a 64-bit digest of a file's bytes, as 16 hex digits.
inline std::string file_checksum(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

}  // namespace vrvo::io
