#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pid/scene.hpp"
#include "pid/serialize.hpp"
#include "pid/tensor.hpp"

// On-disk dataset layout: a directory holding one tensor blob per image
// channel group plus a tab-separated manifest. Per pair `name`:
//   <name>_ir.tsr      infrared [1,H,W]
//   <name>_vis.tsr     visible [3,H,W]
//   <name>_oracle.ckpt component maps, present only for synthetic pairs
// Manifest lines: index <TAB> name <TAB> min <TAB> max <TAB> seed.
// PGM P5 16-bit export (big-endian samples) is provided for eyeballing
// images; a ".range" sidecar records the affine map back to raw values.

namespace pid::data {

inline std::string pair_name(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pair_%05lld", static_cast<long long>(index));
  return buf;
}

template <typename S>
void save_dataset(const std::string& dir, const std::vector<ScenePair<S>>& pairs) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw std::runtime_error("dataset: cannot write manifest in " + dir);
  char num[64];
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const std::string name = pair_name(static_cast<std::int64_t>(i));
    save_tsr1((fs::path(dir) / (name + "_ir.tsr")).string(), p.infrared);
    save_tsr1((fs::path(dir) / (name + "_vis.tsr")).string(), p.visible);
    if (p.has_oracle) {
      NamedTensors<S> entries;
      entries.emplace_back("oracle/m", Tensor<S>::scalar(static_cast<S>(p.oracle.m)));
      entries.emplace_back("oracle/e", p.oracle.e);
      entries.emplace_back("oracle/t", p.oracle.t);
      entries.emplace_back("oracle/v", p.oracle.v);
      entries.emplace_back("oracle/phi", p.oracle.phi);
      save_checkpoint((fs::path(dir) / (name + "_oracle.ckpt")).string(), entries);
    }
    manifest << i << '\t' << name << '\t';
    std::snprintf(num, sizeof(num), "%.17g\t%.17g", p.norm.lo, p.norm.hi);
    manifest << num << '\t' << p.seed << '\n';
  }
  if (!manifest) throw std::runtime_error("dataset: manifest write failed in " + dir);
}

template <typename S>
std::vector<ScenePair<S>> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw std::runtime_error("dataset: cannot open manifest in " + dir);
  std::vector<ScenePair<S>> out;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string index_s, name, lo_s, hi_s, seed_s;
    if (!std::getline(fields, index_s, '\t') || !std::getline(fields, name, '\t') ||
        !std::getline(fields, lo_s, '\t') || !std::getline(fields, hi_s, '\t') ||
        !std::getline(fields, seed_s)) {
      throw std::runtime_error("dataset: malformed manifest line " + std::to_string(lineno));
    }
    ScenePair<S> p;
    try {
      p.norm.lo = std::stod(lo_s);
      p.norm.hi = std::stod(hi_s);
      p.seed = std::stoull(seed_s);
    } catch (const std::exception&) {
      throw std::runtime_error("dataset: bad numeric field on manifest line " +
                               std::to_string(lineno));
    }
    p.infrared = load_tsr1<S>((fs::path(dir) / (name + "_ir.tsr")).string());
    p.visible = load_tsr1<S>((fs::path(dir) / (name + "_vis.tsr")).string());
    const auto oracle_path = fs::path(dir) / (name + "_oracle.ckpt");
    if (fs::exists(oracle_path)) {
      auto entries = load_checkpoint<S>(oracle_path.string());
      p.has_oracle = true;
      p.oracle.kind = tev::HeadKind::Mixing;
      p.oracle.m = static_cast<int>(checkpoint_get(entries, "oracle/m").item());
      p.oracle.e = checkpoint_get(entries, "oracle/e");
      p.oracle.t = checkpoint_get(entries, "oracle/t");
      p.oracle.v = checkpoint_get(entries, "oracle/v");
      p.oracle.phi = checkpoint_get(entries, "oracle/phi");
    }
    out.push_back(std::move(p));
  }
  return out;
}

// 16-bit PGM (P5, big-endian samples) mapping [lo, hi] to [0, 65535]; values
// outside the range are clamped. No sidecar — callers that need the affine
// map back to raw values record it themselves or use save_pgm16.
template <typename S>
void save_pgm16_raw(const std::string& path, const Tensor<S>& img, double lo, double hi) {
  if (!(hi > lo)) throw std::invalid_argument("pgm: need hi > lo");
  std::int64_t h = 0, w = 0;
  if (img.rank() == 2) {
    h = img.dim(0);
    w = img.dim(1);
  } else if (img.rank() == 3 && img.dim(0) == 1) {
    h = img.dim(1);
    w = img.dim(2);
  } else {
    throw std::invalid_argument("pgm: expected [H,W] or [1,H,W], got " + shape_str(img.shape()));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("pgm: cannot open for write: " + path);
  os << "P5\n" << w << " " << h << "\n65535\n";
  const double inv = 65535.0 / (hi - lo);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 2);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double v = (static_cast<double>(img.data()[static_cast<std::size_t>(y * w + x)]) - lo) * inv;
      v = std::min(65535.0, std::max(0.0, v));
      const auto q = static_cast<std::uint16_t>(std::lround(v));
      row[static_cast<std::size_t>(2 * x)] = static_cast<unsigned char>(q >> 8);
      row[static_cast<std::size_t>(2 * x + 1)] = static_cast<unsigned char>(q & 0xff);
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw std::runtime_error("pgm: write failed: " + path);
}

// As save_pgm16_raw, plus a "<path>.range" sidecar recording lo and hi.
template <typename S>
void save_pgm16(const std::string& path, const Tensor<S>& img, double lo, double hi) {
  save_pgm16_raw(path, img, lo, hi);
  std::ofstream side(path + ".range");
  if (!side) throw std::runtime_error("pgm: cannot write range sidecar for " + path);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g %.17g\n", lo, hi);
  side << buf;
}

namespace detail {

inline std::string next_pgm_token(std::istream& is, std::size_t& offset, const std::string& path) {
  std::string tok;
  int c = is.get();
  while (c != EOF) {
    ++offset;
    if (c == '#') {  // comment runs to end of line
      while (c != EOF && c != '\n') {
        c = is.get();
        if (c != EOF) ++offset;
      }
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  while (c != EOF && !std::isspace(static_cast<unsigned char>(c))) {
    tok.push_back(static_cast<char>(c));
    c = is.get();
    if (c != EOF) ++offset;
  }
  if (tok.empty()) {
    throw std::runtime_error("pgm: truncated header at byte offset " + std::to_string(offset) +
                             " in " + path);
  }
  return tok;
}

}  // namespace detail

// Reads a file written by save_pgm16 and maps samples back through the
// sidecar range; returns a [1,H,W] image.
inline std::pair<Tensor<double>, NormMeta> load_pgm16(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("pgm: cannot open: " + path);
  std::size_t offset = 0;
  if (detail::next_pgm_token(is, offset, path) != "P5") {
    throw std::runtime_error("pgm: bad magic in " + path);
  }
  std::int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(detail::next_pgm_token(is, offset, path));
    h = std::stoll(detail::next_pgm_token(is, offset, path));
    maxval = std::stoll(detail::next_pgm_token(is, offset, path));
  } catch (const std::exception&) {
    throw std::runtime_error("pgm: malformed header in " + path);
  }
  if (w < 1 || h < 1 || maxval != 65535) {
    throw std::runtime_error("pgm: unsupported header (need 16-bit samples) in " + path);
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h) * 2);
  pid::detail::read_exact(is, bytes.data(), bytes.size(), offset, "pgm");
  NormMeta meta;
  {
    std::ifstream side(path + ".range");
    if (!side || !(side >> meta.lo >> meta.hi)) {
      throw std::runtime_error("pgm: missing or malformed range sidecar for " + path);
    }
  }
  std::vector<double> data(static_cast<std::size_t>(w * h));
  const double scale = (meta.hi - meta.lo) / 65535.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::uint16_t q =
        static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
    data[i] = meta.lo + static_cast<double>(q) * scale;
  }
  return {Tensor<double>::from_data({1, h, w}, std::move(data)), meta};
}

}  // namespace pid::data
