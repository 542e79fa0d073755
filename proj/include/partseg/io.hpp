#pragma once

#include <bit>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "partseg/crbm.hpp"
#include "partseg/densecrf.hpp"
#include "partseg/types.hpp"

namespace partseg {

namespace detail {

[[noreturn]] inline void io_fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_fail(path, "cannot open for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) io_fail(path, "read failure");
  return std::move(buf).str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) io_fail(path, "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) io_fail(path, "write failure");
}

// Cursor over an in-memory file; all multi-byte reads are explicit
// little-endian so the formats are identical on any host.
struct ByteReader {
  const std::string& bytes;
  const std::string& path;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) io_fail(path, "truncated payload");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b)
      v = (v << 8) | static_cast<std::uint8_t>(bytes[pos + b]);
    pos += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  }
  void expect_magic(const char* magic) {
    need(4);
    if (bytes.compare(pos, 4, magic) != 0)
      io_fail(path, std::string("bad magic (expected ") + magic + ")");
    pos += 4;
  }
  void expect_end() const {
    if (pos != bytes.size()) io_fail(path, "trailing bytes after payload");
  }
};

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_f32(std::string& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline std::uint32_t checked_u32_dim(int v, const std::string& path) {
  if (v < 1) io_fail(path, "invalid dimensions");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

// Shortest decimal string that parses back to exactly the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view text, const std::string& context) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last)
    throw std::runtime_error(context + ": malformed number '" + std::string(text) + "'");
  return v;
}

inline std::int64_t parse_int(std::string_view text, const std::string& context) {
  std::int64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw std::runtime_error(context + ": malformed integer '" + std::string(text) + "'");
  return v;
}

inline std::uint64_t parse_u64(std::string_view text, const std::string& context) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw std::runtime_error(context + ": malformed unsigned integer '" + std::string(text) + "'");
  return v;
}

// ---- score maps (SPSM) ------------------------------------------------------

inline void write_score_map(const std::string& path, const ScoreMap& m) {
  detail::require(m.all_finite(), "write_score_map: non-finite value");
  std::string out;
  out.reserve(16 + m.data.size() * 4);
  out += "SPSM";
  detail::put_u32(out, detail::checked_u32_dim(m.height, path));
  detail::put_u32(out, detail::checked_u32_dim(m.width, path));
  detail::put_u32(out, detail::checked_u32_dim(m.num_labels, path));
  for (double v : m.data) detail::put_f32(out, v);
  detail::write_file_bytes(path, out);
}

inline ScoreMap read_score_map(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  detail::ByteReader r{bytes, path};
  r.expect_magic("SPSM");
  const std::uint32_t h = r.u32(), w = r.u32(), k = r.u32();
  if (h < 1 || w < 1 || k < 2 || h > (1u << 20) || w > (1u << 20) ||
      static_cast<std::uint64_t>(h) * w * k > (1ull << 31))
    detail::io_fail(path, "invalid dimensions");
  ScoreMap m(static_cast<int>(h), static_cast<int>(w), static_cast<int>(k));
  for (double& v : m.data) {
    v = r.f32();
    if (!std::isfinite(v)) detail::io_fail(path, "non-finite value");
  }
  r.expect_end();
  return m;
}

// ---- label maps (PGM, maxval = K-1) -----------------------------------------

namespace detail {

// Reads one whitespace-delimited netpbm header token, skipping comments.
inline std::string pnm_token(const std::string& bytes, std::size_t& pos,
                             const std::string& path) {
  while (pos < bytes.size()) {
    const char c = bytes[pos];
    if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  if (start == pos) io_fail(path, "truncated payload");
  return bytes.substr(start, pos - start);
}

inline long pnm_number(const std::string& bytes, std::size_t& pos, const std::string& path) {
  const std::string tok = pnm_token(bytes, pos, path);
  long v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    io_fail(path, "malformed header number '" + tok + "'");
  return v;
}

}  // namespace detail

inline void write_label_map(const std::string& path, const LabelMap& m) {
  m.validate();
  detail::require(m.num_labels <= 256, "write_label_map: more than 256 labels");
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) +
                    "\n" + std::to_string(m.num_labels - 1) + "\n";
  out.append(reinterpret_cast<const char*>(m.data.data()), m.data.size());
  detail::write_file_bytes(path, out);
}

inline LabelMap read_label_map(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    detail::io_fail(path, "bad magic (expected P5)");
  pos = 2;
  const long w = detail::pnm_number(bytes, pos, path);
  const long h = detail::pnm_number(bytes, pos, path);
  const long maxval = detail::pnm_number(bytes, pos, path);
  if (w < 1 || h < 1 || w > (1 << 20) || h > (1 << 20))
    detail::io_fail(path, "invalid dimensions");
  if (maxval < 1 || maxval > 255) detail::io_fail(path, "unsupported maxval");
  if (pos >= bytes.size()) detail::io_fail(path, "truncated payload");
  ++pos;  // single whitespace byte separates header from raster
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (bytes.size() - pos < n) detail::io_fail(path, "truncated payload");
  if (bytes.size() - pos > n) detail::io_fail(path, "trailing bytes after payload");
  LabelMap m(static_cast<int>(h), static_cast<int>(w), static_cast<int>(maxval) + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t v = static_cast<std::uint8_t>(bytes[pos + i]);
    if (v > maxval) detail::io_fail(path, "label out of range");
    m.data[i] = v;
  }
  return m;
}

// ---- images (PPM) -----------------------------------------------------------

inline void write_image(const std::string& path, const Image& img) {
  detail::require(img.height >= 1 && img.width >= 1 &&
                      img.data.size() == static_cast<std::size_t>(img.height) * img.width * 3,
                  "write_image: inconsistent dimensions");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  detail::write_file_bytes(path, out);
}

inline Image read_image(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    detail::io_fail(path, "bad magic (expected P6)");
  pos = 2;
  const long w = detail::pnm_number(bytes, pos, path);
  const long h = detail::pnm_number(bytes, pos, path);
  const long maxval = detail::pnm_number(bytes, pos, path);
  if (w < 1 || h < 1 || w > (1 << 20) || h > (1 << 20))
    detail::io_fail(path, "invalid dimensions");
  if (maxval != 255) detail::io_fail(path, "unsupported maxval");
  if (pos >= bytes.size()) detail::io_fail(path, "truncated payload");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - pos < n) detail::io_fail(path, "truncated payload");
  if (bytes.size() - pos > n) detail::io_fail(path, "trailing bytes after payload");
  Image img;
  img.height = static_cast<int>(h);
  img.width = static_cast<int>(w);
  img.data.resize(n);
  std::memcpy(img.data.data(), bytes.data() + pos, n);
  return img;
}

// ---- detection boxes (text) -------------------------------------------------

inline void write_boxes(const std::string& path, const std::vector<DetectionBox>& boxes) {
  std::string out;
  for (const DetectionBox& b : boxes) {
    b.validate();
    out += std::to_string(b.x0) + " " + std::to_string(b.y0) + " " +
           std::to_string(b.x1) + " " + std::to_string(b.y1) + " " +
           format_double(b.confidence) + " " + std::to_string(b.label) + "\n";
  }
  detail::write_file_bytes(path, out);
}

inline std::vector<DetectionBox> read_boxes(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  std::vector<DetectionBox> boxes;
  std::istringstream in(bytes);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    DetectionBox b;
    std::string conf;
    if (!(ls >> b.x0 >> b.y0 >> b.x1 >> b.y1 >> conf >> b.label))
      detail::io_fail(path, "malformed box on line " + std::to_string(lineno));
    std::string rest;
    if (ls >> rest)
      detail::io_fail(path, "trailing fields on line " + std::to_string(lineno));
    b.confidence = parse_double(conf, path + ":" + std::to_string(lineno));
    b.validate();
    boxes.push_back(b);
  }
  return boxes;
}

// ---- CRBM parameters (binary) -----------------------------------------------

inline void write_crbm_params(const std::string& path, const CrbmParams& p) {
  p.validate();
  std::string out;
  out += "CRBM";
  detail::put_u32(out, detail::checked_u32_dim(p.grid_h, path));
  detail::put_u32(out, detail::checked_u32_dim(p.grid_w, path));
  detail::put_u32(out, detail::checked_u32_dim(p.num_labels, path));
  detail::put_u32(out, static_cast<std::uint32_t>(p.num_hidden));
  detail::put_u32(out, p.has_hidden_bias ? 1u : 0u);
  for (double v : p.calibration) detail::put_f32(out, v);
  for (double v : p.interactions) detail::put_f32(out, v);
  for (double v : p.location_bias) detail::put_f32(out, v);
  if (p.has_hidden_bias)
    for (double v : p.hidden_bias) detail::put_f32(out, v);
  detail::write_file_bytes(path, out);
}

inline CrbmParams read_crbm_params(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  detail::ByteReader r{bytes, path};
  r.expect_magic("CRBM");
  const std::uint32_t gh = r.u32(), gw = r.u32(), k = r.u32(), j = r.u32(), flags = r.u32();
  if (gh < 1 || gw < 1 || k < 2 || gh > 4096 || gw > 4096 || k > 256 || j > (1u << 16))
    detail::io_fail(path, "invalid dimensions");
  if (flags > 1) detail::io_fail(path, "unknown flags");
  CrbmParams p = make_crbm_params(static_cast<int>(gh), static_cast<int>(gw),
                                  static_cast<int>(k), static_cast<int>(j),
                                  (flags & 1) != 0);
  for (double& v : p.calibration) v = r.f32();
  for (double& v : p.interactions) v = r.f32();
  for (double& v : p.location_bias) v = r.f32();
  if (p.has_hidden_bias)
    for (double& v : p.hidden_bias) v = r.f32();
  r.expect_end();
  p.validate();
  return p;
}

// ---- flat key = value configuration text ------------------------------------

// `key = value` lines; '#' starts a comment; blank lines ignored.
class KeyValues {
 public:
  static KeyValues parse_text(const std::string& text, const std::string& source) {
    KeyValues kv;
    kv.source_ = source;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(source + ": malformed line " + std::to_string(lineno) +
                                 " (expected key = value)");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error(source + ": empty key on line " + std::to_string(lineno));
      if (!kv.values_.emplace(key, value).second)
        throw std::runtime_error(source + ": duplicate key '" + key + "'");
    }
    return kv;
  }

  static KeyValues parse_file(const std::string& path) {
    return parse_text(detail::read_file_bytes(path), path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end())
      throw std::runtime_error(source_ + ": missing key '" + key + "'");
    return it->second;
  }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key) const {
    return parse_double(get_string(key), source_ + " key '" + key + "'");
  }
  double get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  std::int64_t get_int(const std::string& key) const {
    return parse_int(get_string(key), source_ + " key '" + key + "'");
  }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
  }

  std::uint64_t get_u64(const std::string& key) const {
    return parse_u64(get_string(key), source_ + " key '" + key + "'");
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_u64(key) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get_string(key);
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw std::runtime_error(source_ + " key '" + key + "': expected a boolean, got '" + v + "'");
  }

  void require_known(const std::set<std::string>& known) const {
    for (const auto& [key, value] : values_)
      if (!known.count(key))
        throw std::runtime_error(source_ + ": unknown key '" + key + "'");
  }

  const std::string& source() const { return source_; }

 private:
  static std::string trim(const std::string& s) {
    const std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::string source_;
  std::map<std::string, std::string> values_;
};

// ---- dense CRF parameters (key = value text) --------------------------------

inline void write_crf_params(const std::string& path, const DenseCrfParams& p) {
  p.validate();
  std::string out;
  out += "w_app = " + format_double(p.w_app) + "\n";
  out += "w_smooth = " + format_double(p.w_smooth) + "\n";
  out += "theta_alpha = " + format_double(p.theta_alpha) + "\n";
  out += "theta_beta = " + format_double(p.theta_beta) + "\n";
  out += "theta_gamma = " + format_double(p.theta_gamma) + "\n";
  out += "iterations = " + std::to_string(p.iterations) + "\n";
  out += std::string("update_mode = ") +
         (p.update_mode == CrfUpdateMode::parallel ? "parallel" : "sequential") + "\n";
  out += "damping = " + format_double(p.damping) + "\n";
  detail::write_file_bytes(path, out);
}

inline DenseCrfParams crf_params_from_kv(const KeyValues& kv) {
  kv.require_known({"w_app", "w_smooth", "theta_alpha", "theta_beta", "theta_gamma",
                    "iterations", "update_mode", "damping"});
  DenseCrfParams p;
  p.w_app = kv.get_double("w_app", p.w_app);
  p.w_smooth = kv.get_double("w_smooth", p.w_smooth);
  p.theta_alpha = kv.get_double("theta_alpha", p.theta_alpha);
  p.theta_beta = kv.get_double("theta_beta", p.theta_beta);
  p.theta_gamma = kv.get_double("theta_gamma", p.theta_gamma);
  p.iterations = static_cast<int>(kv.get_int("iterations", p.iterations));
  const std::string mode = kv.get_string("update_mode", "parallel");
  if (mode == "parallel") {
    p.update_mode = CrfUpdateMode::parallel;
  } else if (mode == "sequential") {
    p.update_mode = CrfUpdateMode::sequential;
  } else {
    throw std::runtime_error(kv.source() +
                             " key 'update_mode': expected parallel or sequential, got '" +
                             mode + "'");
  }
  p.damping = kv.get_double("damping", p.damping);
  p.validate();
  return p;
}

inline DenseCrfParams read_crf_params(const std::string& path) {
  return crf_params_from_kv(KeyValues::parse_file(path));
}

}  // namespace partseg
