#include "attnlab/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace attnlab {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
  ConfigMap map;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    }
    if (map.count(key)) {
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" +
                        key + "'");
    }
    map[key] = value;
  }
  return map;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

void apply_override(ConfigMap& map, const std::string& kv) {
  const std::size_t eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got '" + kv + "'");
  }
  map[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
}

std::string ConfigReader::get_string(const std::string& key, const std::string& fallback) {
  consumed_.insert(key);
  const auto it = map_.find(key);
  const std::string value = it == map_.end() ? fallback : it->second;
  resolved_[key] = value;
  return value;
}

double ConfigReader::get_double(const std::string& key, double fallback) {
  consumed_.insert(key);
  double value = fallback;
  const auto it = map_.find(key);
  if (it != map_.end()) {
    try {
      std::size_t pos = 0;
      value = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': cannot parse '" + it->second + "' as number");
    }
  }
  resolved_[key] = fmt_double(value);
  return value;
}

std::uint64_t ConfigReader::get_u64(const std::string& key, std::uint64_t fallback) {
  consumed_.insert(key);
  std::uint64_t value = fallback;
  const auto it = map_.find(key);
  if (it != map_.end()) {
    try {
      std::size_t pos = 0;
      value = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': cannot parse '" + it->second +
                        "' as unsigned integer");
    }
  }
  resolved_[key] = std::to_string(value);
  return value;
}

bool ConfigReader::get_bool(const std::string& key, bool fallback) {
  consumed_.insert(key);
  bool value = fallback;
  const auto it = map_.find(key);
  if (it != map_.end()) {
    if (it->second == "true" || it->second == "1") {
      value = true;
    } else if (it->second == "false" || it->second == "0") {
      value = false;
    } else {
      throw ConfigError("key '" + key + "': expected true/false, got '" + it->second + "'");
    }
  }
  resolved_[key] = value ? "true" : "false";
  return value;
}

void ConfigReader::finish() const {
  std::string unknown;
  for (const auto& [key, value] : map_) {
    if (consumed_.count(key)) continue;
    if (key.rfind("manifest.", 0) == 0) continue;  // replayed manifest metadata
    if (!unknown.empty()) unknown += ", ";
    unknown += key;
  }
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(std::string path, const std::vector<std::string>& header)
    : path_(std::move(path)), columns_(header.size()) {
  if (header.empty()) throw std::invalid_argument("CsvWriter: empty header");
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) buffer_ += ',';
    buffer_ += header[i];
  }
  buffer_ += '\n';
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  if (closed_) throw std::logic_error("CsvWriter: row after close");
  if (fields.size() != columns_) {
    throw std::invalid_argument("CsvWriter: expected " + std::to_string(columns_) +
                                " fields, got " + std::to_string(fields.size()));
  }
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) buffer_ += ',';
    buffer_ += fields[i];
  }
  buffer_ += '\n';
}

void CsvWriter::close() {
  if (closed_) return;
  closed_ = true;
  std::ofstream out(path_, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("CsvWriter: cannot write " + path_);
  out.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
}

CsvWriter::~CsvWriter() {
  try {
    close();
  } catch (...) {
    // destructor must not throw; an explicit close() reports the failure
  }
}

std::vector<std::string> synth_csv_header() {
  return {"step", "loss", "max_abs_logit_all", "max_abs_logit_unmasked"};
}

std::vector<std::string> synth_csv_row(const CurveRecord& rec) {
  return {std::to_string(rec.step), fmt_double(rec.loss), fmt_double(rec.max_abs_logit_all),
          fmt_double(rec.max_abs_logit_unmasked)};
}

std::vector<std::string> telemetry_csv_header(std::size_t n_layers, std::size_t n_heads) {
  std::vector<std::string> header{"step", "loss", "lr", "grad_norm"};
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      header.push_back("max_logit_L" + std::to_string(l) + "H" + std::to_string(h));
    }
  }
  return header;
}

std::vector<std::string> telemetry_csv_row(const TelemetryRecord& rec) {
  std::vector<std::string> row{std::to_string(rec.step), fmt_double(rec.loss),
                               fmt_double(rec.lr), fmt_double(rec.grad_norm_preclip)};
  for (double v : rec.max_abs_logits) row.push_back(fmt_double(v));
  return row;
}

std::vector<std::string> bench_csv_header() {
  return {"n",        "layout",        "flops_ls", "flops_vanilla",
          "cache_ls", "cache_vanilla", "wall_ms_median"};
}

std::vector<std::string> bench_csv_row(const CostReport& report, const std::string& layout) {
  return {std::to_string(report.n),
          layout,
          std::to_string(report.flops_ls),
          std::to_string(report.flops_vanilla),
          std::to_string(report.cache_ls),
          std::to_string(report.cache_vanilla),
          fmt_double(report.wall_ms_median)};
}

namespace {

constexpr char kMagic[8] = {'A', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(
        static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(
        static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<std::string>& names,
                      const std::vector<const Matrix*>& mats) {
  if (names.size() != mats.size()) {
    throw std::invalid_argument("write_checkpoint: names/matrices length mismatch");
  }
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(mats.size()));
  for (std::size_t i = 0; i < mats.size(); ++i) {
    put_u32(out, static_cast<std::uint32_t>(names[i].size()));
    out += names[i];
    put_u64(out, mats[i]->rows);
    put_u64(out, mats[i]->cols);
    for (double v : mats[i]->data) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_checkpoint: cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::vector<NamedMatrix> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_checkpoint: cannot open " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string bytes = buf.str();

  ByteReader reader{bytes};
  const std::string magic = reader.str(sizeof(kMagic));
  if (magic != std::string(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("read_checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = reader.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("read_checkpoint: unsupported version " +
                             std::to_string(version));
  }
  const std::uint32_t count = reader.u32();
  std::vector<NamedMatrix> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedMatrix nm;
    const std::uint32_t name_len = reader.u32();
    nm.name = reader.str(name_len);
    const std::uint64_t rows = reader.u64();
    const std::uint64_t cols = reader.u64();
    nm.value = Matrix(rows, cols);
    for (double& v : nm.value.data) v = reader.f64();
    out.push_back(std::move(nm));
  }
  if (reader.pos != bytes.size()) {
    throw std::runtime_error("read_checkpoint: trailing bytes in " + path);
  }
  return out;
}

void write_manifest(const std::string& path, const ManifestInfo& info) {
  std::string out;
  out += "manifest.command = " + info.command + "\n";
  out += "manifest.version = " + std::string(kVersion) + "\n";
  out += "manifest.start_time = " + info.start_time + "\n";
  out += "manifest.end_time = " + info.end_time + "\n";
  for (std::size_t i = 0; i < info.outputs.size(); ++i) {
    out += "manifest.output." + std::to_string(i) + " = " + info.outputs[i] + "\n";
  }
  for (const auto& [key, value] : info.resolved_config) {
    out += key + " = " + value + "\n";
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_manifest: cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

void ensure_dir(const std::string& path) {
  std::filesystem::create_directories(path);
}

}  // namespace attnlab
