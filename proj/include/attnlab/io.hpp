#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnlab/kvsim.hpp"
#include "attnlab/matcore.hpp"
#include "attnlab/microlm.hpp"
#include "attnlab/synthlab.hpp"

namespace attnlab {

inline constexpr const char* kVersion = "0.1.0";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat `key = value` text: one pair per line, '#' comments, blank lines
// skipped, dotted prefixes by convention only.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::string& path);

// "key=value" from a --set flag; first '=' splits.
void apply_override(ConfigMap& map, const std::string& kv);

// Serves typed lookups, tracks which keys were consumed, and records every
// final value so the manifest can list the fully resolved configuration.
// Unconsumed keys are errors at finish() — except the reserved "manifest."
// prefix, which is ignored so a written manifest replays as a config file.
class ConfigReader {
 public:
  explicit ConfigReader(ConfigMap map) : map_(std::move(map)) {}

  std::string get_string(const std::string& key, const std::string& fallback);
  double get_double(const std::string& key, double fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);

  bool has(const std::string& key) const { return map_.count(key) != 0; }
  void finish() const;
  const ConfigMap& resolved() const { return resolved_; }

 private:
  ConfigMap map_;
  std::set<std::string> consumed_;
  ConfigMap resolved_;
};

// Shortest-round-trip double formatting (%.17g) with fixed nan/inf spellings;
// the backbone of byte-identical CSV reproduction.
std::string fmt_double(double v);

class CsvWriter {
 public:
  CsvWriter(std::string path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& fields);
  void close();  // flush to disk; later rows are errors
  ~CsvWriter();

  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

 private:
  std::string path_;
  std::string buffer_;
  std::size_t columns_ = 0;
  bool closed_ = false;
};

// Fixed per-module CSV schemas.
std::vector<std::string> synth_csv_header();
std::vector<std::string> synth_csv_row(const CurveRecord& rec);
std::vector<std::string> telemetry_csv_header(std::size_t n_layers, std::size_t n_heads);
std::vector<std::string> telemetry_csv_row(const TelemetryRecord& rec);
std::vector<std::string> bench_csv_header();
std::vector<std::string> bench_csv_row(const CostReport& report, const std::string& layout);

// Named-matrix checkpoint: magic "ALABCKPT", little-endian u32 version and
// count, then per matrix u32 name length + name, u64 rows, u64 cols, and
// rows*cols f64 payload.
struct NamedMatrix {
  std::string name;
  Matrix value;
};

void write_checkpoint(const std::string& path, const std::vector<std::string>& names,
                      const std::vector<const Matrix*>& mats);
std::vector<NamedMatrix> read_checkpoint(const std::string& path);

struct ManifestInfo {
  std::string command;
  std::vector<std::string> outputs;  // file names relative to the manifest
  ConfigMap resolved_config;
  std::string start_time;
  std::string end_time;
};

// Plain key=value file; config keys verbatim, metadata under "manifest.".
void write_manifest(const std::string& path, const ManifestInfo& info);

std::string utc_timestamp();
void ensure_dir(const std::string& path);

}  // namespace attnlab
