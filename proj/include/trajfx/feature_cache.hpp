#pragma once

// On-disk feature cache: CSV rows `sample_id,label,spec_hash,v0,...` plus a
// JSON manifest at `<path>.manifest.json`. Writes go to a temp file that is
// renamed into place.

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajfx/common.hpp"
#include "trajfx/error.hpp"
#include "trajfx/features.hpp"

namespace trajfx {

struct CacheManifest {
  std::string plan;
  std::string spec;
  std::string schedule_digest;
  std::string arch_hash;
  std::uint64_t spec_hash = 0;
  std::size_t count = 0;
  std::size_t dim = 0;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& csv) {
  return csv.string() + ".manifest.json";
}

namespace detail {

inline void write_atomically(const std::filesystem::path& path, const std::string& contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp.string() + " for writing");
    os << contents;
    if (!os.flush()) throw Error("write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, path);
}

inline std::uint64_t parse_u64(const std::string& s, int base, const std::string& what) {
  if (s.empty()) throw FormatError("empty " + what);
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s.c_str(), &end, base);
  if (errno != 0 || *end != '\0' || s[0] == '-') throw FormatError("bad " + what + ": '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s) {
  if (s.empty()) throw FormatError("empty value");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (*end != '\0') throw FormatError("bad value: '" + s + "'");
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline void cache_write(const std::filesystem::path& path,
                        std::span<const TrajectoryFeatureVector> vectors,
                        const CacheManifest& manifest) {
  const std::size_t dim = vectors.empty() ? manifest.dim : vectors.front().values.size();
  std::string csv = "sample_id,label,spec_hash";
  for (std::size_t j = 0; j < dim; ++j) csv += ",v" + std::to_string(j);
  csv += '\n';
  for (const auto& f : vectors) {
    if (f.values.size() != dim) throw ContractError("cache_write: ragged feature vectors");
    if (f.spec_hash != manifest.spec_hash) throw ContractError("cache_write: vector hash differs from manifest");
    csv += std::to_string(f.sample_id) + ',' + std::to_string(f.label) + ',' + hex64(f.spec_hash);
    for (double v : f.values) csv += ',' + format_double(v);
    csv += '\n';
  }
  nlohmann::ordered_json m;
  m["plan"] = manifest.plan;
  m["spec"] = manifest.spec;
  m["schedule_digest"] = manifest.schedule_digest;
  m["arch_hash"] = manifest.arch_hash;
  m["spec_hash"] = hex64(manifest.spec_hash);
  m["count"] = vectors.size();
  m["dim"] = dim;
  detail::write_atomically(path, csv);
  detail::write_atomically(manifest_path(path), m.dump(2) + "\n");
}

inline CacheManifest cache_read_manifest(const std::filesystem::path& path) {
  std::ifstream is(manifest_path(path));
  if (!is) throw FormatError("missing cache manifest for " + path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
    CacheManifest out;
    out.plan = m.at("plan").get<std::string>();
    out.spec = m.at("spec").get<std::string>();
    out.schedule_digest = m.at("schedule_digest").get<std::string>();
    out.arch_hash = m.at("arch_hash").get<std::string>();
    out.spec_hash = detail::parse_u64(m.at("spec_hash").get<std::string>(), 16, "spec_hash");
    out.count = m.at("count").get<std::size_t>();
    out.dim = m.at("dim").get<std::size_t>();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed cache manifest: ") + e.what());
  }
}

/// Reads a cache written for `expected_hash`; any other hash is stale.
inline std::vector<TrajectoryFeatureVector> cache_read(const std::filesystem::path& path,
                                                       std::uint64_t expected_hash) {
  const CacheManifest m = cache_read_manifest(path);
  if (m.spec_hash != expected_hash)
    throw StaleCacheError("cache " + path.string() + " was built for spec " + hex64(m.spec_hash) +
                          ", expected " + hex64(expected_hash));
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open cache " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError("cache has no header");
  const auto header = detail::split_csv_line(line);
  if (header.size() != 3 + m.dim || header[0] != "sample_id" || header[1] != "label" ||
      header[2] != "spec_hash")
    throw FormatError("unexpected cache header");
  std::vector<TrajectoryFeatureVector> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 3 + m.dim)
      throw FormatError("cache row " + std::to_string(out.size()) + " has " +
                        std::to_string(cells.size()) + " cells");
    TrajectoryFeatureVector f;
    f.sample_id = detail::parse_u64(cells[0], 10, "sample_id");
    char* end = nullptr;
    f.label = static_cast<int>(std::strtol(cells[1].c_str(), &end, 10));
    if (cells[1].empty() || *end != '\0') throw FormatError("bad label: '" + cells[1] + "'");
    f.spec_hash = detail::parse_u64(cells[2], 16, "spec_hash");
    if (f.spec_hash != expected_hash) throw StaleCacheError("cache row carries a different spec_hash");
    f.values.reserve(m.dim);
    for (std::size_t j = 0; j < m.dim; ++j) f.values.push_back(detail::parse_double(cells[3 + j]));
    out.push_back(std::move(f));
  }
  if (out.size() != m.count)
    throw FormatError("cache holds " + std::to_string(out.size()) + " rows, manifest says " +
                      std::to_string(m.count));
  return out;
}

}  // namespace trajfx
