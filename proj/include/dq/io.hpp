#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dq/cost.hpp"

// Serialization: CSV emission with fixed float formatting, run manifests,
// and the JSON network-spec file format.
//
// Determinism contract: identical configs and seeds must produce
// byte-identical files. Floats are printed with %.17g (lossless round-trip),
// JSON objects serialize with sorted keys (nlohmann default), and manifests
// reference outputs by basename so their bytes do not depend on where a run
// directory lives.

namespace dq {

inline constexpr const char* kVersion = "0.1.0";

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class CsvFile {
public:
  CsvFile(const std::string& path, const std::vector<std::string>& header) : f_(path) {
    if (!f_) throw std::runtime_error("cannot open for writing: " + path);
    write_row(header);
  }

  void write_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) f_ << ',';
      f_ << cells[i];
    }
    f_ << '\n';
  }

private:
  std::ofstream f_;
};

// Minimal reader for round-trip tests: no quoting, which the writers above
// never produce.
inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        cells.push_back(line.substr(start));
        break;
      }
      cells.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

struct RunManifest {
  std::string tool = "dq";
  std::string version = kVersion;
  std::string subcommand;
  std::uint64_t seed = 0;
  nlohmann::json config;                // fully resolved settings
  std::vector<std::string> outputs;     // basenames, relative to the manifest
};

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << j.dump(2) << '\n';
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return nlohmann::json::parse(f);
}

inline void save_manifest(const std::string& dir, const RunManifest& m) {
  nlohmann::json j;
  j["tool"] = m.tool;
  j["version"] = m.version;
  j["subcommand"] = m.subcommand;
  j["seed"] = m.seed;
  j["config"] = m.config;
  j["outputs"] = m.outputs;
  write_json_file(dir + "/manifest.json", j);
}

inline RunManifest load_manifest(const std::string& path) {
  const nlohmann::json j = read_json_file(path);
  RunManifest m;
  try {
    m.tool = j.at("tool").get<std::string>();
    m.version = j.at("version").get<std::string>();
    m.subcommand = j.at("subcommand").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config");
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed manifest " + path + ": " + e.what());
  }
  return m;
}

// Network spec document:
//   {"name": "...", "layers": [{"type": "conv"|"dense"|"elementwise",
//     "in": int, "out": int, "kernel": int, "spatial": int, "stride": int,
//     "bias": bool, "b_w": num, "b_x": num, "family": "uniform"|"pow2"}]}
// "spatial" is the OUTPUT side of the layer. Defaults: stride 1, bias true,
// b_w = b_x = 32, family uniform.
inline StaticNet load_netspec(const std::string& path) {
  nlohmann::json j;
  try {
    j = read_json_file(path);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("netspec " + path + ": " + e.what());
  }
  StaticNet net;
  net.name = j.value("name", "unnamed");
  if (!j.contains("layers") || !j["layers"].is_array() || j["layers"].empty())
    throw std::runtime_error("netspec " + path + ": missing non-empty 'layers' array");
  std::size_t idx = 0;
  for (const auto& lj : j["layers"]) {
    const std::string where = "netspec " + path + ", layer " + std::to_string(idx);
    auto need_int = [&](const char* field) {
      if (!lj.contains(field) || !lj[field].is_number_integer())
        throw std::runtime_error(where + ": missing integer field '" + field + "'");
      return lj[field].get<int>();
    };
    NetLayerSpec l;
    l.name = lj.value("name", "layer" + std::to_string(idx));
    const std::string type = lj.value("type", "");
    if (type == "dense") {
      l.spec.kind = CostKind::Dense;
      l.spec.m_in = need_int("in");
      l.spec.m_out = need_int("out");
    } else if (type == "conv") {
      l.spec.kind = CostKind::Conv2d;
      l.spec.m_in = need_int("in");
      l.spec.m_out = need_int("out");
      l.spec.k = need_int("kernel");
      l.spec.n_out = need_int("spatial");
    } else if (type == "elementwise") {
      l.spec.kind = CostKind::Elementwise;
      l.spec.m_out = need_int("out");
      l.spec.n_out = lj.value("spatial", 1);
    } else {
      throw std::runtime_error(where + ": unknown type '" + type + "'");
    }
    l.spec.has_bias = lj.value("bias", true);
    l.b_w = lj.value("b_w", 32.0);
    l.b_x = lj.value("b_x", 32.0);
    const std::string fam = lj.value("family", "uniform");
    if (fam == "uniform")
      l.family = Family::Uniform;
    else if (fam == "pow2")
      l.family = Family::Pow2;
    else
      throw std::runtime_error(where + ": unknown family '" + fam + "'");
    net.layers.push_back(std::move(l));
    ++idx;
  }
  return net;
}

}  // namespace dq
