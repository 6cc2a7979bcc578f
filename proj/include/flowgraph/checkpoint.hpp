#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include "flowgraph/graphevo.hpp"
#include "flowgraph/io.hpp"

namespace flowgraph {

inline constexpr int kCheckpointFormatVersion = 1;

inline json model_config_to_json(const ModelConfig& c) {
  return {{"node_types", c.node_types}, {"edge_types", c.edge_types}, {"layers", c.layers},
          {"heads", c.heads},           {"dx", c.dx},                 {"de", c.de},
          {"dy", c.dy},                 {"dropout", c.dropout},       {"max_nodes", c.max_nodes},
          {"literal_attention", c.literal_attention}, {"condition_on_source", c.condition_on_source}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "node_types") c.node_types = it->get<int>();
      else if (k == "edge_types") c.edge_types = it->get<int>();
      else if (k == "layers") c.layers = it->get<int>();
      else if (k == "heads") c.heads = it->get<int>();
      else if (k == "dx") c.dx = it->get<int>();
      else if (k == "de") c.de = it->get<int>();
      else if (k == "dy") c.dy = it->get<int>();
      else if (k == "dropout") c.dropout = it->get<double>();
      else if (k == "max_nodes") c.max_nodes = it->get<int>();
      else if (k == "literal_attention") c.literal_attention = it->get<bool>();
      else if (k == "condition_on_source") c.condition_on_source = it->get<bool>();
      else throw ParseError("model config: unknown key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

inline json checkpoint_to_json(const ModelParams& mp) {
  json tensors = json::array();
  for (const ParamTensor& t : mp.params.tensors())
    tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"values", t.values}});
  return {{"format_version", kCheckpointFormatVersion},
          {"hyperparameters", model_config_to_json(mp.config)},
          {"tensors", std::move(tensors)}};
}

/// Rebuilds parameters and checks every tensor against the layout implied by
/// the hyperparameters.
inline ModelParams checkpoint_from_json(const json& j) {
  try {
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw ParseError("checkpoint: unsupported format_version");
    ModelParams mp = init_model(model_config_from_json(j.at("hyperparameters")), 0);
    const json& ts = j.at("tensors");
    if (ts.size() != mp.params.count())
      throw ParseError("checkpoint: expected " + std::to_string(mp.params.count()) + " tensors, found " +
                       std::to_string(ts.size()));
    for (const json& t : ts) {
      const std::string name = t.at("name").get<std::string>();
      if (!mp.params.contains(name)) throw ParseError("checkpoint: unexpected tensor '" + name + "'");
      ParamTensor& dst = mp.params.get(name);
      const auto shape = t.at("shape").get<std::vector<int>>();
      if (shape.size() != 2 || shape[0] != dst.rows || shape[1] != dst.cols)
        throw ParseError("checkpoint: tensor '" + name + "' has wrong shape");
      std::vector<double> v = t.at("values").get<std::vector<double>>();
      if (v.size() != dst.values.size()) throw ParseError("checkpoint: tensor '" + name + "' has wrong length");
      dst.values = std::move(v);
    }
    return mp;
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const ModelParams& mp) {
  write_json_file(path, checkpoint_to_json(mp));
}

inline ModelParams load_checkpoint(const std::string& path) { return checkpoint_from_json(read_json_file(path)); }

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 15];
  return s;
}

/// Hash of the exact parameter bits and hyperparameters.
inline std::string checkpoint_hash(const ModelParams& mp) {
  std::uint64_t h = fnv1a64(model_config_to_json(mp.config).dump());
  for (const ParamTensor& t : mp.params.tensors()) {
    h = fnv1a64(t.name, h);
    for (double v : t.values) {
      char b[sizeof(double)];
      std::memcpy(b, &v, sizeof b);
      h = fnv1a64({b, sizeof b}, h);
    }
  }
  return hex64(h);
}

inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

}  // namespace flowgraph
