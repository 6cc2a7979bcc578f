#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowgraph/error.hpp"
#include "flowgraph/graph.hpp"
#include "flowgraph/prior.hpp"

namespace flowgraph {

using json = nlohmann::json;

inline constexpr int kPriorFormatVersion = 1;

// One JSON Lines record: {"n":int,"nodes":[...],"edges":[[i,j,type],...]} with i<j, type>=1.
inline std::string serialize_graph_record(const Graph& g) {
  std::string s = "{\"n\":" + std::to_string(g.size()) + ",\"nodes\":[";
  for (int i = 0; i < g.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(g.node(i));
  }
  s += "],\"edges\":[";
  bool first = true;
  for (int i = 0; i < g.size(); ++i)
    for (int j = i + 1; j < g.size(); ++j) {
      const int e = g.edge(i, j);
      if (e == 0) continue;
      if (!first) s += ',';
      first = false;
      s += '[' + std::to_string(i) + ',' + std::to_string(j) + ',' + std::to_string(e) + ']';
    }
  s += "]}";
  return s;
}

inline Graph parse_graph_record(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("graph record: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("graph record: expected a JSON object");
  for (const char* key : {"n", "nodes", "edges"})
    if (!j.contains(key)) throw ParseError(std::string("graph record: missing field '") + key + "'");
  for (const auto& [key, _] : j.items())
    if (key != "n" && key != "nodes" && key != "edges")
      throw ParseError("graph record: unknown field '" + key + "'");

  if (!j["n"].is_number_integer() || j["n"].get<long long>() < 0)
    throw ParseError("graph record: field 'n' must be a non-negative integer");
  const int n = j["n"].get<int>();
  const json& nodes = j["nodes"];
  if (!nodes.is_array() || static_cast<int>(nodes.size()) != n)
    throw ParseError("graph record: field 'nodes' must be an array of length n");
  Graph g(n);
  for (int i = 0; i < n; ++i) {
    if (!nodes[i].is_number_integer() || nodes[i].get<long long>() < 0)
      throw ParseError("graph record: field 'nodes' entry " + std::to_string(i) + " is not a non-negative integer");
    g.set_node(i, nodes[i].get<int>());
  }
  const json& edges = j["edges"];
  if (!edges.is_array()) throw ParseError("graph record: field 'edges' must be an array");
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const json& e = edges[k];
    if (!e.is_array() || e.size() != 3 || !e[0].is_number_integer() || !e[1].is_number_integer() ||
        !e[2].is_number_integer())
      throw ParseError("graph record: field 'edges' entry " + std::to_string(k) + " must be [i,j,type]");
    const long long a = e[0].get<long long>(), b = e[1].get<long long>(), type = e[2].get<long long>();
    if (a < 0 || b >= n || a >= b)
      throw PreconditionError("graph record: edge " + std::to_string(k) + " must satisfy 0 <= i < j < n");
    if (type < 1) throw PreconditionError("graph record: edge " + std::to_string(k) + " type must be >= 1");
    if (g.edge(static_cast<int>(a), static_cast<int>(b)) != 0)
      throw PreconditionError("graph record: duplicate edge " + std::to_string(k));
    g.set_edge(static_cast<int>(a), static_cast<int>(b), static_cast<int>(type));
  }
  return g;
}

inline std::vector<Graph> read_graphs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
  std::vector<Graph> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_graph_record(line));
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const PreconditionError& e) {
      throw PreconditionError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_graphs(const std::string& path, const std::vector<Graph>& graphs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset file '" + path + "'");
  for (const Graph& g : graphs) out << serialize_graph_record(g) << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline json prior_to_json(const Prior& p) {
  return json{{"format_version", kPriorFormatVersion},
              {"node_marginal", p.node_marginal},
              {"edge_marginal", p.edge_marginal},
              {"size_distribution", p.size_distribution}};
}

inline Prior prior_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("prior: expected a JSON object");
  for (const char* key : {"format_version", "node_marginal", "edge_marginal", "size_distribution"})
    if (!j.contains(key)) throw ParseError(std::string("prior: missing field '") + key + "'");
  if (j["format_version"] != kPriorFormatVersion) throw ParseError("prior: unsupported format_version");
  Prior p;
  try {
    p.node_marginal = j["node_marginal"].get<std::vector<double>>();
    p.edge_marginal = j["edge_marginal"].get<std::vector<double>>();
    p.size_distribution = j["size_distribution"].get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("prior: ") + e.what());
  }
  p.validate();
  return p;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

}  // namespace flowgraph
