#pragma once

// Edge-augmented graph transformer producing factorized posterior logits over
// clean node and edge categories.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flowgraph/autodiff.hpp"
#include "flowgraph/error.hpp"
#include "flowgraph/graph.hpp"
#include "flowgraph/rng.hpp"
#include "flowgraph/structural_features.hpp"

namespace flowgraph {

struct ParamTensor {
  std::string name;
  int rows = 0, cols = 0;
  std::vector<double> values;
  friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

/// Ordered collection of named row-major tensors.
class ParamSet {
 public:
  int add(std::string name, int rows, int cols, std::vector<double> values) {
    require(!index_.count(name), "ParamSet: duplicate tensor '" + name + "'");
    require(static_cast<std::size_t>(rows) * cols == values.size(), "ParamSet: shape mismatch for '" + name + "'");
    index_[name] = static_cast<int>(tensors_.size());
    tensors_.push_back({std::move(name), rows, cols, std::move(values)});
    return static_cast<int>(tensors_.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw PreconditionError("ParamSet: no tensor named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t count() const noexcept { return tensors_.size(); }
  ParamTensor& operator[](std::size_t i) { return tensors_[i]; }
  const ParamTensor& operator[](std::size_t i) const { return tensors_[i]; }
  ParamTensor& get(const std::string& name) { return tensors_[find(name)]; }
  const ParamTensor& get(const std::string& name) const { return tensors_[find(name)]; }
  const std::vector<ParamTensor>& tensors() const noexcept { return tensors_; }

  std::size_t total_size() const {
    std::size_t s = 0;
    for (const auto& t : tensors_) s += t.values.size();
    return s;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const auto& t : tensors_) out.insert(out.end(), t.values.begin(), t.values.end());
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    require(flat.size() == total_size(), "ParamSet::unflatten: size mismatch");
    std::size_t o = 0;
    for (auto& t : tensors_) {
      std::copy(flat.begin() + o, flat.begin() + o + t.values.size(), t.values.begin());
      o += t.values.size();
    }
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.tensors_ == b.tensors_; }

 private:
  std::vector<ParamTensor> tensors_;
  std::map<std::string, int> index_;
};

struct ModelConfig {
  int node_types = 1;
  int edge_types = 2;
  int layers = 4;
  int heads = 8;
  int dx = 64;
  int de = 32;
  int dy = 32;
  double dropout = 0.1;
  int max_nodes = kDefaultMaxNodes;
  bool literal_attention = false;
  bool condition_on_source = false;

  int node_input_dim() const { return node_types + kNodeFeatureDim + (condition_on_source ? node_types : 0); }
  int edge_input_dim() const { return edge_types + (condition_on_source ? edge_types : 0); }
  int global_input_dim() const { return kGlobalStructDim + 1 + kTimeEmbeddingDim; }

  void validate() const {
    require(node_types >= 1, "ModelConfig.node_types must be >= 1");
    require(edge_types >= 2, "ModelConfig.edge_types must be >= 2");
    require(layers >= 0, "ModelConfig.layers must be >= 0");
    require(heads >= 1, "ModelConfig.heads must be >= 1");
    require(dx > 0 && dx % heads == 0, "ModelConfig.dx must be a positive multiple of heads");
    require(de > 0 && de % heads == 0, "ModelConfig.de must be a positive multiple of heads");
    require(dy > 0, "ModelConfig.dy must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "ModelConfig.dropout must be in [0,1)");
    require(max_nodes >= 1, "ModelConfig.max_nodes must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ModelParams {
  ModelConfig config;
  ParamSet params;
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

namespace detail {

inline void add_linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true) {
  const double a = std::sqrt(6.0 / (in + out));
  std::vector<double> w(static_cast<std::size_t>(in) * out);
  for (double& v : w) v = (2.0 * rng.uniform() - 1.0) * a;
  ps.add(name + ".w", in, out, std::move(w));
  if (bias) ps.add(name + ".b", 1, out, std::vector<double>(out, 0.0));
}

inline void add_layer_norm(ParamSet& ps, const std::string& name, int width) {
  ps.add(name + ".g", 1, width, std::vector<double>(width, 1.0));
  ps.add(name + ".b", 1, width, std::vector<double>(width, 0.0));
}

}  // namespace detail

inline ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams mp{cfg, {}};
  ParamSet& ps = mp.params;
  Rng rng = Rng::keyed(seed, 0x1A17);
  const int H = cfg.heads, dx = cfg.dx, de = cfg.de, dy = cfg.dy;
  detail::add_linear(ps, "in_x", cfg.node_input_dim(), dx, rng);
  detail::add_linear(ps, "in_e", cfg.edge_input_dim(), de, rng);
  detail::add_linear(ps, "in_y", cfg.global_input_dim(), dy, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    detail::add_linear(ps, p + "q", dx, dx, rng);
    detail::add_linear(ps, p + "k", dx, dx, rng);
    detail::add_linear(ps, p + "v", dx, dx, rng);
    detail::add_linear(ps, p + "e_mul", de, H, rng);
    detail::add_linear(ps, p + "e_add", de, H, rng);
    detail::add_linear(ps, p + "x_film_mul", dy, dx, rng);
    detail::add_linear(ps, p + "x_film_add", dy, dx, rng);
    detail::add_linear(ps, p + "x_out", dx, dx, rng);
    detail::add_linear(ps, p + "qe", H, de, rng);
    detail::add_linear(ps, p + "ke", H, de, rng);
    detail::add_linear(ps, p + "ve", H, de, rng);
    detail::add_linear(ps, p + "gate", H, de, rng);
    detail::add_linear(ps, p + "tri_bias", H, H, rng);
    detail::add_linear(ps, p + "e_film_mul", dy, de, rng);
    detail::add_linear(ps, p + "e_film_add", dy, de, rng);
    detail::add_linear(ps, p + "e_out", de, de, rng);
    detail::add_linear(ps, p + "y_self", dy, dy, rng);
    detail::add_linear(ps, p + "pna_x", 4 * dx, dy, rng);
    detail::add_linear(ps, p + "pna_e", 4 * de, dy, rng);
    detail::add_linear(ps, p + "y_out", dy, dy, rng);
    detail::add_layer_norm(ps, p + "ln_x", dx);
    detail::add_layer_norm(ps, p + "ln_e", de);
    detail::add_layer_norm(ps, p + "ln_y", dy);
  }
  detail::add_linear(ps, "out_x", dx, cfg.node_types, rng);
  detail::add_linear(ps, "out_e", de, cfg.edge_types, rng);
  return mp;
}

/// Network inputs for one graph padded to N slots; slots >= n are masked.
struct EncodedInput {
  int n = 0;
  int N = 0;
  std::vector<char> mask;
  std::vector<double> x;  // N x node_input_dim
  std::vector<double> e;  // N*N x edge_input_dim
  std::vector<double> y;  // 1 x global_input_dim
};

inline EncodedInput encode_input(const ModelConfig& cfg, const Graph& gt, double t, const Graph* g0 = nullptr,
                                 int padded_size = -1) {
  const int n = gt.size();
  if (n > cfg.max_nodes)
    throw CapacityError("graph has " + std::to_string(n) + " nodes; model supports at most " +
                        std::to_string(cfg.max_nodes));
  require(n >= 1, "forward: graph must have at least one node");
  gt.validate(cfg.node_types, cfg.edge_types);
  if (cfg.condition_on_source) {
    require(g0 != nullptr, "forward: model is conditioned on the source graph but none was given");
    require(g0->size() == n, "forward: source graph size mismatch");
  }
  EncodedInput in;
  in.n = n;
  in.N = padded_size < 0 ? n : padded_size;
  require(in.N >= n, "forward: padded size smaller than graph");
  const int N = in.N, nx = cfg.node_input_dim(), ne = cfg.edge_input_dim();
  in.mask.assign(N, 0);
  for (int i = 0; i < n; ++i) in.mask[i] = 1;

  const StructuralFeatures sf = structural_features(gt, t);
  in.x.assign(static_cast<std::size_t>(N) * nx, 0.0);
  for (int i = 0; i < n; ++i) {
    double* row = in.x.data() + static_cast<std::size_t>(i) * nx;
    row[gt.node(i)] = 1.0;
    const double* f = sf.node_features.data() + static_cast<std::size_t>(i) * kNodeFeatureDim;
    for (int k = 0; k < 3; ++k) row[cfg.node_types + k] = std::log1p(f[k]);
    row[cfg.node_types + 3] = f[3];
    if (cfg.condition_on_source) row[cfg.node_types + kNodeFeatureDim + g0->node(i)] = 1.0;
  }
  in.e.assign(static_cast<std::size_t>(N) * N * ne, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      double* row = in.e.data() + (static_cast<std::size_t>(i) * N + j) * ne;
      row[gt.edge(i, j)] = 1.0;
      if (cfg.condition_on_source) row[cfg.edge_types + g0->edge(i, j)] = 1.0;
    }
  const std::vector<double>& gf = sf.global_features;
  in.y.reserve(cfg.global_input_dim());
  for (int k = 0; k < 5; ++k) in.y.push_back(std::log1p(gf[k]));
  in.y.push_back(gf[5]);
  in.y.push_back(std::log1p(gf[6]));
  in.y.push_back(static_cast<double>(n) / cfg.max_nodes);
  in.y.insert(in.y.end(), gf.begin() + kGlobalStructDim, gf.end());
  return in;
}

/// Parameters copied onto a tape as leaves, in ParamSet order.
struct BoundParams {
  const ParamSet* params = nullptr;
  std::vector<ad::Var> vars;
  ad::Var operator()(const std::string& name) const { return vars[params->find(name)]; }
};

inline BoundParams bind_params(ad::Tape& tape, const ParamSet& ps, bool requires_grad) {
  BoundParams b{&ps, {}};
  b.vars.reserve(ps.count());
  for (std::size_t i = 0; i < ps.count(); ++i)
    b.vars.push_back(tape.leaf(ps[i].rows, ps[i].cols, ps[i].values, requires_grad));
  return b;
}

struct ForwardVars {
  ad::Var node_logits;  // N x node_types
  ad::Var edge_logits;  // N*N x edge_types, symmetric in (i,j)
};

namespace detail {

inline ad::Var lin(const BoundParams& P, const std::string& name, ad::Var x) {
  return ad::linear(x, P(name + ".w"), P(name + ".b"));
}

// FiLM(x, y) = x * (Linear(y) + 1) + Linear'(y), y a 1 x dy row.
inline ad::Var film(const BoundParams& P, const std::string& prefix, ad::Var x, ad::Var y) {
  ad::Var scale = ad::affine_scalar(lin(P, prefix + "_mul", y), 1.0, 1.0);
  return ad::add_row(ad::mul_row(x, scale), lin(P, prefix + "_add", y));
}

}  // namespace detail

/// One self-attention block; returns (X', E', y') before the residual wrapper.
struct BlockOutput {
  ad::Var x, e, y;
};

inline BlockOutput self_attention_block(const ModelConfig& cfg, const BoundParams& P, const std::string& prefix,
                                        ad::Var X, ad::Var E, ad::Var y, std::span<const char> mask,
                                        std::span<const char> pair_mask) {
  using namespace ad;
  using flowgraph::detail::lin;
  const int H = cfg.heads;
  // Node path: edge-modulated scores, softmax over keys, aggregate values.
  Var Q = lin(P, prefix + "q", X), K = lin(P, prefix + "k", X), V = lin(P, prefix + "v", X);
  Var S = head_scores(Q, K, H);
  Var Y = add(mul(S, affine_scalar(lin(P, prefix + "e_mul", E), 1.0, 1.0)), lin(P, prefix + "e_add", E));
  Var A = masked_softmax_keys(Y, mask, !cfg.literal_attention);
  Var Xa = aggregate_values(A, V);
  Var Xn = lin(P, prefix + "x_out", flowgraph::detail::film(P, prefix + "x_film", Xa, y));

  // Edge path: triangle contraction over intermediate nodes, gated.
  Var Qe = lin(P, prefix + "qe", Y), Ke = lin(P, prefix + "ke", Y), Ve = lin(P, prefix + "ve", Y);
  Var G = sigmoid(lin(P, prefix + "gate", Y));
  Var T = add(triangle_scores(Qe, Ke, H, mask), lin(P, prefix + "tri_bias", Y));
  Var Eu = mul(mul(expand_heads(T, cfg.de), Ve), G);
  Var En = lin(P, prefix + "e_out", flowgraph::detail::film(P, prefix + "e_film", Eu, y));

  // Global path.
  Var yn = add(add(lin(P, prefix + "y_self", y), lin(P, prefix + "pna_x", pool_stats(Xn, mask))),
               lin(P, prefix + "pna_e", pool_stats(En, pair_mask)));
  yn = lin(P, prefix + "y_out", yn);
  return {Xn, En, yn};
}

/// Builds the full forward pass on `tape`. Dropout is applied only when
/// `dropout_rng` is non-null.
inline ForwardVars forward_on_tape(const ModelParams& mp, const BoundParams& P, const EncodedInput& in,
                                   Rng* dropout_rng = nullptr) {
  using namespace ad;
  const ModelConfig& cfg = mp.config;
  ad::Tape& tape = *P.vars.front().tape;
  const int N = in.N;
  std::vector<char> pair_mask(static_cast<std::size_t>(N) * N, 0);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) pair_mask[static_cast<std::size_t>(i) * N + j] = in.mask[i] && in.mask[j];

  Var X = flowgraph::detail::lin(P, "in_x", tape.constant(N, cfg.node_input_dim(), in.x));
  Var E = flowgraph::detail::lin(P, "in_e", tape.constant(N * N, cfg.edge_input_dim(), in.e));
  Var y = flowgraph::detail::lin(P, "in_y", tape.constant(1, cfg.global_input_dim(), in.y));
  const double rate = dropout_rng ? cfg.dropout : 0.0;
  Rng unused;
  Rng& drng = dropout_rng ? *dropout_rng : unused;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const BlockOutput o = self_attention_block(cfg, P, p, X, E, y, in.mask, pair_mask);
    X = relu(layer_norm(add(X, dropout(o.x, rate, drng)), P(p + "ln_x.g"), P(p + "ln_x.b")));
    E = relu(layer_norm(add(E, dropout(o.e, rate, drng)), P(p + "ln_e.g"), P(p + "ln_e.b")));
    y = relu(layer_norm(add(y, dropout(o.y, rate, drng)), P(p + "ln_y.g"), P(p + "ln_y.b")));
  }
  return {flowgraph::detail::lin(P, "out_x", X), symmetrize_pairs(flowgraph::detail::lin(P, "out_e", E), N)};
}

struct PosteriorLogits {
  int n = 0;  // real nodes
  int N = 0;  // slots
  int node_types = 0, edge_types = 0;
  std::vector<double> node_logits;  // N x node_types
  std::vector<double> edge_logits;  // N*N x edge_types
  std::vector<char> mask;

  const double* node_row(int i) const { return node_logits.data() + static_cast<std::size_t>(i) * node_types; }
  const double* edge_row(int i, int j) const {
    return edge_logits.data() + (static_cast<std::size_t>(i) * N + j) * edge_types;
  }
};

/// Inference-only forward pass (no gradient recording, no dropout).
inline PosteriorLogits forward(const ModelParams& mp, const Graph& gt, double t, const Graph* g0 = nullptr,
                               int padded_size = -1) {
  const EncodedInput in = encode_input(mp.config, gt, t, g0, padded_size);
  ad::Tape tape(false);
  const BoundParams P = bind_params(tape, mp.params, false);
  const ForwardVars fv = forward_on_tape(mp, P, in);
  PosteriorLogits out;
  out.n = in.n;
  out.N = in.N;
  out.node_types = mp.config.node_types;
  out.edge_types = mp.config.edge_types;
  out.node_logits = tape.value(fv.node_logits);
  out.edge_logits = tape.value(fv.edge_logits);
  out.mask = in.mask;
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : p) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : p) v /= z;
  return p;
}

/// Factorized posterior probabilities per graph dimension (GraphDims order:
/// nodes, then pairs i<j).
struct FactorizedPosterior {
  std::vector<std::vector<double>> dims;
};

inline FactorizedPosterior posterior_probs(const PosteriorLogits& lg) {
  FactorizedPosterior fp;
  const int n = lg.n;
  fp.dims.reserve(n + n * (n - 1) / 2);
  for (int i = 0; i < n; ++i) fp.dims.push_back(softmax({lg.node_row(i), static_cast<std::size_t>(lg.node_types)}));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      fp.dims.push_back(softmax({lg.edge_row(i, j), static_cast<std::size_t>(lg.edge_types)}));
  return fp;
}

}  // namespace flowgraph
