#pragma once

// Command-line front end. Every subcommand resolves its parameters from
// defaults, then an optional JSON config file (--config), then explicit flags,
// then FLOWGRAPH_SEED; the resolved set is written next to the outputs as a
// manifest.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "flowgraph/checkpoint.hpp"
#include "flowgraph/datasets.hpp"
#include "flowgraph/io.hpp"
#include "flowgraph/metrics.hpp"
#include "flowgraph/prior.hpp"
#include "flowgraph/rl_guidance.hpp"
#include "flowgraph/sampler.hpp"
#include "flowgraph/self_check.hpp"
#include "flowgraph/training.hpp"

namespace flowgraph {

namespace cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

enum class Kind { integer, unsigned_integer, real, text, boolean, object };

struct OptionSpec {
  std::string key;  // JSON key; the flag is --key with '_' -> '-'
  Kind kind;
  json def;  // null = no default (optional or required)
  std::string help;
  bool required = false;
};

inline std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  for (char& c : f)
    if (c == '_') c = '-';
  return f;
}

inline json convert(const OptionSpec& s, const std::string& raw) {
  auto fail = [&] { throw PreconditionError(flag_name(s.key) + ": cannot parse '" + raw + "'"); };
  try {
    std::size_t used = 0;
    switch (s.kind) {
      case Kind::integer: {
        const long long v = std::stoll(raw, &used);
        if (used != raw.size()) fail();
        return v;
      }
      case Kind::unsigned_integer: {
        if (!raw.empty() && raw[0] == '-') fail();
        const unsigned long long v = std::stoull(raw, &used);
        if (used != raw.size()) fail();
        return v;
      }
      case Kind::real: {
        const double v = std::stod(raw, &used);
        if (used != raw.size()) fail();
        return v;
      }
      case Kind::boolean:
        if (raw == "true" || raw == "1") return true;
        if (raw == "false" || raw == "0") return false;
        fail();
        break;
      case Kind::object:
        return json::parse(raw);
      case Kind::text:
        return raw;
    }
  } catch (const PreconditionError&) {
    throw;
  } catch (const std::exception&) {
    fail();
  }
  return nullptr;
}

// Type check of a value coming from a config file.
inline json check_config_value(const OptionSpec& s, const json& v) {
  bool ok = false;
  switch (s.kind) {
    case Kind::integer:
      ok = v.is_number_integer();
      break;
    case Kind::unsigned_integer:
      ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
      break;
    case Kind::real:
      ok = v.is_number();
      break;
    case Kind::boolean:
      ok = v.is_boolean();
      break;
    case Kind::object:
      ok = v.is_object() || v.is_array();
      break;
    case Kind::text:
      ok = v.is_string();
      break;
  }
  if (!ok) throw PreconditionError("config key '" + s.key + "' has the wrong type");
  return s.kind == Kind::real ? json(v.get<double>()) : v;
}

/// A subcommand's option table bound to CLI11.
class Command {
 public:
  Command(CLI::App* app, std::vector<OptionSpec> specs) : app_(app), specs_(std::move(specs)) {
    app_->add_option("--config", config_path_, "JSON file setting any of the options below");
    app_->add_option("--threads", threads_, "worker threads (results do not depend on it)")
        ->check(CLI::PositiveNumber);
    for (const OptionSpec& s : specs_) {
      std::string help = s.help;
      if (!s.def.is_null()) help += " [default: " + s.def.dump() + "]";
      app_->add_option(flag_name(s.key), raw_[s.key], help);
    }
  }

  /// Defaults, then config file, then flags, then FLOWGRAPH_SEED.
  json resolve() const {
    json out = json::object();
    for (const OptionSpec& s : specs_)
      if (!s.def.is_null()) out[s.key] = s.def;
    if (!config_path_.empty()) {
      const json cfg = read_json_file(config_path_);
      if (!cfg.is_object()) throw PreconditionError("config file must hold a JSON object");
      for (const auto& [k, v] : cfg.items()) {
        if (k == "threads") continue;
        const OptionSpec* s = find(k);
        if (!s) throw PreconditionError("config file: unknown key '" + k + "'");
        out[k] = check_config_value(*s, v);
      }
    }
    for (const OptionSpec& s : specs_)
      if (app_->get_option(flag_name(s.key))->count() > 0) out[s.key] = convert(s, raw_.at(s.key));
    if (const char* env = std::getenv("FLOWGRAPH_SEED"); env && find("seed")) {
      out["seed"] = convert(*find("seed"), env);
    }
    for (const OptionSpec& s : specs_)
      if (s.required && !out.contains(s.key)) throw PreconditionError(flag_name(s.key) + " is required");
    return out;
  }

  int threads() const {
    if (threads_ > 0) return threads_;
    if (!config_path_.empty()) {
      const json cfg = read_json_file(config_path_);
      if (cfg.is_object() && cfg.contains("threads")) {
        require(cfg["threads"].is_number_integer() && cfg["threads"].get<int>() >= 1,
                "config key 'threads' must be a positive integer");
        return cfg["threads"].get<int>();
      }
    }
    return default_threads();
  }

 private:
  const OptionSpec* find(const std::string& k) const {
    for (const OptionSpec& s : specs_)
      if (s.key == k) return &s;
    return nullptr;
  }

  CLI::App* app_;
  std::vector<OptionSpec> specs_;
  std::string config_path_;
  int threads_ = 0;
  std::map<std::string, std::string> raw_;
};

inline std::string str(const json& r, const char* k) { return r.contains(k) ? r.at(k).get<std::string>() : ""; }

inline void write_manifest(const std::string& out_path, const std::string& command, const json& resolved,
                           json extra = json::object()) {
  json m = {{"command", command}, {"config", resolved}, {"seed", resolved.value("seed", json(nullptr))}};
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_json_file(out_path + ".manifest.json", m);
}

inline const std::vector<OptionSpec>& model_specs() {
  static const std::vector<OptionSpec> s{
      {"node_types", Kind::integer, nullptr, "node categories (default: from the data)"},
      {"edge_types", Kind::integer, nullptr, "edge categories including 'no edge' (default: from the data)"},
      {"layers", Kind::integer, 4, "transformer layers"},
      {"heads", Kind::integer, 8, "attention heads"},
      {"dx", Kind::integer, 64, "node width"},
      {"de", Kind::integer, 32, "edge width"},
      {"dy", Kind::integer, 32, "global width"},
      {"dropout", Kind::real, 0.1, "dropout rate"},
      {"max_nodes", Kind::integer, 64, "largest supported graph"},
      {"literal_attention", Kind::boolean, false, "softmax over key products only"},
      {"condition_on_source", Kind::boolean, false, "feed G0 to the network"},
  };
  return s;
}

inline int categories_in(const std::vector<Graph>& data, bool nodes) {
  int m = 0;
  for (const Graph& g : data)
    for (int i = 0; i < g.size(); ++i) {
      if (nodes) m = std::max(m, g.node(i));
      else
        for (int j = 0; j < g.size(); ++j) m = std::max(m, g.edge(i, j));
    }
  return nodes ? m + 1 : std::max(2, m + 1);
}

// ---------------------------------------------------------------------------

inline int cmd_dataset(const json& r) {
  const std::string kind = str(r, "kind");
  const int count = r.at("count").get<int>();
  const std::uint64_t seed = r.at("seed").get<std::uint64_t>();
  std::vector<Graph> data;
  if (kind == "community-small") {
    CommunitySmallOptions o;
    o.min_nodes = r.at("min_nodes").get<int>();
    o.max_nodes = r.at("max_nodes").get<int>();
    data = gen_community_small(count, seed, o);
  } else if (kind == "grid") {
    data = gen_grid(count, r.at("min_side").get<int>(), r.at("max_side").get<int>(), seed);
  } else {
    throw PreconditionError("--kind must be community-small or grid");
  }
  const std::string out = str(r, "out");
  if (r.contains("test_out")) {
    auto [train, test] = split_dataset(data, 1.0 - r.at("test_fraction").get<double>(), seed);
    write_graphs(out, train);
    write_graphs(str(r, "test_out"), test);
  } else {
    write_graphs(out, data);
  }
  write_manifest(out, "dataset gen", r, {{"file_hash", file_hash(out)}});
  return kExitOk;
}

inline int cmd_train(const json& r, int threads) {
  const std::vector<Graph> data = read_graphs(str(r, "data"));
  require(!data.empty(), "train: dataset is empty");
  ModelConfig mc;
  mc.node_types = r.contains("node_types") ? r["node_types"].get<int>() : categories_in(data, true);
  mc.edge_types = r.contains("edge_types") ? r["edge_types"].get<int>() : categories_in(data, false);
  mc.layers = r.at("layers").get<int>();
  mc.heads = r.at("heads").get<int>();
  mc.dx = r.at("dx").get<int>();
  mc.de = r.at("de").get<int>();
  mc.dy = r.at("dy").get<int>();
  mc.dropout = r.at("dropout").get<double>();
  mc.max_nodes = r.at("max_nodes").get<int>();
  mc.literal_attention = r.at("literal_attention").get<bool>();
  mc.condition_on_source = r.at("condition_on_source").get<bool>();
  TrainConfig tc;
  tc.batch_size = r.at("batch_size").get<int>();
  tc.steps = r.at("steps").get<long>();
  tc.learning_rate = r.at("learning_rate").get<double>();
  tc.edge_loss_weight = r.at("edge_loss_weight").get<double>();
  tc.coupling_mode = coupling_mode_from_string(str(r, "coupling"));
  tc.lambda = r.at("lambda").get<double>();
  tc.seed = r.at("seed").get<std::uint64_t>();
  tc.checkpoint_interval = r.at("checkpoint_interval").get<long>();
  tc.grad_clip_norm = r.at("grad_clip_norm").get<double>();
  tc.threads = threads;
  tc.validate();
  const Prior prior = empirical_prior(data, mc.node_types, mc.edge_types);
  const std::string out = str(r, "out");
  const std::string prior_out = r.contains("prior_out") ? str(r, "prior_out") : out + ".prior.json";
  write_json_file(prior_out, prior_to_json(prior));
  TrainLoopOptions opt;
  opt.checkpoint_dir = str(r, "checkpoint_dir");
  opt.log_path = str(r, "log");
  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);
  const ModelParams mp = train_loop(data, prior, init_model(mc, tc.seed), tc, opt);
  save_checkpoint(out, mp);
  write_manifest(out, "train", r,
                 {{"data_hash", file_hash(str(r, "data"))},
                  {"checkpoint_hash", checkpoint_hash(mp)},
                  {"prior_hash", file_hash(prior_out)},
                  {"model", model_config_to_json(mc)}});
  return kExitOk;
}

inline int cmd_sample(const json& r, int threads) {
  const ModelParams mp = load_checkpoint(str(r, "checkpoint"));
  const Prior prior = prior_from_json(read_json_file(str(r, "prior")));
  SampleConfig sc;
  sc.n_steps = r.at("n_steps").get<int>();
  sc.n_samples = r.at("n_samples").get<int>();
  sc.seed = r.at("seed").get<std::uint64_t>();
  sc.q_mode = qmode_from_string(str(r, "q_mode"));
  sc.temperature = r.at("temperature").get<double>();
  sc.literal_temperature = r.at("literal_temperature").get<bool>();
  sc.fixed_size = r.at("fixed_size").get<int>();
  sc.threads = threads;
  sc.validate();
  const SampleResult res = sample(mp, prior, sc);
  const std::string out = str(r, "out");
  write_graphs(out, res.graphs);
  json m = sample_manifest(sc, checkpoint_hash(mp), file_hash(str(r, "prior")));
  m["samples_hash"] = file_hash(out);
  write_manifest(out, "sample", r, m);
  return kExitOk;
}

inline int cmd_guide(const json& r, int threads) {
  const ModelParams mp = load_checkpoint(str(r, "checkpoint"));
  const Prior prior = prior_from_json(read_json_file(str(r, "prior")));
  RewardFn reward = reward_builtin(str(r, "reward"), r.value("reward_params", json::object()));
  RLConfig c;
  c.alpha = r.at("alpha").get<double>();
  c.beta = r.at("beta").get<double>();
  c.temperature = r.at("temperature").get<double>();
  c.n_train = r.at("n_train").get<int>();
  c.trajectories = r.at("trajectories").get<int>();
  c.n_steps = r.at("n_steps").get<int>();
  c.seed = r.at("seed").get<std::uint64_t>();
  c.learning_rate = r.at("learning_rate").get<double>();
  c.grad_clip_norm = r.at("grad_clip_norm").get<double>();
  c.kl_ceiling = r.at("kl_ceiling").get<double>();
  c.include_final_step = r.at("include_final_step").get<bool>();
  c.reward_baseline = r.at("reward_baseline").get<bool>();
  c.threads = threads;
  c.validate();
  FinetuneOptions opt;
  opt.log_path = str(r, "log");
  const ModelParams tuned = finetune(mp, prior, reward, c, opt);
  const std::string out = str(r, "out");
  save_checkpoint(out, tuned);
  write_manifest(out, "guide", r,
                 {{"reference_checkpoint_hash", checkpoint_hash(mp)},
                  {"checkpoint_hash", checkpoint_hash(tuned)},
                  {"reward", {{"name", reward.name}, {"params", reward.params}}}});
  return kExitOk;
}

inline int cmd_eval(const json& r, int threads) {
  const std::vector<Graph> samples = read_graphs(str(r, "samples"));
  const std::vector<Graph> reference = read_graphs(str(r, "reference"));
  EvalConfig ec;
  ec.threads = threads;
  ec.degree_kernel.sigma = r.at("degree_sigma").get<double>();
  ec.clustering_kernel.sigma = r.at("clustering_sigma").get<double>();
  ec.orbit_kernel.sigma = r.at("orbit_sigma").get<double>();
  if (r.contains("valence")) {
    const json& v = r["valence"];
    require(v.is_array(), "--valence must be a JSON array of maximum valences per node category");
    for (std::size_t c = 0; c < v.size(); ++c) ec.valence[static_cast<int>(c)] = v[c].get<int>();
  }
  std::vector<Graph> train;
  if (r.contains("train")) train = read_graphs(str(r, "train"));
  json report = evaluate(samples, reference, ec, r.contains("train") ? &train : nullptr);
  std::string manifest_hash;
  const std::string sm = str(r, "samples") + ".manifest.json";
  if (std::filesystem::exists(sm)) manifest_hash = file_hash(sm);
  report["samples_manifest_hash"] = manifest_hash;
  report["samples_hash"] = file_hash(str(r, "samples"));
  report["reference_hash"] = file_hash(str(r, "reference"));
  report["config"] = r;
  const std::string out = str(r, "out");
  if (out.empty())
    std::cout << report.dump(2) << '\n';
  else
    write_json_file(out, report);
  return kExitOk;
}

inline int cmd_check(const json& r) {
  bool ok = true;
  for (const CheckResult& c : run_self_checks(r.at("seed").get<std::uint64_t>())) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " value=" << c.value << " threshold=" << c.threshold
              << '\n';
    ok &= c.passed;
  }
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace cli

/// Entry point of the flowgraph tool. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  using namespace cli;
  CLI::App app{"Discrete flow matching for categorical graphs"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CLI::App* dataset = app.add_subcommand("dataset", "synthetic datasets");
  dataset->require_subcommand(1);
  CLI::App* gen = dataset->add_subcommand("gen", "generate a dataset as JSON Lines");
  Command c_gen(gen, {{"kind", Kind::text, nullptr, "community-small or grid", true},
                      {"count", Kind::integer, 100, "number of graphs"},
                      {"seed", Kind::unsigned_integer, 0, "random seed"},
                      {"out", Kind::text, nullptr, "output JSON Lines path", true},
                      {"test_out", Kind::text, nullptr, "if set, split off a test file here"},
                      {"test_fraction", Kind::real, 0.2, "test share when splitting"},
                      {"min_nodes", Kind::integer, 12, "community-small smallest graph"},
                      {"max_nodes", Kind::integer, 20, "community-small largest graph"},
                      {"min_side", Kind::integer, 10, "grid smallest side"},
                      {"max_side", Kind::integer, 20, "grid largest side"}});

  std::vector<OptionSpec> train_specs{
      {"data", Kind::text, nullptr, "training graphs (JSON Lines)", true},
      {"out", Kind::text, nullptr, "final checkpoint path", true},
      {"prior_out", Kind::text, nullptr, "prior JSON path [default: <out>.prior.json]"},
      {"checkpoint_dir", Kind::text, nullptr, "directory for periodic checkpoints"},
      {"log", Kind::text, nullptr, "JSON Lines loss log"},
      {"steps", Kind::integer, 1000, "optimizer steps"},
      {"batch_size", Kind::integer, 32, "graphs per step"},
      {"learning_rate", Kind::real, 5e-4, "Adam learning rate"},
      {"edge_loss_weight", Kind::real, 5.0, "weight of the edge term"},
      {"coupling", Kind::text, "ot", "ot or independent"},
      {"lambda", Kind::real, 1.0, "edge weight in the Hamming cost"},
      {"seed", Kind::unsigned_integer, 0, "random seed"},
      {"checkpoint_interval", Kind::integer, 0, "steps between checkpoints (0 = final only)"},
      {"grad_clip_norm", Kind::real, 1.0, "global gradient norm clip"},
  };
  train_specs.insert(train_specs.end(), model_specs().begin(), model_specs().end());
  CLI::App* train = app.add_subcommand("train", "train the posterior network");
  Command c_train(train, train_specs);

  CLI::App* samp = app.add_subcommand("sample", "generate graphs from a checkpoint");
  Command c_sample(samp, {{"checkpoint", Kind::text, nullptr, "checkpoint path", true},
                          {"prior", Kind::text, nullptr, "prior JSON path", true},
                          {"out", Kind::text, nullptr, "output JSON Lines path", true},
                          {"n_steps", Kind::integer, 500, "Euler steps"},
                          {"n_samples", Kind::integer, 100, "graphs to generate"},
                          {"seed", Kind::unsigned_integer, 0, "random seed"},
                          {"q_mode", Kind::text, "point_mass", "point_mass or prior"},
                          {"temperature", Kind::real, 1.0, "kernel temperature"},
                          {"literal_temperature", Kind::boolean, false, "divide by T instead of tempering"},
                          {"fixed_size", Kind::integer, 0, "force every graph to this size (0 = draw)"}});

  CLI::App* guide = app.add_subcommand("guide", "reward-guided fine-tuning");
  Command c_guide(guide, {{"checkpoint", Kind::text, nullptr, "pretrained checkpoint", true},
                          {"prior", Kind::text, nullptr, "prior JSON path", true},
                          {"out", Kind::text, nullptr, "fine-tuned checkpoint path", true},
                          {"reward", Kind::text, nullptr, "edge_count_target, triangle_density or valence_validity",
                           true},
                          {"reward_params", Kind::object, json::object(), "reward parameters as JSON"},
                          {"alpha", Kind::real, 0.999, "reward weight"},
                          {"beta", Kind::real, 0.001, "KL weight"},
                          {"temperature", Kind::real, 1.0, "exploration temperature"},
                          {"n_train", Kind::integer, 500, "iterations"},
                          {"trajectories", Kind::integer, 16, "trajectories per iteration"},
                          {"n_steps", Kind::integer, 50, "Euler steps per trajectory"},
                          {"seed", Kind::unsigned_integer, 0, "random seed"},
                          {"learning_rate", Kind::real, 1e-4, "Adam learning rate"},
                          {"grad_clip_norm", Kind::real, 1.0, "global gradient norm clip"},
                          {"kl_ceiling", Kind::real, 1.0, "abort above this mean KL per dimension"},
                          {"include_final_step", Kind::boolean, true, "count the absorbing step"},
                          {"reward_baseline", Kind::boolean, false, "subtract the batch mean reward"},
                          {"log", Kind::text, nullptr, "JSON Lines reward/KL curve"}});

  CLI::App* ev = app.add_subcommand("eval", "compare samples with a reference set");
  Command c_eval(ev, {{"samples", Kind::text, nullptr, "generated graphs", true},
                      {"reference", Kind::text, nullptr, "reference graphs", true},
                      {"train", Kind::text, nullptr, "training graphs (enables novelty)"},
                      {"out", Kind::text, nullptr, "report path (default: stdout)"},
                      {"valence", Kind::object, nullptr, "max valence per node category, e.g. [4,2]"},
                      {"degree_sigma", Kind::real, 1.0, "degree kernel bandwidth"},
                      {"clustering_sigma", Kind::real, 1.0, "clustering kernel bandwidth"},
                      {"orbit_sigma", Kind::real, 1.0, "orbit kernel bandwidth"}});

  CLI::App* check = app.add_subcommand("check", "run the built-in oracle suite");
  Command c_check(check, {{"seed", Kind::unsigned_integer, 0, "random seed"}});

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n" << app.help();
    return kExitValidation;
  }

  try {
    if (gen->parsed()) return cmd_dataset(c_gen.resolve());
    if (train->parsed()) return cmd_train(c_train.resolve(), c_train.threads());
    if (samp->parsed()) return cmd_sample(c_sample.resolve(), c_sample.threads());
    if (guide->parsed()) return cmd_guide(c_guide.resolve(), c_guide.threads());
    if (ev->parsed()) return cmd_eval(c_eval.resolve(), c_eval.threads());
    if (check->parsed()) return cmd_check(c_check.resolve());
  } catch (const PreconditionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const CapacityError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  err << app.help();
  return kExitValidation;
}

}  // namespace flowgraph
