// refformer: data generation, pretraining, training, evaluation, ablation
// sweeps and attention dumps for the synthetic grounding task.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "refformer/attention_dump.hpp"
#include "refformer/workflow.hpp"

namespace {

using namespace refformer;
using Real = float;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::string data_path;
  std::vector<std::string> sets;
  std::optional<std::string> strategy, direction, qa_layers, fusion_layers;
  std::optional<std::size_t> nq, epochs;
  std::optional<std::uint64_t> seed;
  std::optional<bool> freeze;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key = value config file");
    app->add_option("--data", data_path, "dataset file (generated from data_seed/data_count when absent)");
    app->add_option("--set", sets, "override one config key (key=value); repeatable");
    app->add_option("--strategy", strategy, "referential|random-init|linguistic|zero");
    app->add_option("--direction", direction, "both|image-only|text-only|none");
    app->add_option("--qa-layers", qa_layers, "comma-separated QA insertion layers, empty for none");
    app->add_option("--fusion-layers", fusion_layers, "comma-separated fusion layers");
    app->add_option("--nq", nq, "number of queries");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--seed", seed, "model and training seed");
    app->add_option("--freeze", freeze, "freeze the backbone (true|false)");
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path.empty()) {
      std::string text;
      try {
        text = read_file(config_path);
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
      c = RunConfig::parse(text);
    }
    if (!data_path.empty()) c.data_path = data_path;
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      c.set(RunConfig::trim(kv.substr(0, eq)), RunConfig::trim(kv.substr(eq + 1)));
    }
    if (strategy) c.set("strategy", *strategy);
    if (direction) c.set("direction", *direction);
    if (qa_layers) c.set("qa_layers", qa_layers->empty() ? "none" : *qa_layers);
    if (fusion_layers) c.set("fusion_layers", *fusion_layers);
    if (nq) c.model.num_queries = *nq;
    if (epochs) c.train.epochs = *epochs;
    if (seed) {
      c.model.seed = *seed;
      c.train.seed = *seed;
    }
    if (freeze) c.train.freeze_backbone = *freeze;
    c.validate();
    return c;
  }
};

std::string strategy_label(QueryStrategy s) {
  if (s == QueryStrategy::kLinguistic) return "linguistic-embedding (replicated projected global text token)";
  return to_string(s);
}

const std::vector<PreparedSample<Real>>& pick_split(const SplitData<Real>& d, const std::string& split,
                                                    std::vector<PreparedSample<Real>>& all) {
  if (split == "val") return d.val;
  if (split == "train") return d.train;
  all = d.train;
  all.insert(all.end(), d.val.begin(), d.val.end());
  return all;
}

int cmd_gen_data(std::uint64_t seed, std::size_t count, const std::string& out, bool seeds_only) {
  const auto samples = generate_dataset(seed, count);
  const std::string text = serialize_dataset(samples, GeneratorConfig{}.image_size, seeds_only);
  write_file(out, text);
  std::cout << sha256_hex(text) << "  " << out << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, const std::string& out) {
  const auto data = split_data<Real>(load_samples(cfg), cfg);
  std::vector<double> curve;
  const std::string bytes = pretrain_backbone<Real>(cfg, data.train, &curve);
  write_file(out, bytes);
  RefFormerModel<Real> m = build_model<Real>(cfg.model, bytes);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min<std::size_t>(16, data.val.size()); ++i) idx.push_back(i);
  nlohmann::ordered_json j;
  j["loss_curve"] = curve;
  j["retrieval_accuracy"] = retrieval_accuracy(m, make_batch(data.val, idx, cfg.model, false, true));
  j["retrieval_batch"] = idx.size();
  j["checkpoint"] = out;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& backbone) {
  const auto data = split_data<Real>(load_samples(cfg), cfg);
  RefFormerModel<Real> m = build_model<Real>(cfg.model, backbone.empty() ? std::string() : read_file(backbone));
  TrainHooks<Real> hooks;
  hooks.on_epoch = [](std::size_t epoch, const EvalReport& r) {
    std::fprintf(stderr, "epoch %zu loss %.5f prec@0.5 %.4f\n", epoch, r.loss_curve.back(), r.prec_at_05);
  };
  const EvalReport r = run_training(m, data, cfg, cfg.out_dir, hooks);
  nlohmann::ordered_json j = r.to_json();
  j["strategy"] = strategy_label(cfg.model.strategy);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& split) {
  const auto data = split_data<Real>(load_samples(cfg), cfg);
  RefFormerModel<Real> m(cfg.model);
  load_model(m, read_file(checkpoint));
  std::vector<PreparedSample<Real>> all;
  nlohmann::ordered_json j = evaluate(m, pick_split(data, split, all)).to_json();
  j["strategy"] = strategy_label(cfg.model.strategy);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_dump_attn(const RunConfig& cfg, const std::string& checkpoint, std::size_t sample, const std::string& out,
                  const std::string& split) {
  const auto data = split_data<Real>(load_samples(cfg), cfg);
  RefFormerModel<Real> m(cfg.model);
  load_model(m, read_file(checkpoint));
  std::vector<PreparedSample<Real>> all;
  const AttentionDump d = dump_attention(m, pick_split(data, split, all), sample);
  write_file(out, d.to_json().dump(1) + "\n");
  return 0;
}

/// Trains one model per (value, seed) along a single ablation axis and writes
/// axis,value,seed,epoch,prec@0.5,loss,status rows. Identical effective
/// configurations are trained once and reported under every label.
int cmd_sweep(const RunConfig& base, const std::string& axis, const std::vector<std::string>& values,
              const std::vector<std::uint64_t>& seeds, const std::string& backbone, const std::string& out) {
  static const std::map<std::string, std::string> keys = {
      {"qa-layers", "qa_layers"}, {"direction", "direction"}, {"strategy", "strategy"},
      {"fusion-layers", "fusion_layers"}, {"nq", "num_queries"}};
  const auto key = keys.find(axis);
  if (key == keys.end()) throw UsageError("unknown sweep axis '" + axis + "'");
  const auto data = split_data<Real>(load_samples(base), base);
  const std::string backbone_bytes = backbone.empty() ? std::string() : read_file(backbone);
  std::ofstream csv(out, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot open '" + out + "' for writing");
  csv << "axis,value,seed,epoch,prec@0.5,loss,status\n";
  std::map<std::string, std::vector<std::pair<double, double>>> done;
  int status = 0;
  for (const auto& value : values) {
    for (std::uint64_t seed : seeds) {
      RunConfig c = base;
      c.set(key->second, value.empty() ? "none" : value);
      c.model.seed = seed;
      c.train.seed = seed;
      c.validate();
      const std::string label = value.empty() ? "none" : value;
      auto it = done.find(c.to_text());
      std::string state = "ok";
      if (it == done.end()) {
        std::vector<std::pair<double, double>> curve;
        try {
          RefFormerModel<Real> m = build_model<Real>(c.model, backbone_bytes);
          const EvalReport r = train(m, data.train, data.val, c.train);
          for (std::size_t e = 0; e < r.accuracy_curve.size(); ++e) curve.emplace_back(r.accuracy_curve[e], r.loss_curve[e]);
        } catch (const TrainingDiverged& e) {
          std::fprintf(stderr, "%s=%s seed %llu diverged: %s\n", axis.c_str(), label.c_str(),
                       static_cast<unsigned long long>(seed), e.what());
          state = "diverged";
          status = 2;
        }
        it = done.emplace(c.to_text(), curve).first;
      }
      if (it->second.empty()) state = "diverged";
      for (std::size_t e = 0; e < it->second.size(); ++e) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f", e + 1, it->second[e].first, it->second[e].second);
        csv << axis << ",\"" << label << "\"," << seed << ',' << buf << ',' << state << '\n';
      }
      if (it->second.empty()) csv << axis << ",\"" << label << "\"," << seed << ",0,nan,nan," << state << '\n';
      csv.flush();
      std::fprintf(stderr, "%s=%s seed %llu: %s\n", axis.c_str(), label.c_str(),
                   static_cast<unsigned long long>(seed), state.c_str());
    }
  }
  return status;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(RunConfig::trim(item));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"refformer: referring-expression grounding on a synthetic shapes task"};
  app.require_subcommand(1);

  std::uint64_t gen_seed = 0;
  std::size_t gen_count = 0;
  std::string gen_out;
  bool seeds_only = false;
  auto* gen = app.add_subcommand("gen-data", "generate a dataset and print its SHA-256");
  gen->add_option("--seed", gen_seed, "dataset seed")->required();
  gen->add_option("--count", gen_count, "number of samples")->required();
  gen->add_option("--out", gen_out, "output path")->required();
  gen->add_flag("--seeds-only", seeds_only, "store seeds instead of pixels");

  CommonOptions pre_opts, train_opts, eval_opts, dump_opts, sweep_opts;
  std::string pre_out, checkpoint, out_dir, split = "val", dump_out, sweep_axis, sweep_values, sweep_out;
  std::string sweep_seeds = "0";
  std::size_t sample = 0;

  auto* pre = app.add_subcommand("pretrain", "contrastive backbone pretraining");
  pre_opts.attach(pre);
  pre->add_option("--out", pre_out, "backbone checkpoint path")->required();

  auto* tr = app.add_subcommand("train", "train a grounding model");
  train_opts.attach(tr);
  tr->add_option("--checkpoint", checkpoint, "pretrained backbone checkpoint");
  tr->add_option("--out-dir", out_dir, "output directory (overrides out_dir)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; prints a JSON report");
  eval_opts.attach(ev);
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ev->add_option("--split", split, "val|train|all")->check(CLI::IsMember({"val", "train", "all"}));

  auto* dump = app.add_subcommand("dump-attn", "write per-layer query attention maps as JSON");
  dump_opts.attach(dump);
  dump->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  dump->add_option("--sample", sample, "sample index within the split")->required();
  dump->add_option("--out", dump_out, "output JSON path")->required();
  dump->add_option("--split", split, "val|train|all")->check(CLI::IsMember({"val", "train", "all"}));

  auto* sw = app.add_subcommand("sweep", "ablation sweep along one axis; writes a CSV");
  sweep_opts.attach(sw);
  sw->add_option("--axis", sweep_axis, "qa-layers|direction|strategy|fusion-layers|nq")->required();
  sw->add_option("--values", sweep_values, "values separated by ';' (an empty value means none)")->required();
  sw->add_option("--seeds", sweep_seeds, "comma-separated seeds");
  sw->add_option("--checkpoint", checkpoint, "pretrained backbone checkpoint");
  sw->add_option("--out", sweep_out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(gen_seed, gen_count, gen_out, seeds_only);
    if (*pre) return cmd_pretrain(pre_opts.resolve(), pre_out);
    if (*tr) {
      RunConfig c = train_opts.resolve();
      if (!out_dir.empty()) c.out_dir = out_dir;
      return cmd_train(c, checkpoint);
    }
    if (*ev) return cmd_eval(eval_opts.resolve(), checkpoint, split);
    if (*dump) return cmd_dump_attn(dump_opts.resolve(), checkpoint, sample, dump_out, split);
    if (*sw) {
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_list(sweep_seeds, ','))
        if (!s.empty()) seeds.push_back(RunConfig::parse_uint(s));
      if (seeds.empty()) throw UsageError("--seeds must list at least one seed");
      return cmd_sweep(sweep_opts.resolve(), sweep_axis, split_list(sweep_values, ';'), seeds, checkpoint, sweep_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
