#pragma once

// End-to-end run plumbing shared by the command-line tool and the
// acceptance driver: data loading and splitting, model construction with an
// optional pretrained backbone, and training runs that write their
// artifacts to an output directory.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "refformer/checkpoint.hpp"
#include "refformer/dataset_io.hpp"
#include "refformer/hash.hpp"
#include "refformer/run_config.hpp"
#include "refformer/train.hpp"

namespace refformer {

template <class T>
struct SplitData {
  std::vector<GroundingSample> train_samples, val_samples;
  std::vector<PreparedSample<T>> train, val;
};

/// Samples from `data_path` if set, otherwise generated from (data_seed, data_count).
inline std::vector<GroundingSample> load_samples(const RunConfig& cfg) {
  if (!cfg.data_path.empty()) return read_dataset(cfg.data_path);
  return generate_dataset(cfg.data_seed, cfg.data_count);
}

template <class T>
SplitData<T> split_data(const std::vector<GroundingSample>& samples, const RunConfig& cfg) {
  const Split sp = dataset_split(samples.size(), cfg.data_seed);
  SplitData<T> d;
  for (std::size_t i : sp.train) d.train_samples.push_back(samples[i]);
  for (std::size_t i : sp.val) d.val_samples.push_back(samples[i]);
  d.train = prepare<T>(d.train_samples, cfg.model);
  d.val = prepare<T>(d.val_samples, cfg.model);
  return d;
}

/// SHA-256 over the float32 checkpoint encoding of the parameters under `prefix`.
template <class T>
std::string parameter_checksum(RefFormerModel<T>& model, const std::string& prefix) {
  return sha256_hex(encode_model(model, prefix));
}

/// Fresh model for `cfg`; when `backbone_bytes` is nonempty the backbone is
/// loaded from that checkpoint.
template <class T>
RefFormerModel<T> build_model(const ModelConfig& cfg, const std::string& backbone_bytes = {}) {
  RefFormerModel<T> m(cfg);
  if (!backbone_bytes.empty()) load_model(m, backbone_bytes, "backbone");
  return m;
}

/// Contrastive pretraining of a backbone; returns the backbone checkpoint.
template <class T>
std::string pretrain_backbone(const RunConfig& cfg, const std::vector<PreparedSample<T>>& data,
                              std::vector<double>* curve = nullptr) {
  RefFormerModel<T> m(cfg.model);
  PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.model.seed;
  const auto c = contrastive_pretrain(m, data, pc);
  if (curve) *curve = c;
  return encode_model(m, "backbone");
}

inline std::string epoch_checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu.rfck", epoch);
  return buf;
}

/// Trains `model` per `cfg`. With a nonempty `out_dir` it writes
/// config.txt, train_log.csv, one checkpoint per epoch, final.rfck and
/// report.json.
template <class T>
EvalReport run_training(RefFormerModel<T>& model, const SplitData<T>& data, const RunConfig& cfg,
                        const std::string& out_dir, TrainHooks<T> extra = {}) {
  namespace fs = std::filesystem;
  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file((fs::path(out_dir) / "config.txt").string(), cfg.to_text());
    log.open(fs::path(out_dir) / "train_log.csv", std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open training log in '" + out_dir + "'");
    write_step_log_header(log);
  }
  TrainHooks<T> hooks;
  hooks.on_step = [&](const StepLog& s) {
    if (log.is_open()) write_step_log(log, s);
    if (extra.on_step) extra.on_step(s);
  };
  hooks.on_epoch = [&](std::size_t epoch, const EvalReport& r) {
    if (!out_dir.empty()) {
      log.flush();
      write_file((fs::path(out_dir) / epoch_checkpoint_name(epoch)).string(), encode_model(model));
    }
    if (extra.on_epoch) extra.on_epoch(epoch, r);
  };
  const EvalReport report = train(model, data.train, data.val, cfg.train, hooks);
  if (!out_dir.empty()) {
    write_file((fs::path(out_dir) / "final.rfck").string(), encode_model(model));
    write_file((fs::path(out_dir) / "report.json").string(), report.to_json().dump(2) + "\n");
  }
  return report;
}

}  // namespace refformer
