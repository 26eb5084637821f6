// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "scale/data/splits.hpp"
#include "scale/model/config.hpp"
#include "scale/objectives/pretext.hpp"
#include "scale/objectives/simcl.hpp"

namespace scale {

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

// Every knob of one experiment. Full-scale reference values: learning rate
// 1e-4 with warm-up and linear decay, batch 64, 5 epochs, temperature 0.1.
struct RunConfig {
  CorpusConfig corpus;
  std::string corpus_path;  // load from disk instead of generating when set
  SplitFractions splits;
  std::uint64_t split_seed = 0;
  ModelConfig model;

  real mask_rate = 0.15;
  TableMaskMode table_mask_mode = TableMaskMode::Entity;
  bool bert_replacement = false;
  ContinuousLoss continuous_loss = ContinuousLoss::SquaredError;
  WeightMode simcl_mode = WeightMode::ScoreSoftmax;
  real temperature = 0.1;
  bool imcl = true;
  bool pretext = true;
  bool train_incomplete = true;  // false keeps only samples with every selected modality

  real lr = 5e-4;
  std::size_t warmup_steps = 20;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;

  std::size_t finetune_epochs = 3;
  real finetune_lr = 3e-4;
  std::size_t eval_batch_size = 64;
  std::size_t kmeans_max_iters = 100;
  std::size_t cluster_k = 0;  // 0 = number of distinct labels in the evaluated subset

  void validate() const {
    corpus.validate();
    splits.validate();
    if (!(mask_rate > 0 && mask_rate < 1)) throw std::invalid_argument("rate out of range");
    if (!(temperature > 0)) throw std::invalid_argument("temperature must be positive");
    if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
  }

  // Model config with corpus-derived sizes filled in; the initialization
  // seed follows the run seed.
  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.adopt_corpus(corpus);
    m.init_seed = derive_seed(seed, 0x1D17, model.init_seed);
    return m;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, corpus, corpus_path, splits, split_seed, model, mask_rate,
                                                table_mask_mode, bert_replacement, continuous_loss, simcl_mode,
                                                temperature, imcl, pretext, train_incomplete, lr, warmup_steps,
                                                batch_size, epochs, seed, checkpoint_dir, finetune_epochs, finetune_lr,
                                                eval_batch_size, kmeans_max_iters, cluster_k)

inline std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a(nlohmann::json(cfg).dump()); }
inline std::uint64_t config_hash(const ModelConfig& cfg) { return fnv1a(nlohmann::json(cfg).dump()); }

// Reads a JSON config; keys not present keep their defaults.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config " + path + " is not valid JSON: " + e.what());
  }
  return j.get<RunConfig>();
}

}  // namespace scale
