// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/data/corpus_io.hpp"
#include "scale/train/evaluate.hpp"

namespace scale {

struct ExperimentData {
  CorpusConfig corpus_config;
  std::vector<ProductSample> corpus;
  Splits splits;
};

// Generates the corpus (or loads it from corpus_path) and draws the splits.
inline ExperimentData prepare_data(RunConfig& cfg) {
  ExperimentData d;
  if (!cfg.corpus_path.empty()) {
    LoadedCorpus lc = load_corpus(cfg.corpus_path);
    cfg.corpus = lc.config;
    d.corpus = std::move(lc.samples);
  } else {
    d.corpus = generate_corpus(cfg.corpus);
  }
  d.corpus_config = cfg.corpus;
  d.splits = make_splits(d.corpus, cfg.splits, cfg.split_seed);
  return d;
}

struct ExperimentOutcome {
  PretrainResult pretrain;
  MetricsReport report;
  std::uint64_t checkpoint_hash = 0;  // FNV-1a of the final encoded checkpoint
};

// Pretrains a fresh model on the train split and evaluates it. With
// `train = false` the randomly initialized model is evaluated instead.
inline ExperimentOutcome run_experiment(const RunConfig& cfg, const ExperimentData& data,
                                        const std::vector<std::string>& tasks, std::ostream* log = nullptr,
                                        bool train = true) {
  cfg.validate();
  ScaleModel model(cfg.resolved_model());
  ExperimentOutcome out;
  if (train) {
    const std::filesystem::path dir = cfg.checkpoint_dir;
    out.pretrain = pretrain(model, data.corpus, data.splits.train, cfg, log, dir);
  }
  out.checkpoint_hash = fnv1a(encode_checkpoint(model, out.pretrain.steps));
  out.report = evaluate(model, data.corpus, data.splits, tasks, cfg);
  return out;
}

struct AblationRow {
  std::string label;
  std::map<std::string, real> values;
};

struct AblationTable {
  std::string name;
  std::vector<std::string> columns;
  std::vector<AblationRow> rows;
  std::string footnote;

  nlohmann::json to_json() const {
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : rows) rj.push_back({{"label", r.label}, {"values", r.values}});
    return {{"record", "ablation"}, {"grid", name}, {"columns", columns}, {"rows", rj}, {"footnote", footnote}};
  }

  std::string to_text() const {
    std::ostringstream os;
    std::size_t w = 8;
    for (const auto& r : rows) w = std::max(w, r.label.size() + 2);
    os << std::left << std::setw(static_cast<int>(w)) << name;
    for (const auto& c : columns) os << std::right << std::setw(12) << c;
    os << '\n';
    for (const auto& r : rows) {
      os << std::left << std::setw(static_cast<int>(w)) << r.label;
      for (const auto& c : columns) {
        auto it = r.values.find(c);
        os << std::right << std::setw(12);
        if (it == r.values.end()) {
          os << "-";
        } else {
          os << std::fixed << std::setprecision(2) << 100.0 * it->second;
        }
      }
      os << '\n';
    }
    if (!footnote.empty()) os << "note: " << footnote << '\n';
    return os.str();
  }
};

// Accuracy from the linear probe, retrieval from coarse queries.
inline const std::vector<std::string>& table2_columns() {
  static const std::vector<std::string> cols{"Accuracy", "mAP@1", "mAP@5", "mAP@10", "Prec@1", "Prec@5", "Prec@10"};
  return cols;
}

inline AblationRow summarize(const std::string& label, const MetricsReport& rep) {
  AblationRow row;
  row.label = label;
  if (auto v = rep.find(kTaskClassification, "accuracy")) row.values["Accuracy"] = *v;
  for (std::size_t k : {1, 5, 10}) {
    if (auto v = rep.find(kTaskRetrievalCoarse, "mAP", k)) row.values["mAP@" + std::to_string(k)] = *v;
    if (auto v = rep.find(kTaskRetrievalCoarse, "Prec", k)) row.values["Prec@" + std::to_string(k)] = *v;
  }
  if (auto v = rep.find(kTaskCluster, "NMI")) row.values["NMI"] = *v;
  if (auto v = rep.find(kTaskCluster, "Purity")) row.values["Purity"] = *v;
  if (auto v = rep.find(kTaskCorrelation, "image_text_cosine")) row.values["ImgTxtCos"] = *v;
  return row;
}

inline const std::vector<std::string>& ablation_grids() {
  static const std::vector<std::string> grids{"table2-sweep", "table4-losses", "table5-mem", "table6-ttab"};
  return grids;
}

inline const std::vector<std::string>& table2_subsets() {
  static const std::vector<std::string> subsets{"T", "T,I", "T,I,Tab", "T,I,Tab,V", "T,I,Tab,V,A"};
  return subsets;
}

// One pretrain + evaluation per modality subset, shared seed and schedule.
inline AblationTable run_modality_sweep(const RunConfig& base, const ExperimentData& data,
                                        const std::vector<std::string>& subsets, std::ostream* log = nullptr) {
  AblationTable t;
  t.name = "table2-sweep";
  t.columns = table2_columns();
  for (const std::string& s : subsets) {
    RunConfig cfg = base;
    cfg.model.modalities = s;
    if (ModalitySet::parse(s).kinds().empty()) throw std::invalid_argument("modality subset is empty");
    const auto out = run_experiment(cfg, data, {kTaskRetrievalCoarse, kTaskClassification}, log);
    t.rows.push_back(summarize(ModalitySet::parse(s).to_string(), out.report));
  }
  return t;
}

inline AblationTable run_ablation(const std::string& grid, const RunConfig& base, const ExperimentData& data,
                                  std::ostream* log = nullptr) {
  const std::vector<std::string> tasks{kTaskRetrievalCoarse, kTaskClassification, kTaskCluster};
  std::vector<std::string> cols = table2_columns();
  cols.push_back("NMI");
  cols.push_back("Purity");
  AblationTable t;
  t.name = grid;
  t.columns = cols;
  auto cell = [&](const std::string& label, RunConfig cfg, bool train = true) {
    t.rows.push_back(summarize(label, run_experiment(cfg, data, tasks, log, train).report));
  };
  if (grid == "table2-sweep") {
    return run_modality_sweep(base, data, table2_subsets(), log);
  } else if (grid == "table4-losses") {
    RunConfig c = base;
    c.imcl = true;
    c.pretext = false;
    cell("IMCL only", c);
    c.imcl = false;
    c.pretext = true;
    cell("PRE only", c);
    c.imcl = true;
    cell("IMCL + PRE", c);
    cell("neither (control)", base, false);
    t.footnote =
        "training with neither IMCL nor PRE has no loss terms; that row is the randomly initialized model "
        "evaluated with the same protocol";
  } else if (grid == "table5-mem") {
    RunConfig c = base;
    c.table_mask_mode = TableMaskMode::Token;
    cell("MLM (token mask)", c);
    c.table_mask_mode = TableMaskMode::Entity;
    cell("MEM (entity mask)", c);
  } else if (grid == "table6-ttab") {
    RunConfig c = base;
    c.model.text_table = TextTableEncoding::Stacked;
    cell("T+Tab (stacked)", c);
    c.model.text_table = TextTableEncoding::Separate;
    cell("T/Tab (separate)", c);
  } else {
    throw std::invalid_argument("unknown ablation grid " + grid);
  }
  return t;
}

}  // namespace scale
