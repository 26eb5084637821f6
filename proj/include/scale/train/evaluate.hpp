// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/eval/cluster.hpp"
#include "scale/eval/probe.hpp"
#include "scale/eval/retrieval.hpp"
#include "scale/train/trainer.hpp"

#ifndef SCALE_CODE_VERSION
#define SCALE_CODE_VERSION "unknown"
#endif

// Metric records, one JSON object per line:
//   {"record":"metric","task":"retrieval-coarse","subset":"T,I","metric":"mAP","k":1,"value":0.41}
// `k` is present only for rank-cutoff metrics. A run manifest line
//   {"record":"manifest","format":"scale-metrics","version":1,"config":{...},
//    "config_hash":"...","seed":0,"code_version":"..."}
// precedes the records of each run.
namespace scale {

inline constexpr const char* kTaskRetrievalCoarse = "retrieval-coarse";
inline constexpr const char* kTaskRetrievalFine = "retrieval-fine";
inline constexpr const char* kTaskClassification = "classification";
inline constexpr const char* kTaskCluster = "cluster";
inline constexpr const char* kTaskCorrelation = "correlation";

inline const std::vector<std::string>& all_tasks() {
  static const std::vector<std::string> tasks{kTaskRetrievalCoarse, kTaskRetrievalFine, kTaskClassification,
                                              kTaskCluster, kTaskCorrelation};
  return tasks;
}

struct MetricRecord {
  std::string task;
  std::string subset;
  std::string metric;
  std::optional<std::size_t> k;
  real value = 0;
};

inline nlohmann::json to_json(const MetricRecord& r) {
  nlohmann::json j{{"record", "metric"}, {"task", r.task}, {"subset", r.subset}, {"metric", r.metric}};
  if (r.k) j["k"] = *r.k;
  j["value"] = r.value;
  return j;
}

struct MetricsReport {
  nlohmann::json manifest;
  std::vector<MetricRecord> records;

  std::optional<real> find(const std::string& task, const std::string& metric,
                           std::optional<std::size_t> k = std::nullopt) const {
    for (const auto& r : records) {
      if (r.task == task && r.metric == metric && r.k == k) return r.value;
    }
    return std::nullopt;
  }

  real get(const std::string& task, const std::string& metric, std::optional<std::size_t> k = std::nullopt) const {
    auto v = find(task, metric, k);
    if (!v) throw std::out_of_range("metric " + task + "/" + metric + " not in report");
    return *v;
  }

  void write(std::ostream& out) const {
    out << manifest.dump() << '\n';
    for (const auto& r : records) out << to_json(r).dump() << '\n';
  }
};

inline nlohmann::json run_manifest(const RunConfig& cfg) {
  return {{"record", "manifest"},     {"format", "scale-metrics"},      {"version", 1},
          {"config", cfg},            {"config_hash", hex64(config_hash(cfg))},
          {"seed", cfg.seed},         {"code_version", SCALE_CODE_VERSION}};
}

class MissingSplitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline const std::vector<std::size_t>& require_split(const std::vector<std::size_t>& ids, const std::string& task,
                                                     const char* split) {
  if (ids.empty()) throw MissingSplitError("task " + task + " requires split " + split + ", which is absent");
  return ids;
}

inline std::vector<std::size_t> labels_of(const std::vector<ProductSample>& corpus, const std::vector<std::size_t>& ids,
                                          bool instance) {
  std::vector<std::size_t> out;
  for (std::size_t id : ids) out.push_back(instance ? corpus.at(id).instance : corpus.at(id).category);
  return out;
}

// Runs the requested downstream tasks on fused features of `model`.
inline MetricsReport evaluate(const ScaleModel& model, const std::vector<ProductSample>& corpus, const Splits& splits,
                              const std::vector<std::string>& tasks, const RunConfig& cfg) {
  MetricsReport rep;
  rep.manifest = run_manifest(cfg);
  const std::string subset = model.config().modality_set().to_string();
  const std::size_t bs = cfg.eval_batch_size;
  auto add = [&](const std::string& task, const std::string& metric, std::optional<std::size_t> k, real v) {
    rep.records.push_back({task, subset, metric, k, v});
  };

  for (const std::string& task : tasks) {
    if (task == kTaskRetrievalCoarse || task == kTaskRetrievalFine) {
      const bool fine = task == kTaskRetrievalFine;
      const auto& q = require_split(fine ? splits.query_fg : splits.query_c, task, fine ? "query_fg" : "query_c");
      const auto& g = require_split(fine ? splits.gallery_fg : splits.gallery_c, task, fine ? "gallery_fg" : "gallery_c");
      const auto ql = labels_of(corpus, q, fine);
      const auto gl = labels_of(corpus, g, fine);
      const eval::RetrievalResult r =
          eval::retrieve(extract_features(model, corpus, q, bs), ql, extract_features(model, corpus, g, bs), gl, g);
      for (std::size_t k : r.ks) {
        add(task, "mAP", k, r.mean_ap.at(k));
        add(task, "Prec", k, r.mean_precision.at(k));
      }
      add(task, "chance_Prec", 1, eval::chance_precision_at_1(ql, gl));
      add(task, "scored_queries", std::nullopt, static_cast<real>(r.scored_queries));
      add(task, "skipped_queries", std::nullopt, static_cast<real>(r.skipped_queries));
    } else if (task == kTaskClassification) {
      const auto& tr = require_split(splits.classification_train, task, "classification_train");
      const auto& te = require_split(splits.classification_test, task, "classification_test");
      const eval::ProbeResult p = eval::linear_probe(extract_features(model, corpus, tr, bs), labels_of(corpus, tr, false),
                                                     extract_features(model, corpus, te, bs), labels_of(corpus, te, false));
      add(task, "accuracy", std::nullopt, p.accuracy);
      add(task, "unseen_class", std::nullopt, static_cast<real>(p.unseen_class));
    } else if (task == kTaskCluster) {
      const auto& te = require_split(splits.classification_test, task, "classification_test");
      const auto labels = labels_of(corpus, te, false);
      const std::size_t k =
          cfg.cluster_k ? cfg.cluster_k : std::set<std::size_t>(labels.begin(), labels.end()).size();
      const eval::ClusterResult c =
          eval::kmeans_cluster(extract_features(model, corpus, te, bs), labels, k, cfg.seed, cfg.kmeans_max_iters);
      add(task, "NMI", std::nullopt, c.nmi);
      add(task, "Purity", std::nullopt, c.purity);
    } else if (task == kTaskCorrelation) {
      const auto& g = require_split(splits.gallery_c, task, "gallery_c");
      if (!model.has_encoder(ModalityKind::Image) || !model.has_encoder(ModalityKind::Text)) continue;
      add(task, "image_text_cosine", std::nullopt, image_text_correlation(model, corpus, g, bs));
    } else {
      throw std::invalid_argument("unknown task " + task);
    }
  }
  return rep;
}

}  // namespace scale
