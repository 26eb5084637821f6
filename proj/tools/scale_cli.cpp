// SPDX-License-Identifier: Apache-2.0
// Command-line runner: gen-data, pretrain, finetune, eval, ablation, report.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "scale/data/corpus_io.hpp"
#include "scale/data/stats.hpp"
#include "scale/train/experiments.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scale;

namespace {

// Flags shared by every subcommand that builds a RunConfig. Unset flags
// leave the config file (or defaults) untouched.
struct Overrides {
  std::string config_path;
  std::string data_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, samples, warmup;
  std::optional<double> lr, mask_rate, temperature, rho, incomplete_rate, unimodal_rate;
  std::optional<std::string> modalities, table_mask, text_table, simcl_mode;
  bool no_imcl = false;
  bool no_pretext = false;
  bool exclude_incomplete = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "JSON run config (missing keys keep defaults)");
    app->add_option("-d,--data", data_dir, "corpus directory (default: $SCALE_DATA_ROOT/corpus if present)");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--warmup", warmup, "warm-up steps");
    app->add_option("--lr", lr, "peak learning rate");
    app->add_option("--samples", samples, "corpus size when generating");
    app->add_option("--rho", rho, "modality-correlation strength when generating");
    app->add_option("--incomplete-rate", incomplete_rate);
    app->add_option("--unimodal-rate", unimodal_rate);
    app->add_option("--mask-rate", mask_rate);
    app->add_option("--temperature", temperature);
    app->add_option("--modalities", modalities, "e.g. T,I,Tab or all");
    app->add_option("--table-mask", table_mask, "entity | token");
    app->add_option("--text-table", text_table, "separate | stacked");
    app->add_option("--simcl-mode", simcl_mode, "score-softmax | paper-literal");
    app->add_flag("--no-imcl", no_imcl, "drop the pairwise contrastive terms");
    app->add_flag("--no-pretext", no_pretext, "drop the masked-prediction terms");
    app->add_flag("--exclude-incomplete", exclude_incomplete, "train only on samples with every selected modality");
  }

  RunConfig build() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (epochs) cfg.epochs = *epochs;
    if (batch_size) cfg.batch_size = *batch_size;
    if (warmup) cfg.warmup_steps = *warmup;
    if (lr) cfg.lr = *lr;
    if (samples) cfg.corpus.num_samples = *samples;
    if (rho) cfg.corpus.rho = *rho;
    if (incomplete_rate) cfg.corpus.incomplete_rate = *incomplete_rate;
    if (unimodal_rate) cfg.corpus.unimodal_rate = *unimodal_rate;
    if (mask_rate) cfg.mask_rate = *mask_rate;
    if (temperature) cfg.temperature = *temperature;
    if (modalities) cfg.model.modalities = *modalities;
    if (table_mask) cfg.table_mask_mode = json(*table_mask).get<TableMaskMode>();
    if (text_table) cfg.model.text_table = json(*text_table).get<TextTableEncoding>();
    if (simcl_mode) cfg.simcl_mode = json(*simcl_mode).get<WeightMode>();
    if (no_imcl) cfg.imcl = false;
    if (no_pretext) cfg.pretext = false;
    if (exclude_incomplete) cfg.train_incomplete = false;
    if (!data_dir.empty()) {
      cfg.corpus_path = data_dir;
    } else if (cfg.corpus_path.empty()) {
      if (const char* root = std::getenv("SCALE_DATA_ROOT"); root && fs::exists(fs::path(root) / "corpus" / "manifest.json")) {
        cfg.corpus_path = (fs::path(root) / "corpus").string();
      }
    }
    return cfg;
  }
};

std::string default_data_out() {
  if (const char* root = std::getenv("SCALE_DATA_ROOT")) return (fs::path(root) / "corpus").string();
  return "corpus";
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const json& j) { open_out(path) << j.dump(2) << '\n'; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_gen_data(const Overrides& ov, const std::string& out_dir) {
  RunConfig cfg = ov.build();
  cfg.corpus.validate();
  const auto corpus = generate_corpus(cfg.corpus);
  save_corpus(out_dir, cfg.corpus, corpus);
  const auto st = corpus_stats(corpus);
  std::cout << json{{"record", "gen-data"},
                    {"dir", out_dir},
                    {"samples", st.num_samples},
                    {"incomplete_rate", st.incomplete_rate},
                    {"unimodal_rate", st.unimodal_rate}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_pretrain(const Overrides& ov, const std::string& out_dir) {
  RunConfig cfg = ov.build();
  cfg.checkpoint_dir = out_dir;
  ExperimentData data = prepare_data(cfg);
  cfg.validate();
  ScaleModel model(cfg.resolved_model());
  write_json(fs::path(out_dir) / "run.json", run_manifest(cfg));
  write_json(fs::path(out_dir) / "splits.json", data.splits);
  auto log = open_out(fs::path(out_dir) / "pretrain.jsonl");
  const PretrainResult r = pretrain(model, data.corpus, data.splits.train, cfg, &log, out_dir);
  const fs::path final_path = fs::path(out_dir) / "final.ckpt";
  save_checkpoint(final_path, model, r.steps);
  std::cout << json{{"record", "pretrain"},
                    {"steps", r.steps},
                    {"train_samples", r.train_samples},
                    {"first_total", r.first_total},
                    {"last_total", r.last_total},
                    {"checkpoint", final_path.string()},
                    {"checkpoint_hash", hex64(file_hash(final_path))}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_finetune(const Overrides& ov, const std::string& ckpt, const std::string& out_path) {
  RunConfig cfg = ov.build();
  ExperimentData data = prepare_data(cfg);
  cfg.validate();
  ScaleModel model(cfg.resolved_model());
  load_into(read_checkpoint(ckpt), model);
  std::size_t classes = cfg.corpus.num_categories;
  for (const auto& s : data.corpus) classes = std::max(classes, s.category + 1);
  const FinetuneResult r = finetune(model, data.corpus, data.splits.classification_train,
                                    data.splits.classification_test, classes, cfg);
  save_checkpoint(out_path, model, r.steps);
  std::cout << json{{"record", "finetune"},
                    {"steps", r.steps},
                    {"accuracy", r.accuracy},
                    {"untrained_head_accuracy", r.untrained_head_accuracy},
                    {"checkpoint", out_path}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_eval(const Overrides& ov, const std::string& ckpt, const std::string& tasks, const std::string& out_path) {
  RunConfig cfg = ov.build();
  ExperimentData data = prepare_data(cfg);
  auto model = load_model(ckpt);
  std::vector<std::string> list = tasks == "all" ? all_tasks() : split_list(tasks);
  const MetricsReport rep = evaluate(*model, data.corpus, data.splits, list, cfg);
  if (out_path.empty()) {
    rep.write(std::cout);
  } else {
    auto out = open_out(out_path);
    rep.write(out);
  }
  return 0;
}

int cmd_ablation(const Overrides& ov, const std::string& grid, const std::string& out_dir) {
  RunConfig cfg = ov.build();
  ExperimentData data = prepare_data(cfg);
  std::unique_ptr<std::ofstream> log;
  if (!out_dir.empty()) log = std::make_unique<std::ofstream>(open_out(fs::path(out_dir) / (grid + ".log.jsonl")));
  const AblationTable t = run_ablation(grid, cfg, data, log.get());
  if (!out_dir.empty()) write_json(fs::path(out_dir) / (grid + ".json"), t.to_json());
  std::cout << t.to_text();
  return 0;
}

void print_record(const json& j) {
  if (j.value("record", "") == "ablation") {
    std::cout << "grid " << j.at("grid").get<std::string>() << '\n';
    for (const auto& r : j.at("rows")) std::cout << "  " << r.at("label").get<std::string>() << ' ' << r.at("values").dump() << '\n';
    return;
  }
  if (j.value("record", "") != "metric") return;
  std::cout << std::left << std::setw(18) << j.at("task").get<std::string>() << std::setw(14)
            << j.at("subset").get<std::string>() << std::setw(18) << j.at("metric").get<std::string>() << std::setw(6)
            << (j.contains("k") ? std::to_string(j.at("k").get<std::size_t>()) : "-") << std::fixed
            << std::setprecision(4) << j.at("value").get<double>() << '\n';
}

// Prints metric records from JSONL files, or single JSON documents such as
// ablation tables, as one aligned table.
int cmd_report(const std::vector<std::string>& files) {
  std::cout << std::left << std::setw(18) << "task" << std::setw(14) << "subset" << std::setw(18) << "metric"
            << std::setw(6) << "k" << "value\n";
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw std::runtime_error("cannot open " + f);
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (json::accept(text)) {
      print_record(json::parse(text));
      continue;
    }
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
      if (!line.empty()) print_record(json::parse(line));
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scale: multi-modal pretraining experiments"};
  app.require_subcommand(1);

  Overrides ov;
  std::string out, ckpt, tasks = "all", grid;
  std::vector<std::string> files;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus directory");
  ov.attach(gen);
  gen->add_option("-o,--out", out, "output directory (default: $SCALE_DATA_ROOT/corpus or ./corpus)");

  auto* pre = app.add_subcommand("pretrain", "pretrain and write checkpoints plus a loss log");
  ov.attach(pre);
  pre->add_option("-o,--out", out, "run directory")->required();

  auto* fin = app.add_subcommand("finetune", "finetune a checkpoint on the classification split");
  ov.attach(fin);
  fin->add_option("--checkpoint", ckpt)->required();
  fin->add_option("-o,--out", out, "output checkpoint path")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ov.attach(ev);
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--tasks", tasks, "comma list of retrieval-coarse,retrieval-fine,classification,cluster,correlation or all");
  ev->add_option("-o,--out", out, "metrics JSONL path (default: stdout)");

  auto* abl = app.add_subcommand("ablation", "run an ablation grid");
  ov.attach(abl);
  abl->add_option("--grid", grid, "table2-sweep | table4-losses | table5-mem | table6-ttab")->required();
  abl->add_option("-o,--out", out, "directory for the table JSON and logs");

  auto* rep = app.add_subcommand("report", "print metric records");
  rep->add_option("files", files, "metrics JSONL files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(ov, out.empty() ? default_data_out() : out);
    if (*pre) return cmd_pretrain(ov, out);
    if (*fin) return cmd_finetune(ov, ckpt, out);
    if (*ev) return cmd_eval(ov, ckpt, tasks, out);
    if (*abl) return cmd_ablation(ov, grid, out);
    if (*rep) return cmd_report(files);
  } catch (const NumericError& e) {
    std::cerr << json{{"error", "numeric"}, {"message", e.what()}}.dump() << '\n';
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << json{{"error", "checkpoint"}, {"message", e.what()}}.dump() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "runtime"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 1;
}
