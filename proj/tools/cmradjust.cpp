// cmradjust: dataset generation, training, evaluation, recognition, batch
// correction and the HTTP service.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cmr/batch.hpp"
#include "cmr/dataset.hpp"
#include "cmr/service.hpp"
#include "cmr/train.hpp"
#include "cmr/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kModelEnv = "CMRADJUST_MODEL";

// Shared JSON config: {"train": {...}, "preprocess": {...}, "simple": {...},
// "multitask": {...}}; every section is optional.
struct FileConfig {
  cmr::TrainConfig train;
  cmr::PreprocConfig preprocess;
  cmr::SimpleCnnConfig simple;
  cmr::MultiTaskConfig multitask;
};

FileConfig load_config(const std::string& path) {
  FileConfig c;
  if (path.empty()) return c;
  const json j = json::parse(cmr::read_file_bytes(path));
  if (j.contains("train")) c.train = j.at("train").get<cmr::TrainConfig>();
  if (j.contains("preprocess")) c.preprocess = j.at("preprocess").get<cmr::PreprocConfig>();
  if (j.contains("simple")) c.simple = j.at("simple").get<cmr::SimpleCnnConfig>();
  if (j.contains("multitask")) c.multitask = j.at("multitask").get<cmr::MultiTaskConfig>();
  return c;
}

// --model wins; the environment variable fills in when the flag is absent.
std::string resolve_model(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kModelEnv)) return env;
  return {};
}

void print_epoch(const cmr::EpochRecord& r, bool as_json) {
  if (as_json) {
    std::cerr << json(r).dump() << "\n";
    return;
  }
  std::cerr << r.stage << " epoch " << r.epoch << ": train " << r.train_loss << ", val " << r.val_loss << ", acc "
            << r.val_accuracy;
  if (r.val_dice > 0) std::cerr << ", dice " << r.val_dice;
  std::cerr << " (" << r.seconds << " s)\n";
}

int run_gen(const cmr::DatasetSpec& spec, const std::string& out, bool as_json) {
  const auto records = cmr::write_dataset(out, spec);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& r : records) ++counts[r.split == "train" ? 0 : r.split == "val" ? 1 : 2];
  const json summary{{"output", out}, {"cases", records.size()}, {"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}};
  if (as_json) std::cout << summary.dump() << "\n";
  else std::cout << "wrote " << records.size() << " cases to " << out << " (" << counts[0] << "/" << counts[1] << "/" << counts[2] << ")\n";
  return 0;
}

struct TrainArgs {
  std::string kind = "simple";
  std::string data;
  std::string config;
  std::string out;
  std::string init;
  bool transfer = false;
  std::string metrics;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

int run_train(const TrainArgs& a, bool as_json) {
  FileConfig fc = load_config(a.config);
  if (a.seed) fc.train.seed = *a.seed;
  if (a.epochs) fc.train.epochs = *a.epochs;
  const json pre = fc.preprocess;
  const cmr::EpochCallback cb = [as_json](const cmr::EpochRecord& r) { print_epoch(r, as_json); };
  cmr::Metrics metrics;
  cmr::ad::Checkpoint ckpt;

  if (a.kind == "simple") {
    const auto data = cmr::load_dataset(a.data, cmr::SampleKind::Simple, fc.preprocess);
    if (a.transfer) {
      if (a.init.empty()) throw std::invalid_argument("--transfer needs --init with a pretrained simple model");
      const auto src = cmr::SimpleCnn::from_checkpoint(cmr::ad::load_checkpoint(a.init));
      auto r = cmr::transfer(src, data, fc.train, cb);
      metrics = r.metrics;
      ckpt = r.model.save_state({{"preprocess", pre}});
    } else {
      cmr::SimpleResult r = cmr::train_simple(fc.train, data, fc.simple, cb);
      metrics = r.metrics;
      ckpt = r.model.save_state({{"preprocess", pre}});
    }
  } else if (a.kind == "multitask") {
    if (a.transfer || !a.init.empty()) throw std::invalid_argument("--init/--transfer apply to the simple model only");
    const auto data = cmr::load_dataset(a.data, cmr::SampleKind::MultiTask, fc.preprocess);
    auto r = cmr::train_multitask(fc.train, data, fc.multitask, cb);
    if (!r.audit.ok()) throw cmr::TrainingError("stage-2 freeze audit failed");
    metrics = r.metrics;
    ckpt = r.model.save_state({{"preprocess", pre}});
  } else {
    throw std::invalid_argument("unknown model kind '" + a.kind + "'");
  }
  ckpt.card["train_config"] = fc.train;
  cmr::ad::save_checkpoint(ckpt, a.out);
  if (!a.metrics.empty()) {
    metrics.write_csv(a.metrics + ".csv");
    metrics.write_jsonl(a.metrics + ".jsonl");
  }
  json summary = metrics.to_json();
  summary.erase("history");
  summary["model"] = a.out;
  if (as_json) std::cout << summary.dump() << "\n";
  else std::cout << "saved " << a.out << "; held-out accuracy " << metrics.final.accuracy << "\n";
  return 0;
}

int run_eval(const std::string& model_path, const std::string& data_dir, const std::string& split, bool as_json) {
  const auto ckpt = cmr::ad::load_checkpoint(model_path);
  cmr::PreprocConfig pre;
  if (ckpt.card.contains("preprocess")) pre = ckpt.card.at("preprocess").get<cmr::PreprocConfig>();
  const bool simple = ckpt.card.value("model", "") == "simple";
  const auto data = cmr::load_dataset(data_dir, simple ? cmr::SampleKind::Simple : cmr::SampleKind::MultiTask, pre);
  const auto& samples = split == "train" ? data.train : split == "val" ? data.val : data.test;
  cmr::EvalResult r;
  if (simple) {
    r = cmr::evaluate(cmr::SimpleCnn::from_checkpoint(ckpt), samples);
  } else {
    std::vector<double> w = ckpt.card.contains("train_config")
                                ? ckpt.card.at("train_config").get<cmr::TrainConfig>().class_weights
                                : std::vector<double>{1, 1, 1, 1};
    r = cmr::evaluate(cmr::MultiTaskNet::from_checkpoint(ckpt), samples, w);
  }
  const json out{{"split", split},           {"samples", samples.size()},
                 {"accuracy", r.accuracy},   {"orientation_loss", r.orientation_loss},
                 {"dice", r.dice},           {"mean_dice", r.mean_dice}};
  if (as_json) std::cout << out.dump() << "\n";
  else std::cout << out.dump(2) << "\n";
  return 0;
}

int run_recognize(const std::string& model_path, const std::vector<std::string>& files, bool as_json) {
  const auto model = cmr::load_recognizer(model_path);
  int status = 0;
  for (const auto& f : files) {
    json line{{"input", f}};
    try {
      const auto r = cmr::recognize(cmr::read_volume(f), *model);
      line.update(cmr::to_json(r));
    } catch (const std::exception& e) {
      line["error"] = e.what();
      status = 2;
    }
    if (as_json) std::cout << line.dump() << "\n";
    else if (line.contains("error")) std::cout << f << ": error: " << line["error"].get<std::string>() << "\n";
    else std::cout << f << ": " << line["consensus"].get<std::string>() << " (confidence " << line["confidence"].get<double>() << ")\n";
  }
  return status;
}

int run_adjust(const std::string& model_flag, cmr::BatchOptions opts, bool as_json) {
  const std::string model = resolve_model(model_flag);
  if (model.empty()) {
    std::cerr << "error: no model given (use --model or " << kModelEnv << ")\n";
    return 1;
  }
  const cmr::BatchResult r = cmr::adjust_batch(opts, fs::path(model));
  if (r.exit_code == 1 && !r.fatal_error.empty()) {
    std::cerr << "error: " << r.fatal_error << "\n";
    return 1;
  }
  if (as_json) {
    std::cout << r.jsonl();
  } else {
    for (const auto& rep : r.reports) {
      std::cout << rep.input << ": " << cmr::to_string(rep.action);
      if (rep.recognition) std::cout << " (consensus " << rep.recognition->consensus.str() << ")";
      if (!rep.error.empty()) std::cout << ": " << rep.error;
      std::cout << "\n";
    }
  }
  return r.exit_code;
}

int run_serve(const std::string& model_flag, cmr::ServiceOptions opts) {
  std::shared_ptr<const cmr::OrientationRecognizer> model;
  const std::string path = resolve_model(model_flag);
  if (!path.empty()) model = cmr::load_recognizer(path);
  else std::cerr << "warning: no model loaded; prediction endpoints will answer 503\n";
  cmr::Service service(opts, model);
  const int port = service.bind();
  std::cerr << "listening on http://" << opts.host << ":" << port << "\n";
  service.listen();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Orientation recognition and standardization for cardiac MR slices"};
  app.require_subcommand(1);
  bool as_json = false;
  app.add_flag("--json", as_json, "Machine-readable output");

  cmr::DatasetSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-dataset", "Write a synthetic phantom dataset split into train/val/test");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", spec.count, "Number of cases")->check(CLI::Range(10, 1000000));
  gen->add_option("--seed", spec.seed, "Random seed");
  gen->add_option("--size", spec.size, "In-plane size in voxels")->check(CLI::Range(32, 4096));
  gen->add_option("--slices", spec.slices, "Slices per volume")->check(CLI::Range(1, 512));
  gen->add_option("--modality", spec.modality, "Intensity profile")->check(CLI::IsMember({"bssfp", "lge"}));
  gen->add_option("--spacing", spec.spacing, "In-plane spacing (mm)")->check(CLI::PositiveNumber);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a recognizer on a generated dataset");
  train->add_option("--model-kind", ta.kind, "simple or multitask")->check(CLI::IsMember({"simple", "multitask"}));
  train->add_option("--data", ta.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--config", ta.config, "JSON config file")->check(CLI::ExistingFile);
  train->add_option("--out", ta.out, "Checkpoint manifest to write (.json)")->required();
  train->add_option("--init", ta.init, "Pretrained checkpoint")->check(CLI::ExistingFile);
  train->add_flag("--transfer", ta.transfer, "Transfer --init to the dataset's modality");
  train->add_option("--metrics", ta.metrics, "Write <prefix>.csv and <prefix>.jsonl");
  train->add_option("--seed", ta.seed, "Override the config seed");
  train->add_option("--epochs", ta.epochs, "Override the epoch count")->check(CLI::PositiveNumber);

  std::string eval_model, eval_data, eval_split = "test";
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  eval->add_option("--model", eval_model, "Checkpoint manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", eval_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  std::string rec_model;
  std::vector<std::string> rec_files;
  auto* rec = app.add_subcommand("recognize", "Predict the orientation of volume files");
  rec->add_option("--model", rec_model, std::string("Checkpoint manifest (default $") + kModelEnv + ")");
  rec->add_option("files", rec_files, "Volume files")->required();

  std::string adj_model, adj_out, adj_report;
  cmr::BatchOptions bopts;
  auto* adj = app.add_subcommand("adjust", "Standardize every .nii/.nii.gz file in a folder");
  adj->add_option("folder", bopts.input, "Input folder")->required();
  adj->add_option("--model", adj_model, std::string("Checkpoint manifest (default $") + kModelEnv + ")");
  adj->add_flag("--in-place", bopts.in_place, "Rewrite files in place");
  adj->add_option("--out", adj_out, "Output folder (mirrors the input tree)");
  adj->add_flag("-r,--recursive", bopts.recursive, "Descend into subfolders");
  adj->add_option("--confidence-floor", bopts.confidence_floor, "Minimum consensus confidence")->check(CLI::Range(0.0, 1.0));
  adj->add_option("-j,--jobs", bopts.jobs, "Files processed concurrently")->check(CLI::Range(1, 256));
  adj->add_option("--report", adj_report, "Write the JSON-lines report here");

  std::string srv_model;
  cmr::ServiceOptions sopts;
  std::string srv_static;
  double max_upload_mb = 256;
  auto* srv = app.add_subcommand("serve", "Run the HTTP service");
  srv->add_option("--model", srv_model, std::string("Checkpoint manifest (default $") + kModelEnv + ")");
  srv->add_option("--host", sopts.host, "Bind address");
  srv->add_option("--port", sopts.port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  srv->add_option("--workdir", sopts.workdir, "Directory holding uploaded volumes");
  srv->add_option("--max-upload-mb", max_upload_mb, "Upload size cap")->check(CLI::PositiveNumber);
  srv->add_option("--static", srv_static, "Directory of UI files served at /")->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return run_gen(spec, gen_out, as_json);
    if (*train) return run_train(ta, as_json);
    if (*eval) return run_eval(eval_model, eval_data, eval_split, as_json);
    if (*rec) {
      const std::string model = resolve_model(rec_model);
      if (model.empty()) throw std::invalid_argument(std::string("no model given (use --model or ") + kModelEnv + ")");
      return run_recognize(model, rec_files, as_json);
    }
    if (*adj) {
      if (!adj_out.empty()) bopts.output_dir = adj_out;
      if (!adj_report.empty()) bopts.report_path = adj_report;
      return run_adjust(adj_model, bopts, as_json);
    }
    if (*srv) {
      sopts.max_upload_bytes = std::size_t(max_upload_mb * 1024 * 1024);
      if (!srv_static.empty()) sopts.static_dir = srv_static;
      return run_serve(srv_model, sopts);
    }
  } catch (const std::exception& e) {
    if (as_json) std::cout << json{{"error", e.what()}}.dump() << "\n";
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
