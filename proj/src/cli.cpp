#include "rsam/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "rsam/checkpoint.hpp"
#include "rsam/config_io.hpp"
#include "rsam/data.hpp"
#include "rsam/decoder.hpp"
#include "rsam/errors.hpp"
#include "rsam/metrics.hpp"
#include "rsam/model.hpp"
#include "rsam/plot.hpp"
#include "rsam/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rsam::cli {

namespace {

constexpr const char* kDataRootEnv = "RSAM_DATA_ROOT";

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<uint64_t> seed;
  bool deterministic = false;
  bool overwrite = false;
};

struct DataSection {
  std::string train_manifest;
  std::string eval_manifest;
  LoadOptions load;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataSection data;
  std::vector<double> fractions{0.01, 0.10, 0.30, 0.70};
};

void add_common(CLI::App* sub, CommonFlags& flags) {
  sub->add_option("--config", flags.config, "JSON config file");
  sub->add_option("--out", flags.out, "output directory")->required();
  sub->add_option("--seed", flags.seed, "seed for model init, shuffling and subsets");
  sub->add_flag("--deterministic", flags.deterministic, "single-threaded, seeded execution");
  sub->add_flag("--overwrite", flags.overwrite, "replace the contents of an existing output directory");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

json data_to_json(const DataSection& d) {
  return {{"train_manifest", d.train_manifest},
          {"eval_manifest", d.eval_manifest},
          {"normalize", d.load.normalize == NormalizePolicy::none ? "none" : "minmax"},
          {"resize_to", d.load.resize_to}};
}

void merge_data(const json& j, DataSection& d) {
  for (const auto& [key, value] : j.items()) {
    if (key == "train_manifest") {
      d.train_manifest = value.get<std::string>();
    } else if (key == "eval_manifest") {
      d.eval_manifest = value.get<std::string>();
    } else if (key == "normalize") {
      const auto v = value.get<std::string>();
      if (v != "minmax" && v != "none") throw ConfigError("data.normalize must be 'minmax' or 'none'");
      d.load.normalize = v == "none" ? NormalizePolicy::none : NormalizePolicy::per_patch_minmax;
    } else if (key == "resize_to") {
      d.load.resize_to = value.get<int64_t>();
    } else {
      throw ConfigError("unknown key '" + key + "' in data config");
    }
  }
}

RunConfig resolve(const CommonFlags& flags) {
  RunConfig rc;
  if (!flags.config.empty()) {
    const auto j = read_json_file(flags.config);
    if (!j.is_object()) throw ConfigError("config root must be an object");
    try {
      for (const auto& [key, value] : j.items()) {
        if (key == "model") {
          merge_json(value, rc.model);
        } else if (key == "train") {
          merge_json(value, rc.train);
        } else if (key == "data") {
          merge_data(value, rc.data);
        } else if (key == "fewshot") {
          rc.fractions = value.at("fractions").get<std::vector<double>>();
        } else if (key != "command") {
          throw ConfigError("unknown top-level config key '" + key + "'");
        }
      }
    } catch (const json::exception& e) {
      throw ConfigError("config " + flags.config + ": " + e.what());
    }
  }
  if (flags.seed) {
    rc.model.seed = *flags.seed;
    rc.train.seed = *flags.seed;
  }
  if (flags.deterministic) rc.train.deterministic = true;
  rc.model = rc.model.resolved();
  return rc;
}

void prepare_out_dir(const std::string& out, bool overwrite) {
  if (out.empty()) throw UsageError("--out is required");
  const fs::path dir(out);
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir)) throw DataError("output path " + out + " is not a directory");
    if (!fs::is_empty(dir)) {
      if (!overwrite) throw UsageError("output directory " + out + " is not empty; pass --overwrite");
      for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + out);
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw DataError("output directory " + out + " is not writable");
  }
  fs::remove(probe);
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_resolved(const fs::path& out, const std::string& command, const RunConfig& rc) {
  write_json({{"command", command},
              {"model", to_json(rc.model)},
              {"train", to_json(rc.train)},
              {"data", data_to_json(rc.data)},
              {"fewshot", {{"fractions", rc.fractions}}}},
             out / "resolved_config.json");
}

LoadOptions load_options_for(const RunConfig& rc) {
  auto load = rc.data.load;
  if (load.resize_to == 0) load.resize_to = rc.model.vit.image_size;
  return load;
}

DatasetManifest require_manifest(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("no ") + what + " manifest given");
  return read_manifest(path);
}

std::optional<DatasetManifest> optional_manifest(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return read_manifest(path);
}

struct RunResult {
  TrainReport report;
  MetricsReport micro;
  ParameterRegistry registry;
};

// Builds a fresh model, trains it and scores it on `eval` (or on the
// training manifest when there is no eval set).
RunResult train_and_score(const ModelConfig& model_config, const DatasetManifest& train,
                          const DatasetManifest* eval, const RunConfig& rc, const fs::path& dir) {
  auto model = build_model(model_config);
  RunResult r;
  r.registry = freeze_policy(*model, model_config.train_backbone);
  FitOptions options;
  options.load = load_options_for(rc);
  options.checkpoint_dir = dir;
  r.report = fit(*model, train, eval, rc.train, options);
  write_report_csv(r.report, dir / "train_report.csv");
  std::vector<double> losses;
  for (const auto& e : r.report.epochs) losses.push_back(e.mean_loss);
  plot_curve(losses, "training loss per epoch", dir / "loss_curve.png");

  const auto scores = evaluate(*model, eval ? *eval : train, options.load, rc.train.threshold);
  std::vector<ConfusionCounts> counts;
  for (const auto& s : scores) counts.push_back(s.counts);
  r.micro = aggregate(counts, Aggregation::micro);
  return r;
}

int cmd_prepare(const CommonFlags& flags, const std::string& kind_text, std::string input,
                int64_t patch, int64_t count, int64_t size, int64_t test_count) {
  const auto kind = parse_kind(kind_text);
  const uint64_t seed = flags.seed.value_or(0);
  prepare_out_dir(flags.out, flags.overwrite);
  const fs::path out(flags.out);

  DatasetManifest train, test;
  size_t scene_count = 0;
  if (kind == DatasetKind::synthetic) {
    const int64_t s = size > 0 ? size : patch;
    train = synthetic_fixture(count, s, seed);
    test = synthetic_fixture(test_count > 0 ? test_count : std::max<int64_t>(1, count / 4), s, seed + 1);
    test.split = Split::test;
    scene_count = train.records.size() + test.records.size();
  } else {
    if (input.empty()) {
      if (const char* env = std::getenv(kDataRootEnv)) input = env;
    }
    if (input.empty()) throw UsageError("--input is required (or set " + std::string(kDataRootEnv) + ")");
    const auto train_scenes = scan_scenes(kind, input, Split::train);
    train = build_manifest(kind, train_scenes, Split::train, patch);
    scene_count = train_scenes.size();
    const fs::path test_probe =
        kind == DatasetKind::cloud38 ? fs::path(input) / "test_red" : fs::path(input) / "test";
    if (fs::is_directory(test_probe)) {
      const auto test_scenes = scan_scenes(kind, input, Split::test);
      test = build_manifest(kind, test_scenes, Split::test, patch);
      scene_count += test_scenes.size();
    }
  }

  write_manifest(train, out / "train.jsonl");
  if (!test.records.empty()) write_manifest(test, out / "test.jsonl");
  std::ofstream index(out / "patch_index.csv");
  index << "split,id,scene,row,col,size\n";
  for (const auto* m : {&train, &test}) {
    for (const auto& r : m->records) {
      index << split_name(m->split) << ',' << r.id() << ',' << r.scene_id << ',' << r.row << ',' << r.col
            << ',' << r.size << '\n';
    }
  }
  if (!index) throw DataError("failed writing patch index");
  write_json({{"command", "prepare"}, {"kind", kind_name(kind)}, {"input", input}, {"patch", patch},
              {"count", count}, {"size", size}, {"test_count", test_count}, {"seed", seed}},
             out / "resolved_config.json");

  std::cout << "scenes: " << scene_count << '\n'
            << "train patches: " << train.records.size() << '\n'
            << "test patches: " << test.records.size() << '\n';
  return kExitOk;
}

int cmd_train(const CommonFlags& flags, RunConfig rc) {
  rc.train.validate();
  const auto train = require_manifest(rc.data.train_manifest, "training");
  const auto eval = optional_manifest(rc.data.eval_manifest);
  prepare_out_dir(flags.out, flags.overwrite);
  const fs::path out(flags.out);
  write_resolved(out, "train", rc);

  const auto r = train_and_score(rc.model, train, eval ? &*eval : nullptr, rc, out);
  write_json({{"final_loss", r.report.final_loss()},
              {"total_steps", r.report.total_steps},
              {"wall_seconds", r.report.wall_seconds},
              {"params_total", r.registry.total()},
              {"params_trainable", r.registry.trainable()},
              {"best_checkpoint", r.report.best_checkpoint ? r.report.best_checkpoint->string() : ""}},
             out / "summary.json");
  std::cout << "steps: " << r.report.total_steps << '\n'
            << "final loss: " << format_real(r.report.final_loss()) << '\n'
            << "jaccard: " << format_real(r.micro.jaccard) << '\n';
  return kExitOk;
}

int cmd_eval(const CommonFlags& flags, const RunConfig& rc, const std::string& checkpoint,
             const std::string& predictions, std::string manifest_path, const std::string& mode,
             double threshold) {
  if (checkpoint.empty() == predictions.empty()) {
    throw UsageError("eval needs exactly one of --checkpoint and --predictions");
  }
  if (mode != "micro" && mode != "macro") throw UsageError("--mode must be micro or macro");
  if (manifest_path.empty()) manifest_path = rc.data.eval_manifest;
  const auto manifest = require_manifest(manifest_path, "evaluation");
  prepare_out_dir(flags.out, flags.overwrite);
  const fs::path out(flags.out);
  write_resolved(out, "eval", rc);

  std::vector<ImageScore> scores;
  if (!checkpoint.empty()) {
    auto model = load_checkpoint(checkpoint);
    model->eval();
    auto load = rc.data.load;
    load.resize_to = model->config().vit.image_size;
    scores = evaluate(*model, manifest, load, threshold);
  } else {
    std::vector<std::string> missing;
    for (const auto& r : manifest.records) {
      if (!fs::exists(fs::path(predictions) / (r.id() + ".png"))) missing.push_back(r.id());
    }
    if (!missing.empty()) {
      std::string msg = "prediction set is missing " + std::to_string(missing.size()) + " ids:";
      for (size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
      throw DataError(msg);
    }
    for (const auto& r : manifest.records) {
      auto sample = load_patch(r, manifest.kind, rc.data.load);
      if (!sample.label.defined()) throw DataError("patch " + sample.id + " has no label");
      const auto pred = read_mask_png(fs::path(predictions) / (r.id() + ".png"));
      if (pred.sizes() != sample.label.sizes()) throw DataError("prediction " + r.id() + " has the wrong size");
      scores.push_back(ImageScore{sample.id, confusion(pred, sample.label)});
    }
  }
  write_metrics_csv(scores, out / "metrics.csv");

  std::vector<ConfusionCounts> counts;
  for (const auto& s : scores) counts.push_back(s.counts);
  const auto summary = aggregate(counts, mode == "micro" ? Aggregation::micro : Aggregation::macro);
  const auto& names = MetricsReport::column_names();
  const auto values = summary.values();
  std::cout << mode << ":";
  for (size_t i = 0; i < names.size(); ++i) std::cout << ' ' << names[i] << '=' << format_real(values[i]);
  std::cout << '\n';
  plot_bars(names, values, mode + " metrics", out / "metrics.png");
  return kExitOk;
}

int cmd_ablate(const CommonFlags& flags, RunConfig rc) {
  rc.train.validate();
  const auto train = require_manifest(rc.data.train_manifest, "training");
  const auto eval = optional_manifest(rc.data.eval_manifest);
  prepare_out_dir(flags.out, flags.overwrite);
  const fs::path out(flags.out);
  write_resolved(out, "ablate", rc);

  struct Variant {
    std::string name;
    bool fpe, fhfc, adapter_scale;
  };
  const std::vector<Variant> variants{{"full", true, true, true},
                                      {"no_fpe", false, true, true},
                                      {"no_fhfc", true, false, true},
                                      {"no_adapter_scale", true, true, false}};

  std::ofstream csv(out / "ablation.csv");
  if (!csv) throw DataError("cannot write ablation.csv");
  csv << "variant,use_fpe,use_fhfc,use_adapter_scale,params_total,params_trainable,final_train_loss";
  for (const auto& name : MetricsReport::column_names()) csv << ',' << name;
  csv << '\n';

  std::vector<std::string> labels;
  std::vector<double> jaccards;
  for (const auto& v : variants) {
    auto cfg = rc.model;
    cfg.use_fpe = v.fpe;
    cfg.use_fhfc = v.fhfc;
    cfg.use_adapter_scale = v.adapter_scale;
    const fs::path dir = out / v.name;
    fs::create_directories(dir);
    const auto r = train_and_score(cfg, train, eval ? &*eval : nullptr, rc, dir);
    csv << v.name << ',' << v.fpe << ',' << v.fhfc << ',' << v.adapter_scale << ',' << r.registry.total() << ','
        << r.registry.trainable() << ',' << format_real(r.report.final_loss());
    for (double m : r.micro.values()) csv << ',' << format_real(m);
    csv << '\n';
    labels.push_back(v.name);
    jaccards.push_back(r.micro.jaccard);
    std::cout << v.name << ": params " << r.registry.total() << ", loss " << format_real(r.report.final_loss())
              << ", jaccard " << format_real(r.micro.jaccard) << '\n';
  }
  if (!csv) throw DataError("failed writing ablation.csv");
  plot_bars(labels, jaccards, "ablation: Jaccard", out / "ablation.png");
  return kExitOk;
}

int cmd_fewshot(const CommonFlags& flags, RunConfig rc, const std::vector<double>& fraction_flag) {
  rc.train.validate();
  if (!fraction_flag.empty()) rc.fractions = fraction_flag;
  if (rc.fractions.empty()) throw UsageError("no few-shot fractions given");
  for (double f : rc.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw UsageError("few-shot fraction " + format_real(f) + " outside (0, 1]");
  }
  const auto train = require_manifest(rc.data.train_manifest, "training");
  const auto eval = optional_manifest(rc.data.eval_manifest);
  prepare_out_dir(flags.out, flags.overwrite);
  const fs::path out(flags.out);
  write_resolved(out, "fewshot", rc);

  std::ofstream csv(out / "fewshot.csv");
  if (!csv) throw DataError("cannot write fewshot.csv");
  csv << "fraction,records,total_steps,final_train_loss";
  for (const auto& name : MetricsReport::column_names()) csv << ',' << name;
  csv << '\n';

  std::vector<std::string> labels;
  std::vector<double> jaccards;
  for (double f : rc.fractions) {
    const auto subset = fewshot_subset(train, f, rc.train.seed);
    const std::string label = "fraction_" + format_real(f);
    std::ofstream ids(out / ("subset_" + format_real(f) + ".txt"));
    for (const auto& r : subset.records) ids << r.id() << '\n';
    if (!ids) throw DataError("failed writing subset ids");
    const fs::path dir = out / label;
    fs::create_directories(dir);
    write_manifest(subset, dir / "subset.jsonl");
    const auto r = train_and_score(rc.model, subset, eval ? &*eval : &train, rc, dir);
    csv << format_real(f) << ',' << subset.records.size() << ',' << r.report.total_steps << ','
        << format_real(r.report.final_loss());
    for (double m : r.micro.values()) csv << ',' << format_real(m);
    csv << '\n';
    labels.push_back(format_real(f));
    jaccards.push_back(r.micro.jaccard);
    std::cout << "fraction " << format_real(f) << ": " << subset.records.size() << " records, loss "
              << format_real(r.report.final_loss()) << ", jaccard " << format_real(r.micro.jaccard) << '\n';
  }
  if (!csv) throw DataError("failed writing fewshot.csv");
  plot_bars(labels, jaccards, "few-shot: Jaccard", out / "fewshot.png");
  return kExitOk;
}

int cmd_predict(const CommonFlags& flags, const RunConfig& rc, const std::string& checkpoint,
                std::string manifest_path, bool overlays, double threshold) {
  if (checkpoint.empty()) throw UsageError("predict needs --checkpoint");
  if (manifest_path.empty()) manifest_path = rc.data.eval_manifest;
  const auto manifest = require_manifest(manifest_path, "input");
  auto model = load_checkpoint(checkpoint);
  model->eval();
  prepare_out_dir(flags.out, flags.overwrite);
  const fs::path out(flags.out);
  write_resolved(out, "predict", rc);
  fs::create_directories(out / "masks");
  if (overlays) fs::create_directories(out / "overlays");
  set_deterministic(true, rc.train.seed);

  auto load = rc.data.load;
  load.resize_to = model->config().vit.image_size;
  const auto dtype = model->parameters().front().scalar_type();
  torch::NoGradGuard no_grad;
  for (const auto& record : manifest.records) {
    auto sample = load_patch(record, manifest.kind, load);
    auto logits = model->forward(sample.image.unsqueeze(0).to(dtype));
    if (record.size != logits.size(-1)) {
      logits = torch::nn::functional::interpolate(
          logits, torch::nn::functional::InterpolateFuncOptions()
                      .size(std::vector<int64_t>{record.size, record.size})
                      .mode(torch::kBilinear)
                      .align_corners(false));
    }
    const auto mask = logits_to_mask(logits, threshold)[0][0];
    write_mask_png(mask, out / "masks" / (record.id() + ".png"));
    if (overlays) {
      auto native = load_patch(record, manifest.kind, rc.data.load);
      save_overlay(native.image, native.label, mask, out / "overlays" / (record.id() + ".png"));
    }
  }
  std::cout << "masks written: " << manifest.records.size() << '\n';
  return kExitOk;
}

int fail(const std::exception& e, int code) {
  std::cerr << "error: " << e.what() << '\n';
  return code;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Adapter-tuned ViT segmentation for remote-sensing imagery"};
  app.require_subcommand(1);
  CommonFlags flags;

  std::string kind, input;
  int64_t patch = 64, count = 8, size = 0, test_count = 0;
  auto* prepare = app.add_subcommand("prepare", "tile a dataset into patch manifests");
  add_common(prepare, flags);
  prepare->add_option("--kind", kind, "inria | cloud38 | sentinel2-field | deepglobe-road | synthetic")->required();
  prepare->add_option("--input", input, "dataset root (default: $RSAM_DATA_ROOT)");
  prepare->add_option("--patch", patch, "patch size in pixels");
  prepare->add_option("--count", count, "synthetic: training patch count");
  prepare->add_option("--size", size, "synthetic: patch size (default --patch)");
  prepare->add_option("--test-count", test_count, "synthetic: test patch count");

  std::string train_manifest, eval_manifest;
  std::optional<int64_t> epochs, batch_size;
  std::optional<double> lr;
  auto add_training = [&](CLI::App* sub) {
    add_common(sub, flags);
    sub->add_option("--train-manifest", train_manifest, "training manifest");
    sub->add_option("--eval-manifest", eval_manifest, "evaluation manifest");
    sub->add_option("--epochs", epochs, "training epochs");
    sub->add_option("--batch-size", batch_size, "batch size");
    sub->add_option("--lr", lr, "peak learning rate");
  };
  auto* train = app.add_subcommand("train", "train a model");
  add_training(train);
  auto* ablate = app.add_subcommand("ablate", "train the four ablation variants");
  add_training(ablate);
  std::vector<double> fractions;
  auto* fewshot = app.add_subcommand("fewshot", "train on nested fractions of the training set");
  add_training(fewshot);
  fewshot->add_option("--fractions", fractions, "comma-separated fractions in (0, 1]")->delimiter(',');

  std::string checkpoint, predictions, manifest, mode = "micro";
  double threshold = 0.5;
  auto* eval = app.add_subcommand("eval", "score a checkpoint or a directory of predicted masks");
  add_common(eval, flags);
  eval->add_option("--checkpoint", checkpoint, "model checkpoint");
  eval->add_option("--predictions", predictions, "directory of <id>.png masks");
  eval->add_option("--manifest", manifest, "manifest to score");
  eval->add_option("--mode", mode, "summary aggregation: micro | macro");
  eval->add_option("--threshold", threshold, "sigmoid threshold");

  bool overlays = false;
  auto* predict = app.add_subcommand("predict", "write predicted masks");
  add_common(predict, flags);
  predict->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  predict->add_option("--manifest", manifest, "manifest to predict");
  predict->add_flag("--overlays", overlays, "also write image | truth | prediction panels");
  predict->add_option("--threshold", threshold, "sigmoid threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (prepare->parsed()) return cmd_prepare(flags, kind, input, patch, count, size, test_count);

    auto rc = resolve(flags);
    if (!train_manifest.empty()) rc.data.train_manifest = train_manifest;
    if (!eval_manifest.empty()) rc.data.eval_manifest = eval_manifest;
    if (epochs) rc.train.epochs = *epochs;
    if (batch_size) rc.train.batch_size = *batch_size;
    if (lr) rc.train.lr_max = *lr;
    if (train->parsed()) return cmd_train(flags, rc);
    if (ablate->parsed()) return cmd_ablate(flags, rc);
    if (fewshot->parsed()) return cmd_fewshot(flags, rc, fractions);
    if (eval->parsed()) return cmd_eval(flags, rc, checkpoint, predictions, manifest, mode, threshold);
    if (predict->parsed()) return cmd_predict(flags, rc, checkpoint, manifest, overlays, threshold);
    return kExitUsage;
  } catch (const UsageError& e) {
    return fail(e, kExitUsage);
  } catch (const ConfigError& e) {
    return fail(e, kExitUsage);
  } catch (const ParameterError& e) {
    return fail(e, kExitUsage);
  } catch (const DataError& e) {
    return fail(e, kExitData);
  } catch (const CheckpointError& e) {
    return fail(e, kExitData);
  } catch (const ImportError& e) {
    return fail(e, kExitData);
  } catch (const ShapeError& e) {
    return fail(e, kExitData);
  } catch (const fs::filesystem_error& e) {
    return fail(e, kExitData);
  } catch (const std::exception& e) {
    return fail(e, kExitRuntime);
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"rsam_cli"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace rsam::cli
