// Command-line front end.
//
// Subcommands:
//   train      fit a model on a directory dataset or the synthetic set
//   eval       score a checkpoint and emit a metrics report
//   describe   print per-module parameter and MAC counts for a config
//   gradcheck  run the finite-difference gradient suite
//   augment    write augmented variants of one image
//   project    2-D PCA of penultimate features for a checkpoint
//
// Exit codes: 0 success, 1 usage error, 2 validation failure,
// 3 I/O failure.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cers/augment.hpp"
#include "cers/config.hpp"
#include "cers/data.hpp"
#include "cers/gradcheck.hpp"
#include "cers/metrics.hpp"
#include "cers/model.hpp"
#include "cers/params.hpp"
#include "cers/train.hpp"

namespace {

using namespace cers;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::int64_t> seed;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args, bool with_seed) {
  cmd->add_option("--config", args.config_path,
                  "JSON config file (defaults to the 64x64 miniature preset)");
  cmd->add_option("--set", args.overrides, "Override a config key, e.g. --set epochs=5")
      ->take_all();
  if (with_seed)
    cmd->add_option("--seed", args.seed, "Override the config seed");
}

RunConfig resolve_config(const ConfigArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig::miniature()
                                           : RunConfig::from_file(args.config_path);
  for (const auto& kv : args.overrides) cfg.apply_override(kv);
  if (args.seed) cfg.train.seed = static_cast<std::uint32_t>(*args.seed);
  cfg.validate();
  return cfg;
}

struct DataArgs {
  std::string data_dir;
  bool synthetic = false;
};

void add_data_options(CLI::App* cmd, DataArgs& args, const char* synth_help) {
  auto* data = cmd->add_option("--data", args.data_dir,
                               "Dataset root with one subdirectory per class");
  auto* synth = cmd->add_flag("--synthetic", args.synthetic, synth_help);
  data->excludes(synth);
  synth->excludes(data);
}

Dataset resolve_dataset(const DataArgs& args, const RunConfig& cfg) {
  if (!args.synthetic && args.data_dir.empty())
    fail("no dataset given: pass --data DIR or --synthetic");
  Dataset ds = args.synthetic
                   ? generate_synthetic(cfg.train.synthetic_per_class,
                                        cfg.model.input_size, cfg.train.seed)
                   : load_image_dataset(args.data_dir, cfg.model.input_size,
                                        cfg.train.class_order);
  if (static_cast<Dim>(ds.class_names.size()) != cfg.model.num_classes)
    fail("dataset has " + std::to_string(ds.class_names.size()) +
         " classes but config num_classes=" + std::to_string(cfg.model.num_classes));
  return ds;
}

MetricsReport full_report(const EvalOutput<float>& ev, const Dataset& ds, Dim k,
                          std::vector<ClassCurves>* curves_out = nullptr) {
  auto cm = ConfusionMatrix::make(ev.truth, ev.pred, k, ds.class_names);
  auto rep = basic_metrics(cm);
  auto curves = curves_auc(ev.truth, ev.scores, k);
  attach_auc(rep, curves);
  if (curves_out) *curves_out = std::move(curves);
  return rep;
}

int run_train(const ConfigArgs& cargs, const DataArgs& dargs, const std::string& out,
              const std::string& log_path, const std::string& manifest_path) {
  RunConfig cfg = resolve_config(cargs);
  Dataset ds = resolve_dataset(dargs, cfg);
  SplitPlan plan{cfg.train.test_fraction, cfg.train.val_fraction, cfg.train.seed};
  auto split = split_dataset(ds, plan);
  if (!manifest_path.empty()) write_split_manifest(split, manifest_path);
  std::cout << "dataset: " << ds.samples.size() << " samples, "
            << ds.class_names.size() << " classes (train " << split.train.samples.size()
            << ", val " << split.val.samples.size() << ", test "
            << split.test.samples.size() << ")\n";
  if (ds.skipped) std::cout << "skipped " << ds.skipped << " unreadable files\n";

  Model model(cfg);
  std::cout << "model: " << model.params().total_parameters() << " parameters\n";
  auto res = fit(model, split.train, split.val, cfg, &std::cout);
  if (!log_path.empty()) write_train_log_csv(res.log, log_path);
  std::cout << "best val_acc " << res.best_val_acc << " at epoch " << res.best_epoch
            << "\n";

  auto ev = evaluate_model(model, split.test, cfg.train.batch_size);
  auto rep = full_report(ev, ds, cfg.model.num_classes);
  std::cout << "test_accuracy " << rep.overall_accuracy << " +- "
            << rep.ci95_half_width << "\n";
  if (!out.empty()) {
    save_checkpoint(model.params(), out);
    std::cout << "checkpoint written to " << out << "\n";
  }
  return kExitOk;
}

int run_eval(const ConfigArgs& cargs, const DataArgs& dargs, const std::string& ckpt,
             const std::string& report_path, const std::string& curves_prefix,
             std::optional<double> min_accuracy) {
  RunConfig cfg = resolve_config(cargs);
  Model model(cfg);
  load_checkpoint(model.params(), ckpt);

  Dataset ds = resolve_dataset(dargs, cfg);
  if (dargs.synthetic) {
    // Score the held-out portion so results match what train reported.
    SplitPlan plan{cfg.train.test_fraction, cfg.train.val_fraction, cfg.train.seed};
    ds = split_dataset(ds, plan).test;
  }
  auto ev = evaluate_model(model, ds, cfg.train.batch_size);
  std::vector<ClassCurves> curves;
  auto rep = full_report(ev, ds, cfg.model.num_classes, &curves);
  if (!curves_prefix.empty()) write_curves_csv(curves, curves_prefix);

  const std::string text = metrics_to_json(rep).dump(2);
  if (report_path.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream f(report_path, std::ios::trunc);
    if (!f) throw IoError("report: cannot write " + report_path);
    f << text << "\n";
    std::cout << "accuracy " << rep.overall_accuracy << " +- " << rep.ci95_half_width
              << " (" << ev.truth.size() << " samples), report written to "
              << report_path << "\n";
  }
  if (min_accuracy && rep.overall_accuracy < *min_accuracy) {
    std::cerr << "accuracy " << rep.overall_accuracy << " below required "
              << *min_accuracy << "\n";
    return kExitValidation;
  }
  return kExitOk;
}

int run_describe(const ConfigArgs& cargs) {
  RunConfig cfg = resolve_config(cargs);
  Model model(cfg);
  std::cout << model.describe().to_string() << "\n"
            << cfg.to_json().dump(2) << "\n";
  return kExitOk;
}

int run_gradcheck(const std::string& module, std::int64_t seed, bool broken) {
  auto suite = run_standard_gradient_suite(static_cast<std::uint32_t>(seed));
  if (broken) {
    // Self-test fixture: the closure reads the leaf through a detached copy,
    // so the recorded backward deliberately misses the dependency. The
    // checker must flag this case and the command must exit 2.
    Rng rng(static_cast<std::uint32_t>(seed));
    Tensor64 x({2, 3});
    fill_uniform(x, rng, -1.0, 1.0);
    Tensor64 xd = x.detach();
    auto fn = [xd]() { return sum(mul(xd, xd)); };
    suite.push_back({"fixture.broken-backward",
                     finite_diff_check({{"x", x}}, fn)});
  }
  int failures = 0, shown = 0;
  for (const auto& e : suite) {
    if (!module.empty() && e.name.find(module) == std::string::npos) continue;
    ++shown;
    const bool ok = e.result.pass();
    if (!ok) ++failures;
    std::cout << (ok ? "ok   " : "FAIL ") << e.name << "  max_rel_err "
              << e.result.max_rel_err;
    if (!ok) std::cout << "  (worst leaf " << e.result.worst_leaf << "["
                       << e.result.worst_index << "])";
    std::cout << "\n";
  }
  if (shown == 0) {
    std::cerr << "no gradient checks match module filter '" << module << "'\n";
    return kExitUsage;
  }
  std::cout << shown << " checks, " << failures << " failed\n";
  return failures == 0 ? kExitOk : kExitValidation;
}

int run_augment(const std::string& in, const std::string& out_dir, std::int64_t count,
                std::int64_t seed) {
  namespace fs = std::filesystem;
  if (count < 1) fail("augment: --count must be positive");
  std::string ext = fs::path(in).extension().string();
  for (auto& c : ext) c = static_cast<char>(::tolower(c));
  Tensor img;
  if (ext == ".pgm") img = load_pgm(in);
#ifdef CERS_WITH_PNG
  else if (ext == ".png") img = load_png(in);
#endif
  else throw IoError("augment: unsupported image type: " + in);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("augment: cannot create " + out_dir + ": " + ec.message());

  AugmentConfig acfg;  // stock ranges; tune via a config only where training does
  Rng rng(static_cast<std::uint32_t>(seed));
  for (std::int64_t i = 0; i < count; ++i) {
    auto p = sample_augmentation(rng, acfg);
    char name[32];
    std::snprintf(name, sizeof(name), "aug%03lld.pgm", static_cast<long long>(i));
    const std::string path = (fs::path(out_dir) / name).string();
    save_pgm(path, apply_augmentation(img, p));
    std::cout << name << " rotation " << p.rotation_deg << " shear " << p.shear_deg
              << " scale " << p.scale << " translate " << p.translate_x << ","
              << p.translate_y << " reflect " << (p.reflect_x ? "x" : "")
              << (p.reflect_y ? "y" : "") << "\n";
  }
  return kExitOk;
}

int run_project(const ConfigArgs& cargs, const DataArgs& dargs, const std::string& ckpt,
                const std::string& out_csv) {
  RunConfig cfg = resolve_config(cargs);
  Model model(cfg);
  load_checkpoint(model.params(), ckpt);
  Dataset ds = resolve_dataset(dargs, cfg);
  if (dargs.synthetic) {
    SplitPlan plan{cfg.train.test_fraction, cfg.train.val_fraction, cfg.train.seed};
    ds = split_dataset(ds, plan).test;
  }
  auto ev = evaluate_model(model, ds, cfg.train.batch_size);
  auto proj = feature_projection(ev.penultimate, ev.truth);
  write_projection_csv(proj, out_csv);
  std::cout << "projected " << proj.coords.size() << " samples, explained variance "
            << proj.explained_variance[0] << " " << proj.explained_variance[1]
            << ", written to " << out_csv << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid CNN-transformer image classifier"};
  app.require_subcommand(1);
  std::function<int()> action;

  // train
  ConfigArgs train_cfg;
  DataArgs train_data;
  std::string train_out = "model.ckpt", train_log, train_manifest;
  {
    auto* cmd = app.add_subcommand("train", "Fit a model and save a checkpoint");
    add_config_options(cmd, train_cfg, true);
    add_data_options(cmd, train_data, "Train on the built-in synthetic shape set");
    cmd->add_option("--out", train_out, "Checkpoint output path")
        ->capture_default_str();
    cmd->add_option("--log", train_log, "Write per-epoch CSV log here");
    cmd->add_option("--manifest", train_manifest, "Write the split manifest CSV here");
    cmd->callback([&] {
      action = [&] {
        return run_train(train_cfg, train_data, train_out, train_log, train_manifest);
      };
    });
  }

  // eval
  ConfigArgs eval_cfg;
  DataArgs eval_data;
  std::string eval_ckpt, eval_report, eval_curves;
  std::optional<double> eval_min_acc;
  {
    auto* cmd = app.add_subcommand("eval", "Score a checkpoint and write a report");
    add_config_options(cmd, eval_cfg, true);
    add_data_options(cmd, eval_data,
                     "Score the held-out split of the synthetic shape set");
    cmd->add_option("--ckpt", eval_ckpt, "Checkpoint to load")->required();
    cmd->add_option("--report", eval_report,
                    "Write the JSON metrics report here (default: stdout)");
    cmd->add_option("--curves", eval_curves, "Write ROC/PR CSV files under this prefix");
    cmd->add_option("--min-accuracy", eval_min_acc,
                    "Exit with code 2 if accuracy falls below this");
    cmd->callback([&] {
      action = [&] {
        return run_eval(eval_cfg, eval_data, eval_ckpt, eval_report, eval_curves,
                        eval_min_acc);
      };
    });
  }

  // describe
  ConfigArgs describe_cfg;
  {
    auto* cmd = app.add_subcommand("describe",
                                   "Print per-module parameter and MAC counts");
    add_config_options(cmd, describe_cfg, false);
    cmd->callback([&] {
      action = [&] { return run_describe(describe_cfg); };
    });
  }

  // gradcheck
  std::string gc_module;
  std::int64_t gc_seed = 42;
  bool gc_broken = false;
  {
    auto* cmd = app.add_subcommand(
        "gradcheck", "Check analytic gradients against central differences");
    cmd->add_option("--module", gc_module, "Only run checks whose name contains this");
    cmd->add_option("--seed", gc_seed, "Seed for the check inputs")
        ->capture_default_str();
    cmd->add_flag("--broken-fixture", gc_broken,
                  "Also run a deliberately wrong gradient (self-test; forces exit 2)");
    cmd->callback([&] {
      action = [&] { return run_gradcheck(gc_module, gc_seed, gc_broken); };
    });
  }

  // augment
  std::string aug_in, aug_out;
  std::int64_t aug_count = 8, aug_seed = 0;
  {
    auto* cmd = app.add_subcommand("augment", "Write augmented variants of one image");
    cmd->add_option("--in", aug_in, "Input image (.pgm or .png)")->required();
    cmd->add_option("--out", aug_out, "Output directory")->required();
    cmd->add_option("--count", aug_count, "Number of variants")->capture_default_str();
    cmd->add_option("--seed", aug_seed, "Sampling seed")->capture_default_str();
    cmd->callback([&] {
      action = [&] { return run_augment(aug_in, aug_out, aug_count, aug_seed); };
    });
  }

  // project
  ConfigArgs proj_cfg;
  DataArgs proj_data;
  std::string proj_ckpt, proj_out;
  {
    auto* cmd = app.add_subcommand(
        "project", "Write a 2-D PCA of penultimate features to CSV");
    add_config_options(cmd, proj_cfg, true);
    add_data_options(cmd, proj_data,
                     "Project the held-out split of the synthetic shape set");
    cmd->add_option("--ckpt", proj_ckpt, "Checkpoint to load")->required();
    cmd->add_option("--out", proj_out, "Output CSV path")->required();
    cmd->callback([&] {
      action = [&] { return run_project(proj_cfg, proj_data, proj_ckpt, proj_out); };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);  // --help and friends
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    return action ? action() : kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}
