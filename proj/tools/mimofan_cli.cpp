// Command-line front end: synthetic data, training, cross validation,
// ablation, evaluation, prediction and gradient verification.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include "mimofan/mimofan.hpp"

namespace fs = std::filesystem;
using namespace mimofan;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2, kVerification = 3 };

struct TrainFlags {
  std::string manifest;
  std::string arch = "mimofan";
  bool dcc = true;
  bool dps = true;
  bool sf = true;
  int filters = 16;
  int scales = kDefaultScales;
  int epochs = 50;
  int batch = 4;
  double lr = 1e-3;
  double w_background = 0.2;
  double w_foreground = 1.2;
  std::uint64_t seed = 0;
  int folds = 5;
  std::uint64_t split_seed = 0;
  std::string out;
  bool quiet = false;

  TrainRunConfig resolve() const {
    TrainRunConfig config;
    config.epochs = epochs;
    config.batch_size = batch;
    config.seed = seed;
    config.lr = lr;
    config.network.arch = parse_arch(arch);
    config.network.scales = scales;
    config.network.base_filters = filters;
    config.network.toggles = Toggles{dcc, dps, sf};
    config.weights = ClassWeights{w_background, w_foreground};
    config.manifest = manifest;
    config.output_dir = out;
    config.validate();
    return config;
  }
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_folds) {
  cmd->add_option("--manifest", f.manifest, "Dataset manifest CSV (case_id,image,mask)")->required();
  cmd->add_option("--arch", f.arch, "Architecture: mimofan, unet or resunet")->capture_default_str();
  cmd->add_flag("--dcc,!--no-dcc", f.dcc, "Dense cross-scale connections (mimofan)")->capture_default_str();
  cmd->add_flag("--dps,!--no-dps", f.dps, "Deep pyramid supervision (mimofan)")->capture_default_str();
  cmd->add_flag("--sf,!--no-sf", f.sf, "Scale fusing at inference (mimofan)")->capture_default_str();
  cmd->add_option("--filters", f.filters, "Base filter count F")->capture_default_str();
  cmd->add_option("--scales", f.scales, "Number of pyramid scales S")->capture_default_str();
  cmd->add_option("--epochs", f.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch", f.batch, "Mini-batch size")->capture_default_str();
  cmd->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
  cmd->add_option("--w-bg", f.w_background, "Background class weight")->capture_default_str();
  cmd->add_option("--w-fg", f.w_foreground, "Foreground class weight")->capture_default_str();
  cmd->add_option("--seed", f.seed, "Initialisation and shuffling seed")->capture_default_str();
  cmd->add_option("--split-seed", f.split_seed, "Fold assignment seed")->capture_default_str();
  if (with_folds) cmd->add_option("--folds", f.folds, "Number of cross-validation folds")->capture_default_str();
  cmd->add_option("--out", f.out, "Output directory")->required();
  cmd->add_flag("--quiet", f.quiet, "Suppress per-epoch progress on stderr");
}

ProgressFn progress_printer(bool quiet) {
  if (quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

void print_report_summary(const std::string& label, const EvalReport& report) {
  std::cout << label << ": cases=" << report.cases.size() << std::fixed << std::setprecision(4)
            << " average_dice=" << report.average_dice << " global_dice=" << report.global_dice << '\n';
  std::cout.unsetf(std::ios::floatfield);
}

void require_manifest(const std::string& path) {
  if (!fs::exists(path)) throw IoError("manifest not found: " + path);
}

int cmd_synth(int cases, int size, std::uint64_t seed, const std::string& out) {
  std::cout << "config: cases=" << cases << " size=" << size << " seed=" << seed << " out=" << out << '\n';
  const DatasetManifest manifest = synth_dataset(cases, size, seed, out);
  std::cout << "wrote " << manifest.rows.size() << " cases; manifest " << manifest.path.string() << '\n';
  return kOk;
}

int cmd_train(const TrainFlags& flags, int fold) {
  const TrainRunConfig config = flags.resolve();
  std::cout << "config: " << config.describe() << " folds=" << flags.folds << " fold=" << fold
            << " split_seed=" << flags.split_seed << '\n';
  require_manifest(flags.manifest);
  const auto cases = load_dataset(read_manifest(flags.manifest), config.network.scales);
  const FoldPlan plan = kfold_split(read_manifest(flags.manifest).case_ids(), flags.folds, flags.split_seed);
  if (fold < 1 || fold > plan.k) throw UsageError("--fold must lie in [1, " + std::to_string(plan.k) + "]");
  const FoldResult result = train_fold(config, cases, plan, fold - 1, progress_printer(flags.quiet));
  std::cout << "best epoch " << result.best_epoch << '\n';
  print_report_summary("held-out fold " + std::to_string(fold), result.report);
  std::cout << "checkpoint " << (config.output_dir / "best.ckpt").string() << '\n';
  return kOk;
}

int cmd_cv(const TrainFlags& flags, int jobs, const std::string& ensemble_manifest) {
  const TrainRunConfig config = flags.resolve();
  std::cout << "config: " << config.describe() << " folds=" << flags.folds << " jobs=" << jobs
            << " split_seed=" << flags.split_seed << '\n';
  require_manifest(flags.manifest);
  const DatasetManifest manifest = read_manifest(flags.manifest);
  const auto cases = load_dataset(manifest, config.network.scales);
  std::vector<Case> ensemble_cases;
  if (!ensemble_manifest.empty()) {
    require_manifest(ensemble_manifest);
    ensemble_cases = load_dataset(read_manifest(ensemble_manifest), config.network.scales);
  }
  const FoldPlan plan = kfold_split(manifest.case_ids(), flags.folds, flags.split_seed);
  std::cout << "fold sizes:";
  for (std::size_t s : plan.fold_sizes()) std::cout << ' ' << s;
  std::cout << '\n';
  const CvResult result = run_cv(config, cases, plan, jobs, ensemble_cases, progress_printer(flags.quiet));
  for (const auto& f : result.folds) {
    print_report_summary("fold " + std::to_string(f.fold + 1) + " (best epoch " + std::to_string(f.best_epoch) + ")",
                         f.report);
  }
  print_report_summary("cross-validation", result.pooled);
  print_report_summary("majority-vote ensemble", result.ensemble);
  return kOk;
}

int cmd_ablate(const TrainFlags& flags, int jobs) {
  const TrainRunConfig config = flags.resolve();
  std::cout << "config: " << config.describe() << " folds=" << flags.folds << " jobs=" << jobs
            << " split_seed=" << flags.split_seed << '\n';
  require_manifest(flags.manifest);
  const DatasetManifest manifest = read_manifest(flags.manifest);
  const auto cases = load_dataset(manifest, config.network.scales);
  const FoldPlan plan = kfold_split(manifest.case_ids(), flags.folds, flags.split_seed);
  const AblationTable table = run_ablation(config, cases, plan, jobs, progress_printer(flags.quiet));
  write_ablation_csv(std::cout, table);
  write_ttest_csv(std::cout, table);
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path, const std::string& out) {
  std::cout << "config: checkpoint=" << checkpoint << " manifest=" << manifest_path
            << " out=" << (out.empty() ? "-" : out) << '\n';
  require_manifest(manifest_path);
  ModelParams<float> model = load_checkpoint(checkpoint);
  const auto cases = load_dataset(read_manifest(manifest_path), model.config.scales);
  std::vector<std::size_t> all(cases.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const EvalReport report = evaluate(model, cases, all, 0);
  if (out.empty()) {
    write_eval_csv(std::cout, report);
  } else {
    const fs::path path(out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_eval_csv(out, report);
    print_report_summary("evaluation", report);
  }
  return kOk;
}

int cmd_predict(const std::string& checkpoint, const std::string& image_path, const std::string& out,
                const std::string& overlay, const std::string& truth_path) {
  std::cout << "config: checkpoint=" << checkpoint << " image=" << image_path << " out=" << out
            << " overlay=" << (overlay.empty() ? "-" : overlay) << " truth=" << (truth_path.empty() ? "-" : truth_path)
            << '\n';
  if (!overlay.empty() && truth_path.empty()) throw UsageError("--overlay requires --truth");
  ModelParams<float> model = load_checkpoint(checkpoint);
  const Tensor<float> image = read_pgm(image_path);
  require_pyramid_divisible("predict", image.shape(), model.config.scales);
  const Tensor<float> mask = predict_mask(predict_probability(model, image, Mode::eval));
  write_pgm(mask, out);
  std::cout << "wrote mask " << out << '\n';
  if (!truth_path.empty()) {
    const Tensor<float> truth = read_pgm(truth_path, PgmContent::mask);
    std::cout << "dice " << std::setprecision(6) << dice(mask, truth) << '\n';
    if (!overlay.empty()) {
      render_overlay(image, mask, truth, overlay);
      std::cout << "wrote overlay " << overlay << '\n';
    }
  }
  return kOk;
}

int cmd_gradcheck(const std::string& op, int seeds) {
  std::cout << "config: op=" << (op.empty() ? "all" : op) << " seeds=" << seeds << " step=" << kFiniteDifferenceStep
            << " precision=verify64\n";
  if (seeds < 1) throw UsageError("--seeds must be >= 1");
  const auto results = run_gradcheck(op, seeds);
  int passed = 0;
  for (const auto& r : results) {
    std::cout << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(24) << r.name << " seeds=" << r.seeds
              << " checked=" << r.checked << " skipped=" << r.skipped << " max_rel_err=" << std::scientific << std::setprecision(3)
              << r.max_rel_error << " tol=" << r.tolerance << '\n';
    std::cout.unsetf(std::ios::floatfield);
    passed += r.passed();
  }
  std::cout << passed << "/" << results.size() << " gradient checks passed\n";
  return passed == static_cast<int>(results.size()) ? kOk : kVerification;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale pyramid segmentation network: training and evaluation tools"};
  app.require_subcommand(1);

  int synth_cases = 50;
  int synth_size = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic ellipse segmentation dataset");
  synth->add_option("--cases", synth_cases, "Number of cases")->capture_default_str();
  synth->add_option("--size", synth_size, "Image side length (multiple of 16)")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  TrainFlags train_flags;
  int train_fold_index = 1;
  auto* train = app.add_subcommand("train", "Train one model, holding out one fold for validation");
  add_train_flags(train, train_flags, true);
  train->add_option("--fold", train_fold_index, "Held-out fold (1-based)")->capture_default_str();

  TrainFlags cv_flags;
  int cv_jobs = 1;
  std::string cv_ensemble;
  auto* cv = app.add_subcommand("cv", "k-fold cross validation with majority-vote ensemble evaluation");
  add_train_flags(cv, cv_flags, true);
  cv->add_option("--jobs", cv_jobs, "Folds trained concurrently")->capture_default_str();
  cv->add_option("--ensemble-manifest", cv_ensemble, "Cases for the ensemble evaluation (default: training cases)");

  TrainFlags ablate_flags;
  int ablate_jobs = 1;
  auto* ablate = app.add_subcommand("ablate", "Full ablation matrix across all folds plus paired t-tests");
  add_train_flags(ablate, ablate_flags, true);
  ablate->add_option("--jobs", ablate_jobs, "Training jobs run concurrently")->capture_default_str();

  std::string eval_checkpoint, eval_manifest, eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest (CSV report)");
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "Dataset manifest CSV")->required();
  eval->add_option("--out", eval_out, "Report path (default: standard output)");

  std::string pred_checkpoint, pred_image, pred_out, pred_overlay, pred_truth;
  auto* predict = app.add_subcommand("predict", "Segment one PGM image");
  predict->add_option("--checkpoint", pred_checkpoint, "Checkpoint file")->required();
  predict->add_option("--image", pred_image, "Input P5 PGM")->required();
  predict->add_option("--out", pred_out, "Output mask PGM")->required();
  predict->add_option("--overlay", pred_overlay, "Optional TP/FP/FN overlay PPM (needs --truth)");
  predict->add_option("--truth", pred_truth, "Optional ground-truth mask PGM");

  std::string grad_op;
  int grad_seeds = 20;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference verification of all gradients");
  gradcheck->add_option("--op", grad_op, "Run a single check")->check(CLI::IsMember(gradcheck_names()));
  gradcheck->add_option("--seeds", grad_seeds, "Random seeds per check")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_cases, synth_size, synth_seed, synth_out);
    if (*train) return cmd_train(train_flags, train_fold_index);
    if (*cv) return cmd_cv(cv_flags, cv_jobs, cv_ensemble);
    if (*ablate) return cmd_ablate(ablate_flags, ablate_jobs);
    if (*eval) return cmd_eval(eval_checkpoint, eval_manifest, eval_out);
    if (*predict) return cmd_predict(pred_checkpoint, pred_image, pred_out, pred_overlay, pred_truth);
    if (*gradcheck) return cmd_gradcheck(grad_op, grad_seeds);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
