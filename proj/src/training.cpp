#include "mimofan/training.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "mimofan/pyramid.hpp"

namespace mimofan {

namespace fs = std::filesystem;

template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, OptimizerState<Scalar>& state) {
  for (const auto& [name, p] : params.params) {
    if (!p.has_grad()) throw ContractError("adam_step: parameter '" + name + "' has no gradient");
  }
  ++state.step;
  const double bias1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(state.beta1);
  const auto b2 = static_cast<Scalar>(state.beta2);
  const auto step_size = static_cast<Scalar>(state.lr / bias1);
  const auto inv_sqrt_bias2 = static_cast<Scalar>(1.0 / std::sqrt(bias2));
  const auto eps = static_cast<Scalar>(state.eps);
  for (auto& [name, p] : params.params) {
    const auto& g = p.grad();
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.size() != g.size()) m = Tensor<Scalar>::Array::Zero(g.size());
    if (v.size() != g.size()) v = Tensor<Scalar>::Array::Zero(g.size());
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    p.data() -= step_size * m / ((v.sqrt() * inv_sqrt_bias2) + eps);
  }
}

std::vector<std::size_t> FoldPlan::fold_members(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::training_members(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] != fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::fold_sizes() const {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
  for (int f : assignment) ++sizes[static_cast<std::size_t>(f)];
  return sizes;
}

namespace {

// Fisher-Yates with the raw engine output so the order does not depend on
// the standard library's distribution implementations.
template <typename T>
void seeded_shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace

FoldPlan kfold_split(const std::vector<std::string>& case_ids, int k, std::uint64_t seed) {
  if (k < 2) throw UsageError("kfold: k must be >= 2");
  if (case_ids.size() < static_cast<std::size_t>(k)) {
    throw UsageError("kfold: " + std::to_string(k) + " folds requested for " + std::to_string(case_ids.size()) +
                     " cases");
  }
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.case_ids = case_ids;
  plan.assignment.assign(case_ids.size(), 0);
  std::vector<std::size_t> order(case_ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  seeded_shuffle(order, rng);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    plan.assignment[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(k));
  }
  return plan;
}

void TrainRunConfig::validate() const {
  if (epochs < 1) throw UsageError("train: epochs must be >= 1");
  if (batch_size < 1) throw UsageError("train: batch size must be >= 1");
  if (!(lr > 0.0)) throw UsageError("train: learning rate must be positive");
  network.validate();
  weights.validate();
}

std::string TrainRunConfig::describe() const {
  std::ostringstream out;
  out << "epochs=" << epochs << " batch_size=" << batch_size << " seed=" << seed << " lr=" << lr
      << " arch=" << to_string(network.arch) << " scales=" << network.scales << " filters=" << network.base_filters
      << " dcc=" << network.toggles.dcc << " dps=" << network.toggles.dps << " sf=" << network.toggles.sf
      << " weights=(" << weights.background << "," << weights.foreground << ")";
  if (!manifest.empty()) out << " manifest=" << manifest.string();
  if (!output_dir.empty()) out << " out=" << output_dir.string();
  return out.str();
}

template <typename Scalar>
Var<Scalar> training_loss(Tape<Scalar>& tape, ModelParams<Scalar>& params, const Tensor<Scalar>& images,
                          const Tensor<Scalar>& masks, const ClassWeights& weights) {
  const NetworkConfig& config = params.config;
  if (config.arch != Arch::mimofan) {
    const Var<Scalar> prob = forward_baseline(tape, params, tape.constant(images), config.arch, Mode::train);
    return weighted_cross_entropy(prob, masks, weights);
  }
  const ScalePyramid<Scalar> inputs = image_pyramid(images, config.scales);
  ScalePyramid<Scalar> labels = label_pyramid(masks, config.scales);
  std::vector<Var<Scalar>> levels;
  for (const auto& level : inputs.levels) levels.push_back(tape.constant(level));
  std::vector<Var<Scalar>> outputs = forward_mimofan(tape, params, levels, ForwardOptions{Mode::train, false});
  if (!config.toggles.dps) {
    // Side heads exist but stay unsupervised.
    outputs.resize(1);
    labels.levels.resize(1);
  }
  return dps_loss(outputs, labels, weights);
}

EvalReport evaluate(ModelParams<float>& params, const std::vector<Case>& cases,
                    const std::vector<std::size_t>& members, int fold_id) {
  constexpr std::size_t kChunk = 16;
  EvalReport report;
  report.fold_id = fold_id;
  for (std::size_t start = 0; start < members.size(); start += kChunk) {
    const std::size_t stop = std::min(members.size(), start + kChunk);
    std::vector<Tensor<float>> images;
    for (std::size_t i = start; i < stop; ++i) images.push_back(cases[members[i]].image);
    const Tensor<float> masks = predict_mask(predict_probability(params, stack_batch(images), Mode::eval));
    for (std::size_t i = start; i < stop; ++i) {
      const Case& c = cases[members[i]];
      CaseResult result;
      result.fold = fold_id;
      result.case_id = c.id;
      result.counts = overlap(batch_item(masks, i - start), c.mask);
      result.dice = result.counts.dice();
      report.cases.push_back(std::move(result));
    }
  }
  report.finalize();
  return report;
}

void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& losses) {
  out << "epoch,step,loss\n" << std::setprecision(9);
  for (const auto& r : losses) out << r.epoch << ',' << r.step << ',' << r.loss << '\n';
}

FoldResult train_fold(const TrainRunConfig& config, const std::vector<Case>& cases, const FoldPlan& plan, int fold,
                      const ProgressFn& progress) {
  config.validate();
  if (fold < 0 || fold >= plan.k) {
    throw UsageError("train: fold " + std::to_string(fold) + " outside [0, " + std::to_string(plan.k) + ")");
  }
  if (plan.case_ids.size() != cases.size()) throw UsageError("train: fold plan does not match the dataset");
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (plan.case_ids[i] != cases[i].id) throw UsageError("train: fold plan does not match the dataset");
  }
  for (const auto& c : cases) require_pyramid_divisible(("case " + c.id).c_str(), c.image.shape(), config.network.scales);

  const std::vector<std::size_t> train_ids = plan.training_members(fold);
  const std::vector<std::size_t> val_ids = plan.fold_members(fold);
  if (train_ids.empty()) throw UsageError("train: no training cases outside the held-out fold");

  if (!config.output_dir.empty()) {
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    if (ec) throw IoError("cannot create output directory " + config.output_dir.string() + ": " + ec.message());
  }

  FoldResult result;
  result.fold = fold;
  ModelParams<float> model = build<float>(config.network, config.seed);
  OptimizerState<float> optimizer;
  optimizer.lr = config.lr;
  std::mt19937_64 rng(config.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(fold + 1)));
  double best_dice = -1.0;

  std::vector<std::size_t> order = train_ids;
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    seeded_shuffle(order, rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      std::vector<Tensor<float>> images;
      std::vector<Tensor<float>> masks;
      for (std::size_t i = start; i < stop; ++i) {
        images.push_back(cases[order[i]].image);
        masks.push_back(cases[order[i]].mask);
      }
      Tape<float> tape;
      const Var<float> loss = training_loss(tape, model, stack_batch(images), stack_batch(masks), config.weights);
      const double value = loss.value()[0];
      const std::int64_t step = optimizer.step + 1;
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite loss " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step) + " (fold " + std::to_string(fold) +
                           "; config: " + config.describe() + ")");
      }
      model.zero_grad();
      tape.backward(loss);
      adam_step(model, optimizer);
      result.losses.push_back({epoch, step, value});
      epoch_loss += value;
      ++batches;
    }

    EvalReport report = evaluate(model, cases, val_ids, fold);
    result.validation_dice.push_back(report.average_dice);
    if (report.average_dice > best_dice) {
      best_dice = report.average_dice;
      result.best = model;
      result.best_epoch = epoch;
      result.report = std::move(report);
      if (!config.output_dir.empty()) save_checkpoint(result.best, config.output_dir / "best.ckpt");
    }
    if (progress) {
      std::ostringstream msg;
      msg << "fold " << fold << " epoch " << epoch << "/" << config.epochs << " loss "
          << epoch_loss / static_cast<double>(batches) << " val_dice " << result.validation_dice.back();
      progress(msg.str());
    }
  }

  if (!config.output_dir.empty()) {
    std::ofstream log(config.output_dir / "loss.csv", std::ios::trunc);
    if (!log) throw IoError("cannot write loss log: " + (config.output_dir / "loss.csv").string());
    write_loss_csv(log, result.losses);
    write_eval_csv((config.output_dir / "eval.csv").string(), result.report);
  }
  return result;
}

FoldResult train_fold(const TrainRunConfig& config, const FoldPlan& plan, int fold, const ProgressFn& progress) {
  config.validate();
  if (!fs::exists(config.manifest)) throw IoError("manifest not found: " + config.manifest.string());
  const std::vector<Case> cases = load_dataset(read_manifest(config.manifest), config.network.scales);
  return train_fold(config, cases, plan, fold, progress);
}

Tensor<float> majority_vote(const std::vector<Tensor<float>>& masks, const std::vector<Tensor<float>>* fg_probs) {
  if (masks.empty()) throw ContractError("majority_vote: no masks");
  const Shape& shape = masks.front().shape();
  for (const auto& m : masks) {
    require_same_shape("majority_vote", shape, m.shape());
    require_binary("majority_vote", m);
  }
  const std::size_t voters = masks.size();
  const bool even = voters % 2 == 0;
  if (even) {
    if (fg_probs == nullptr || fg_probs->size() != voters) {
      throw ContractError("majority_vote: an even ensemble needs one probability map per mask");
    }
    for (const auto& p : *fg_probs) require_same_shape("majority_vote", shape, p.shape());
  }
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t votes = 0;
    for (const auto& m : masks) votes += m[i] != 0.0f;
    if (2 * votes > voters) {
      out[i] = 1.0f;
    } else if (2 * votes == voters) {
      double mean = 0.0;
      for (const auto& p : *fg_probs) mean += p[i];
      out[i] = mean / static_cast<double>(voters) >= 0.5 ? 1.0f : 0.0f;
    }
  }
  return out;
}

namespace {

Tensor<float> foreground_plane(const Tensor<float>& prob) {
  const Shape& s = prob.shape();
  Tensor<float> out(Shape{s.n, 1, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) std::copy_n(prob.plane(n, 1), s.plane(), out.plane(n, 0));
  return out;
}

}  // namespace

Tensor<float> ensemble_predict(std::vector<ModelParams<float>>& models, const Tensor<float>& image) {
  if (models.empty()) throw ContractError("ensemble_predict: no models");
  std::vector<Tensor<float>> masks;
  std::vector<Tensor<float>> probs;
  for (auto& model : models) {
    const Tensor<float> prob = predict_probability(model, image, Mode::eval);
    masks.push_back(predict_mask(prob));
    probs.push_back(foreground_plane(prob));
  }
  return majority_vote(masks, &probs);
}

EvalReport evaluate_ensemble(std::vector<ModelParams<float>>& models, const std::vector<Case>& cases) {
  EvalReport report;
  report.fold_id = -1;
  for (const auto& c : cases) {
    CaseResult result;
    result.fold = -1;
    result.case_id = c.id;
    result.counts = overlap(ensemble_predict(models, c.image), c.mask);
    result.dice = result.counts.dice();
    report.cases.push_back(std::move(result));
  }
  report.finalize();
  return report;
}

void run_jobs(int count, int jobs, const std::function<void(int)>& job) {
  if (jobs <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  std::vector<std::thread> workers;
  const int threads = std::min(jobs, count);
  for (int t = 0; t < threads; ++t) {
    workers.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

ProgressFn serialized(const ProgressFn& progress) {
  if (!progress) return {};
  auto lock = std::make_shared<std::mutex>();
  return [progress, lock](const std::string& msg) {
    std::lock_guard<std::mutex> guard(*lock);
    progress(msg);
  };
}

}  // namespace

CvResult run_cv(const TrainRunConfig& config, const std::vector<Case>& cases, const FoldPlan& plan, int jobs,
                const std::vector<Case>& ensemble_cases, const ProgressFn& progress) {
  config.validate();
  CvResult result;
  result.folds.resize(static_cast<std::size_t>(plan.k));
  const ProgressFn report = serialized(progress);
  run_jobs(plan.k, jobs, [&](int fold) {
    TrainRunConfig fold_config = config;
    if (!config.output_dir.empty()) fold_config.output_dir = config.output_dir / ("fold" + std::to_string(fold + 1));
    result.folds[static_cast<std::size_t>(fold)] = train_fold(fold_config, cases, plan, fold, report);
  });

  result.pooled.fold_id = -1;
  for (const auto& f : result.folds) {
    result.pooled.cases.insert(result.pooled.cases.end(), f.report.cases.begin(), f.report.cases.end());
  }
  result.pooled.finalize();

  std::vector<ModelParams<float>> models;
  for (const auto& f : result.folds) models.push_back(f.best);
  result.ensemble = evaluate_ensemble(models, ensemble_cases.empty() ? cases : ensemble_cases);

  if (!config.output_dir.empty()) {
    write_eval_csv((config.output_dir / "cv_eval.csv").string(), result.pooled);
    write_eval_csv((config.output_dir / "ensemble_eval.csv").string(), result.ensemble);
  }
  return result;
}

std::vector<AblationRow> ablation_rows(const NetworkConfig& base) {
  auto variant = [&](Arch arch, bool dcc, bool dps, bool sf) {
    NetworkConfig c = base;
    c.arch = arch;
    c.toggles = Toggles{dcc, dps, sf};
    return c;
  };
  return {
      {"U-Net", variant(Arch::unet, false, false, false), {}, {}},
      {"ResU-Net", variant(Arch::resunet, false, false, false), {}, {}},
      {"MIMO-FAN (DCC)", variant(Arch::mimofan, true, false, false), {}, {}},
      {"MIMO-FAN (DPS)", variant(Arch::mimofan, false, true, false), {}, {}},
      {"MIMO-FAN (DCC+DPS)", variant(Arch::mimofan, true, true, false), {}, {}},
      {"MIMO-FAN (DCC+DPS+SF)", variant(Arch::mimofan, true, true, true), {}, {}},
  };
}

namespace {

std::string slug(const std::string& label) {
  std::string out;
  for (char c : label) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (c == '+' || c == ' ' || c == '-') {
      if (!out.empty() && out.back() != '_') out.push_back('_');
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

}  // namespace

AblationTable run_ablation(const TrainRunConfig& config, const std::vector<Case>& cases, const FoldPlan& plan,
                           int jobs, const ProgressFn& progress) {
  config.validate();
  AblationTable table;
  table.rows = ablation_rows(config.network);
  const int rows = static_cast<int>(table.rows.size());
  for (auto& row : table.rows) row.fold_dice.assign(static_cast<std::size_t>(plan.k), 0.0);
  const ProgressFn report = serialized(progress);
  run_jobs(rows * plan.k, jobs, [&](int job) {
    AblationRow& row = table.rows[static_cast<std::size_t>(job / plan.k)];
    const int fold = job % plan.k;
    TrainRunConfig job_config = config;
    job_config.network = row.network;
    if (!config.output_dir.empty()) {
      job_config.output_dir = config.output_dir / slug(row.label) / ("fold" + std::to_string(fold + 1));
    }
    const ProgressFn tagged = report ? ProgressFn([&report, &row](const std::string& m) { report(row.label + ": " + m); })
                                     : ProgressFn{};
    row.fold_dice[static_cast<std::size_t>(fold)] = train_fold(job_config, cases, plan, fold, tagged).report.average_dice;
  });
  for (auto& row : table.rows) row.summary = mean_std(row.fold_dice);

  const AblationRow& full = table.rows.back();
  for (int r = 0; r + 1 < rows; ++r) {
    AblationComparison cmp;
    cmp.baseline = table.rows[static_cast<std::size_t>(r)].label;
    try {
      cmp.test = paired_t_test(full.fold_dice, table.rows[static_cast<std::size_t>(r)].fold_dice);
    } catch (const DegenerateSampleError&) {
      cmp.test.reset();
    }
    table.comparisons.push_back(std::move(cmp));
  }
  if (!config.output_dir.empty()) {
    std::ofstream csv(config.output_dir / "ablation.csv", std::ios::trunc);
    std::ofstream tt(config.output_dir / "ttests.csv", std::ios::trunc);
    if (!csv || !tt) throw IoError("cannot write ablation results under " + config.output_dir.string());
    write_ablation_csv(csv, table);
    write_ttest_csv(tt, table);
  }
  return table;
}

void write_ablation_csv(std::ostream& out, const AblationTable& table) {
  const std::size_t k = table.rows.empty() ? 0 : table.rows.front().fold_dice.size();
  out << "arch";
  for (std::size_t f = 1; f <= k; ++f) out << ",fold" << f;
  out << ",mean,std\n" << std::fixed << std::setprecision(4);
  for (const auto& row : table.rows) {
    out << row.label;
    for (double d : row.fold_dice) out << ',' << 100.0 * d;
    out << ',' << 100.0 * row.summary.mean << ',' << 100.0 * row.summary.std << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

void write_ttest_csv(std::ostream& out, const AblationTable& table) {
  const std::string full = table.rows.empty() ? "" : table.rows.back().label;
  out << "comparison,t,df,p_two_tailed,p_one_tailed\n" << std::setprecision(8);
  for (const auto& cmp : table.comparisons) {
    out << full << " vs " << cmp.baseline;
    if (cmp.test) {
      out << ',' << cmp.test->t << ',' << cmp.test->df << ',' << cmp.test->p << ',' << cmp.test->p_one_sided << '\n';
    } else {
      out << ",nan,nan,nan,nan\n";
    }
  }
}

template void adam_step(ModelParams<float>&, OptimizerState<float>&);
template void adam_step(ModelParams<double>&, OptimizerState<double>&);
template Var<float> training_loss(Tape<float>&, ModelParams<float>&, const Tensor<float>&, const Tensor<float>&,
                                  const ClassWeights&);
template Var<double> training_loss(Tape<double>&, ModelParams<double>&, const Tensor<double>&, const Tensor<double>&,
                                   const ClassWeights&);

}  // namespace mimofan
