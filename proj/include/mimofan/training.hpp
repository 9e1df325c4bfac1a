#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mimofan/data_io.hpp"
#include "mimofan/loss_metrics.hpp"
#include "mimofan/network.hpp"

namespace mimofan {

/// Adam with bias correction. Moment buffers are keyed by parameter name.
template <typename Scalar>
struct OptimizerState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, typename Tensor<Scalar>::Array> first_moment;
  std::map<std::string, typename Tensor<Scalar>::Array> second_moment;
};

/// One Adam update of every parameter from its grad buffer. Throws ContractError if a grad is missing.
template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, OptimizerState<Scalar>& state);

/// Deterministic assignment of case ids to k folds: seeded shuffle, then round-robin.
struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 0;
  std::vector<std::string> case_ids;  ///< in manifest order
  std::vector<int> assignment;        ///< fold index of case_ids[i]

  std::vector<std::size_t> fold_members(int fold) const;
  std::vector<std::size_t> training_members(int fold) const;
  std::vector<std::size_t> fold_sizes() const;
};

FoldPlan kfold_split(const std::vector<std::string>& case_ids, int k, std::uint64_t seed);

struct TrainRunConfig {
  int epochs = 50;
  int batch_size = 4;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  NetworkConfig network;
  ClassWeights weights;
  std::filesystem::path manifest;
  /// Loss log, best checkpoint and report land here; empty disables file output.
  std::filesystem::path output_dir;

  /// Throws UsageError for epochs < 1 or batch_size < 1.
  void validate() const;
  std::string describe() const;
};

struct LossRecord {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0.0;
};

struct FoldResult {
  int fold = 0;
  EvalReport report;  ///< held-out evaluation of the best checkpoint
  ModelParams<float> best;
  int best_epoch = 0;
  std::vector<LossRecord> losses;
  std::vector<double> validation_dice;  ///< average held-out Dice after each epoch
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains on every case outside `fold`, evaluates on `fold` after each epoch and
/// keeps the checkpoint with the best held-out average Dice (ties keep the earlier epoch).
FoldResult train_fold(const TrainRunConfig& config, const std::vector<Case>& cases, const FoldPlan& plan, int fold,
                      const ProgressFn& progress = {});

/// Reads the manifest named in `config` and trains one fold.
FoldResult train_fold(const TrainRunConfig& config, const FoldPlan& plan, int fold, const ProgressFn& progress = {});

/// Loss of one mini-batch, recorded on `tape` (DPS over all scales, or scale 0 only).
template <typename Scalar>
Var<Scalar> training_loss(Tape<Scalar>& tape, ModelParams<Scalar>& params, const Tensor<Scalar>& images,
                          const Tensor<Scalar>& masks, const ClassWeights& weights);

/// Evaluates `params` on the listed cases (eval-mode batch norm, scale fusing per config).
EvalReport evaluate(ModelParams<float>& params, const std::vector<Case>& cases,
                    const std::vector<std::size_t>& members, int fold_id);

/// Per-voxel majority vote of binary masks. Even ensembles break ties with the
/// mean foreground probability (>= 0.5 is foreground), so `fg_probs` is then required.
Tensor<float> majority_vote(const std::vector<Tensor<float>>& masks,
                            const std::vector<Tensor<float>>* fg_probs = nullptr);

/// Majority-vote segmentation of one image by several models.
Tensor<float> ensemble_predict(std::vector<ModelParams<float>>& models, const Tensor<float>& image);

EvalReport evaluate_ensemble(std::vector<ModelParams<float>>& models, const std::vector<Case>& cases);

/// Runs `count` independent jobs on up to `jobs` threads; results are indexed by job.
void run_jobs(int count, int jobs, const std::function<void(int)>& job);

struct CvResult {
  std::vector<FoldResult> folds;
  EvalReport pooled;    ///< held-out results of all folds together
  EvalReport ensemble;  ///< majority vote of the fold models on the evaluation cases
};

/// k-fold cross validation followed by a majority-vote evaluation of the fold
/// models on `ensemble_cases` (the training cases themselves when empty).
CvResult run_cv(const TrainRunConfig& config, const std::vector<Case>& cases, const FoldPlan& plan, int jobs,
                const std::vector<Case>& ensemble_cases = {}, const ProgressFn& progress = {});

struct AblationRow {
  std::string label;
  NetworkConfig network;
  std::vector<double> fold_dice;
  MeanStd summary;
};

struct AblationComparison {
  std::string baseline;
  std::optional<TTestResult> test;  ///< empty when the paired differences are degenerate
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::vector<AblationComparison> comparisons;  ///< full model vs every other row
};

/// The six ablation rows in table order: U-Net, ResU-Net, then MIMO-FAN with
/// DCC, DPS, DCC+DPS and DCC+DPS+SF.
std::vector<AblationRow> ablation_rows(const NetworkConfig& base);

AblationTable run_ablation(const TrainRunConfig& config, const std::vector<Case>& cases, const FoldPlan& plan,
                           int jobs, const ProgressFn& progress = {});

/// `arch,fold1..foldk,mean,std` with Dice in percent.
void write_ablation_csv(std::ostream& out, const AblationTable& table);
/// `comparison,t,df,p_two_tailed,p_one_tailed`; degenerate comparisons print `nan`.
void write_ttest_csv(std::ostream& out, const AblationTable& table);

void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& losses);

}  // namespace mimofan
