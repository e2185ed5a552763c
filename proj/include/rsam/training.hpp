#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rsam/data.hpp"
#include "rsam/metrics.hpp"
#include "rsam/model.hpp"

namespace rsam {

struct TrainConfig {
  int64_t epochs = 60;
  int64_t batch_size = 2;
  double lr_max = 2e-4;
  double lr_min = 0.0;
  double weight_decay = 1e-4;
  uint64_t seed = 0;
  bool deterministic = true;
  int64_t eval_every = 1;
  int64_t warmup_steps = 0;  // linear warmup length; 0 disables it
  bool augment_flips = false;
  double threshold = 0.5;

  void validate() const;
};

struct ScheduleState {
  int64_t step = 0;
  int64_t total = 1;
  double rate = 0.0;
};

struct Batch {
  std::vector<std::string> ids;
  torch::Tensor images;  // B×3×H×W
  torch::Tensor labels;  // B×1×H×W
};

/// lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total)).
double cosine_lr(int64_t step, int64_t total, double lr_max, double lr_min);

/// Mean binary cross-entropy on logits, evaluated as
/// max(z, 0) − z·y + log(1 + exp(−|z|)).
torch::Tensor bce_loss(const torch::Tensor& logits, const torch::Tensor& target);

/// Seeds torch and pins intra-op threads to one so float reductions run in a
/// fixed order.
void set_deterministic(bool enabled, uint64_t seed);

/// AdamW over the parameters that currently require gradients.
std::unique_ptr<torch::optim::AdamW> make_optimizer(torch::nn::Module& model, const TrainConfig& config);

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
};

/// One forward/backward/update at the scheduled rate. Advances `schedule`.
/// Throws TrainingError when the loss is not finite.
StepResult train_step(RsamSegImpl& model, const Batch& batch, torch::optim::AdamW& optimizer,
                      ScheduleState& schedule, const TrainConfig& config);

struct EpochRecord {
  int64_t epoch = 0;
  int64_t steps = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct EvalRecord {
  int64_t epoch = 0;
  MetricsReport micro;
  MetricsReport macro;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  std::vector<EvalRecord> evals;
  int64_t total_steps = 0;
  double wall_seconds = 0.0;
  std::optional<std::filesystem::path> best_checkpoint;

  double final_loss() const;
};

struct FitOptions {
  LoadOptions load;
  // Where the best checkpoint goes; nothing is written when unset.
  std::optional<std::filesystem::path> checkpoint_dir;
};

/// Epoch loop with seeded per-epoch shuffling. Evaluates on `eval` (if given)
/// every `eval_every` epochs and after the last one, keeping the checkpoint
/// with the best micro Jaccard (lowest epoch loss without an eval set).
TrainReport fit(RsamSegImpl& model, const DatasetManifest& train, const DatasetManifest* eval,
                const TrainConfig& config, const FitOptions& options = {});

Batch load_batch(const DatasetManifest& manifest, const std::vector<size_t>& indices,
                 const LoadOptions& options);

/// Per-image confusion counts of thresholded predictions.
std::vector<ImageScore> evaluate(RsamSegImpl& model, const DatasetManifest& manifest,
                                 const LoadOptions& options, double threshold = 0.5,
                                 int64_t batch_size = 4);

/// epoch, steps, mean_loss, lr and the micro eval metrics of that epoch
/// (blank when the epoch was not evaluated). No timing data, so identical runs
/// give identical bytes.
void write_report_csv(const TrainReport& report, const std::filesystem::path& path);

}  // namespace rsam
