#include "rsam/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "rsam/checkpoint.hpp"
#include "rsam/decoder.hpp"
#include "rsam/errors.hpp"

namespace fs = std::filesystem;

namespace rsam {

namespace {

uint64_t epoch_seed(uint64_t seed, int64_t epoch) {
  uint64_t x = seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(epoch) + 1;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double scheduled_rate(const ScheduleState& s, const TrainConfig& c) {
  if (c.warmup_steps > 0 && s.step < c.warmup_steps) {
    return c.lr_max * static_cast<double>(s.step + 1) / static_cast<double>(c.warmup_steps);
  }
  return cosine_lr(std::min(s.step, s.total), s.total, c.lr_max, c.lr_min);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_min <= lr_max) || lr_min < 0.0) throw ConfigError("need 0 <= lr_min <= lr_max");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
}

double cosine_lr(int64_t step, int64_t total, double lr_max, double lr_min) {
  if (total < 1) throw ParameterError("schedule length must be >= 1");
  if (step < 0 || step > total) {
    throw ParameterError("step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

torch::Tensor bce_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  if (logits.sizes() != target.sizes()) throw ShapeError("logits and target shapes differ");
  const auto y = target.to(logits.scalar_type());
  return (torch::clamp_min(logits, 0) - logits * y + torch::log1p(torch::exp(-logits.abs()))).mean();
}

void set_deterministic(bool enabled, uint64_t seed) {
  torch::manual_seed(seed);
  if (enabled) {
    at::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
}

std::unique_ptr<torch::optim::AdamW> make_optimizer(torch::nn::Module& model, const TrainConfig& config) {
  std::vector<torch::Tensor> params;
  for (auto& p : model.parameters(true)) {
    if (p.requires_grad()) params.push_back(p);
  }
  if (params.empty()) throw TrainingError("model has no trainable parameters");
  return std::make_unique<torch::optim::AdamW>(
      params, torch::optim::AdamWOptions(config.lr_max).weight_decay(config.weight_decay));
}

StepResult train_step(RsamSegImpl& model, const Batch& batch, torch::optim::AdamW& optimizer,
                      ScheduleState& schedule, const TrainConfig& config) {
  schedule.rate = scheduled_rate(schedule, config);
  for (auto& group : optimizer.param_groups()) {
    static_cast<torch::optim::AdamWOptions&>(group.options()).lr(schedule.rate);
  }
  optimizer.zero_grad();
  auto loss = bce_loss(model.forward(batch.images), batch.labels);
  const double value = loss.item<double>();
  if (!std::isfinite(value)) {
    throw TrainingError("non-finite loss at step " + std::to_string(schedule.step) +
                        " (lr=" + format_real(schedule.rate) + ", loss=" + format_real(value) + ")");
  }
  loss.backward();
  optimizer.step();
  ++schedule.step;
  return StepResult{value, schedule.rate};
}

double TrainReport::final_loss() const { return epochs.empty() ? 0.0 : epochs.back().mean_loss; }

Batch load_batch(const DatasetManifest& manifest, const std::vector<size_t>& indices,
                 const LoadOptions& options) {
  Batch batch;
  std::vector<torch::Tensor> images, labels;
  for (size_t i : indices) {
    auto sample = load_patch(manifest.records.at(i), manifest.kind, options);
    if (!sample.label.defined()) throw DataError("patch " + sample.id + " has no label");
    batch.ids.push_back(sample.id);
    images.push_back(sample.image);
    labels.push_back(sample.label.unsqueeze(0));
  }
  batch.images = torch::stack(images);
  batch.labels = torch::stack(labels);
  return batch;
}

std::vector<ImageScore> evaluate(RsamSegImpl& model, const DatasetManifest& manifest,
                                 const LoadOptions& options, double threshold, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  std::vector<ImageScore> scores;
  const size_t n = manifest.records.size();
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
    std::vector<size_t> idx;
    for (size_t i = start; i < std::min(n, start + static_cast<size_t>(batch_size)); ++i) idx.push_back(i);
    auto batch = load_batch(manifest, idx, options);
    auto param = model.parameters().front();
    auto masks = logits_to_mask(model.forward(batch.images.to(param.scalar_type())), threshold);
    for (size_t k = 0; k < idx.size(); ++k) {
      const auto i = static_cast<int64_t>(k);
      scores.push_back(ImageScore{batch.ids[k], confusion(masks[i][0], batch.labels[i][0])});
    }
  }
  return scores;
}

TrainReport fit(RsamSegImpl& model, const DatasetManifest& train, const DatasetManifest* eval,
                const TrainConfig& config, const FitOptions& options) {
  config.validate();
  if (train.records.empty()) throw DataError("training manifest is empty");
  if (eval && eval->records.empty()) throw DataError("evaluation manifest is empty");
  set_deterministic(config.deterministic, config.seed);

  const auto start_time = std::chrono::steady_clock::now();
  const size_t n = train.records.size();
  const auto bs = static_cast<size_t>(config.batch_size);
  const int64_t steps_per_epoch = static_cast<int64_t>((n + bs - 1) / bs);

  std::vector<Sample> cache(n);
  std::vector<bool> cached(n, false);
  auto sample_at = [&](size_t i) -> const Sample& {
    if (!cached[i]) {
      cache[i] = load_patch(train.records[i], train.kind, options.load);
      if (!cache[i].label.defined()) throw DataError("patch " + cache[i].id + " has no label");
      cached[i] = true;
    }
    return cache[i];
  };

  auto optimizer = make_optimizer(model, config);
  ScheduleState schedule{0, config.epochs * steps_per_epoch, config.lr_max};
  TrainReport report;
  double best_score = -std::numeric_limits<double>::infinity();
  model.train();

  for (int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::mt19937_64 rng(epoch_seed(config.seed, epoch));
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    for (size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);

    double loss_sum = 0.0;
    int64_t steps = 0;
    for (size_t s = 0; s < n; s += bs) {
      Batch batch;
      std::vector<torch::Tensor> images, labels;
      for (size_t k = s; k < std::min(n, s + bs); ++k) {
        const auto& sample = sample_at(order[k]);
        auto image = sample.image;
        auto label = sample.label;
        if (config.augment_flips) {
          if (rng() & 1) {
            image = image.flip({-1});
            label = label.flip({-1});
          }
          if (rng() & 1) {
            image = image.flip({-2});
            label = label.flip({-2});
          }
        }
        batch.ids.push_back(sample.id);
        images.push_back(image);
        labels.push_back(label.unsqueeze(0));
      }
      auto dtype = model.parameters().front().scalar_type();
      batch.images = torch::stack(images).to(dtype);
      batch.labels = torch::stack(labels).to(dtype);
      const auto result = train_step(model, batch, *optimizer, schedule, config);
      report.step_losses.push_back(result.loss);
      loss_sum += result.loss;
      ++steps;
    }
    report.epochs.push_back(EpochRecord{epoch, steps, loss_sum / static_cast<double>(steps), schedule.rate});

    const bool last = epoch == config.epochs;
    double score = -report.epochs.back().mean_loss;
    bool evaluated = false;
    if (eval && (epoch % config.eval_every == 0 || last)) {
      model.eval();
      const auto scores = evaluate(model, *eval, options.load, config.threshold);
      model.train();
      std::vector<ConfusionCounts> counts;
      for (const auto& s : scores) counts.push_back(s.counts);
      EvalRecord rec{epoch, aggregate(counts, Aggregation::micro), aggregate(counts, Aggregation::macro)};
      report.evals.push_back(rec);
      score = rec.micro.jaccard;
      evaluated = true;
    }
    if ((evaluated || !eval) && score > best_score) {
      best_score = score;
      if (options.checkpoint_dir) {
        CheckpointMeta meta;
        meta.step = schedule.step;
        meta.seed = config.seed;
        meta.metrics["epoch"] = static_cast<double>(epoch);
        meta.metrics["train_loss"] = report.epochs.back().mean_loss;
        if (evaluated) meta.metrics["jaccard"] = report.evals.back().micro.jaccard;
        const fs::path path = *options.checkpoint_dir / "best.rsam";
        save_checkpoint(model, path, meta);
        report.best_checkpoint = path;
      }
    }
  }
  report.total_steps = schedule.step;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return report;
}

void write_report_csv(const TrainReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,steps,mean_loss,lr";
  for (const auto& name : MetricsReport::column_names()) out << ',' << name;
  out << '\n';
  for (const auto& e : report.epochs) {
    out << e.epoch << ',' << e.steps << ',' << format_real(e.mean_loss) << ',' << format_real(e.lr);
    const EvalRecord* rec = nullptr;
    for (const auto& r : report.evals) {
      if (r.epoch == e.epoch) rec = &r;
    }
    for (size_t i = 0; i < MetricsReport::column_names().size(); ++i) {
      out << ',';
      if (rec) out << format_real(rec->micro.values()[i]);
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace rsam
