// Acceptance runner: one PASS/FAIL line per criterion.
//
//   rsam_acceptance              run every criterion
//   rsam_acceptance 3 7          run the listed ones
//
// Exit status is non-zero when any selected criterion fails.

#include <torch/torch.h>

#include <array>
#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "reference_vit.hpp"
#include "rsam/checkpoint.hpp"
#include "rsam/cli.hpp"
#include "rsam/data.hpp"
#include "rsam/freq_prompt.hpp"
#include "rsam/metrics.hpp"
#include "rsam/training.hpp"
#include "support.hpp"

using namespace rsam;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string num(double v) {
  std::ostringstream ss;
  ss.precision(3);
  ss << v;
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int quiet_cli(const std::vector<std::string>& args) {
  std::stringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  const int code = cli::run(args);
  std::cout.rdbuf(old);
  return code;
}

// ---------------------------------------------------------------------------

Outcome hfc_oracle() {
  Outcome o;
  const std::vector<std::pair<int64_t, int64_t>> sizes{{8, 8}, {16, 16}, {15, 9}};
  const std::vector<double> taus{0.0, 0.1, 0.25, 0.5, 1.0};
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(2024);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const auto [h, w] = sizes[k % sizes.size()];
    const double tau = taus[k % taus.size()];
    const int64_t channels = 1 + k % 3;
    const auto img = torch::rand({channels, h, w}, gen, torch::kFloat64) * 2.0 - 0.5;
    const auto got = extract_hfc(img, tau);
    for (int64_t c = 0; c < channels; ++c) {
      const auto want = test::hfc_by_dft(test::to_vector(img[c]), h, w, tau);
      const auto have = test::to_vector(got[c]);
      for (size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(want[i] - have[i]));
    }
  }
  o.require(worst < 1e-5, "max abs error " + num(worst));
  o.detail = o.pass ? "max abs error " + num(worst) : o.detail;
  return o;
}

Outcome mask_properties() {
  Outcome o;
  const std::vector<double> taus{0.0, 0.01, 0.1, 0.2, 0.25, 0.4, 0.5, 0.75, 0.9, 1.0};
  const std::vector<std::pair<int64_t, int64_t>> sizes{{8, 8}, {16, 16}, {15, 9}, {9, 15}, {7, 7}, {32, 24}};
  int64_t checked = 0;
  for (const auto& [h, w] : sizes) {
    std::vector<HfcMask> masks;
    for (double tau : taus) masks.push_back(make_hfc_mask(h, w, tau));
    for (size_t k = 0; k < taus.size(); ++k) {
      for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
          ++checked;
          const bool zero = test::mask_zeroes(i, j, h, w, taus[k]);
          if (masks[k].passes(i, j) == zero || (masks[k].grid[i][j].item<double>() == 0.0) != zero) {
            o.require(false, "predicate mismatch at " + std::to_string(i) + "," + std::to_string(j));
          }
          if (k > 0 && !masks[k - 1].passes(i, j) && masks[k].passes(i, j)) o.require(false, "nesting broken");
        }
      }
    }
    o.require(masks.back().grid.sum().item<double>() == 0.0, "tau 1 mask not all zero");
  }

  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(7);
  double worst = 0.0;
  for (const auto& [h, w] : sizes) {
    for (double tau : {0.0, 0.25, 0.6}) {
      const auto img = torch::rand({3, h, w}, gen, torch::kFloat64);
      const auto m = make_hfc_mask(h, w, tau);
      const auto sum = apply_spectral_mask(img, m.grid) + apply_spectral_mask(img, 1.0 - m.grid);
      worst = std::max(worst, test::max_abs_diff(sum, img));
    }
  }
  o.require(worst < 1e-5, "reconstruction error " + num(worst));
  if (o.pass) o.detail = std::to_string(checked) + " pixels enumerated, reconstruction error " + num(worst);
  return o;
}

Outcome gradient_check() {
  Outcome o;
  auto model = build_model(test::tiny_config(31));
  model->to(torch::kFloat64);
  // Weights well away from their small initial scale, so every branch carries
  // gradients far above finite-difference roundoff.
  test::perturb_parameters(*model, 32, 0.3);
  freeze_policy(*model);
  const auto images = test::random_images(2, 16, 33, torch::kFloat64);
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(34);
  const auto labels = torch::randint(0, 2, {2, 1, 16, 16}, gen, torch::kFloat64);
  // Summed rather than mean BCE: the same gradient direction, 512× larger.
  auto loss_of = [&] { return bce_loss(model->forward(images), labels) * labels.numel(); };

  model->zero_grad();
  loss_of().backward();

  std::mt19937_64 rng(35);
  int sampled = 0;
  double worst = 0.0;
  std::map<ParamGroup, int> per_group;
  for (auto& p : model->named_parameters()) {
    const auto group = group_of(p.key());
    if (group == ParamGroup::backbone || !p.value().requires_grad()) continue;
    // Two elements from each trainable tensor, drawn among those with a
    // measurable gradient. Relative error is undefined where the true gradient
    // is zero (dead ReLU units, key biases under softmax), so such tensors get
    // an absolute check instead.
    const auto grad = p.value().grad().view({-1});
    const auto live = torch::nonzero(grad.abs() >= 1e-4).view({-1});
    for (int pick = 0; pick < 2; ++pick) {
      const bool measurable = live.numel() > 0;
      const int64_t idx = measurable ? live[static_cast<int64_t>(rng() % live.numel())].item<int64_t>()
                                     : static_cast<int64_t>(rng() % static_cast<uint64_t>(grad.numel()));
      auto flat = p.value().view({-1});
      const double analytic = grad[idx].item<double>();
      // Fourth-order central difference.
      const double h = 3e-5;
      std::array<double, 4> f{};
      {
        torch::NoGradGuard g;
        const double orig = flat[idx].item<double>();
        const std::array<double, 4> offsets{2 * h, h, -h, -2 * h};
        for (size_t s = 0; s < offsets.size(); ++s) {
          flat[idx] = orig + offsets[s];
          f[s] = loss_of().item<double>();
        }
        flat[idx] = orig;
      }
      const double numeric = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h);
      if (!measurable) {
        if (std::abs(analytic - numeric) >= 1e-8) o.require(false, p.key() + " zero-gradient mismatch " + num(numeric));
        continue;
      }
      const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
      worst = std::max(worst, rel);
      if (rel >= 1e-4) o.require(false, p.key() + " rel error " + num(rel));
      ++sampled;
      ++per_group[group];
    }
  }
  o.require(sampled >= 10, "only " + std::to_string(sampled) + " parameters sampled");
  for (auto g : {ParamGroup::adapter_scale, ParamGroup::adapter_feature, ParamGroup::decoder}) {
    o.require(per_group[g] > 0, std::string("no samples from ") + std::string(group_name(g)));
  }
  if (o.pass) o.detail = std::to_string(sampled) + " parameters, worst relative error " + num(worst);
  return o;
}

Outcome freeze_semantics() {
  Outcome o;
  auto model = build_model(test::toy_config(41));
  freeze_policy(*model);
  TrainConfig cfg;
  cfg.lr_max = 3e-3;
  auto opt = make_optimizer(*model, cfg);
  const auto data = synthetic_fixture(8, 64, 41);
  std::map<std::string, torch::Tensor> before;
  for (const auto& p : model->named_parameters()) before[p.key()] = p.value().detach().clone();
  ScheduleState s{0, 5, 0.0};
  for (int step = 0; step < 5; ++step) {
    const auto batch = load_batch(data, {size_t(2 * (step % 4)), size_t(2 * (step % 4) + 1)}, {});
    train_step(*model, batch, *opt, s, cfg);
  }
  std::map<ParamGroup, double> frozen_delta;
  std::map<ParamGroup, int> changed;
  for (const auto& p : model->named_parameters()) {
    const auto g = group_of(p.key());
    const double d = (p.value() - before[p.key()]).abs().max().item<double>();
    if (g == ParamGroup::backbone) frozen_delta[g] = std::max(frozen_delta[g], d);
    if (d > 0) ++changed[g];
  }
  o.require(frozen_delta[ParamGroup::backbone] == 0.0,
            "backbone moved by " + num(frozen_delta[ParamGroup::backbone]));
  for (auto g : {ParamGroup::adapter_scale, ParamGroup::adapter_feature, ParamGroup::decoder}) {
    o.require(changed[g] > 0, std::string(group_name(g)) + " did not change");
  }
  if (o.pass) {
    o.detail = "backbone max |delta| 0; changed tensors: adapter_scale " +
               std::to_string(changed[ParamGroup::adapter_scale]) + ", adapter_feature " +
               std::to_string(changed[ParamGroup::adapter_feature]) + ", decoder " +
               std::to_string(changed[ParamGroup::decoder]);
  }
  return o;
}

Outcome adapter_off_equivalence() {
  Outcome o;
  auto off_cfg = test::toy_config(51);
  off_cfg.use_fpe = off_cfg.use_fhfc = off_cfg.use_adapter_scale = false;
  const auto images = test::random_images(2, 64, 52, torch::kFloat64);
  torch::NoGradGuard g;

  auto off = build_model(off_cfg);
  off->to(torch::kFloat64);
  test::perturb_parameters(*off, 53, 0.02);
  const double d1 = test::max_abs_diff(off->forward(images), test::plain_forward(*off, images));
  o.require(d1 < 1e-6, "flags-off vs plain " + num(d1));

  auto off_init = build_model(off_cfg);
  auto on_init = build_model(test::toy_config(51));
  off_init->to(torch::kFloat64);
  on_init->to(torch::kFloat64);
  const auto plain = test::plain_forward(*off_init, images);
  const double d2 = test::max_abs_diff(on_init->forward(images), plain);
  const double d3 = test::max_abs_diff(on_init->forward(images), off_init->forward(images));
  o.require(d2 < 1e-6, "zero-init flags-on vs plain " + num(d2));
  o.require(d3 < 1e-6, "zero-init flags-on vs flags-off " + num(d3));
  if (o.pass) o.detail = "max diffs " + num(d1) + ", " + num(d2) + ", " + num(d3);
  return o;
}

Outcome overfit_sanity() {
  Outcome o;
  const auto data = synthetic_fixture(8, 64, 7);
  auto model = build_model(test::toy_config(0));
  freeze_policy(*model);
  TrainConfig cfg;
  cfg.epochs = 75;  // 8 images, batch 2: 300 steps
  cfg.batch_size = 2;
  cfg.lr_max = 3e-3;
  cfg.seed = 0;
  set_deterministic(true, cfg.seed);
  const auto report = fit(*model, data, nullptr, cfg);
  const auto scores = evaluate(*model, data, {});
  std::vector<ConfusionCounts> counts;
  for (const auto& s : scores) counts.push_back(s.counts);
  const double iou = aggregate(counts, Aggregation::micro).jaccard;
  o.require(report.total_steps <= 300, std::to_string(report.total_steps) + " steps");
  o.require(iou >= 0.9, "training IoU " + num(iou));
  if (o.pass) o.detail = "IoU " + num(iou) + " after " + std::to_string(report.total_steps) + " steps";
  return o;
}

json toy_cli_config(const fs::path& train_manifest, int64_t epochs) {
  return {{"model",
           {{"vit", {{"image_size", 64}, {"patch_size", 8}, {"depth", 2}, {"embed_dim", 64}, {"heads", 4},
                     {"neck_dim", 32}, {"adapter_bottleneck", 16}}},
            {"decoder", {{"transformer_dim", 32}}}}},
          {"train", {{"epochs", epochs}, {"batch_size", 2}, {"lr_max", 3e-3}}},
          {"data", {{"train_manifest", train_manifest.string()}}}};
}

Outcome ablation_protocol() {
  Outcome o;
  const auto root = test::scratch_dir("accept_ablate");
  write_manifest(synthetic_fixture(8, 64, 61), root / "train.jsonl");
  std::ofstream(root / "config.json") << toy_cli_config(root / "train.jsonl", 10).dump(2);
  const int code = quiet_cli({"ablate", "--config", (root / "config.json").string(), "--seed", "61",
                              "--deterministic", "--out", (root / "out").string()});
  o.require(code == 0, "ablate exit code " + std::to_string(code));
  if (!o.pass) return o;

  const auto rows = lines_of(root / "out" / "ablation.csv");
  o.require(rows.size() == 5, std::to_string(rows.size() - 1) + " rows");
  if (!o.pass) return o;
  const auto header = split(rows[0]);
  auto column = [&](const std::string& name) {
    return static_cast<size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  std::map<std::string, std::vector<std::string>> by_variant;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i]);
    by_variant[f[0]] = f;
  }
  const auto total = [&](const std::string& v) { return std::stoll(by_variant.at(v)[column("params_total")]); };
  const auto trainable = [&](const std::string& v) {
    return std::stoll(by_variant.at(v)[column("params_trainable")]);
  };
  const auto loss = [&](const std::string& v) { return std::stod(by_variant.at(v)[column("final_train_loss")]); };

  // Deltas from the layer shapes: D 64, bottleneck 16, depth 2, tune width 64/16, 3×8×8 patches.
  const int64_t d = 64, b = 16, depth = 2, t = 4, patch_dim = 3 * 8 * 8;
  const std::map<std::string, int64_t> expected{{"no_fpe", d * t + t},
                                                {"no_fhfc", patch_dim * t + t},
                                                {"no_adapter_scale", depth * 2 * (2 * d * b + d + b)}};
  for (const auto& [variant, delta] : expected) {
    o.require(total("full") - total(variant) == delta, variant + " total delta " +
                                                           std::to_string(total("full") - total(variant)));
    o.require(trainable("full") - trainable(variant) == delta, variant + " trainable delta");
    auto cfg = test::toy_config();
    cfg.use_fpe = variant != "no_fpe";
    cfg.use_fhfc = variant != "no_fhfc";
    cfg.use_adapter_scale = variant != "no_adapter_scale";
    o.require(closed_form_counts(cfg).total() == total(variant), variant + " differs from closed form");
    o.require(loss(variant) != loss("full"), variant + " loss equals full loss");
  }
  o.require(closed_form_counts(test::toy_config()).total() == total("full"), "full differs from closed form");
  if (o.pass) {
    o.detail = "losses full " + num(loss("full")) + ", no_fpe " + num(loss("no_fpe")) + ", no_fhfc " +
               num(loss("no_fhfc")) + ", no_adapter_scale " + num(loss("no_adapter_scale"));
  }
  return o;
}

Outcome fewshot_protocol() {
  Outcome o;
  const auto root = test::scratch_dir("accept_fewshot");
  write_manifest(synthetic_fixture(32, 64, 71), root / "train.jsonl");
  std::ofstream(root / "config.json") << toy_cli_config(root / "train.jsonl", 4).dump(2);
  const std::vector<std::string> labels{"0.125", "0.25", "0.5", "1"};
  const std::vector<size_t> sizes{4, 8, 16, 32};
  int inversions = 0;
  std::string losses;
  for (int seed : {1, 2, 3}) {
    const auto out = root / ("seed" + std::to_string(seed));
    const int code = quiet_cli({"fewshot", "--config", (root / "config.json").string(), "--fractions",
                                "0.125,0.25,0.5,1.0", "--seed", std::to_string(seed), "--deterministic", "--out",
                                out.string()});
    o.require(code == 0, "fewshot exit code " + std::to_string(code));
    if (code != 0) return o;
    std::vector<std::string> previous;
    for (size_t k = 0; k < labels.size(); ++k) {
      const auto ids = lines_of(out / ("subset_" + labels[k] + ".txt"));
      o.require(ids.size() == sizes[k], "subset " + labels[k] + " has " + std::to_string(ids.size()) + " ids");
      const std::set<std::string> members(ids.begin(), ids.end());
      const bool nested = std::all_of(previous.begin(), previous.end(), [&](const std::string& id) { return members.count(id); });
      o.require(nested, "subset " + labels[k] + " not nested");
      previous = ids;
    }
    const auto rows = lines_of(out / "fewshot.csv");
    o.require(rows.size() == 5, "fewshot.csv rows");
    if (rows.size() != 5) return o;
    const auto header = split(rows[0]);
    const size_t col = std::find(header.begin(), header.end(), "final_train_loss") - header.begin();
    const double small = std::stod(split(rows[1])[col]), full = std::stod(split(rows[4])[col]);
    if (full > small) ++inversions;
    losses += (losses.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) + ": " + num(small) +
              " -> " + num(full);
  }
  o.require(inversions <= 1, std::to_string(inversions) + " inversions (" + losses + ")");
  if (o.pass) o.detail = "loss at 0.125 -> 1.0, " + losses;
  return o;
}

Outcome metrics_oracle() {
  Outcome o;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(91);
  auto safe = [](double n, double d) { return d == 0 ? 1.0 : n / d; };
  int mismatches = 0;
  for (int k = 0; k < 100; ++k) {
    torch::Tensor pred, gt;
    switch (k) {
      case 0: pred = torch::zeros({32, 32}); gt = torch::zeros({32, 32}); break;
      case 1: pred = torch::ones({32, 32}); gt = torch::ones({32, 32}); break;
      case 2: pred = torch::zeros({32, 32}); gt = torch::ones({32, 32}); break;
      case 3: pred = torch::ones({32, 32}); gt = torch::zeros({32, 32}); break;
      default: {
        const double density = (k % 10) / 10.0 + 0.05;
        pred = (torch::rand({32, 32}, gen) < density).to(torch::kFloat32);
        gt = (torch::rand({32, 32}, gen) < density).to(torch::kFloat32);
      }
    }
    const auto pv = test::to_vector(pred), gv = test::to_vector(gt);
    double tp = 0, fp = 0, fn = 0, tn = 0;
    for (size_t i = 0; i < pv.size(); ++i) {
      if (pv[i] && gv[i]) ++tp;
      else if (pv[i]) ++fp;
      else if (gv[i]) ++fn;
      else ++tn;
    }
    const std::vector<double> want{safe(tp, tp + fp + fn),         safe(tp, tp + fp),
                                   safe(tp, tp + fn),              safe(tn, tn + fp),
                                   safe(2 * tp, 2 * tp + fp + fn), safe(tp + tn, tp + fp + fn + tn),
                                   0.5 * (safe(tp, tp + fp + fn) + safe(tn, tn + fn + fp))};
    const auto c = confusion(pred.to(torch::kUInt8), gt.to(torch::kUInt8));
    if (double(c.tp) != tp || double(c.fp) != fp || double(c.fn) != fn || double(c.tn) != tn) ++mismatches;
    if (compute_metrics(c).values() != want) ++mismatches;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " mismatching pairs");
  if (o.pass) o.detail = "100 pairs, exact";
  return o;
}

Outcome determinism_persistence() {
  Outcome o;
  const auto root = test::scratch_dir("accept_determinism");
  const auto data = synthetic_fixture(8, 64, 101);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.lr_max = 3e-3;
  cfg.seed = 101;
  cfg.deterministic = true;
  RsamSeg last{nullptr};
  for (const char* name : {"a.csv", "b.csv"}) {
    auto model = build_model(test::toy_config(101));
    freeze_policy(*model);
    write_report_csv(fit(*model, data, &data, cfg), root / name);
    last = model;
  }
  o.require(slurp(root / "a.csv") == slurp(root / "b.csv"), "report CSVs differ");

  save_checkpoint(*last, root / "m.rsam");
  auto loaded = load_checkpoint(root / "m.rsam");
  last->eval();
  loaded->eval();
  torch::NoGradGuard g;
  const auto images = test::random_images(3, 64, 102);
  o.require(torch::equal(last->forward(images), loaded->forward(images)), "reloaded forward differs");
  if (o.pass) o.detail = "report CSVs byte-identical, reload forward bit-exact";
  return o;
}

Outcome schedule_values() {
  Outcome o;
  double worst = 0.0;
  for (auto [hi, lo] : {std::pair{2e-4, 0.0}, {1e-3, 1e-5}, {0.5, 0.1}}) {
    for (int64_t total : {2, 10, 300, 1000}) {
      worst = std::max(worst, std::abs(cosine_lr(0, total, hi, lo) - hi));
      worst = std::max(worst, std::abs(cosine_lr(total, total, hi, lo) - lo));
      worst = std::max(worst, std::abs(cosine_lr(total / 2, total, hi, lo) - (hi + lo) / 2));
    }
  }
  o.require(worst < 1e-12, "max error " + num(worst));
  if (o.pass) o.detail = "max error " + num(worst);
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "HFC oracle equivalence", 30, hfc_oracle},
      {2, "mask properties", 30, mask_properties},
      {3, "gradient correctness", 120, gradient_check},
      {4, "freeze semantics", 60, freeze_semantics},
      {5, "adapter-off equivalence", 60, adapter_off_equivalence},
      {6, "overfit sanity", 300, overfit_sanity},
      {7, "ablation protocol", 900, ablation_protocol},
      {8, "few-shot protocol", 900, fewshot_protocol},
      {9, "metrics oracle", 30, metrics_oracle},
      {10, "determinism and persistence", 300, determinism_persistence},
      {11, "schedule values", 30, schedule_values},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  set_deterministic(true, 0);
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > c.limit_seconds) {
      out.pass = false;
      out.detail += " (over the " + num(c.limit_seconds) + " s limit)";
    }
    failed += !out.pass;
    std::cout << (out.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << " [" << num(secs) << " s]  "
              << out.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
