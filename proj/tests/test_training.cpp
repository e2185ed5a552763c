#include "doctest_torch.hpp"

#include <fstream>
#include <sstream>

#include "rsam/errors.hpp"
#include "rsam/training.hpp"
#include "support.hpp"

using namespace rsam;
namespace fs = std::filesystem;

namespace {

struct ScalarModule : torch::nn::Module {
  torch::Tensor w;
  explicit ScalarModule(double init) { w = register_parameter("w", torch::full({1}, init, torch::kFloat64)); }
};

std::map<std::string, torch::Tensor> snapshot(torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters()) out[p.key()] = p.value().detach().clone();
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainConfig quick(int64_t epochs, uint64_t seed = 0) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 2;
  c.lr_max = 3e-3;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("BCE: ln 2 at zero logits, saturation, per-pixel oracle") {
    const auto y = torch::randint(0, 2, {1, 1, 4, 4}).to(torch::kFloat32);
    CHECK(bce_loss(torch::zeros({1, 1, 4, 4}), y).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-7));
    CHECK(bce_loss(40.0 * y - 20.0, y).item<double>() < 1e-6);

    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(2);
    const auto z = torch::randn({1, 1, 4, 4}, gen, torch::kFloat64) * 3.0;
    const auto t = torch::randint(0, 2, {1, 1, 4, 4}, gen, torch::kFloat64);
    const auto zv = test::to_vector(z), tv = test::to_vector(t);
    double sum = 0;
    for (size_t i = 0; i < zv.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-zv[i]));
      sum += -(tv[i] * std::log(s) + (1 - tv[i]) * std::log(1 - s));
    }
    CHECK(std::abs(bce_loss(z, t).item<double>() - sum / zv.size()) < 1e-6);
    CHECK_THROWS_AS(bce_loss(z, torch::zeros({1, 1, 4, 5})), ShapeError);
  }

  TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(std::abs(cosine_lr(0, 100, 2e-4, 1e-6) - 2e-4) < 1e-12);
    CHECK(std::abs(cosine_lr(100, 100, 2e-4, 1e-6) - 1e-6) < 1e-12);
    CHECK(std::abs(cosine_lr(50, 100, 2e-4, 1e-6) - (2e-4 + 1e-6) / 2) < 1e-12);
    CHECK(cosine_lr(30, 100, 1.0, 0.0) > cosine_lr(31, 100, 1.0, 0.0));
    CHECK_THROWS_AS(cosine_lr(101, 100, 1.0, 0.0), ParameterError);
  }

  TEST_CASE("AdamW on one scalar matches a hand-rolled decoupled-decay update") {
    ScalarModule m(0.8);
    TrainConfig cfg;
    cfg.lr_max = 0.05;
    cfg.weight_decay = 0.1;
    auto opt = make_optimizer(m, cfg);
    double w = 0.8, mom = 0.0, vel = 0.0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const std::vector<double> grads{0.3, -1.2, 0.05, 2.0};
    for (size_t t = 1; t <= grads.size(); ++t) {
      const double g = grads[t - 1];
      m.w.mutable_grad() = torch::full({1}, g, torch::kFloat64);
      opt->step();
      w -= cfg.lr_max * cfg.weight_decay * w;
      mom = b1 * mom + (1 - b1) * g;
      vel = b2 * vel + (1 - b2) * g * g;
      const double mhat = mom / (1 - std::pow(b1, t)), vhat = vel / (1 - std::pow(b2, t));
      w -= cfg.lr_max * mhat / (std::sqrt(vhat) + eps);
      CHECK(std::abs(m.w.item<double>() - w) < 1e-7);
    }
  }

  TEST_CASE("zero learning rate leaves parameters unchanged") {
    auto model = build_model(test::toy_config(1));
    freeze_policy(*model);
    auto cfg = quick(1);
    cfg.lr_max = 0.0;
    auto opt = make_optimizer(*model, cfg);
    const auto m = synthetic_fixture(2, 64, 1);
    const auto batch = load_batch(m, {0, 1}, {});
    const auto before = snapshot(*model);
    ScheduleState s{0, 1, 0.0};
    const auto r = train_step(*model, batch, *opt, s, cfg);
    CHECK(std::isfinite(r.loss));
    CHECK(s.step == 1);
    for (const auto& [name, value] : snapshot(*model)) CHECK(torch::equal(value, before.at(name)));
  }

  TEST_CASE("one step moves trainable groups and never the frozen one") {
    auto model = build_model(test::toy_config(2));
    freeze_policy(*model);
    auto cfg = quick(1);
    auto opt = make_optimizer(*model, cfg);
    const auto batch = load_batch(synthetic_fixture(2, 64, 2), {0, 1}, {});
    const auto before = snapshot(*model);
    ScheduleState s{0, 10, 0.0};
    const auto r = train_step(*model, batch, *opt, s, cfg);
    CHECK(r.lr == cfg.lr_max);
    std::map<ParamGroup, double> moved;
    for (const auto& [name, value] : snapshot(*model)) {
      auto& d = moved[group_of(name)];
      d = std::max(d, (value - before.at(name)).abs().max().item<double>());
    }
    CHECK(moved[ParamGroup::backbone] == 0.0);
    CHECK(moved[ParamGroup::adapter_scale] > 0.0);
    CHECK(moved[ParamGroup::adapter_feature] > 0.0);
    CHECK(moved[ParamGroup::decoder] > 0.0);
  }

  TEST_CASE("non-finite loss aborts with a diagnostic") {
    auto model = build_model(test::toy_config(3));
    freeze_policy(*model);
    {
      torch::NoGradGuard g;
      model->decoder->mask_bias.fill_(std::numeric_limits<float>::quiet_NaN());
    }
    auto cfg = quick(1);
    auto opt = make_optimizer(*model, cfg);
    const auto batch = load_batch(synthetic_fixture(2, 64, 3), {0, 1}, {});
    ScheduleState s{0, 4, 0.0};
    std::string msg;
    try {
      train_step(*model, batch, *opt, s, cfg);
    } catch (const TrainingError& e) {
      msg = e.what();
    }
    CHECK(msg.find("step 0") != std::string::npos);
    CHECK(msg.find("lr=") != std::string::npos);
    CHECK(msg.find("loss=") != std::string::npos);
  }

  TEST_CASE("fit bookkeeping: one epoch over one batch is one step") {
    auto model = build_model(test::toy_config(4));
    freeze_policy(*model);
    const auto report = fit(*model, synthetic_fixture(2, 64, 4), nullptr, quick(1));
    CHECK(report.total_steps == 1);
    CHECK(report.step_losses.size() == 1);
    REQUIRE(report.epochs.size() == 1);
    CHECK(report.epochs[0].steps == 1);
    CHECK(report.final_loss() == report.epochs[0].mean_loss);
  }

  TEST_CASE("fit evaluates, checkpoints and is deterministic") {
    const auto dir = test::scratch_dir("fit");
    const auto train = synthetic_fixture(4, 64, 5);
    const auto eval = synthetic_fixture(2, 64, 6);
    FitOptions opts;
    opts.checkpoint_dir = dir;
    auto run = [&](const fs::path& csv) {
      auto model = build_model(test::toy_config(5));
      freeze_policy(*model);
      const auto r = fit(*model, train, &eval, quick(3, 5), opts);
      write_report_csv(r, csv);
      return r;
    };
    const auto a = run(dir / "a.csv");
    const auto b = run(dir / "b.csv");
    CHECK(a.step_losses == b.step_losses);
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    CHECK(a.evals.size() == 3);
    REQUIRE(a.best_checkpoint.has_value());
    CHECK(fs::exists(*a.best_checkpoint));
    CHECK(slurp(dir / "a.csv").rfind("epoch,steps,mean_loss,lr,jaccard", 0) == 0);
  }

  TEST_CASE("fit rejects empty manifests and bad configs") {
    auto model = build_model(test::toy_config());
    freeze_policy(*model);
    CHECK_THROWS_AS(fit(*model, DatasetManifest{}, nullptr, quick(1)), DataError);
    auto bad = quick(0);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = quick(1);
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}
