#include "rsam/metrics.hpp"

#include <cstdio>
#include <fstream>

#include "rsam/errors.hpp"

namespace rsam {

namespace {

double ratio(uint64_t num, uint64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
  tp += other.tp;
  fp += other.fp;
  fn += other.fn;
  tn += other.tn;
  return *this;
}

std::vector<double> MetricsReport::values() const {
  return {jaccard, precision, recall, specificity, f1, overall_accuracy, miou};
}

const std::vector<std::string>& MetricsReport::column_names() {
  static const std::vector<std::string> names{"jaccard", "precision",        "recall", "specificity",
                                              "f1",      "overall_accuracy", "miou"};
  return names;
}

ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) throw ShapeError("prediction and ground truth shapes differ");
  const auto p = pred.ne(0);
  const auto g = gt.ne(0);
  ConfusionCounts c;
  c.tp = static_cast<uint64_t>((p & g).sum().item<int64_t>());
  c.fp = static_cast<uint64_t>((p & ~g).sum().item<int64_t>());
  c.fn = static_cast<uint64_t>((~p & g).sum().item<int64_t>());
  c.tn = static_cast<uint64_t>((~p & ~g).sum().item<int64_t>());
  return c;
}

MetricsReport compute_metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw ParameterError("metrics need at least one pixel");
  MetricsReport r;
  r.jaccard = ratio(c.tp, c.tp + c.fp + c.fn);
  r.precision = ratio(c.tp, c.tp + c.fp);
  r.recall = ratio(c.tp, c.tp + c.fn);
  r.specificity = ratio(c.tn, c.tn + c.fp);
  r.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  r.overall_accuracy = ratio(c.tp + c.tn, c.total());
  r.miou = 0.5 * (r.jaccard + ratio(c.tn, c.tn + c.fn + c.fp));
  return r;
}

MetricsReport aggregate(std::span<const ConfusionCounts> counts, Aggregation mode) {
  if (counts.empty()) throw ParameterError("cannot aggregate an empty list of counts");
  if (mode == Aggregation::micro) {
    ConfusionCounts sum;
    for (const auto& c : counts) sum += c;
    return compute_metrics(sum);
  }
  std::vector<double> acc(7, 0.0);
  for (const auto& c : counts) {
    const auto v = compute_metrics(c).values();
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  const double n = static_cast<double>(counts.size());
  return MetricsReport{acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n,
                       acc[4] / n, acc[5] / n, acc[6] / n};
}

std::string format_real(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return buf;
}

void write_metrics_csv(const std::vector<ImageScore>& scores, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "id,tp,fp,fn,tn";
  for (const auto& name : MetricsReport::column_names()) out << ',' << name;
  out << '\n';

  auto row = [&out](const std::string& id, const ConfusionCounts& c, const MetricsReport& m) {
    out << id << ',' << c.tp << ',' << c.fp << ',' << c.fn << ',' << c.tn;
    for (double v : m.values()) out << ',' << format_real(v);
    out << '\n';
  };

  std::vector<ConfusionCounts> all;
  ConfusionCounts sum;
  for (const auto& s : scores) {
    row(s.id, s.counts, compute_metrics(s.counts));
    all.push_back(s.counts);
    sum += s.counts;
  }
  if (!all.empty()) {
    row("micro", sum, aggregate(all, Aggregation::micro));
    row("macro", sum, aggregate(all, Aggregation::macro));
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace rsam
