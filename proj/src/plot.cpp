#include "rsam/plot.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdio>

#include "rsam/data.hpp"
#include "rsam/errors.hpp"

namespace rsam {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMargin = 50;

void write_png(const cv::Mat& img, const std::filesystem::path& path) {
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), img);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw DataError("cannot write image " + path.string());
}

std::string label_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

cv::Mat canvas(const std::string& title) {
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(img, title, {kMargin, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
  cv::line(img, {kMargin, kHeight - kMargin}, {kWidth - kMargin / 2, kHeight - kMargin}, {0, 0, 0});
  cv::line(img, {kMargin, kHeight - kMargin}, {kMargin, kMargin}, {0, 0, 0});
  return img;
}

cv::Mat plane_to_u8(const torch::Tensor& plane) {
  auto t = plane.to(torch::kFloat32).contiguous();
  cv::Mat m(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_32F, t.data_ptr<float>());
  cv::Mat out;
  m.convertTo(out, CV_8U, 255.0);
  return out;
}

}  // namespace

void plot_curve(const std::vector<double>& values, const std::string& title,
                const std::filesystem::path& path) {
  cv::Mat img = canvas(title);
  if (!values.empty()) {
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, hi = *hi_it, span = hi > lo ? hi - lo : 1.0;
    const double plot_w = kWidth - 1.5 * kMargin, plot_h = kHeight - 2.0 * kMargin;
    std::vector<cv::Point> pts;
    for (size_t i = 0; i < values.size(); ++i) {
      const double fx = values.size() > 1 ? static_cast<double>(i) / (values.size() - 1) : 0.0;
      pts.emplace_back(static_cast<int>(kMargin + fx * plot_w),
                       static_cast<int>(kHeight - kMargin - (values[i] - lo) / span * plot_h));
    }
    cv::polylines(img, pts, false, {200, 80, 30}, 2, cv::LINE_AA);
    cv::putText(img, label_value(hi), {4, kMargin + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
    cv::putText(img, label_value(lo), {4, kHeight - kMargin}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
  }
  write_png(img, path);
}

void plot_bars(const std::vector<std::string>& labels, const std::vector<double>& values,
               const std::string& title, const std::filesystem::path& path) {
  cv::Mat img = canvas(title);
  if (!values.empty()) {
    const double hi = std::max(1e-12, *std::max_element(values.begin(), values.end()));
    const int slot = static_cast<int>((kWidth - 1.5 * kMargin) / values.size());
    for (size_t i = 0; i < values.size(); ++i) {
      const int x0 = kMargin + static_cast<int>(i) * slot + slot / 5;
      const int height = static_cast<int>(std::max(0.0, values[i]) / hi * (kHeight - 2.5 * kMargin));
      cv::rectangle(img, {x0, kHeight - kMargin - height}, {x0 + 3 * slot / 5, kHeight - kMargin},
                    {60, 140, 220}, cv::FILLED);
      cv::putText(img, label_value(values[i]), {x0, kHeight - kMargin - height - 6},
                  cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
      if (i < labels.size()) {
        cv::putText(img, labels[i], {x0, kHeight - kMargin + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
      }
    }
  }
  write_png(img, path);
}

void save_overlay(const torch::Tensor& image, const torch::Tensor& gt, const torch::Tensor& pred,
                  const std::filesystem::path& path) {
  std::vector<cv::Mat> channels;
  for (int c = 2; c >= 0; --c) channels.push_back(plane_to_u8(image[c].clamp(0.0, 1.0)));
  cv::Mat rgb;
  cv::merge(channels, rgb);

  auto mask_bgr = [](const torch::Tensor& m) {
    cv::Mat grey = plane_to_u8(m.ne(0).to(torch::kFloat32));
    cv::Mat out;
    cv::cvtColor(grey, out, cv::COLOR_GRAY2BGR);
    return out;
  };
  std::vector<cv::Mat> tiles{rgb};
  if (gt.defined()) tiles.push_back(mask_bgr(gt));
  tiles.push_back(mask_bgr(pred));
  cv::Mat row;
  cv::hconcat(tiles, row);
  write_png(row, path);
}

void write_mask_png(const torch::Tensor& mask, const std::filesystem::path& path) {
  if (mask.dim() != 2) throw DataError("mask must be H×W");
  write_png(plane_to_u8(mask.ne(0).to(torch::kFloat32)), path);
}

torch::Tensor read_mask_png(const std::filesystem::path& path) {
  return binarize_label(read_raster(path), path.string());
}

}  // namespace rsam
