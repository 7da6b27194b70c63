#ifndef SMMCL_METRICS_HPP
#define SMMCL_METRICS_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "smmcl/sampling.hpp"
#include "smmcl/tensor.hpp"

namespace smmcl {

/// C x C counts, rows = ground truth, cols = prediction. Ignore pixels never
/// enter. Mergeable by addition.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes)
      : c_(num_classes), counts_(static_cast<size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw ArgumentError("num_classes must be positive");
  }

  int num_classes() const { return c_; }

  void add(int gt, int pred) {
    if (gt == kIgnoreLabel) return;
    if (gt < 0 || gt >= c_ || pred < 0 || pred >= c_)
      throw ArgumentError("class id out of range");
    ++counts_[static_cast<size_t>(gt) * c_ + pred];
  }

  void accumulate(const LabelMap& gt, const LabelMap& pred) {
    if (gt.h != pred.h || gt.w != pred.w)
      throw ShapeError("confusion accumulate shape mismatch");
    for (long long i = 0; i < gt.size(); ++i)
      add(gt.v[static_cast<size_t>(i)], pred.v[static_cast<size_t>(i)]);
  }

  void merge(const ConfusionMatrix& o) {
    if (o.c_ != c_) throw ShapeError("confusion merge class mismatch");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
  }

  int64_t at(int gt, int pred) const {
    return counts_[static_cast<size_t>(gt) * c_ + pred];
  }

  int64_t total() const {
    int64_t t = 0;
    for (int64_t v : counts_) t += v;
    return t;
  }

 private:
  int c_;
  std::vector<int64_t> counts_;
};

/// Per-class IoU; classes absent from ground truth get NaN.
inline std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  int c = cm.num_classes();
  std::vector<double> iou(static_cast<size_t>(c),
                          std::numeric_limits<double>::quiet_NaN());
  for (int k = 0; k < c; ++k) {
    int64_t tp = cm.at(k, k), fp = 0, fn = 0, gt = 0;
    for (int j = 0; j < c; ++j) {
      if (j != k) {
        fp += cm.at(j, k);
        fn += cm.at(k, j);
      }
      gt += cm.at(k, j);
    }
    if (gt == 0) continue;  // absent classes excluded from the mean
    iou[static_cast<size_t>(k)] =
        static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
  }
  return iou;
}

inline double miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw EmptyBatchError("empty confusion matrix");
  std::vector<double> iou = per_class_iou(cm);
  double s = 0;
  int n = 0;
  for (double v : iou)
    if (!std::isnan(v)) {
      s += v;
      ++n;
    }
  if (n == 0) throw EmptyBatchError("no class present in ground truth");
  return s / n;
}

/// Silhouette coefficient with cosine distance, class labels as clusters.
/// Points in singleton clusters contribute 0. Value in [-1,1].
template <typename T>
double silhouette_cosine(const Tensor<T>& emb, const std::vector<int>& labels) {
  if (emb.rank() != 2) throw ShapeError("silhouette expects [N,d]");
  int n = emb.dim(0), d = emb.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("silhouette label count mismatch");
  std::vector<int> classes;
  for (int l : labels)
    if (std::find(classes.begin(), classes.end(), l) == classes.end())
      classes.push_back(l);
  if (classes.size() < 2)
    throw MetricError("silhouette undefined for a single class");
  std::sort(classes.begin(), classes.end());
  std::vector<int> cls_index(static_cast<size_t>(n));
  std::vector<long long> cls_count(classes.size(), 0);
  for (int i = 0; i < n; ++i) {
    auto it = std::lower_bound(classes.begin(), classes.end(), labels[static_cast<size_t>(i)]);
    cls_index[static_cast<size_t>(i)] = static_cast<int>(it - classes.begin());
    ++cls_count[static_cast<size_t>(cls_index[static_cast<size_t>(i)])];
  }

  std::vector<double> norms(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* xi = emb.data() + static_cast<long long>(i) * d;
    double s = 0;
    for (int j = 0; j < d; ++j) s += static_cast<double>(xi[j]) * xi[j];
    norms[static_cast<size_t>(i)] = std::sqrt(s);
  }
  auto cos_dist = [&](int i, int j) {
    const T* a = emb.data() + static_cast<long long>(i) * d;
    const T* b = emb.data() + static_cast<long long>(j) * d;
    double dot = 0;
    for (int k = 0; k < d; ++k) dot += static_cast<double>(a[k]) * b[k];
    double den = norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)];
    if (den <= 0) return 1.0;
    return 1.0 - dot / den;
  };

  double total = 0;
  std::vector<double> sums(classes.size());
  for (int i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      sums[static_cast<size_t>(cls_index[static_cast<size_t>(j)])] += cos_dist(i, j);
    }
    int ci = cls_index[static_cast<size_t>(i)];
    if (cls_count[static_cast<size_t>(ci)] < 2) continue;  // singleton -> 0
    double a = sums[static_cast<size_t>(ci)] /
               static_cast<double>(cls_count[static_cast<size_t>(ci)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < classes.size(); ++k) {
      if (static_cast<int>(k) == ci || cls_count[k] == 0) continue;
      b = std::min(b, sums[k] / static_cast<double>(cls_count[k]));
    }
    double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / n;
}

}  // namespace smmcl

#endif  // SMMCL_METRICS_HPP
