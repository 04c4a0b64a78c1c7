#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "dul/core.hpp"

namespace dul {

/// Where a dataset came from. Free-form, but the experiment drivers use
/// "diffusion" and "gmm".
using Provenance = std::string;

/// n samples in rows, one class index per row, and the matching one-hot
/// label matrix. Class indices run over [0, num_classes).
class LabeledDataset {
 public:
  LabeledDataset() = default;

  LabeledDataset(RowMatrix x, std::vector<int> labels, int num_classes,
                 Provenance provenance = "unknown")
      : x_(std::move(x)),
        labels_(std::move(labels)),
        num_classes_(num_classes),
        provenance_(std::move(provenance)) {
    if (static_cast<Eigen::Index>(labels_.size()) != x_.rows()) {
      throw Error(ErrorKind::kDimensionMismatch, "label count differs from row count");
    }
    if (num_classes_ < 1 || x_.cols() < 1 || x_.rows() < 1) {
      throw Error(ErrorKind::kData, "dataset needs n, d, k >= 1");
    }
    one_hot_ = Matrix::Zero(x_.rows(), num_classes_);
    for (Eigen::Index i = 0; i < x_.rows(); ++i) {
      int c = labels_[static_cast<std::size_t>(i)];
      if (c < 0 || c >= num_classes_) {
        throw Error(ErrorKind::kData, "label " + std::to_string(c) + " outside [0, k)");
      }
      one_hot_(i, c) = 1.0;
    }
  }

  const RowMatrix& x() const { return x_; }
  const std::vector<int>& labels() const { return labels_; }
  const Matrix& one_hot() const { return one_hot_; }
  int num_classes() const { return num_classes_; }
  const Provenance& provenance() const { return provenance_; }
  Eigen::Index size() const { return x_.rows(); }
  Eigen::Index dimension() const { return x_.cols(); }

  std::vector<Eigen::Index> rows_of_class(int c) const {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < size(); ++i) {
      if (labels_[static_cast<std::size_t>(i)] == c) rows.push_back(i);
    }
    return rows;
  }

  RowMatrix class_samples(int c) const {
    auto rows = rows_of_class(c);
    RowMatrix out(static_cast<Eigen::Index>(rows.size()), dimension());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.row(static_cast<Eigen::Index>(r)) = x_.row(rows[r]);
    }
    return out;
  }

  /// Rows picked by index, in the given order.
  LabeledDataset subset(const std::vector<Eigen::Index>& rows) const {
    RowMatrix out(static_cast<Eigen::Index>(rows.size()), dimension());
    std::vector<int> lab(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.row(static_cast<Eigen::Index>(r)) = x_.row(rows[r]);
      lab[r] = labels_[static_cast<std::size_t>(rows[r])];
    }
    return LabeledDataset(std::move(out), std::move(lab), num_classes_, provenance_);
  }

 private:
  RowMatrix x_;
  std::vector<int> labels_;
  int num_classes_ = 0;
  Matrix one_hot_;
  Provenance provenance_;
};

/// Stacks per-class sample blocks into one dataset, class c taking label c.
inline LabeledDataset stack_classes(const std::vector<RowMatrix>& per_class,
                                    Provenance provenance) {
  if (per_class.empty()) throw Error(ErrorKind::kData, "no classes to stack");
  Eigen::Index n = 0;
  const Eigen::Index d = per_class.front().cols();
  for (const auto& block : per_class) {
    if (block.cols() != d) throw Error(ErrorKind::kDimensionMismatch, "class blocks differ in d");
    n += block.rows();
  }
  RowMatrix x(n, d);
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n));
  Eigen::Index at = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    x.middleRows(at, per_class[c].rows()) = per_class[c];
    at += per_class[c].rows();
    labels.insert(labels.end(), static_cast<std::size_t>(per_class[c].rows()), static_cast<int>(c));
  }
  return LabeledDataset(std::move(x), std::move(labels), static_cast<int>(per_class.size()),
                        std::move(provenance));
}

}  // namespace dul
