#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "stainforge/common.hpp"

namespace stainforge {

/// Streaming Pearson correlation (co-moment updates, mergeable). Feeding
/// several chunks gives the correlation of their concatenation.
class PearsonAccumulator {
 public:
  void add(double x, double y) {
    n_ += 1.0;
    const double dx = x - mx_;
    mx_ += dx / n_;
    const double dy = y - my_;
    my_ += dy / n_;
    sxx_ += dx * (x - mx_);
    syy_ += dy * (y - my_);
    sxy_ += dx * (y - my_);
  }

  void add(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw UserError("pearson: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) add(x[i], y[i]);
  }

  void merge(const PearsonAccumulator& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double n = n_ + o.n_;
    const double dx = o.mx_ - mx_, dy = o.my_ - my_;
    sxx_ += o.sxx_ + dx * dx * n_ * o.n_ / n;
    syy_ += o.syy_ + dy * dy * n_ * o.n_ / n;
    sxy_ += o.sxy_ + dx * dy * n_ * o.n_ / n;
    mx_ += dx * o.n_ / n;
    my_ += dy * o.n_ / n;
    n_ = n;
  }

  double count() const { return n_; }
  bool defined() const { return n_ >= 2 && sxx_ > 0 && syy_ > 0; }
  /// NaN when fewer than two samples or either side has zero variance.
  double value() const {
    if (!defined()) return kNaN;
    const double r = sxy_ / std::sqrt(sxx_ * syy_);
    return std::fmax(-1.0, std::fmin(1.0, r));
  }
  const char* reason() const {
    if (n_ < 2) return "fewer than two samples";
    if (!(sxx_ > 0)) return "zero variance in prediction";
    if (!(syy_ > 0)) return "zero variance in target";
    return "";
  }

 private:
  double n_ = 0, mx_ = 0, my_ = 0, sxx_ = 0, syy_ = 0, sxy_ = 0;
};

}  // namespace stainforge
