#include "stainforge/imgproc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace stainforge::imgproc {

double between_class_variance(const Histogram256& histogram, int t) {
  long double n0 = 0, s0 = 0, n = 0, s = 0;
  for (int g = 0; g < 256; ++g) {
    const long double c = static_cast<long double>(histogram[g]);
    n += c;
    s += c * g;
    if (g < t) {
      n0 += c;
      s0 += c * g;
    }
  }
  const long double n1 = n - n0;
  if (n0 == 0 || n1 == 0) return 0.0;
  const long double mu0 = s0 / n0;
  const long double mu1 = (s - s0) / n1;
  const long double w0 = n0 / n;
  const long double w1 = n1 / n;
  return static_cast<double>(w0 * w1 * (mu0 - mu1) * (mu0 - mu1));
}

int otsu_threshold(const Histogram256& histogram) {
  long double n = 0, s = 0;
  int occupied = 0;
  int only_level = 0;
  for (int g = 0; g < 256; ++g) {
    if (histogram[g] == 0) continue;
    ++occupied;
    only_level = g;
    n += histogram[g];
    s += static_cast<long double>(histogram[g]) * g;
  }
  if (occupied == 0) throw UserError("empty histogram");
  if (occupied == 1) return only_level;

  // Sweep t upward; class 0 accumulates bins g < t.
  long double n0 = 0, s0 = 0;
  long double best = -1;
  int best_t = 0;
  for (int t = 0; t < 256; ++t) {
    if (t > 0) {
      n0 += histogram[t - 1];
      s0 += static_cast<long double>(histogram[t - 1]) * (t - 1);
    }
    const long double n1 = n - n0;
    long double var = 0;
    if (n0 > 0 && n1 > 0) {
      const long double d = s0 / n0 - (s - s0) / n1;
      var = (n0 / n) * (n1 / n) * d * d;
    }
    if (var > best * (1 + 1e-15L)) {
      best = var;
      best_t = t;
    }
  }
  return best_t;
}

std::vector<std::uint8_t> luma(const RgbImage& rgb) {
  std::vector<std::uint8_t> gray(rgb.pixel_count());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const double v = 0.299 * rgb.data[3 * i] + 0.587 * rgb.data[3 * i + 1] + 0.114 * rgb.data[3 * i + 2];
    gray[i] = static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
  }
  return gray;
}

Histogram256 histogram(std::span<const std::uint8_t> gray) {
  Histogram256 h{};
  for (auto g : gray) ++h[g];
  return h;
}

TissueResult tissue_mask(const RgbImage& he) {
  const auto gray = luma(he);
  TissueResult r;
  r.threshold = otsu_threshold(histogram(gray));
  r.mask = BinaryMask(he.width, he.height);
  for (std::size_t i = 0; i < gray.size(); ++i) r.mask.values[i] = gray[i] < r.threshold;
  r.tissue_fraction = r.mask.fraction();
  return r;
}

ChannelImage af_subtract(const ChannelImage& channel, const ChannelImage& af, const AFParams& params) {
  if (!channel.same_shape(af)) throw UserError("af_subtract: channel and AF shapes differ");
  if (!(params.lambda >= 0)) throw UserError("af_subtract: lambda must be >= 0");
  ChannelImage out = channel;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.pixels[i] = std::max(0.0, channel.pixels[i] - params.lambda * af.pixels[i] + params.b);
  }
  return out;
}

double interpolated_percentile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw UserError("percentile of empty sample");
  const double pos = std::clamp(p, 0.0, 1.0) * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

ChannelStatsAccumulator::ChannelStatsAccumulator(std::vector<std::string> channels)
    : channels_(std::move(channels)), foreground_(channels_.size()) {}

void ChannelStatsAccumulator::add(std::size_t channel, const ChannelImage& image) {
  add(channel, image.pixels);
}

void ChannelStatsAccumulator::add(std::size_t channel, std::span<const double> values) {
  auto& dst = foreground_.at(channel);
  for (double v : values) {
    if (v > 0) dst.push_back(v);
  }
}

void ChannelStatsAccumulator::merge(const ChannelStatsAccumulator& other) {
  if (other.channels_ != channels_) throw Error("merging stats over different channel sets");
  for (std::size_t c = 0; c < channels_.size(); ++c) {
    foreground_[c].insert(foreground_[c].end(), other.foreground_[c].begin(), other.foreground_[c].end());
  }
}

ChannelStats ChannelStatsAccumulator::finalize(double percentile) const {
  ChannelStats stats;
  stats.channels = channels_;
  for (std::size_t c = 0; c < channels_.size(); ++c) {
    if (foreground_[c].empty()) {
      throw UserError("channel '" + channels_[c] + "' has no foreground pixels");
    }
    auto sorted = foreground_[c];
    std::sort(sorted.begin(), sorted.end());
    stats.q999.push_back(interpolated_percentile(sorted, percentile));
  }
  return stats;
}

namespace {

double log_unit(LogBase base) { return base == LogBase::kTwo ? std::log(2.0) : 1.0; }

}  // namespace

double normalize_value(double v, double q999, LogBase base) {
  if (!(q999 > 0)) throw UserError("normalization percentile must be > 0");
  const double clipped = std::min(std::max(v, 0.0), q999);
  return 255.0 * std::log1p(clipped / q999) / log_unit(base);
}

double denormalize_value(double v, double q999, LogBase base) {
  if (!(q999 > 0)) throw UserError("normalization percentile must be > 0");
  return q999 * std::expm1(v / 255.0 * log_unit(base));
}

ChannelImage normalize_channel(const ChannelImage& corrected, double q999, bool invert, LogBase base) {
  if (!(q999 > 0)) throw UserError("normalization percentile must be > 0");
  ChannelImage out = corrected;
  for (auto& v : out.pixels) v = invert ? denormalize_value(v, q999, base) : normalize_value(v, q999, base);
  return out;
}

int dilation_radius_px(double radius_um, double mpp) {
  if (!(mpp > 0)) throw UserError("mpp must be positive");
  if (radius_um <= 0) return 0;
  return static_cast<int>(std::ceil(radius_um / mpp - 1e-9));
}

InstanceMask dilate_nuclei(const InstanceMask& nuclei, double radius_um) {
  const int r = dilation_radius_px(radius_um, nuclei.mpp);
  InstanceMask out = nuclei;
  if (r == 0) return out;
  const long r2 = static_cast<long>(r) * r;
  for (int y = 0; y < nuclei.height; ++y) {
    for (int x = 0; x < nuclei.width; ++x) {
      if (nuclei.at(x, y) != 0) continue;
      long best_d2 = r2 + 1;
      std::int32_t best_id = 0;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= nuclei.height) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= nuclei.width) continue;
          const std::int32_t id = nuclei.at(xx, yy);
          if (id == 0) continue;
          const long d2 = static_cast<long>(dx) * dx + static_cast<long>(dy) * dy;
          if (d2 < best_d2 || (d2 == best_d2 && id < best_id)) {
            best_d2 = d2;
            best_id = id;
          }
        }
      }
      if (best_id != 0) out.at(x, y) = best_id;
    }
  }
  return out;
}

double DensityGrid::total() const { return std::accumulate(counts.begin(), counts.end(), 0.0); }

std::vector<Centroid> instance_centroids(const InstanceMask& mask) {
  const auto n = static_cast<std::size_t>(mask.max_label()) + 1;
  std::vector<double> sx(n, 0.0), sy(n, 0.0);
  std::vector<std::size_t> area(n, 0);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const auto id = mask.at(x, y);
      if (id <= 0) continue;
      sx[id] += x;
      sy[id] += y;
      ++area[id];
    }
  }
  std::vector<Centroid> out;
  for (std::size_t id = 1; id < n; ++id) {
    if (area[id] == 0) continue;
    const double a = static_cast<double>(area[id]);
    out.push_back({static_cast<std::int32_t>(id), sx[id] / a, sy[id] / a, area[id]});
  }
  return out;
}

DensityGrid nuclei_density_map(const InstanceMask& mask, int side) {
  if (side < 1) throw UserError("density grid side must be positive");
  DensityGrid grid;
  grid.side = side;
  grid.counts.assign(static_cast<std::size_t>(side) * side, 0.0);
  for (const auto& c : instance_centroids(mask)) {
    // Pixel centers sit at (x + 0.5, y + 0.5) in continuous coordinates.
    const int bx = std::clamp(static_cast<int>(std::floor((c.x + 0.5) * side / mask.width)), 0, side - 1);
    const int by = std::clamp(static_cast<int>(std::floor((c.y + 0.5) * side / mask.height)), 0, side - 1);
    grid.counts[static_cast<std::size_t>(by) * side + bx] += 1.0;
  }
  return grid;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw UserError("pearson: length mismatch");
  const auto n = static_cast<double>(x.size());
  if (x.size() < 2) return kNaN;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0 || syy <= 0) return kNaN;
  return sxy / std::sqrt(sxx * syy);
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height) throw UserError("mask_iou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool pa = a.values[i] != 0, pb = b.values[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

TileQCReport consecutive_alignment_qc(const DensityGrid& he_density, const DensityGrid& mif_density,
                                      const BinaryMask& tissue_he, const BinaryMask& tissue_mif,
                                      const QCThresholds& thresholds) {
  if (he_density.side != mif_density.side) throw UserError("density grids differ in size");
  TileQCReport report;
  report.tissue_fraction = tissue_he.fraction();
  report.tissue_iou = mask_iou(tissue_he, tissue_mif);
  report.density_pearson = pearson(he_density.counts, mif_density.counts);

  if (thresholds.check_density) {
    if (std::isnan(report.density_pearson)) {
      report.reasons.emplace_back("density_pearson_undefined");
    } else if (!(report.density_pearson > thresholds.min_density_pearson)) {
      report.reasons.emplace_back("density_pearson");
    }
  }
  if (thresholds.check_iou && !(report.tissue_iou > thresholds.min_tissue_iou)) {
    report.reasons.emplace_back("tissue_iou");
  }
  if (thresholds.check_tissue_fraction && !(report.tissue_fraction > thresholds.min_tissue_fraction)) {
    report.reasons.emplace_back("tissue_fraction");
  }
  report.accepted = report.reasons.empty();
  return report;
}

EmptyChannelQC empty_channel_qc(const ChannelImage& empty_channel, double intensity_threshold,
                                double fraction_threshold) {
  if (intensity_threshold < 0 || fraction_threshold < 0) throw UserError("QC thresholds must be >= 0");
  std::size_t hot = 0;
  for (double v : empty_channel.pixels) hot += v > intensity_threshold;
  EmptyChannelQC r;
  r.hot_fraction = empty_channel.size() == 0 ? 0.0
                                             : static_cast<double>(hot) / static_cast<double>(empty_channel.size());
  r.pass = !(r.hot_fraction > fraction_threshold);
  return r;
}

}  // namespace stainforge::imgproc
