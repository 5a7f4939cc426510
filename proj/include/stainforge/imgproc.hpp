#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stainforge/image.hpp"

namespace stainforge::imgproc {

using Histogram256 = std::array<std::uint64_t, 256>;

/// Otsu threshold on a 256-bin histogram. The two classes are {g < t} and
/// {g >= t}; the smallest t maximising the between-class variance wins. A
/// histogram with a single occupied bin returns that bin.
int otsu_threshold(const Histogram256& histogram);

/// Between-class variance of the split {g < t} / {g >= t}; 0 when either
/// class is empty.
double between_class_variance(const Histogram256& histogram, int t);

/// Luma grayscale, round(0.299 R + 0.587 G + 0.114 B).
std::vector<std::uint8_t> luma(const RgbImage& rgb);
Histogram256 histogram(std::span<const std::uint8_t> gray);

struct TissueResult {
  BinaryMask mask;
  int threshold = 0;
  double tissue_fraction = 0.0;
};

/// Tissue is darker than the slide background: mask = gray < otsu(gray).
TissueResult tissue_mask(const RgbImage& he);

struct AFParams {
  double lambda = 0.0;
  double b = 0.0;
};

/// max(0, channel - lambda * af + b), elementwise.
ChannelImage af_subtract(const ChannelImage& channel, const ChannelImage& af, const AFParams& params);

/// Interpolated order statistic: value at position p * (n - 1) of the sorted
/// sample. `sorted` must be ascending and non-empty.
double interpolated_percentile(std::span<const double> sorted, double p);

struct ChannelStats {
  std::vector<std::string> channels;
  std::vector<double> q999;
};

/// Exact multiset summary of foreground (> 0) intensities per channel.
/// Accumulators merge in any order and finalize to the same statistics.
class ChannelStatsAccumulator {
 public:
  explicit ChannelStatsAccumulator(std::vector<std::string> channels);

  void add(std::size_t channel, const ChannelImage& image);
  void add(std::size_t channel, std::span<const double> values);
  void merge(const ChannelStatsAccumulator& other);

  /// Throws UserError naming the first channel without foreground pixels.
  ChannelStats finalize(double percentile = 0.999) const;

  const std::vector<std::string>& channels() const { return channels_; }

 private:
  std::vector<std::string> channels_;
  std::vector<std::vector<double>> foreground_;
};

enum class LogBase { kTwo, kNatural };

/// Forward: 255 * log(min(v, q)/q + 1). With base 2 the range is [0, 255].
ChannelImage normalize_channel(const ChannelImage& corrected, double q999, bool invert = false,
                               LogBase base = LogBase::kTwo);
double normalize_value(double v, double q999, LogBase base = LogBase::kTwo);
double denormalize_value(double v, double q999, LogBase base = LogBase::kTwo);

/// Pixel radius used for a physical dilation radius.
int dilation_radius_px(double radius_um, double mpp);

/// Label-exclusive expansion: each background pixel within the radius of one
/// or more instances joins the nearest one (ties to the smaller id). Existing
/// labels are never overwritten.
InstanceMask dilate_nuclei(const InstanceMask& nuclei, double radius_um);

struct DensityGrid {
  int side = 32;
  std::vector<double> counts;
  double total() const;
};

struct Centroid {
  std::int32_t id = 0;
  double x = 0.0;
  double y = 0.0;
  std::size_t area = 0;
};

/// Per-instance centroids (mean pixel coordinate), sorted by id.
std::vector<Centroid> instance_centroids(const InstanceMask& mask);

/// Counts instance centroids falling in each cell of a side x side grid.
DensityGrid nuclei_density_map(const InstanceMask& mask, int side = 32);

struct QCThresholds {
  double min_density_pearson = 0.25;
  double min_tissue_iou = 0.5;
  double min_tissue_fraction = 0.40;
  bool check_density = true;
  bool check_iou = true;
  bool check_tissue_fraction = true;
};

struct TileQCReport {
  double tissue_fraction = 0.0;
  double density_pearson = kNaN;
  double tissue_iou = 0.0;
  bool empty_channel_pass = true;
  bool accepted = false;
  std::vector<std::string> reasons;  // one entry per failed criterion
};

double pearson(std::span<const double> x, std::span<const double> y);
double mask_iou(const BinaryMask& a, const BinaryMask& b);

/// Consecutive-section alignment QC. The tissue fraction criterion uses the
/// H&E tissue mask.
TileQCReport consecutive_alignment_qc(const DensityGrid& he_density, const DensityGrid& mif_density,
                                      const BinaryMask& tissue_he, const BinaryMask& tissue_mif,
                                      const QCThresholds& thresholds = {});

struct EmptyChannelQC {
  double hot_fraction = 0.0;
  bool pass = true;
};

/// Fails when the fraction of pixels strictly above `intensity_threshold`
/// strictly exceeds `fraction_threshold`.
EmptyChannelQC empty_channel_qc(const ChannelImage& empty_channel, double intensity_threshold,
                                double fraction_threshold);

}  // namespace stainforge::imgproc
