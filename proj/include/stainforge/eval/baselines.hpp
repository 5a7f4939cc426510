#pragma once

#include <string>
#include <vector>

#include "stainforge/eval/probe.hpp"
#include "stainforge/image.hpp"

namespace stainforge::eval {

struct Morphometry {
  int id = 0;
  double area = 0;         // pixels
  double perimeter = 0;    // exposed pixel edges (4-neighbourhood)
  double eccentricity = 0; // from second central moments, in [0, 1)
  double orientation = 0;  // major-axis angle in radians, (-pi/2, pi/2]
  double hema_mean = 0;    // mean of 255 - luma over the nucleus
  double hema_std = 0;
  double solidity = 0;     // area / convex hull area of the pixel squares
};

inline const std::vector<std::string>& morphometry_feature_names() {
  static const std::vector<std::string> names{"area",      "perimeter", "eccentricity", "orientation",
                                              "hema_mean", "hema_std",  "solidity"};
  return names;
}

/// One row per instance id present in `nuclei`, ascending by id.
std::vector<Morphometry> nuclear_morphometry(const InstanceMask& nuclei, const RgbImage& he);

FeatureMatrix morphometry_matrix(const std::vector<Morphometry>& rows);

/// Area of the convex hull of a point set (monotone chain).
double convex_hull_area(std::vector<std::pair<double, double>> points);

}  // namespace stainforge::eval
