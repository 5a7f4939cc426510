#include "stainforge/eval/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "stainforge/imgproc.hpp"

namespace stainforge::eval {

double convex_hull_area(std::vector<std::pair<double, double>> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return 0.0;
  auto cross = [](const auto& o, const auto& a, const auto& b) {
    return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
  };
  std::vector<std::pair<double, double>> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i - 1]) <= 0) --k;
    hull[k++] = pts[i - 1];
  }
  hull.resize(k - 1);
  double area = 0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    area += a.first * b.second - b.first * a.second;
  }
  return std::abs(area) / 2.0;
}

std::vector<Morphometry> nuclear_morphometry(const InstanceMask& nuclei, const RgbImage& he) {
  if (nuclei.width != he.width || nuclei.height != he.height) throw UserError("morphometry: mask and H&E sizes differ");
  const auto gray = imgproc::luma(he);
  struct Acc {
    double n = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0, sh = 0, shh = 0, edges = 0;
    std::vector<std::pair<double, double>> corners;
  };
  std::map<int, Acc> acc;
  const int w = nuclei.width, h = nuclei.height;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int id = nuclei.labels[static_cast<std::size_t>(y) * w + x];
      if (id <= 0) continue;
      auto& a = acc[id];
      const double hv = 255.0 - gray[static_cast<std::size_t>(y) * w + x];
      a.n += 1;
      a.sx += x;
      a.sy += y;
      a.sxx += static_cast<double>(x) * x;
      a.syy += static_cast<double>(y) * y;
      a.sxy += static_cast<double>(x) * y;
      a.sh += hv;
      a.shh += hv * hv;
      const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
      for (const auto& d : nb) {
        const int xx = x + d[0], yy = y + d[1];
        if (xx < 0 || yy < 0 || xx >= w || yy >= h || nuclei.labels[static_cast<std::size_t>(yy) * w + xx] != id) {
          a.edges += 1;
        }
      }
      for (int cy = 0; cy <= 1; ++cy) {
        for (int cx = 0; cx <= 1; ++cx) a.corners.emplace_back(x + cx, y + cy);
      }
    }
  }
  std::vector<Morphometry> out;
  for (auto& [id, a] : acc) {
    Morphometry m;
    m.id = id;
    m.area = a.n;
    m.perimeter = a.edges;
    const double mx = a.sx / a.n, my = a.sy / a.n;
    const double cxx = a.sxx / a.n - mx * mx, cyy = a.syy / a.n - my * my, cxy = a.sxy / a.n - mx * my;
    const double tr = cxx + cyy, det_term = std::sqrt(std::max(0.0, (cxx - cyy) * (cxx - cyy) / 4 + cxy * cxy));
    const double l1 = tr / 2 + det_term, l2 = std::max(0.0, tr / 2 - det_term);
    m.eccentricity = l1 > 0 ? std::sqrt(std::max(0.0, 1.0 - l2 / l1)) : 0.0;
    m.orientation = 0.5 * std::atan2(2 * cxy, cxx - cyy);
    m.hema_mean = a.sh / a.n;
    m.hema_std = std::sqrt(std::max(0.0, a.shh / a.n - m.hema_mean * m.hema_mean));
    const double hull = convex_hull_area(std::move(a.corners));
    m.solidity = hull > 0 ? std::min(1.0, a.n / hull) : 1.0;
    out.push_back(m);
  }
  return out;
}

FeatureMatrix morphometry_matrix(const std::vector<Morphometry>& rows) {
  FeatureMatrix x(rows.size(), morphometry_feature_names().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& m = rows[r];
    const double v[] = {m.area, m.perimeter, m.eccentricity, m.orientation, m.hema_mean, m.hema_std, m.solidity};
    for (std::size_t j = 0; j < x.cols; ++j) x.at(r, j) = v[j];
  }
  return x;
}

}  // namespace stainforge::eval
