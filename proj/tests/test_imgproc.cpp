#include <doctest.h>

#include "oracles.hpp"
#include "stainforge/imgproc.hpp"

using namespace stainforge;
using namespace stainforge::imgproc;

namespace {

ChannelImage constant(int w, int h, double v) { return ChannelImage(w, h, 0.5, v); }

InstanceMask mask_with(int w, int h, std::initializer_list<std::tuple<int, int, int>> px, double mpp = 0.5) {
  InstanceMask m(w, h, mpp);
  for (auto [x, y, id] : px) m.at(x, y) = id;
  return m;
}

}  // namespace

TEST_CASE("otsu matches brute force on random histograms") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Histogram256 h{};
    for (auto& c : h) c = rng.bernoulli(0.3) ? 0 : rng.below(40);
    h[rng.below(256)] += 1;
    h[rng.below(256)] += 1;
    CHECK_MESSAGE(otsu_threshold(h) == oracle::otsu(h), "seed " << seed);
  }
}

TEST_CASE("otsu degenerate single level") {
  Histogram256 h{};
  h[77] = 100;
  CHECK(otsu_threshold(h) == 77);
  RgbImage dark(8, 8, 0.5, 50);
  const auto t = tissue_mask(dark);
  CHECK(t.tissue_fraction == 0.0);
}

TEST_CASE("tissue mask splits white and dark halves") {
  RgbImage img(10, 10);
  for (int y = 0; y < 10; ++y) {
    for (int x = 0; x < 10; ++x) {
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = x < 5 ? 255 : 50;
    }
  }
  const auto t = tissue_mask(img);
  CHECK(t.tissue_fraction == doctest::Approx(0.5));
  CHECK(t.mask.values[0] == 0);
  CHECK(t.mask.values[9] == 1);
}

TEST_CASE("af_subtract hand values") {
  auto one = [](double c, double af, double l, double b) {
    return af_subtract(constant(1, 1, c), constant(1, 1, af), {l, b}).pixels[0];
  };
  CHECK(one(100, 40, 0.5, 0) == 80.0);
  CHECK(one(10, 100, 1, 0) == 0.0);
  CHECK(one(37.25, 900, 0, 0) == 37.25);
  CHECK(one(10, 4, 1, 2.5) == 8.5);
  CHECK_THROWS_AS(af_subtract(constant(2, 2, 1), constant(3, 2, 1), {1, 0}), UserError);
}

TEST_CASE("af_subtract bounds") {
  Rng rng(3);
  ChannelImage ch(16, 16), af(16, 16);
  for (auto& v : ch.pixels) v = rng.uniform(0, 500);
  for (auto& v : af.pixels) v = rng.uniform(0, 500);
  const double b = 7;
  const auto out = af_subtract(ch, af, {0.8, b});
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out.pixels[i] >= 0);
    CHECK(out.pixels[i] <= std::max(ch.pixels[i] + b, 0.0));
  }
}

TEST_CASE("channel stats q999") {
  SUBCASE("1..1000") {
    ChannelStatsAccumulator acc({"m"});
    std::vector<double> v;
    for (int i = 1; i <= 1000; ++i) v.push_back(i);
    acc.add(0, v);
    // position 0.999 * 999 = 998.001 -> 999 + 0.001
    CHECK(acc.finalize().q999[0] == doctest::Approx(999.001).epsilon(1e-12));
  }
  SUBCASE("constant and zeros") {
    ChannelStatsAccumulator acc({"a", "b"});
    acc.add(0, std::vector<double>(50, 7.0));
    acc.add(1, std::vector<double>{0, 0, 5});
    const auto s = acc.finalize();
    CHECK(s.q999[0] == 7.0);
    CHECK(s.q999[1] == 5.0);
  }
  SUBCASE("no foreground names the channel") {
    ChannelStatsAccumulator acc({"CD8"});
    acc.add(0, std::vector<double>{0, 0});
    CHECK_THROWS_WITH_AS(acc.finalize(), doctest::Contains("CD8"), UserError);
  }
  SUBCASE("merge order does not matter") {
    Rng rng(9);
    ChannelStatsAccumulator a({"m"}), b({"m"}), all({"m"});
    std::vector<double> x(300), y(200);
    for (auto& v : x) v = rng.uniform(0, 10);
    for (auto& v : y) v = rng.uniform(0, 20);
    a.add(0, x);
    b.add(0, y);
    all.add(0, y);
    all.add(0, x);
    b.merge(a);
    CHECK(b.finalize().q999[0] == all.finalize().q999[0]);
  }
}

TEST_CASE("normalize_channel") {
  const double q = 123.4;
  CHECK(normalize_value(q, q) == 255.0);
  CHECK(normalize_value(0, q) == 0.0);
  CHECK(normalize_value(3 * q, q) == 255.0);
  CHECK(normalize_value(q / 2, q) == doctest::Approx(255.0 * std::log2(1.5)));
  CHECK_THROWS_AS(normalize_channel(constant(1, 1, 1), 0.0), UserError);
  Rng rng(1);
  double prev = -1, prev_in = -1;
  std::vector<double> ins(200);
  for (auto& v : ins) v = rng.uniform(0, q);
  std::sort(ins.begin(), ins.end());
  for (double v : ins) {
    const double f = normalize_value(v, q);
    CHECK(f >= prev);
    prev = f;
    prev_in = v;
    const double back = denormalize_value(f, q);
    CHECK(std::abs(back - v) <= 1e-9 * std::max(v, 1e-300));
  }
  (void)prev_in;
  for (double out : {0.0, 1.0, 100.0, 254.5, 255.0}) {
    CHECK(normalize_value(denormalize_value(out, q), q) == doctest::Approx(out).epsilon(1e-12));
  }
  CHECK(normalize_value(q, q, LogBase::kNatural) == doctest::Approx(255.0 * std::log(2.0)));
}

TEST_CASE("dilate_nuclei") {
  SUBCASE("radius 0 is identity") {
    auto m = mask_with(8, 8, {{2, 2, 1}, {5, 5, 2}});
    CHECK(dilate_nuclei(m, 0).labels == m.labels);
  }
  SUBCASE("single pixel, 2 um at 0.5 mpp is a radius-4 disk") {
    auto m = mask_with(15, 15, {{7, 7, 1}});
    const auto d = dilate_nuclei(m, 2.0);
    CHECK(d.labels == oracle::dilate(m.labels, 15, 15, 4));
    int n = 0;
    for (auto l : d.labels) n += l == 1;
    CHECK(n == 49);  // lattice points with x^2 + y^2 <= 16
  }
  SUBCASE("equidistant midline goes to the smaller id") {
    auto m = mask_with(9, 5, {{2, 2, 7}, {6, 2, 3}});
    const auto d = dilate_nuclei(m, 5.0);
    CHECK(d.at(4, 2) == 3);
    CHECK(d.at(4, 0) == 3);
    CHECK(d.labels == oracle::dilate(m.labels, 9, 5, 10));
  }
  SUBCASE("random masks against brute force") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      InstanceMask m(20, 16, 0.5);
      for (int id = 1; id <= 6; ++id) {
        const int x = static_cast<int>(rng.below(18)), y = static_cast<int>(rng.below(14));
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) m.at(x + dx, y + dy) = id;
        }
      }
      const auto ids = m.instance_ids();
      const auto d = dilate_nuclei(m, 1.5);
      CHECK(d.labels == oracle::dilate(m.labels, 20, 16, 3));
      CHECK(d.instance_ids() == ids);
      for (std::size_t i = 0; i < m.labels.size(); ++i) {
        if (m.labels[i]) CHECK(d.labels[i] == m.labels[i]);
      }
    }
  }
}

TEST_CASE("nuclei density map") {
  SUBCASE("empty") {
    InstanceMask m(64, 64);
    CHECK(nuclei_density_map(m).total() == 0);
  }
  SUBCASE("nucleus left of center") {
    InstanceMask m(64, 64);
    for (int y = 30; y <= 31; ++y) {
      for (int x = 30; x <= 31; ++x) m.at(x, y) = 1;
    }
    const auto g = nuclei_density_map(m);
    CHECK(g.total() == 1);
    // centroid pixel (30.5, 30.5) spans [30, 32) in continuous coordinates: bin 15
    CHECK(g.counts[15 * 32 + 15] == 1);
  }
  SUBCASE("count conservation") {
    Rng rng(5);
    InstanceMask m(64, 64);
    for (int id = 1; id <= 10; ++id) m.at(static_cast<int>(rng.below(64)), static_cast<int>(rng.below(64))) = id;
    int n = static_cast<int>(m.instance_ids().size());
    CHECK(nuclei_density_map(m).total() == n);
  }
}

TEST_CASE("consecutive alignment QC") {
  DensityGrid a;
  a.side = 2;
  a.counts = {1, 2, 3, 4};
  DensityGrid b = a;
  b.counts = {2, 4, 6, 8};
  BinaryMask tissue(10, 10);
  for (int i = 0; i < 60; ++i) tissue.values[i] = 1;

  SUBCASE("self comparison accepted") {
    const auto r = consecutive_alignment_qc(a, a, tissue, tissue);
    CHECK(r.accepted);
    CHECK(r.density_pearson == doctest::Approx(1.0));
    CHECK(r.tissue_iou == 1.0);
    CHECK(r.tissue_fraction == doctest::Approx(0.6));
  }
  SUBCASE("closed-form pearson, symmetric") {
    const auto r1 = consecutive_alignment_qc(a, b, tissue, tissue);
    const auto r2 = consecutive_alignment_qc(b, a, tissue, tissue);
    CHECK(r1.density_pearson == doctest::Approx(1.0));
    CHECK(r1.density_pearson == r2.density_pearson);
  }
  SUBCASE("disjoint tissue") {
    BinaryMask other(10, 10);
    for (int i = 60; i < 100; ++i) other.values[i] = 1;
    const auto r = consecutive_alignment_qc(a, a, tissue, other);
    CHECK(r.tissue_iou == 0.0);
    CHECK_FALSE(r.accepted);
    CHECK(mask_iou(tissue, other) == mask_iou(other, tissue));
  }
  SUBCASE("flat density grid is undefined and rejected") {
    DensityGrid flat = a;
    flat.counts = {1, 1, 1, 1};
    const auto r = consecutive_alignment_qc(flat, a, tissue, tissue);
    CHECK(std::isnan(r.density_pearson));
    CHECK_FALSE(r.accepted);
    CHECK(std::find(r.reasons.begin(), r.reasons.end(), "density_pearson_undefined") != r.reasons.end());
  }
  SUBCASE("tissue fraction at exactly 0.40 fails") {
    BinaryMask t40(10, 10);
    for (int i = 0; i < 40; ++i) t40.values[i] = 1;
    CHECK_FALSE(consecutive_alignment_qc(a, a, t40, t40).accepted);
  }
}

TEST_CASE("empty channel QC") {
  CHECK(empty_channel_qc(constant(10, 10, 0), 1000, 0.01).pass);
  CHECK_FALSE(empty_channel_qc(constant(10, 10, 1001), 1000, 0.01).pass);
  ChannelImage c = constant(10, 10, 0);
  c.pixels[17] = 5000;  // exactly 1%
  const auto r = empty_channel_qc(c, 1000, 0.01);
  CHECK(r.hot_fraction == doctest::Approx(0.01));
  CHECK(r.pass);
  c.pixels[18] = 5000;
  CHECK_FALSE(empty_channel_qc(c, 1000, 0.01).pass);
}
