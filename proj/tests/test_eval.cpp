#include <doctest.h>

#include "oracles.hpp"
#include "stainforge/eval/baselines.hpp"
#include "stainforge/eval/metrics.hpp"
#include "stainforge/eval/probe.hpp"
#include "stainforge/eval/report.hpp"
#include "stainforge/stats.hpp"

using namespace stainforge;
using namespace stainforge::eval;

TEST_CASE("hand-computed metric values") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<std::uint8_t> y{1, 0, 1, 0};
  CHECK(auprc(s, y) == doctest::Approx(0.8333333333).epsilon(1e-9));
  const std::vector<std::uint8_t> pred{1, 1, 1, 0, 0}, truth{1, 1, 0, 1, 0};
  CHECK(f1_binary(pred, truth) == doctest::Approx(2.0 / 3.0));
  const auto bc = binary_counts(pred, truth);
  CHECK(bc.tp == 2);
  CHECK(bc.fp == 1);
  CHECK(bc.fn == 1);
  CHECK(bc.tn == 1);
  std::vector<double> a(16, 10.0), b(16, 10.0);
  CHECK(std::isinf(psnr(a, b)));
  for (auto& v : b) v += 1.0;
  CHECK(psnr(a, b) == doctest::Approx(48.1308).epsilon(1e-5));
  CHECK(std::isnan(auprc(s, std::vector<std::uint8_t>(4, 0))));
  CHECK(f1_binary(std::vector<std::uint8_t>(3, 0), std::vector<std::uint8_t>(3, 0)) == 0.0);
}

TEST_CASE("metrics match brute-force oracles on random instances") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(15);
    std::vector<double> x(n), y(n), sc(n);
    std::vector<std::uint8_t> lab(n), pr(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform(0, 255);
      y[i] = rng.uniform(0, 255);
      sc[i] = static_cast<double>(rng.below(6)) / 5.0;  // ties on purpose
      lab[i] = rng.bernoulli(0.4);
      pr[i] = rng.bernoulli(0.5);
    }
    lab[0] = 1;
    CHECK(psnr(x, y) == doctest::Approx(oracle::psnr(x, y, 255)).epsilon(1e-9));
    CHECK(std::abs(auprc(sc, lab) - oracle::auprc(sc, lab)) < 1e-9);
    CHECK(std::abs(f1_binary(pr, lab) - oracle::f1(pr, lab)) < 1e-9);
    PearsonAccumulator acc;
    acc.add(x, y);
    CHECK(std::abs(acc.value() - oracle::pearson(x, y)) < 1e-9);
  }
}

TEST_CASE("pearson accumulator merge and degenerate cases") {
  Rng rng(2);
  std::vector<double> x(200), y(200);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.normal();
    y[i] = 0.5 * x[i] + rng.normal();
  }
  PearsonAccumulator a, b;
  a.add(std::span(x).first(70), std::span(y).first(70));
  b.add(std::span(x).subspan(70), std::span(y).subspan(70));
  a.merge(b);
  CHECK(a.value() == doctest::Approx(oracle::pearson(x, y)).epsilon(1e-12));
  PearsonAccumulator flat;
  flat.add(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3});
  CHECK(std::isnan(flat.value()));
  CHECK(std::string(flat.reason()) == "zero variance in prediction");
  PearsonAccumulator self;
  self.add(x, x);
  CHECK(self.value() == 1.0);
}

TEST_CASE("ssim matches windowed oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const int w = 13 + static_cast<int>(rng.below(8)), h = 11 + static_cast<int>(rng.below(8));
    std::vector<double> a(w * h), b(w * h);
    for (int i = 0; i < w * h; ++i) {
      a[i] = rng.uniform(0, 255);
      b[i] = std::clamp(a[i] + rng.normal(0, 30), 0.0, 255.0);
    }
    CHECK(std::abs(ssim(a, b, w, h) - oracle::ssim(a, b, w, h, 255)) < 1e-6);
    CHECK(ssim(a, a, w, h) == doctest::Approx(1.0).epsilon(1e-12));
  }
  double sum = 0;
  for (double v : ssim_window()) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("bootstrap") {
  std::vector<double> per_tile(50);
  Rng rng(8);
  for (auto& v : per_tile) v = rng.uniform();
  auto metric = [&](const std::vector<std::size_t>& tiles) {
    double s = 0;
    for (auto t : tiles) s += per_tile[t];
    return s / tiles.size();
  };
  BootstrapConfig c;
  c.seed = 42;
  const auto r1 = bootstrap_ci(metric, 50, c);
  const auto r2 = bootstrap_ci(metric, 50, c);
  CHECK(r1.low == r2.low);
  CHECK(r1.high == r2.high);
  CHECK(r1.used == 1000);
  CHECK(r1.low <= r1.point);
  CHECK(r1.point <= r1.high);
  c.seed = 43;
  CHECK(bootstrap_ci(metric, 50, c).low != r1.low);
  CHECK(bootstrap_draw(50, 42, 3) == bootstrap_draw(50, 42, 3));
  CHECK(bootstrap_draw(50, 42, 3) != bootstrap_draw(50, 42, 4));

  auto sometimes_nan = [&](const std::vector<std::size_t>& tiles) { return tiles[0] == 0 ? kNaN : metric(tiles); };
  const auto r3 = bootstrap_ci(sometimes_nan, 50, c);
  CHECK(r3.used + r3.skipped == 1000);
  CHECK(r3.skipped > 0);
  CHECK_THROWS_AS(bootstrap_ci(metric, 1, c), UserError);

  const std::vector<std::vector<std::size_t>> cells{{0, 1}, {2}, {3, 4, 5}};
  CHECK(cells_of_tiles(cells, {2, 0, 2}) == std::vector<std::size_t>{3, 4, 5, 0, 1, 3, 4, 5});
}

TEST_CASE("random prevalence baseline F1 tracks prevalence") {
  for (double p : {0.05, 0.3, 0.7}) CHECK(std::abs(random_baseline_f1(p, 10000, 100, 1) - p) < 0.02);
  CHECK(random_baseline_f1(0.3, 500, 5, 1) == random_baseline_f1(0.3, 500, 5, 1));
}

TEST_CASE("cell count correlation") {
  const std::vector<double> p{1, 2, 3}, r{2, 4, 6};
  const auto c = cellcount_correlation(p, r);
  CHECK(c.pearson == doctest::Approx(1.0));
  CHECK(c.slope == doctest::Approx(2.0));
  CHECK(c.intercept == doctest::Approx(0.0).epsilon(1e-12));
  const auto flat = cellcount_correlation(std::vector<double>{2, 2}, std::vector<double>{1, 3});
  CHECK(std::isnan(flat.pearson));
  CHECK(std::isnan(flat.slope));
}

TEST_CASE("probe") {
  Rng rng(3);
  const std::size_t n = 400;
  FeatureMatrix x(n, 3);
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) x.at(i, j) = rng.normal(0, 1 + j);
    y[i] = rng.uniform() < 1.0 / (1.0 + std::exp(-2 * x.at(i, 0)));
  }

  SUBCASE("separable signal ranks well and converges") {
    const auto m = fit_probe(x, y);
    CHECK(m.fitted);
    CHECK(m.converged);
    CHECK(m.weights[0] > 0);
    CHECK(auprc(m.predict_proba(x), y) > 0.7);
  }
  SUBCASE("duplicating every cell gives the same weights") {
    FeatureMatrix xx(2 * n, 3);
    std::vector<std::uint8_t> yy(2 * n);
    for (std::size_t i = 0; i < 2 * n; ++i) {
      for (int j = 0; j < 3; ++j) xx.at(i, j) = x.at(i % n, j);
      yy[i] = y[i % n];
    }
    const auto a = fit_probe(x, y), b = fit_probe(xx, yy);
    for (int j = 0; j < 3; ++j) CHECK(a.weights[j] == doctest::Approx(b.weights[j]).epsilon(1e-9));
    CHECK(a.bias == doctest::Approx(b.bias).epsilon(1e-9));
  }
  SUBCASE("labels independent of features give AUPRC near prevalence") {
    Rng r2(99);
    const std::size_t big = 4000;
    FeatureMatrix f(big, 4);
    std::vector<std::uint8_t> lab(big);
    double pos = 0;
    for (std::size_t i = 0; i < big; ++i) {
      for (int j = 0; j < 4; ++j) f.at(i, j) = r2.normal();
      lab[i] = r2.bernoulli(0.3);
      pos += lab[i];
    }
    const auto split = random_cell_split(big, 0.5, 4);
    const auto m = fit_probe(f.select(split.fit), [&] {
      std::vector<std::uint8_t> l;
      for (auto i : split.fit) l.push_back(lab[i]);
      return l;
    }());
    std::vector<std::uint8_t> sl;
    for (auto i : split.score) sl.push_back(lab[i]);
    CHECK(std::abs(auprc(m.predict_proba(f.select(split.score)), sl) - pos / big) < 0.05);
  }
  SUBCASE("single class is skipped") {
    const auto m = fit_probe(x, std::vector<std::uint8_t>(n, 1));
    CHECK_FALSE(m.fitted);
    CHECK_FALSE(m.skip_reason.empty());
  }
  SUBCASE("cell split partitions and is seeded") {
    const auto s = random_cell_split(100, 0.2, 7);
    CHECK(s.fit.size() == 20);
    CHECK(s.score.size() == 80);
    std::vector<int> seen(100, 0);
    for (auto i : s.fit) seen[i]++;
    for (auto i : s.score) seen[i]++;
    CHECK(seen == std::vector<int>(100, 1));
    CHECK(random_cell_split(100, 0.2, 7).fit == s.fit);
  }
}

TEST_CASE("morphometry") {
  CHECK(convex_hull_area({{0, 0}, {2, 0}, {2, 2}, {0, 2}, {1, 1}}) == doctest::Approx(4.0));
  CHECK(convex_hull_area({{0, 0}, {1, 1}}) == 0.0);

  InstanceMask m(12, 12);
  RgbImage he(12, 12, 0.5, 255);
  for (int y = 2; y < 5; ++y) {
    for (int x = 2; x < 5; ++x) m.at(x, y) = 4;  // 3x3 square
  }
  for (int x = 6; x < 11; ++x) m.at(x, 8) = 9;  // horizontal bar
  for (int c = 0; c < 3; ++c) he.at(3, 3, c) = 0;
  const auto rows = nuclear_morphometry(m, he);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].id == 4);
  CHECK(rows[0].area == 9);
  CHECK(rows[0].perimeter == 12);
  CHECK(rows[0].eccentricity == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rows[0].solidity == doctest::Approx(1.0));
  CHECK(rows[0].hema_mean == doctest::Approx(255.0 / 9));
  CHECK(rows[1].area == 5);
  CHECK(rows[1].perimeter == 12);
  CHECK(rows[1].eccentricity > 0.9);
  CHECK(rows[1].orientation == doctest::Approx(0.0).epsilon(1e-12));
  const auto f = morphometry_matrix(rows);
  CHECK(f.rows == 2);
  CHECK(f.cols == morphometry_feature_names().size());
}

TEST_CASE("report serialization") {
  CHECK(metric_json(kNaN).is_null());
  CHECK(metric_json(kInf) == "inf");
  CHECK(metric_json(-kInf) == "-inf");
  CHECK(metric_json(0.5) == 0.5);

  MetricReport r;
  r.config_hash = "abc";
  r.protocol = "in_domain";
  r.prediction_source = "model";
  r.label_source = "pseudo";
  MarkerReport a, b;
  a.marker = "CD3";
  a.auprc = 0.5;
  a.psnr = kInf;
  b.marker = "CD8";
  b.auprc = kNaN;
  b.psnr = 20;
  r.markers = {a, b};
  r.compute_macros();
  CHECK(r.macro_auprc == 0.5);
  CHECK(r.macro_psnr == 20);  // infinite entries do not enter the mean
  const auto j = r.to_json();
  CHECK(j["markers"][1]["auprc"].is_null());
  CHECK(j["kind"] == "stainforge-metric-report");
  const auto csv = r.to_csv();
  CHECK(csv.find("CD8") != std::string::npos);
  CHECK(bar_chart_svg(r, "auprc").rfind("<svg", 0) == 0);
}
