#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "stainforge/common.hpp"
#include "stainforge/eval/metrics.hpp"
#include "stainforge/gating.hpp"
#include "stainforge/imgproc.hpp"
#include "stainforge/model/checkpoint.hpp"
#include "stainforge/pipeline.hpp"
#include "stainforge/synth.hpp"

namespace py = pybind11;
using namespace stainforge;
using json = nlohmann::json;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::span<const double> view(const F64& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }
std::span<const std::uint8_t> view(const U8& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

ChannelImage to_channel(const F64& a, double mpp) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-d array");
  ChannelImage img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), mpp);
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

F64 from_channel(const ChannelImage& img) {
  F64 out({img.height, img.width});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

std::vector<std::uint8_t> labels_of(const U8& a) { return {a.data(), a.data() + a.size()}; }

pipeline::RunContext context(const std::string& config_json, std::optional<std::uint64_t> seed,
                             std::optional<int> jobs) {
  return pipeline::make_context(json::parse(config_json), seed, jobs);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "stainforge native core";

  // later registrations are tried first, so the subclass goes last
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<UserError>(m, "UserError", PyExc_ValueError);

  m.def(
      "af_subtract",
      [](const F64& channel, const F64& af, double lambda, double b) {
        py::gil_scoped_release nogil;
        auto out = imgproc::af_subtract(to_channel(channel, 0.5), to_channel(af, 0.5), {lambda, b});
        py::gil_scoped_acquire gil;
        return from_channel(out);
      },
      py::arg("channel"), py::arg("af"), py::arg("lam"), py::arg("b"));

  m.def(
      "normalize",
      [](const F64& corrected, double q999, bool invert) {
        return from_channel(imgproc::normalize_channel(to_channel(corrected, 0.5), q999, invert));
      },
      py::arg("corrected"), py::arg("q999"), py::arg("invert") = false);
  m.def("normalize_value", [](double v, double q) { return imgproc::normalize_value(v, q); });
  m.def("denormalize_value", [](double v, double q) { return imgproc::denormalize_value(v, q); });

  m.def("otsu_threshold", [](const std::vector<std::uint64_t>& hist) {
    if (hist.size() != 256) throw py::value_error("histogram needs 256 bins");
    imgproc::Histogram256 h{};
    std::copy(hist.begin(), hist.end(), h.begin());
    return imgproc::otsu_threshold(h);
  });

  m.def(
      "dilate_nuclei",
      [](py::array_t<std::int32_t, py::array::c_style | py::array::forcecast> labels, double radius_um, double mpp) {
        if (labels.ndim() != 2) throw py::value_error("expected a 2-d label image");
        InstanceMask mask(static_cast<int>(labels.shape(1)), static_cast<int>(labels.shape(0)), mpp);
        std::copy(labels.data(), labels.data() + labels.size(), mask.labels.begin());
        const auto out = imgproc::dilate_nuclei(mask, radius_um);
        py::array_t<std::int32_t> res({out.height, out.width});
        std::copy(out.labels.begin(), out.labels.end(), res.mutable_data());
        return res;
      },
      py::arg("labels"), py::arg("radius_um"), py::arg("mpp") = 0.5);

  m.def(
      "fit_gmm_1d",
      [](const F64& values, int max_iterations, double tolerance) {
        gating::GmmOptions opt;
        opt.max_iterations = max_iterations;
        opt.tolerance = tolerance;
        const auto fit = gating::fit_gmm_1d(view(values), opt);
        py::dict d;
        d["means"] = fit.means;
        d["variances"] = fit.variances;
        d["weights"] = fit.weights;
        d["loglik"] = fit.loglik;
        d["iterations"] = fit.iterations;
        d["converged"] = fit.converged;
        return d;
      },
      py::arg("values"), py::arg("max_iterations") = 500, py::arg("tolerance") = 1e-8);

  m.def("psnr", [](const F64& p, const F64& t, double max_value) { return eval::psnr(view(p), view(t), max_value); },
        py::arg("pred"), py::arg("target"), py::arg("max_value") = 255.0);
  m.def(
      "ssim",
      [](const F64& p, const F64& t, double range) {
        if (p.ndim() != 2 || t.ndim() != 2) throw py::value_error("expected 2-d images");
        return eval::ssim(view(p), view(t), static_cast<int>(p.shape(1)), static_cast<int>(p.shape(0)), range);
      },
      py::arg("pred"), py::arg("target"), py::arg("range") = 255.0);
  m.def("auprc", [](const F64& s, const U8& l) { return eval::auprc(view(s), view(l)); }, py::arg("scores"),
        py::arg("labels"));
  m.def("f1", [](const U8& p, const U8& t) { return eval::f1_binary(view(p), view(t)); }, py::arg("pred"),
        py::arg("truth"));
  m.def(
      "random_baseline_f1",
      [](const U8& truth, double prevalence, int runs, std::uint64_t seed) {
        return eval::random_baseline_f1(view(truth), prevalence, runs, seed);
      },
      py::arg("truth"), py::arg("prevalence"), py::arg("runs") = 100, py::arg("seed") = 0);

  // Tile-level bootstrap of AUPRC over cells grouped by tile.
  m.def(
      "bootstrap_auprc",
      [](const F64& scores, const U8& labels, const std::vector<std::size_t>& tile_of_cell, int samples,
         std::uint64_t seed) {
        if (static_cast<std::size_t>(scores.size()) != tile_of_cell.size() || scores.size() != labels.size()) {
          throw py::value_error("scores, labels and tiles must have equal length");
        }
        std::size_t n_tiles = 0;
        for (auto t : tile_of_cell) n_tiles = std::max(n_tiles, t + 1);
        std::vector<std::vector<std::size_t>> by_tile(n_tiles);
        for (std::size_t i = 0; i < tile_of_cell.size(); ++i) by_tile[tile_of_cell[i]].push_back(i);
        const std::vector<double> s(scores.data(), scores.data() + scores.size());
        const auto l = labels_of(labels);
        const auto r = eval::bootstrap_ci(
            [&](const std::vector<std::size_t>& tiles) {
              const auto cells = eval::cells_of_tiles(by_tile, tiles);
              std::vector<double> ss;
              std::vector<std::uint8_t> ll;
              for (auto c : cells) {
                ss.push_back(s[c]);
                ll.push_back(l[c]);
              }
              return eval::auprc(ss, ll);
            },
            n_tiles, eval::BootstrapConfig{samples, 2.5, 97.5, seed});
        py::dict d;
        d["point"] = r.point;
        d["low"] = r.low;
        d["high"] = r.high;
        d["used"] = r.used;
        d["skipped"] = r.skipped;
        return d;
      },
      py::arg("scores"), py::arg("labels"), py::arg("tile_of_cell"), py::arg("samples") = 1000, py::arg("seed") = 0);

  m.def(
      "synth",
      [](const std::string& out, int tiles, int side, std::uint64_t seed) {
        synth::SynthConfig c;
        c.tiles = tiles;
        c.side = side;
        c.seed = seed;
        const auto s = synth::write_dataset(c, out);
        py::dict d;
        d["tiles"] = s.tiles;
        d["cells"] = s.cells;
        d["manifest"] = s.manifest.string();
        d["panel"] = s.panel.string();
        d["planted"] = s.planted.string();
        return d;
      },
      py::arg("out"), py::arg("tiles") = 20, py::arg("side") = 64, py::arg("seed") = 0);

  // Pipeline commands take the configuration as a JSON string.
  m.def(
      "preprocess",
      [](const std::string& cfg, std::optional<std::uint64_t> seed, std::optional<int> jobs) {
        const auto ctx = context(cfg, seed, jobs);
        py::gil_scoped_release nogil;
        const auto r = pipeline::cmd_preprocess(ctx);
        py::gil_scoped_acquire gil;
        py::dict d;
        d["kept"] = r.kept;
        d["dropped"] = r.dropped;
        d["cells"] = r.cells;
        d["dir"] = r.dir.string();
        return d;
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("jobs") = py::none());
  m.def(
      "train",
      [](const std::string& cfg, std::optional<std::uint64_t> seed, std::optional<int> jobs) {
        const auto ctx = context(cfg, seed, jobs);
        py::gil_scoped_release nogil;
        const auto r = pipeline::cmd_train(ctx);
        py::gil_scoped_acquire gil;
        py::dict d;
        d["steps"] = r.steps;
        d["final_loss"] = r.final_loss;
        d["train_pearson"] = r.train_pearson;
        d["final_checkpoint"] = r.final_checkpoint.string();
        d["best_checkpoint"] = r.best_checkpoint.string();
        return d;
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("jobs") = py::none());
  m.def(
      "evaluate",
      [](const std::string& cfg, std::optional<std::uint64_t> seed, std::optional<int> jobs) {
        const auto ctx = context(cfg, seed, jobs);
        std::string out;
        {
          py::gil_scoped_release nogil;
          out = pipeline::cmd_evaluate(ctx).to_json().dump();
        }
        return out;
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("jobs") = py::none());

  // Runs a checkpoint on one RGB tile (H, W, 3) uint8; returns (markers, H, W)
  // in normalized [0, 255] units.
  m.def(
      "predict",
      [](const std::string& checkpoint, py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> rgb) {
        if (rgb.ndim() != 3 || rgb.shape(2) != 3) throw py::value_error("expected an (H, W, 3) array");
        const int h = static_cast<int>(rgb.shape(0)), w = static_cast<int>(rgb.shape(1));
        RgbImage img(w, h);
        std::copy(rgb.data(), rgb.data() + rgb.size(), img.data.begin());
        model::Tensor y;
        {
          py::gil_scoped_release nogil;
          auto loaded = model::load_checkpoint(checkpoint);
          auto x = pipeline::rgb_to_tensor(img);
          x.shape.insert(x.shape.begin(), 1);
          y = loaded.model->forward(x, false);
        }
        F64 out({y.shape[1], y.shape[2], y.shape[3]});
        auto* p = out.mutable_data();
        for (std::size_t i = 0; i < y.data.size(); ++i) p[i] = model::unscale_prediction(y.data[i]);
        return out;
      },
      py::arg("checkpoint"), py::arg("rgb"));
}
