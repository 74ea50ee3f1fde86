#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "json.hpp"
#include "mvdiff/denoiser.hpp"
#include "mvdiff/diffusion.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/evaluation.hpp"
#include "mvdiff/generation.hpp"
#include "mvdiff/projection.hpp"
#include "mvdiff/synthdata.hpp"
#include "mvdiff/verify.hpp"

namespace py = pybind11;
using namespace mvdiff;
using json = nlohmann::json;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

Array to_array(const Tensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data(), t.data() + t.numel(), a.mutable_data());
  return a;
}

Array stack(const std::vector<Tensor>& frames) {
  Shape shape{static_cast<int64_t>(frames.size())};
  if (!frames.empty()) shape.insert(shape.end(), frames[0].shape().begin(), frames[0].shape().end());
  Tensor out(shape);
  const int64_t per = frames.empty() ? 0 : frames[0].numel();
  for (size_t i = 0; i < frames.size(); ++i) std::copy(frames[i].data(), frames[i].data() + per, out.data() + i * per);
  return to_array(out);
}

// JSON crosses the boundary as text; Python's json module does the rest.
py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
json from_py(const py::handle& o) { return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>()); }

geometry::CameraView camera(const py::handle& o) { return synthdata::camera_from_json(from_py(o)); }

std::vector<geometry::CameraView> cameras(const py::list& l) {
  std::vector<geometry::CameraView> v;
  for (const auto& c : l) v.push_back(camera(c));
  return v;
}

py::list camera_list(const std::vector<geometry::CameraView>& views) {
  py::list l;
  for (const auto& v : views) l.append(to_py(synthdata::camera_to_json(v)));
  return l;
}

std::vector<Tensor> frames(const Array& a) {
  const Tensor t = to_tensor(a);
  MVD_REQUIRE(!t.shape().empty() && t.dim(0) > 0, "expected a non-empty stack of frames");
  Shape per(t.shape().begin() + 1, t.shape().end());
  std::vector<Tensor> out;
  const int64_t n = t.numel() / t.dim(0);
  for (int64_t i = 0; i < t.dim(0); ++i) {
    Tensor f(per);
    std::copy(t.data() + i * n, t.data() + (i + 1) * n, f.data());
    out.push_back(std::move(f));
  }
  return out;
}

py::dict scene_dict(const synthdata::Scene& s) {
  py::dict d;
  d["name"] = s.name;
  d["caption"] = s.caption;
  d["spec"] = to_py(synthdata::scene_spec_to_json(s.spec));
  d["cameras"] = camera_list(s.views);
  d["images"] = stack(s.images);
  d["depths"] = stack(s.depths);
  d["masks"] = stack(s.masks);
  return d;
}

Array sample(const std::string& ckpt, const py::list& targets, const std::string& caption, int steps,
             double lambda_cfg, uint64_t seed, bool deterministic, const std::optional<Array>& cond_images,
             const std::optional<py::list>& cond_cameras) {
  json manifest;
  const auto model = denoiser::load_checkpoint(ckpt, &manifest);
  const auto& s = manifest.at("schedule");
  const auto base = diffusion::make_schedule(s.at("t_max").get<int>(), s.at("beta_start").get<double>(),
                                             s.at("beta_end").get<double>());
  const auto views = cameras(targets);
  MVD_REQUIRE(!views.empty(), "sample needs at least one target camera");
  generation::SampleOptions opts;
  opts.steps = steps;
  opts.lambda_cfg = lambda_cfg;
  opts.seed = seed;
  opts.deterministic = deterministic;
  opts.max_frames = model.config().max_frames;
  const auto tokens = synthdata::tokenize(caption);
  const auto eps = generation::model_eps(model);
  if (cond_images) {
    MVD_REQUIRE(cond_cameras.has_value(), "cond_images need cond_cameras");
    const Tensor cond = to_tensor(*cond_images);
    const auto cviews = cameras(*cond_cameras);
    Tensor out;
    {
      py::gil_scoped_release release;
      out = generation::generate_conditional(eps, cond, cviews, views, tokens, base, opts);
    }
    return to_array(out);
  }
  const Shape frame{model.config().image_channels, views[0].height, views[0].width};
  Tensor out;
  {
    py::gil_scoped_release release;
    out = generation::generate_unconditional(eps, views, tokens, base, opts, frame);
  }
  return to_array(out);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-view diffusion with cross-frame attention and projection layers";
  py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);
  py::register_exception<UndefinedMetric>(m, "UndefinedMetric", PyExc_ArithmeticError);

  m.def(
      "ring_camera",
      [](double az, double el, double radius, int size) {
        return to_py(synthdata::camera_to_json(synthdata::ring_camera(az, el, radius, size)));
      },
      py::arg("azimuth_deg"), py::arg("elevation_deg"), py::arg("radius"), py::arg("image_size"),
      "Camera on the dataset ring, as a JSON-style dict.");
  m.def(
      "project",
      [](const geometry::Vec3& p, const py::dict& cam) {
        const auto r = geometry::project(p, camera(cam));
        return py::make_tuple(r.pixel, r.depth, r.in_front);
      },
      py::arg("point"), py::arg("camera"), "World point to (pixel, depth, in_front).");
  m.def(
      "unproject_pixel",
      [](const geometry::Vec2& px, double depth, const py::dict& cam) {
        return geometry::unproject_pixel(px, depth, camera(cam));
      },
      py::arg("pixel"), py::arg("depth"), py::arg("camera"));
  m.def("contract", &projection::contract_background, py::arg("point"), "MERF background contraction.");
  m.def("uncontract", &projection::uncontract_background, py::arg("point"));

  m.def(
      "masked_psnr", [](const Array& p, const Array& t, const Array& mask) {
        return evaluation::masked_psnr(to_tensor(p), to_tensor(t), to_tensor(mask));
      },
      py::arg("pred"), py::arg("target"), py::arg("mask"), "Images [3, H, W] in [0, 1], mask [H, W].");
  m.def(
      "masked_ssim", [](const Array& p, const Array& t, const Array& mask) {
        return evaluation::masked_ssim(to_tensor(p), to_tensor(t), to_tensor(mask));
      },
      py::arg("pred"), py::arg("target"), py::arg("mask"));
  m.def(
      "reprojection_consistency",
      [](const Array& images, const py::list& cams, const Array& depths, const Array& masks) {
        return evaluation::reprojection_consistency(frames(images), cameras(cams), frames(depths), frames(masks));
      },
      py::arg("images"), py::arg("cameras"), py::arg("depths"), py::arg("masks"));

  m.def(
      "make_schedule",
      [](int t_max, double b0, double b1) {
        const auto s = diffusion::make_schedule(t_max, b0, b1);
        py::dict d;
        d["beta"] = s.beta;
        d["alpha"] = s.alpha;
        d["alpha_bar"] = s.alpha_bar;
        d["sigma"] = s.sigma;
        return d;
      },
      py::arg("t_max") = 100, py::arg("beta_start") = 1e-3, py::arg("beta_end") = 0.2,
      "Linear DDPM schedule tables indexed by step 0..t_max.");

  m.def(
      "make_scene",
      [](uint64_t seed, int size) {
        Rng rng(seed);
        auto scene = synthdata::make_scene(synthdata::random_scene(rng, seed), size);
        return scene_dict(scene);
      },
      py::arg("seed"), py::arg("image_size") = 32, "Random synthetic scene rendered on the 24-view ring.");
  m.def("read_scene", [](const std::string& dir) { return scene_dict(synthdata::read_scene(dir)); }, py::arg("dir"));
  m.def("write_dataset", &synthdata::write_dataset, py::arg("dir"), py::arg("scenes"), py::arg("seed"),
        py::arg("image_size") = 32);
  m.def("tokenize", &synthdata::tokenize, py::arg("text"));
  m.def("detokenize", &synthdata::detokenize, py::arg("tokens"));
  m.def("vocabulary", &synthdata::vocabulary);

  m.def(
      "count_parameters", [](const py::dict& cfg) { return denoiser::count_parameters(denoiser::config_from_json(from_py(cfg))); },
      py::arg("config"));
  m.def("default_config", [] { return to_py(denoiser::config_to_json(denoiser::DenoiserConfig{})); });
  m.def("sample", &sample, py::arg("checkpoint"), py::arg("cameras"), py::arg("caption") = "", py::arg("steps") = 50,
        py::arg("lambda_cfg") = 7.5, py::arg("seed") = 0, py::arg("deterministic") = false,
        py::arg("cond_images") = py::none(), py::arg("cond_cameras") = py::none(),
        "Generate frames [N, 3, H, W] in [0, 1] from a checkpoint directory.");

  m.def(
      "verify",
      [](const std::string& suite, uint64_t seed) {
        std::vector<verify::SuiteReport> reports;
        {
          py::gil_scoped_release release;
          reports = verify::run(suite, seed);
        }
        return to_py(verify::to_json(reports));
      },
      py::arg("suite") = "all", py::arg("seed") = 0, "Invariant suites; returns one report per suite.");
}
