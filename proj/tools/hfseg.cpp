// hfseg command-line front end.

#include <glob.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hfseg/config.hpp"
#include "hfseg/phantom.hpp"
#include "hfseg/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hfseg;

namespace {

std::vector<fs::path> expand(const std::vector<std::string>& patterns) {
  std::vector<fs::path> out;
  for (const auto& p : patterns) {
    if (p.find_first_of("*?[") == std::string::npos) {
      out.emplace_back(p);
      continue;
    }
    glob_t g{};
    if (glob(p.c_str(), 0, nullptr, &g) == 0) {
      for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
    }
    globfree(&g);
  }
  if (out.empty()) throw InvalidArgument("no input files matched");
  for (const auto& p : out) {
    if (!fs::exists(p)) throw IoError("no such file: " + p.string());
  }
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void prepare_out(const fs::path& out, const std::string& command, json resolved) {
  fs::create_directories(out);
  resolved["command"] = command;
  write_json(out / "config.json", resolved);
}

std::vector<std::string> path_strings(const std::vector<fs::path>& ps) {
  std::vector<std::string> s;
  for (const auto& p : ps) s.push_back(p.string());
  return s;
}

std::atomic<HttpService*> g_service{nullptr};

void on_signal(int) {
  if (auto* s = g_service.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive 3D segmentation from binary answers"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out = "out";

  // phantom
  auto* phantom = app.add_subcommand("phantom", "Generate synthetic volume/mask pairs");
  std::string kind = "ellipsoid";
  std::vector<int> dims{64, 64, 64};
  int count = 10;
  phantom->add_option("--kind", kind, "ellipsoid or blob")->check(CLI::IsMember({"ellipsoid", "blob"}));
  phantom->add_option("--dims", dims, "nx ny nz")->expected(3);
  phantom->add_option("--count", count)->check(CLI::PositiveNumber);
  phantom->add_option("--seed", seed)->capture_default_str();
  phantom->add_option("--out", out)->capture_default_str();

  // train-shape
  auto* train_shape = app.add_subcommand("train-shape", "Build the shape model from training masks");
  std::vector<std::string> masks;
  int modes = 3;
  double bound = 3.0;
  train_shape->add_option("--masks", masks, "mask files or glob patterns")->required();
  train_shape->add_option("--modes", modes, "eigenmodes to keep")->capture_default_str();
  train_shape->add_option("--bound", bound, "coefficient bound in units of sqrt(lambda)")->capture_default_str();
  train_shape->add_option("--seed", seed)->capture_default_str();
  train_shape->add_option("--out", out)->capture_default_str();

  // train-probmap
  auto* train_pm = app.add_subcommand("train-probmap", "Train the boosted voxel classifier");
  std::vector<std::string> volumes;
  int n_features = 300, rounds = 50, per_class = 400;
  double sigmoid_scale = 1.0;
  train_pm->add_option("--volumes", volumes, "intensity volumes (paired with --masks)")->required();
  train_pm->add_option("--masks", masks, "ground-truth masks")->required();
  train_pm->add_option("--features", n_features)->capture_default_str();
  train_pm->add_option("--rounds", rounds)->capture_default_str();
  train_pm->add_option("--per-class", per_class, "sampled voxels per class and volume")->capture_default_str();
  train_pm->add_option("--sigmoid-scale", sigmoid_scale)->capture_default_str();
  train_pm->add_option("--seed", seed)->capture_default_str();
  train_pm->add_option("--out", out)->capture_default_str();

  // predict-probmap
  auto* predict = app.add_subcommand("predict-probmap", "Apply a trained classifier to a volume");
  std::string pm_model, volume;
  predict->add_option("--model", pm_model, "classifier JSON")->required()->check(CLI::ExistingFile);
  predict->add_option("--volume", volume)->required()->check(CLI::ExistingFile);
  predict->add_option("--seed", seed)->capture_default_str();
  predict->add_option("--out", out)->capture_default_str();

  // synthetic-map
  auto* synth = app.add_subcommand("synthetic-map", "Blurred or translated map from a ground-truth mask");
  std::string gt, mode = "blurred";
  double sigma = 1.5;
  synth->add_option("--gt", gt)->required()->check(CLI::ExistingFile);
  synth->add_option("--mode", mode)->check(CLI::IsMember({"blurred", "translated"}))->capture_default_str();
  synth->add_option("--sigma", sigma)->capture_default_str();
  synth->add_option("--seed", seed)->capture_default_str();
  synth->add_option("--out", out)->capture_default_str();

  // simulate
  auto* simulate = app.add_subcommand("simulate", "Run a session against the ground-truth oracle");
  std::string config_path, sim_gt, sim_model, sim_map, map_mode, baseline;
  std::optional<double> beta_fixed, map_sigma;
  std::optional<int> budget;
  std::optional<std::uint64_t> sim_seed;
  std::optional<std::string> sim_out;
  simulate->add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  simulate->add_option("--gt", sim_gt);
  simulate->add_option("--model", sim_model, "shape model directory");
  simulate->add_option("--map", sim_map, "probability map (.mhd)");
  simulate->add_option("--map-mode", map_mode)->check(CLI::IsMember({"file", "blurred", "translated"}));
  simulate->add_option("--map-sigma", map_sigma);
  simulate->add_option("--budget", budget);
  simulate->add_option("--beta-fixed", beta_fixed, "disable adaptation and hold beta at this value");
  simulate->add_option("--baseline", baseline, "also run the random-question baseline")->check(CLI::IsMember({"random"}));
  simulate->add_option("--seed", sim_seed);
  simulate->add_option("--out", sim_out);

  // serve
  auto* serve = app.add_subcommand("serve", "Serve live sessions over HTTP");
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--config", config_path, "JSON with volumes/maps/models id->path and session defaults")
      ->required()
      ->check(CLI::ExistingFile);
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();
  serve->add_option("--seed", seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (phantom->parsed()) {
      PhantomConfig pc;
      pc.kind = phantom_kind_from_string(kind);
      pc.dims = {dims[0], dims[1], dims[2]};
      json resolved = to_json(pc);
      resolved.update({{"count", count}, {"seed", seed}, {"out", out}});
      prepare_out(out, "phantom", resolved);
      const auto set = generate_phantoms(pc, count, seed);
      for (int i = 0; i < count; ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "phantom_%03d", i);
        save_mhd(set[i].volume, fs::path(out) / (std::string(stem) + "_volume.mhd"));
        save_mhd(set[i].mask, fs::path(out) / (std::string(stem) + "_mask.mhd"));
      }
      std::cout << "wrote " << count << " phantoms to " << out << "\n";
    } else if (train_shape->parsed()) {
      const auto files = expand(masks);
      prepare_out(out, "train-shape",
                  {{"masks", path_strings(files)}, {"modes", modes}, {"bound", bound}, {"seed", seed}, {"out", out}});
      std::vector<BinaryMask> ms;
      for (const auto& f : files) ms.push_back(load_mask(f));
      const ShapeModel model = train_shape_model(ms, modes, bound);
      save_shape_model(model, out);
      std::cout << "eigenvalues:";
      for (double l : model.eigenvalues) std::cout << " " << l;
      std::cout << "\n";
    } else if (train_pm->parsed()) {
      const auto vf = expand(volumes), mf = expand(masks);
      if (vf.size() != mf.size()) throw InvalidArgument("--volumes and --masks must pair up");
      prepare_out(out, "train-probmap",
                  {{"volumes", path_strings(vf)}, {"masks", path_strings(mf)}, {"features", n_features},
                   {"rounds", rounds}, {"per_class", per_class}, {"sigmoid_scale", sigmoid_scale}, {"seed", seed},
                   {"out", out}});
      std::mt19937_64 rng(seed);
      std::vector<IntegralVolume> ivs;
      std::vector<BinaryMask> ms;
      for (std::size_t i = 0; i < vf.size(); ++i) {
        const ScalarField3D v = load_field(vf[i]);
        ms.push_back(load_mask(mf[i]));
        require_same_dims(v.dims(), ms.back().dims(), "training volume and mask");
        ivs.push_back(integral_volume(v));
      }
      const auto features = random_haar_features(n_features, rng);
      const auto samples = sample_training_voxels(ms, per_class, rng);
      AdaBoostOptions opts;
      opts.rounds = rounds;
      opts.sigmoid_scale = sigmoid_scale;
      AdaBoostTrace trace;
      const BoostedModel model = train_adaboost(features, samples, ivs, opts, &trace);
      json j = to_json(model);
      j["training_error"] = trace.training_error;
      write_json(fs::path(out) / "probmap_model.json", j);
      std::cout << model.stumps.size() << " stumps, training error " << trace.training_error.back() << "\n";
    } else if (predict->parsed()) {
      prepare_out(out, "predict-probmap", {{"model", pm_model}, {"volume", volume}, {"seed", seed}, {"out", out}});
      const BoostedModel model = boosted_model_from_json(read_json(pm_model));
      const ProbabilityMap map = predict_map(model, load_field(volume));
      save_mhd(map.field(), fs::path(out) / "map.mhd");
    } else if (synth->parsed()) {
      prepare_out(out, "synthetic-map", {{"gt", gt}, {"mode", mode}, {"sigma", sigma}, {"seed", seed}, {"out", out}});
      const BinaryMask truth = load_mask(gt);
      json sidecar = {{"mode", mode}, {"sigma", sigma}};
      if (mode == "blurred") {
        save_mhd(synthetic_blurred(truth, sigma).field(), fs::path(out) / "map.mhd");
      } else {
        const TranslatedMap t = synthetic_translated(truth, sigma);
        save_mhd(t.map.field(), fs::path(out) / "map.mhd");
        sidecar["offset"] = {t.offset.x, t.offset.y, t.offset.z};
        sidecar["thresholded_dsc"] = dice(t.map.threshold(), truth);
      }
      write_json(fs::path(out) / "map.json", sidecar);
    } else if (simulate->parsed()) {
      ExperimentConfig ec;
      if (!config_path.empty()) ec = experiment_config_from_json(read_json(config_path));
      if (!sim_gt.empty()) ec.gt = sim_gt;
      if (!sim_model.empty()) ec.model_dir = sim_model;
      if (!sim_map.empty()) {
        ec.map = sim_map;
        ec.map_mode = MapMode::file;
      }
      if (!map_mode.empty()) ec.map_mode = map_mode_from_string(map_mode);
      if (map_sigma) ec.map_sigma = *map_sigma;
      if (budget) ec.session.budget = *budget;
      if (beta_fixed) ec.session.fixed_beta = *beta_fixed;
      if (!baseline.empty()) ec.random_baseline = true;
      if (sim_seed) ec.session.sampler.rng_seed = *sim_seed;
      if (sim_out) ec.out_dir = *sim_out;
      ec.validate();
      prepare_out(ec.out_dir, "simulate", to_json(ec));

      auto truth = std::make_shared<const BinaryMask>(load_mask(ec.gt));
      auto model = std::make_shared<const ShapeModel>(load_shape_model(ec.model_dir));
      std::shared_ptr<const ProbabilityMap> map;
      switch (ec.map_mode) {
        case MapMode::file: map = std::make_shared<const ProbabilityMap>(load_field(ec.map)); break;
        case MapMode::blurred: map = std::make_shared<const ProbabilityMap>(synthetic_blurred(*truth, ec.map_sigma)); break;
        case MapMode::translated:
          map = std::make_shared<const ProbabilityMap>(synthetic_translated(*truth, ec.map_sigma).map);
          break;
      }
      require_same_dims(map->dims(), truth->dims(), "map and ground truth");
      const SimulationReport rep = run_simulation(truth, map, model, ec.session, ec.random_baseline);
      write_json(ec.out_dir / "report.json", to_json(rep));
      save_mhd(rep.adaptive.final.mask, ec.out_dir / "final_mask.mhd");
      std::cout << "final dsc " << rep.adaptive.final_dsc << ", thresholded map dsc " << rep.thresholded_dsc;
      if (rep.random) std::cout << ", random questions dsc " << rep.random->final_dsc;
      std::cout << "\n";
    } else if (serve->parsed()) {
      const json cfg = read_json(config_path);
      Resources res;
      for (const auto& [id, p] : cfg.value("volumes", json::object()).items())
        res.volumes[id] = std::make_shared<const ScalarField3D>(load_field(p.get<std::string>()));
      for (const auto& [id, p] : cfg.value("maps", json::object()).items())
        res.maps[id] = std::make_shared<const ProbabilityMap>(load_field(p.get<std::string>()));
      for (const auto& [id, p] : cfg.value("models", json::object()).items())
        res.models[id] = std::make_shared<const ShapeModel>(load_shape_model(p.get<std::string>()));
      SessionConfig defaults;
      defaults.sampler.rng_seed = seed;
      defaults = session_config_from_json(cfg.value("session", json::object()), defaults);
      HttpService service(std::make_shared<SessionRegistry>(std::move(res), defaults));
      const int bound_port = service.bind(host, port);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << host << ":" << bound_port << std::endl;
      service.listen();
      g_service = nullptr;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
