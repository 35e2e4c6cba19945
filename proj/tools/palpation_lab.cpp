// palpation-lab: headless batch runs, phantom generation, replay, and the
// HTTP service.

#include "palpation/http_api.hpp"
#include "palpation/service.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace palpation;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("invalid JSON in '" + path + "': " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct RunArgs {
  std::string phantom, search, roi, overlay, out = "out";
  int steps = 30;
  std::optional<std::uint64_t> seed;
};

int cmd_run(const RunArgs& a) {
  const fs::path phantom_path(a.phantom);
  json search = read_json(a.search);
  if (a.seed) search["seed"] = *a.seed;
  json roi = json::object();
  if (!a.roi.empty())
    roi = read_json(a.roi);
  else if (search.contains("roi"))
    roi = search.at("roi");
  else
    roi = to_json(Roi{});
  json registration = search.value("registration", json{{"cloud", {{"synthesize", json::object()}}}});
  search.erase("roi");
  search.erase("registration");

  json request{{"phantom", read_json(a.phantom)},
               {"search", search},
               {"base_dir", phantom_path.parent_path().string()}};
  if (!a.overlay.empty()) request["overlay"] = read_json(a.overlay);

  SessionManager manager;
  const std::string id = manager.create(request);
  const RegistrationResult reg = manager.register_session(id, registration);
  std::printf("registration: rmse %.3f mm (trimmed %.3f), %d iterations, %.2f s\n", reg.rmse_all, reg.rmse,
              reg.iterations, reg.elapsed_s);
  manager.set_roi(id, roi);

  fs::create_directories(a.out);
  std::ofstream log(fs::path(a.out) / "steps.jsonl");
  int done = 0;
  while (done < a.steps) {
    json report;
    try {
      report = manager.run(id, RunMode::step);
    } catch (const Conflict& e) {
      std::printf("stopped: %s\n", e.what());
      break;
    } catch (const Error& e) {
      std::printf("probe failed: %s\n", e.what());
      if (manager.snapshot(id)->failures->size() > 10) break;
      continue;
    }
    log << report.dump() << '\n';
    ++done;
    const auto& s = report.at("summary");
    std::printf("step %3d  uv (%.3f, %.3f)  k %.3f N/mm  above %d below %d unknown %d\n", report.at("step").get<int>(),
                report.at("probed_uv").at(0).get<double>(), report.at("probed_uv").at(1).get<double>(),
                report.at("sample").at("k_n_per_mm").get<double>(), s.at("n_above").get<int>(),
                s.at("n_below").get<int>(), s.at("n_unknown").get<int>());
    if (manager.snapshot(id)->status == SessionStatus::complete) break;
  }

  const fs::path out(a.out);
  write_text(out / "grid.json", manager.state(id, "grid").dump(2));
  write_text(out / "registration.json", to_json(reg).dump(2));
  write_text(out / "session.json", manager.export_session(id).dump());
  write_bytes(out / "heatmap.png", *manager.heatmap_png(id));
  write_png((out / "blended.png").string(), *manager.blended(id));

  const auto snap = manager.snapshot(id);
  json summary{{"steps", snap->step},
               {"status", to_string(snap->status)},
               {"threshold", snap->threshold},
               {"n_above", snap->summary.above},
               {"n_below", snap->summary.below},
               {"n_unknown", snap->summary.unknown},
               {"registration_rmse_mm", reg.rmse_all}};
  write_text(out / "summary.json", summary.dump(2));
  std::printf("wrote %s (steps %d, status %s)\n", a.out.c_str(), snap->step, to_string(snap->status));
  return 0;
}

struct PhantomArgs {
  std::string out = "phantom";
  std::vector<double> center{0.57, 0.44};
  double radius = 0.08;
  double background = 0.5;
  double stiffness = 2.0;
};

int cmd_make_phantom(const PhantomArgs& a) {
  if (a.center.size() != 2) throw Error("--center takes two values");
  const fs::path out(a.out);
  fs::create_directories(out);
  StiffnessField field;
  field.background = a.background;
  Inclusion inc;
  inc.center_uv = Vec2(a.center[0], a.center[1]);
  inc.radius_uv = a.radius;
  inc.stiffness = a.stiffness;
  field.inclusions.push_back(inc);
  field.validate();
  const TriMesh mesh = make_dome_mesh();
  write_obj_file((out / "phantom.obj").string(), mesh);
  write_text(out / "stiffness.json", to_json(field).dump(2));
  write_text(out / "phantom.json",
             json{{"mesh", {{"obj_path", "phantom.obj"}}}, {"stiffness_path", "stiffness.json"}}.dump(2));
  SearchConfig cfg;
  cfg.threshold = 0.5 * (a.background + a.stiffness);
  json search = to_json(cfg);
  search["roi"] = to_json(Roi{});
  search["registration"] = {
      {"cloud",
       {{"synthesize",
         {{"noise_sigma_mm", 1.5},
          {"visibility_fraction", 0.6},
          {"n_points", 10000},
          {"seed", 1},
          {"pose", to_json(RigidTransform::from_axis_angle(Vec3(0.3, -0.5, 1.0), 0.35, Vec3(12.0, -4.0, 80.0)))}}}}},
      {"init", to_json(RigidTransform::from_axis_angle(Vec3(0.3, -0.5, 1.0), 0.35 - 0.15, Vec3(18.0, -1.0, 84.0)))}};
  write_text(out / "search.json", search.dump(2));
  write_png((out / "texture.png").string(), default_base_texture());
  std::printf("wrote %s/{phantom.obj, stiffness.json, phantom.json, search.json, texture.png}\n", a.out.c_str());
  return 0;
}

int cmd_replay(const std::string& bundle_path) {
  const json bundle = read_json(bundle_path);
  const json grid = replay_bundle(bundle);
  const bool identical = grid.dump() == bundle.value("final_grid", json(nullptr)).dump();
  std::printf("replayed %zu probes: final grid %s\n", bundle.at("probes").size(), identical ? "identical" : "DIFFERS");
  return identical ? 0 : 1;
}

ApiServer* g_server = nullptr;

int cmd_serve(const std::string& host, int port, const std::string& storage) {
  std::optional<fs::path> dir;
  if (!storage.empty()) dir = storage;
  SessionManager manager(dir);
  ApiServer server(manager);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::printf("listening on http://%s:%d\n", host.c_str(), bound);
  std::fflush(stdout);
  server.serve();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated robotic palpation: registration, stiffness mapping and overlay"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Headless search run");
  run_cmd->add_option("--phantom", run.phantom, "Phantom config JSON")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--search", run.search, "Search config JSON")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--roi", run.roi, "ROI JSON (defaults to the search config's roi)")->check(CLI::ExistingFile);
  run_cmd->add_option("--overlay", run.overlay, "Overlay config JSON")->check(CLI::ExistingFile);
  run_cmd->add_option("--steps", run.steps, "Maximum probes")->check(CLI::NonNegativeNumber);
  run_cmd->add_option("--out", run.out, "Output directory");
  run_cmd->add_option("--seed", run.seed, "Overrides the search seed");

  PhantomArgs phantom;
  auto* ph_cmd = app.add_subcommand("make-phantom", "Write a dome phantom with one inclusion");
  ph_cmd->add_option("--out", phantom.out, "Output directory");
  ph_cmd->add_option("--center", phantom.center, "Inclusion centre in UV")->expected(2);
  ph_cmd->add_option("--radius", phantom.radius, "Inclusion radius in UV");
  ph_cmd->add_option("--background", phantom.background, "Background stiffness, N/mm");
  ph_cmd->add_option("--stiffness", phantom.stiffness, "Inclusion stiffness, N/mm");

  std::string bundle;
  auto* replay_cmd = app.add_subcommand("replay", "Replay an exported session and compare the final grid");
  replay_cmd->add_option("bundle", bundle, "Session export JSON")->required()->check(CLI::ExistingFile);

  std::string host = "127.0.0.1", storage;
  int port = 8080;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP API");
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--port", port, "Port (0 picks a free one)");
  serve_cmd->add_option("--storage", storage, "Directory for persisted sessions");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run_cmd) return cmd_run(run);
    if (*ph_cmd) return cmd_make_phantom(phantom);
    if (*replay_cmd) return cmd_replay(bundle);
    if (*serve_cmd) return cmd_serve(host, port, storage);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
