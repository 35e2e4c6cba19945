#include "palpation/http_api.hpp"
#include "palpation/service.hpp"

#include "test_support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <atomic>
#include <filesystem>
#include <numbers>
#include <set>
#include <thread>

using namespace palpation;
using namespace palpation::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json create_request(std::uint64_t seed = 1) {
  SearchConfig cfg;
  cfg.threshold = 1.25;
  cfg.seed = seed;
  BakeParams bake;
  bake.width = bake.height = 128;
  return {{"phantom", {{"mesh", {{"dome", json::object()}}}, {"stiffness", to_json(one_inclusion())}}},
          {"search", to_json(cfg)},
          {"overlay", to_json(bake)}};
}

const RigidTransform kPose = RigidTransform::from_axis_angle(Vec3(0.2, 1.0, -0.4), 0.3, Vec3(5.0, -8.0, 60.0));

json register_request() {
  return {{"cloud",
           {{"synthesize",
             {{"noise_sigma_mm", 1.5}, {"visibility_fraction", 0.6}, {"n_points", 2000}, {"seed", 3},
              {"pose", to_json(kPose)}}}}},
          {"init", to_json(RigidTransform::from_axis_angle(Vec3(0.2, 1.0, -0.4), 0.2, Vec3(9.0, -5.0, 63.0)))}};
}

/// Session in status roi_set.
std::string ready_session(SessionManager& m, std::uint64_t seed = 1) {
  const std::string id = m.create(create_request(seed));
  m.register_session(id, register_request());
  m.set_roi(id, to_json(Roi{}));
  return id;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("palpation_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<int> logged_steps(SessionManager& m, const std::string& id) {
  std::vector<int> steps;
  for (const auto& r : *m.snapshot(id)->probes) steps.push_back(r.step);
  return steps;
}

bool sequential(const std::vector<int>& steps) {
  for (std::size_t i = 0; i < steps.size(); ++i)
    if (steps[i] != static_cast<int>(i) + 1) return false;
  return true;
}

}  // namespace

TEST_CASE("create") {
  SessionManager m;
  const std::string a = m.create(create_request());
  const std::string b = m.create(create_request());
  CHECK(a != b);
  CHECK(m.list().size() == 2);
  CHECK(m.snapshot(a)->status == SessionStatus::created);

  json bad = create_request();
  bad["phantom"]["mesh"] = {{"obj_path", "/nonexistent/mesh.obj"}};
  CHECK_THROWS_AS(m.create(bad), Error);
  bad = create_request();
  bad["search"]["beta"] = -1.0;
  CHECK_THROWS(m.create(bad));
  CHECK_THROWS(m.create(json::array()));
  CHECK(m.list().size() == 2);
}

TEST_CASE("phantom spec sources agree") {
  const PhantomSpec dome = load_phantom_spec(create_request().at("phantom"));
  const PhantomSpec text = load_phantom_spec(
      {{"mesh", {{"obj_text", dome.obj_text}}}, {"stiffness", to_json(one_inclusion())}});
  CHECK(text.obj_text == dome.obj_text);
  CHECK(text.model->mesh().vertices.size() == dome.model->mesh().vertices.size());
  CHECK_THROWS(load_phantom_spec({{"stiffness", to_json(one_inclusion())}}));
  CHECK_THROWS(load_phantom_spec({{"mesh", {{"dome", json::object()}}}}));
  DomeParams p;
  p.rings = 12;
  CHECK(to_json(dome_params_from_json(to_json(p))).dump() == to_json(p).dump());
}

TEST_CASE("status machine") {
  SessionManager m;
  CHECK_THROWS_AS(m.register_session("nope", register_request()), NotFound);
  CHECK_THROWS_AS(m.snapshot("nope"), NotFound);

  const std::string id = m.create(create_request());
  CHECK_THROWS_AS(m.set_roi(id, to_json(Roi{})), Conflict);
  CHECK_THROWS_AS(m.run(id, RunMode::step), Conflict);
  CHECK_THROWS_AS(m.pause(id), Conflict);
  CHECK_THROWS_AS(m.stop(id), Conflict);

  const RegistrationResult r1 = m.register_session(id, register_request());
  CHECK(r1.rmse_all <= 2.0);
  CHECK(RigidTransform::rotation_distance(r1.transform, kPose) < 3.0 * std::numbers::pi / 180.0);
  CHECK(m.snapshot(id)->status == SessionStatus::registered);

  json again = register_request();
  again["cloud"]["synthesize"]["seed"] = 4;
  const RegistrationResult r2 = m.register_session(id, again);
  CHECK(m.snapshot(id)->registration->rmse_all == r2.rmse_all);
  CHECK(r2.rmse_all != r1.rmse_all);

  json strict = register_request();
  strict["max_rmse_mm"] = 0.01;
  CHECK_THROWS_AS(m.register_session(id, strict), RegistrationFailed);
  CHECK(m.snapshot(id)->registration->rmse_all == r2.rmse_all);

  Roi zero;
  zero.radius = 0.0;
  CHECK_THROWS_WITH_AS(m.set_roi(id, to_json(zero)), "ROI has zero area", Error);
  CHECK(m.snapshot(id)->status == SessionStatus::registered);

  const json grid = m.set_roi(id, to_json(Roi{}));
  CHECK(grid.at("grid_res") == 25);
  const SearchGrid expected = make_grid(Roi{});
  CHECK(grid.at("n_in_roi") == std::count(expected.in_roi.begin(), expected.in_roi.end(), true));
  CHECK(grid.at("in_roi").get<std::vector<bool>>() == expected.in_roi);
  CHECK(m.snapshot(id)->status == SessionStatus::roi_set);
  CHECK_THROWS_AS(m.register_session(id, register_request()), Conflict);

  const json report = m.run(id, RunMode::step);
  CHECK(report.at("step") == 1);
  CHECK(m.snapshot(id)->probes->size() == 1);
  CHECK(m.snapshot(id)->status == SessionStatus::paused);
  CHECK_THROWS_AS(m.set_roi(id, to_json(Roi{})), Conflict);

  CHECK(m.stop(id).at("status") == "complete");
  CHECK(m.stop(id).at("status") == "complete");
  CHECK_THROWS_WITH_AS(m.run(id, RunMode::step), "session complete", Conflict);
  CHECK_THROWS_AS(m.pause(id), Conflict);
  CHECK(m.snapshot(id)->probes->size() == 1);
}

TEST_CASE("polygon ROI through the service") {
  SessionManager m;
  const std::string id = m.create(create_request());
  m.register_session(id, register_request());
  Roi roi;
  roi.shape = Roi::Shape::polygon;
  roi.polygon = {{0.3, 0.3}, {0.72, 0.35}, {0.6, 0.7}, {0.35, 0.62}};
  roi.resolution = 15;
  const json out = m.set_roi(id, to_json(roi));
  CHECK(out.at("in_roi").get<std::vector<bool>>() == make_grid(roi).in_roi);
  CHECK(to_json(*m.snapshot(id)->roi).dump() == to_json(roi).dump());
}

TEST_CASE("continuous runs, pause and the event stream") {
  SessionManager m;
  const std::string id = ready_session(m);
  const auto before = m.events(id).last_seq();

  const json started = m.run(id, RunMode::continuous, 5);
  CHECK(started.at("status") == "searching");
  m.wait(id);
  auto snap = m.snapshot(id);
  CHECK(snap->probes->size() == 5);
  CHECK(snap->status == SessionStatus::paused);
  CHECK_FALSE(snap->running);
  CHECK(sequential(logged_steps(m, id)));

  const auto events = m.events(id).wait(before, std::chrono::milliseconds(0));
  int steps = 0;
  for (const auto& e : events)
    if (e.type == "step") {
      ++steps;
      CHECK(json::parse(e.data).at("step") == steps);
    }
  CHECK(steps == 5);
  for (std::size_t i = 1; i < events.size(); ++i) CHECK(events[i].seq == events[i - 1].seq + 1);

  m.run(id, RunMode::continuous, 25);
  const json paused = m.pause(id);
  const std::size_t at_pause = m.snapshot(id)->probes->size();
  CHECK(paused.at("step") == at_pause);
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  CHECK(m.snapshot(id)->probes->size() == at_pause);
  CHECK(m.snapshot(id)->status != SessionStatus::searching);

  if (m.snapshot(id)->status == SessionStatus::paused) {
    m.run(id, RunMode::continuous);
    m.wait(id);
  }
  snap = m.snapshot(id);
  CHECK(snap->status == SessionStatus::complete);
  CHECK(snap->probes->size() <= 30);
  CHECK(sequential(logged_steps(m, id)));
  CHECK(snap->summary.above + snap->summary.below + snap->summary.unknown > 0);
}

TEST_CASE("concurrent step requests never interleave") {
  SessionManager m;
  const std::string id = ready_session(m);
  std::atomic<int> ok{0}, conflicts{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&] {
      for (int i = 0; i < 3; ++i) {
        try {
          m.run(id, RunMode::step);
          ++ok;
        } catch (const Conflict&) {
          ++conflicts;
        }
      }
    });
  for (auto& t : threads) t.join();
  CHECK(ok + conflicts == 24);
  const auto steps = logged_steps(m, id);
  CHECK(static_cast<int>(steps.size()) == ok);
  CHECK(sequential(steps));

  // Steps against a running continuous session are turned away.
  const std::string other = ready_session(m, 2);
  m.run(other, RunMode::continuous, 30);
  int rejected = 0;
  for (int i = 0; i < 5; ++i) {
    try {
      m.run(other, RunMode::step);
    } catch (const Conflict&) {
      ++rejected;
    }
  }
  m.wait(other);
  CHECK(sequential(logged_steps(m, other)));
  CHECK(static_cast<int>(logged_steps(m, other).size()) <= 30 + (5 - rejected));
}

TEST_CASE("snapshots and cached textures") {
  SessionManager m;
  const std::string id = ready_session(m);
  for (int t = 1; t <= 3; ++t) {
    m.run(id, RunMode::step);
    const json grid = m.state(id, "grid");
    CHECK(grid.at("step") == t);
    CHECK(m.state(id, "probes").at("probes").size() == static_cast<std::size_t>(t));
    int s1 = 0, s2 = 0;
    const auto a = m.heatmap_png(id, &s1);
    const auto b = m.heatmap_png(id, &s2);
    CHECK(s1 == t);
    CHECK(s2 == t);
    CHECK(*a == *b);
    CHECK(m.heatmap(id).get() == m.heatmap(id).get());
    CHECK(m.state(id, "heatmap").at("digest") == m.state(id, "heatmap").at("digest"));
    CHECK(decode_png(*a).rgba == m.heatmap(id)->image.rgba);
  }
  const auto base = m.blended(id, 0.0);
  CHECK(base->rgba == default_base_texture(128, 128).rgba);
  CHECK(m.state(id, "blended", 0.5).at("opacity") == 0.5);
  CHECK_THROWS(m.blended(id, 2.0));
  CHECK_THROWS(m.state(id, "nonsense"));
  CHECK(m.state(id, "registration").at("registration").at("rmse_mm").is_number());
  CHECK(m.state(id, "status").at("budget") == 30);

  // A snapshot held across a step stays unchanged.
  const auto held = m.snapshot(id);
  const std::string before = grid_to_json(*held->grid).dump();
  m.run(id, RunMode::step);
  CHECK(grid_to_json(*held->grid).dump() == before);
  CHECK(held->step == 3);
}

TEST_CASE("export, import and replay") {
  SessionManager m;

  SUBCASE("empty session exports config only") {
    const std::string id = m.create(create_request());
    const json b = m.export_session(id);
    CHECK(b.at("probes").empty());
    CHECK(b.at("registration").is_null());
    CHECK(b.at("roi").is_null());
    CHECK(b.at("final_grid").is_null());
    const std::string copy = m.import_session(b);
    CHECK(m.snapshot(copy)->status == SessionStatus::created);
  }

  SUBCASE("round trip is byte-identical") {
    const std::string id = ready_session(m, 7);
    for (int t = 0; t < 12; ++t) m.run(id, RunMode::step);
    const json bundle = m.export_session(id);
    CHECK(bundle.at("probes").size() == 12);
    CHECK(replay_bundle(bundle).dump() == bundle.at("final_grid").dump());

    const std::string copy = m.import_session(json::parse(bundle.dump()));
    CHECK(copy != id);
    CHECK(m.state(copy, "grid").at("grid").dump() == m.state(id, "grid").at("grid").dump());
    CHECK(m.export_session(copy).at("probes").dump() == bundle.at("probes").dump());
    CHECK(*m.heatmap_png(copy) == *m.heatmap_png(id));

    // The imported copy continues exactly as the original would.
    const json next_a = m.run(id, RunMode::step);
    const json next_b = m.run(copy, RunMode::step);
    CHECK(next_a.dump() == next_b.dump());
  }

  SUBCASE("corrupt bundles are rejected") {
    const std::string id = ready_session(m, 7);
    for (int t = 0; t < 4; ++t) m.run(id, RunMode::step);
    const json bundle = m.export_session(id);
    CHECK_THROWS(m.import_session(json{{"format", "zip"}}));
    json bad = bundle;
    bad["version"] = 99;
    CHECK_THROWS(m.import_session(bad));
    bad = bundle;
    bad.erase("probes");
    CHECK_THROWS(m.import_session(bad));
    bad = bundle;
    bad["probes"][2]["sample"]["k_n_per_mm"] = 42.0;
    CHECK_THROWS_WITH(m.import_session(bad), doctest::Contains("replay diverged"));
    bad = bundle;
    bad["final_grid"]["mu"][300] = 9.0;
    CHECK_THROWS_WITH(m.import_session(bad), doctest::Contains("replay diverged"));
    CHECK(m.list().size() == 1);
  }
}

TEST_CASE("file-backed persistence") {
  TempDir dir;
  std::string id;
  std::string grid;
  {
    SessionManager m(dir.path);
    id = ready_session(m, 3);
    for (int t = 0; t < 6; ++t) m.run(id, RunMode::step);
    grid = m.state(id, "grid").at("grid").dump();
    m.create(create_request());
    CHECK(fs::exists(dir.path / (id + ".json")));
  }
  SessionManager reloaded(dir.path);
  CHECK(reloaded.list().size() == 2);
  const auto snap = reloaded.snapshot(id);
  CHECK(snap->step == 6);
  CHECK(snap->status == SessionStatus::paused);
  CHECK(reloaded.state(id, "grid").at("grid").dump() == grid);
  reloaded.run(id, RunMode::step);
  CHECK(reloaded.snapshot(id)->step == 7);
  const std::string fresh = reloaded.create(create_request());
  const auto ids = reloaded.list();
  CHECK(std::count(ids.begin(), ids.end(), fresh) == 1);
  CHECK(ids.size() == 3);
}

TEST_CASE("HTTP API") {
  SessionManager m;
  ApiServer server(m);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  server.start();
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(30, 0);

  const auto post = [&](const std::string& path, const json& body) {
    return cli.Post(path.c_str(), body.dump(), "application/json");
  };

  auto res = post("/sessions", create_request(5));
  REQUIRE(res);
  CHECK(res->status == 201);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  const std::string id = json::parse(res->body).at("id");
  const std::string base = "/sessions/" + id;

  CHECK(cli.Get("/sessions/missing/state")->status == 404);
  CHECK(cli.Post("/sessions", "{not json", "application/json")->status == 400);
  CHECK(post(base + "/run", {{"mode", "step"}})->status == 409);
  CHECK(cli.Options("/sessions")->status == 204);

  res = post(base + "/register", register_request());
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body).at("rmse_all_mm").get<double>() <= 2.0);
  json strict = register_request();
  strict["max_rmse_mm"] = 0.01;
  res = post(base + "/register", strict);
  CHECK(res->status == 422);
  CHECK(json::parse(res->body).contains("diagnostics"));

  res = cli.Put((base + "/roi").c_str(), to_json(Roi{}).dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body).at("grid_res") == 25);

  res = post(base + "/run", {{"mode", "step"}});
  CHECK(res->status == 200);
  CHECK(json::parse(res->body).at("step") == 1);
  CHECK(post(base + "/run", {{"mode", "sideways"}})->status == 400);

  res = cli.Get((base + "/state?what=grid").c_str());
  CHECK(res->status == 200);
  const json state = json::parse(res->body);
  CHECK(state.at("step") == 1);
  CHECK(state.at("grid").at("mu").size() == 625);

  res = cli.Get((base + "/heatmap.png").c_str());
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Content-Type") == "image/png");
  CHECK(res->get_header_value("X-Step") == "1");
  const std::vector<std::uint8_t> png(res->body.begin(), res->body.end());
  CHECK(png == *m.heatmap_png(id));
  CHECK(cli.Get((base + "/heatmap.png").c_str())->body == res->body);

  res = cli.Get((base + "/blended.rgba?opacity=0").c_str());
  CHECK(res->status == 200);
  CHECK(res->get_header_value("X-Width") == "128");
  CHECK(std::vector<std::uint8_t>(res->body.begin(), res->body.end()) == default_base_texture(128, 128).rgba);
  CHECK(cli.Get((base + "/blended.png?opacity=abc").c_str())->status == 400);
  CHECK(cli.Get((base + "/blended.png?opacity=0.5").c_str())->status == 200);

  res = post(base + "/run", {{"mode", "continuous"}, {"budget", 3}});
  CHECK(res->status == 202);
  m.wait(id);

  // 1 step + 3 continuous steps plus status changes; read the first four step events.
  std::vector<json> step_events;
  std::string stream;
  res = cli.Get((base + "/events?since=0&limit=64").c_str(), [&](const char* data, std::size_t len) {
    stream.append(data, len);
    const std::size_t hit = stream.find("\"step\":4");
    return hit == std::string::npos || stream.find("\n\n", hit) == std::string::npos;
  });
  std::size_t pos = 0;
  std::uint64_t last_id = 0;
  bool ids_increase = true;
  while ((pos = stream.find("id: ", pos)) != std::string::npos) {
    const std::size_t end = stream.find("\n\n", pos);
    if (end == std::string::npos) break;
    const std::string frame = stream.substr(pos, end - pos);
    const std::uint64_t seq = std::stoull(frame.substr(4));
    ids_increase = ids_increase && seq > last_id;
    last_id = seq;
    if (frame.find("event: step") != std::string::npos)
      step_events.push_back(json::parse(frame.substr(frame.find("data: ") + 6)));
    pos = end;
  }
  CHECK(ids_increase);
  REQUIRE(step_events.size() >= 4);
  for (int i = 0; i < 4; ++i) CHECK(step_events[i].at("step") == i + 1);

  res = cli.Get((base + "/events?since=0&limit=2").c_str());
  REQUIRE(res);
  CHECK(res->get_header_value("Content-Type") == "text/event-stream");
  std::size_t frames = 0;
  for (std::size_t p = 0; (p = res->body.find("id: ", p)) != std::string::npos; ++p) ++frames;
  CHECK(frames == 2);

  res = cli.Get((base + "/export").c_str());
  REQUIRE(res);
  const json bundle = json::parse(res->body);
  CHECK(bundle.at("probes").size() == 4);
  res = post("/sessions/import", bundle);
  CHECK(res->status == 201);
  const std::string copy = json::parse(res->body).at("id");
  CHECK(m.state(copy, "grid").at("grid").dump() == m.state(id, "grid").at("grid").dump());
  json corrupt = bundle;
  corrupt["format"] = "other";
  CHECK(post("/sessions/import", corrupt)->status == 400);

  CHECK(post(base + "/pause", json::object())->status == 200);
  res = post(base + "/stop", json::object());
  CHECK(json::parse(res->body).at("status") == "complete");
  CHECK(post(base + "/run", {{"mode", "step"}})->status == 409);

  res = cli.Get("/sessions");
  CHECK(json::parse(res->body).at("sessions").size() == 2);
  server.stop();
}
