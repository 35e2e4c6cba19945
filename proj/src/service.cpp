#include "palpation/service.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

namespace palpation {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Phantom and overlay configuration

json to_json(const DomeParams& p) {
  return {{"radius_x_mm", p.radius_x},       {"radius_y_mm", p.radius_y},
          {"height_mm", p.height},           {"asymmetry", p.asymmetry},
          {"groove_depth_mm", p.groove_depth}, {"groove_width_fraction", p.groove_width_fraction},
          {"rings", p.rings},                {"segments", p.segments},
          {"uv_radius", p.uv_radius}};
}

DomeParams dome_params_from_json(const json& j) {
  DomeParams p;
  try {
    p.radius_x = j.value("radius_x_mm", p.radius_x);
    p.radius_y = j.value("radius_y_mm", p.radius_y);
    p.height = j.value("height_mm", p.height);
    p.asymmetry = j.value("asymmetry", p.asymmetry);
    p.groove_depth = j.value("groove_depth_mm", p.groove_depth);
    p.groove_width_fraction = j.value("groove_width_fraction", p.groove_width_fraction);
    p.rings = j.value("rings", p.rings);
    p.segments = j.value("segments", p.segments);
    p.uv_radius = j.value("uv_radius", p.uv_radius);
  } catch (const json::exception& e) {
    throw Error(std::string("invalid dome parameters: ") + e.what());
  }
  return p;
}

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

std::string mesh_to_obj(const TriMesh& mesh) {
  std::ostringstream out;
  write_obj(out, mesh);
  return out.str();
}

TriMesh mesh_from_obj(const std::string& text) {
  std::istringstream in(text);
  return read_obj(in);
}

}  // namespace

PhantomSpec load_phantom_spec(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw Error("phantom config must be an object");
  if (!j.contains("mesh")) throw Error("phantom config needs a mesh");
  const json& mesh_cfg = j.at("mesh");
  std::string obj_text;
  if (mesh_cfg.contains("dome")) {
    obj_text = mesh_to_obj(make_dome_mesh(dome_params_from_json(mesh_cfg.at("dome"))));
  } else if (mesh_cfg.contains("obj_path")) {
    obj_text = mesh_to_obj(read_obj_file(resolve(base_dir, mesh_cfg.at("obj_path").get<std::string>()).string()));
  } else if (mesh_cfg.contains("obj_text")) {
    obj_text = mesh_cfg.at("obj_text").get<std::string>();
  } else {
    throw Error("phantom mesh needs one of dome, obj_path, obj_text");
  }
  StiffnessField field;
  if (j.contains("stiffness"))
    field = stiffness_from_json(j.at("stiffness"));
  else if (j.contains("stiffness_path"))
    field = stiffness_from_json(read_json_file(resolve(base_dir, j.at("stiffness_path").get<std::string>())));
  else
    throw Error("phantom config needs stiffness or stiffness_path");

  PhantomSpec spec;
  // The model is always parsed from the stored OBJ text so that a session
  // and its replay see bit-identical geometry.
  spec.obj_text = std::move(obj_text);
  spec.model = load_phantom(mesh_from_obj(spec.obj_text), std::move(field));
  if (j.contains("texture_path")) spec.texture_path = resolve(base_dir, j.at("texture_path").get<std::string>()).string();
  return spec;
}

BakeParams bake_params_from_json(const json& j) {
  BakeParams p;
  try {
    p.width = j.value("width", p.width);
    p.height = j.value("height", p.height);
    p.opacity = j.value("opacity", p.opacity);
    if (j.contains("fixed_range") && !j.at("fixed_range").is_null())
      p.fixed_range = std::array<double, 2>{j.at("fixed_range").at(0).get<double>(), j.at("fixed_range").at(1).get<double>()};
    if (j.contains("ramp")) p.ramp = color_ramp_from_json(j.at("ramp"));
  } catch (const json::exception& e) {
    throw Error(std::string("invalid overlay config: ") + e.what());
  }
  if (p.width < 2 || p.height < 2) throw Error("texture must be at least 2x2");
  if (!(p.opacity >= 0.0 && p.opacity <= 1.0)) throw Error("opacity must be in [0, 1]");
  if (p.fixed_range && !((*p.fixed_range)[1] > (*p.fixed_range)[0])) throw Error("fixed range must have hi > lo");
  p.ramp.validate();
  return p;
}

json to_json(const BakeParams& p) {
  json j{{"width", p.width}, {"height", p.height}, {"opacity", p.opacity}};
  j["fixed_range"] = p.fixed_range ? json{(*p.fixed_range)[0], (*p.fixed_range)[1]} : json(nullptr);
  if (p.ramp.lut != ColorRamp::blues().lut) j["ramp"] = to_json(p.ramp);
  return j;
}

const char* to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::created: return "created";
    case SessionStatus::registered: return "registered";
    case SessionStatus::roi_set: return "roi_set";
    case SessionStatus::searching: return "searching";
    case SessionStatus::paused: return "paused";
    case SessionStatus::complete: return "complete";
  }
  return "created";
}

SessionStatus session_status_from_string(const std::string& s) {
  for (auto st : {SessionStatus::created, SessionStatus::registered, SessionStatus::roi_set, SessionStatus::searching,
                  SessionStatus::paused, SessionStatus::complete})
    if (s == to_string(st)) return st;
  throw Error("unknown session status '" + s + "'");
}

// ---------------------------------------------------------------------------
// Events

void EventChannel::publish(std::string type, const json& data) {
  {
    std::lock_guard lock(mutex_);
    events_.push_back({next_seq_++, std::move(type), data.dump()});
    while (events_.size() > capacity_) events_.pop_front();
  }
  cv_.notify_all();
}

std::vector<Event> EventChannel::wait(std::uint64_t after, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  cv_.wait_for(lock, timeout, [&] { return next_seq_ - 1 > after; });
  std::vector<Event> out;
  for (const auto& e : events_)
    if (e.seq > after) out.push_back(e);
  return out;
}

std::uint64_t EventChannel::last_seq() const {
  std::lock_guard lock(mutex_);
  return next_seq_ - 1;
}

// ---------------------------------------------------------------------------
// Session internals

namespace {

enum class StopKind { none, pause, stop };

}  // namespace

class Session {
 public:
  std::string id;
  PhantomSpec phantom;
  json search_json;
  SearchConfig config;
  BakeParams bake;
  std::shared_ptr<const Texture> base_texture;
  EventChannel events;

  // Guarded by op_mutex.
  std::mutex op_mutex;
  SessionStatus status = SessionStatus::created;
  json registration_request;
  std::optional<RegistrationResult> registration;
  std::optional<Roi> roi;
  std::unique_ptr<SearchEngine> engine;
  std::vector<StepReport> log;
  std::vector<ProbeFailure> failures;
  int consecutive_failures = 0;

  // Background run.
  std::mutex runner_mutex;
  std::thread runner;
  std::atomic<bool> running{false};
  std::atomic<StopKind> stop_kind{StopKind::none};

  void publish() {
    auto s = std::make_shared<SessionSnapshot>();
    s->version = ++version_;
    s->step = static_cast<int>(log.size());
    s->status = status;
    s->running = running.load();
    s->registration = registration;
    s->roi = roi;
    if (engine) {
      s->grid = std::make_shared<const SearchGrid>(engine->grid());
      s->threshold = engine->threshold();
      s->epsilon = engine->epsilon();
      s->summary = summarize(engine->grid());
    }
    s->probes = std::make_shared<const std::vector<StepReport>>(log);
    s->failures = std::make_shared<const std::vector<ProbeFailure>>(failures);
    std::lock_guard lock(snap_mutex_);
    snap_ = std::move(s);
  }

  std::shared_ptr<const SessionSnapshot> snapshot() const {
    std::lock_guard lock(snap_mutex_);
    return snap_;
  }

  void set_status(SessionStatus s) {
    status = s;
    publish();
    events.publish("status", {{"status", to_string(s)}, {"step", log.size()}});
  }

  // Caches keyed by snapshot version; a newer version always replaces an
  // older one, never the other way round.
  std::mutex cache_mutex;
  std::uint64_t heat_version = 0;
  std::shared_ptr<const HeatmapTexture> heat;
  std::uint64_t png_version = 0;
  std::shared_ptr<const std::vector<std::uint8_t>> png;
  std::uint64_t blend_version = 0;
  std::map<double, std::shared_ptr<const Texture>> blends;

 private:
  mutable std::mutex snap_mutex_;
  std::shared_ptr<const SessionSnapshot> snap_;
  std::uint64_t version_ = 0;
};

namespace {

ProbeFailure failure_from_json(const json& j) {
  return {j.at("attempt").get<int>(), j.at("step").get<int>(), j.at("error").get<std::string>()};
}

json to_json(const ProbeFailure& f) { return {{"attempt", f.attempt}, {"step", f.step}, {"error", f.error}}; }

// Runs one probe attempt; caller holds op_mutex.
StepReport attempt_step(Session& s) {
  const int attempt = static_cast<int>(s.log.size() + s.failures.size());
  try {
    StepReport r = s.engine->step();
    s.log.push_back(r);
    s.consecutive_failures = 0;
    return r;
  } catch (const SearchComplete&) {
    throw;
  } catch (const BudgetExhausted&) {
    throw;
  } catch (const Error& e) {
    s.failures.push_back({attempt, static_cast<int>(s.log.size()), e.what()});
    ++s.consecutive_failures;
    throw;
  }
}

bool search_finished(const Session& s) {
  return s.engine->complete() || s.engine->steps() >= s.config.budget;
}

json bundle_of(const Session& s) {
  json phantom{{"obj_text", s.phantom.obj_text}, {"stiffness", to_json(s.phantom.model->field())}};
  if (s.phantom.texture_path) phantom["texture_path"] = *s.phantom.texture_path;
  json probes = json::array();
  for (const auto& r : s.log) probes.push_back(to_json(r, true));
  json failures = json::array();
  for (const auto& f : s.failures) failures.push_back(to_json(f));
  json b{{"format", "palpation-session"},
         {"version", 1},
         {"id", s.id},
         {"status", to_string(s.status)},
         {"phantom", phantom},
         {"search", s.search_json},
         {"overlay", to_json(s.bake)},
         {"probes", probes},
         {"failures", failures}};
  b["registration"] = s.registration ? json{{"request", s.registration_request}, {"result", to_json(*s.registration)}}
                                     : json(nullptr);
  b["roi"] = s.roi ? to_json(*s.roi) : json(nullptr);
  b["final_grid"] = s.engine ? grid_to_json(s.engine->grid()) : json(nullptr);
  return b;
}

std::shared_ptr<const Texture> load_base_texture(const PhantomSpec& spec, const BakeParams& bake) {
  if (spec.texture_path) return std::make_shared<const Texture>(read_png(*spec.texture_path));
  return std::make_shared<const Texture>(default_base_texture(bake.width, bake.height));
}

void validate_bundle(const json& b) {
  if (!b.is_object()) throw Error("invalid session bundle: not an object");
  if (b.value("format", std::string()) != "palpation-session") throw Error("invalid session bundle: unknown format");
  if (b.value("version", 0) != 1) throw Error("invalid session bundle: unsupported version");
  for (const char* key : {"phantom", "search", "probes", "failures", "status"})
    if (!b.contains(key)) throw Error(std::string("invalid session bundle: missing '") + key + "'");
  if (!b.at("probes").is_array() || !b.at("failures").is_array()) throw Error("invalid session bundle: bad probe log");
  if (!b.at("phantom").contains("obj_text") || !b.at("phantom").contains("stiffness"))
    throw Error("invalid session bundle: phantom must embed obj_text and stiffness");
  if (!b.at("probes").empty() && (!b.contains("roi") || b.at("roi").is_null()))
    throw Error("invalid session bundle: probes without ROI");
}

// Rebuilds session state from a validated bundle and replays its probe log.
void replay_into(Session& s, const json& b) {
  try {
    s.phantom = load_phantom_spec({{"mesh", {{"obj_text", b.at("phantom").at("obj_text")}}},
                                   {"stiffness", b.at("phantom").at("stiffness")}});
    if (b.at("phantom").contains("texture_path"))
      s.phantom.texture_path = b.at("phantom").at("texture_path").get<std::string>();
    s.search_json = b.at("search");
    s.config = search_config_from_json(s.search_json);
    s.bake = bake_params_from_json(b.value("overlay", json::object()));
    const SessionStatus status = session_status_from_string(b.at("status").get<std::string>());
    if (b.contains("registration") && !b.at("registration").is_null()) {
      s.registration_request = b.at("registration").value("request", json::object());
      s.registration = registration_from_json(b.at("registration").at("result"));
    }
    s.status = s.registration ? SessionStatus::registered : SessionStatus::created;
    if (b.contains("roi") && !b.at("roi").is_null()) {
      s.roi = roi_from_json(b.at("roi"));
      s.engine = std::make_unique<SearchEngine>(s.phantom.model, *s.roi, s.config);
      s.status = SessionStatus::roi_set;
    }

    const auto& probes = b.at("probes");
    const std::size_t expected_failures = b.at("failures").size();
    while (s.log.size() < probes.size()) {
      if (s.failures.size() > expected_failures) throw Error("replay diverged: unexpected probe failure");
      try {
        const StepReport r = attempt_step(s);
        const json& logged = probes.at(s.log.size() - 1);
        if (logged.at("grid_index").get<int>() != r.grid_index ||
            to_json(r.sample).dump() != logged.at("sample").dump())
          throw Error("replay diverged at step " + std::to_string(r.step));
      } catch (const SearchComplete&) {
        throw Error("replay diverged: search completed early");
      } catch (const BudgetExhausted&) {
        throw Error("replay diverged: budget exhausted early");
      } catch (const Error& e) {
        if (std::string(e.what()).rfind("replay diverged", 0) == 0) throw;
      }
    }
    for (std::size_t i = 0; i < s.failures.size(); ++i) {
      if (i >= expected_failures) throw Error("replay diverged: unexpected probe failure");
      const ProbeFailure f = failure_from_json(b.at("failures").at(i));
      if (f.attempt != s.failures[i].attempt || f.error != s.failures[i].error)
        throw Error("replay diverged: probe failure mismatch");
    }
    if (s.failures.size() != expected_failures) throw Error("replay diverged: missing probe failure");
    if (b.contains("final_grid") && !b.at("final_grid").is_null() && s.engine &&
        grid_to_json(s.engine->grid()).dump() != b.at("final_grid").dump())
      throw Error("replay diverged: final grid differs");
    if (s.engine && !s.log.empty()) s.status = status == SessionStatus::searching ? SessionStatus::paused : status;
    else if (status == SessionStatus::complete) s.status = status;
  } catch (const json::exception& e) {
    throw Error(std::string("invalid session bundle: ") + e.what());
  }
  s.base_texture = load_base_texture(s.phantom, s.bake);
}

PointCloud cloud_from_request(const json& c, const PhantomModel& phantom, const fs::path& base_dir) {
  if (c.contains("points")) {
    PointCloud cloud;
    cloud.frame = c.value("frame", std::string("camera"));
    for (const auto& p : c.at("points")) cloud.points.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
    return cloud;
  }
  if (c.contains("ply_path")) return read_ply_file(resolve(base_dir, c.at("ply_path").get<std::string>()).string());
  if (c.contains("synthesize")) {
    const json& sj = c.at("synthesize");
    CloudParams params;
    params.noise_sigma_mm = sj.value("noise_sigma_mm", params.noise_sigma_mm);
    params.visibility_fraction = sj.value("visibility_fraction", params.visibility_fraction);
    params.n_points = sj.value("n_points", params.n_points);
    params.sector_start_rad = sj.value("sector_start_rad", params.sector_start_rad);
    params.seed = sj.value("seed", params.seed);
    const RigidTransform pose = sj.contains("pose") ? transform_from_json(sj.at("pose")) : RigidTransform::identity();
    return synthesize_cloud(phantom, pose, params);
  }
  throw Error("cloud needs one of points, ply_path, synthesize");
}

}  // namespace

// ---------------------------------------------------------------------------
// SessionManager

SessionManager::SessionManager(std::optional<fs::path> storage_dir, SessionOptions options)
    : storage_dir_(std::move(storage_dir)), options_(options) {
  if (storage_dir_) {
    fs::create_directories(*storage_dir_);
    load_storage();
  }
}

SessionManager::~SessionManager() {
  std::lock_guard lock(mutex_);
  for (auto& [id, s] : sessions_) {
    s->stop_kind = StopKind::pause;
    std::lock_guard rl(s->runner_mutex);
    if (s->runner.joinable()) s->runner.join();
  }
}

std::shared_ptr<Session> SessionManager::get(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFound("unknown session '" + id + "'");
  return it->second;
}

std::string SessionManager::new_id() {
  static thread_local std::mt19937_64 rng(std::random_device{}());
  for (;;) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%04llx%08llx", static_cast<unsigned long long>(++counter_ & 0xffff),
                  static_cast<unsigned long long>(rng() & 0xffffffffULL));
    if (!sessions_.count(buf)) return buf;
  }
}

std::vector<std::string> SessionManager::list() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [id, s] : sessions_) out.push_back(id);
  return out;
}

void SessionManager::persist(Session& s) const {
  if (!storage_dir_) return;
  const fs::path path = *storage_dir_ / (s.id + ".json");
  const fs::path tmp = *storage_dir_ / (s.id + ".json.tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write session file '" + tmp.string() + "'");
    out << bundle_of(s).dump();
  }
  fs::rename(tmp, path);
}

void SessionManager::load_storage() {
  for (const auto& entry : fs::directory_iterator(*storage_dir_)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    const json b = json::parse(in, nullptr, false);
    if (b.is_discarded()) continue;
    auto s = std::make_shared<Session>();
    try {
      validate_bundle(b);
      s->id = b.value("id", entry.path().stem().string());
      replay_into(*s, b);
    } catch (const Error&) {
      continue;  // unreadable sessions are left on disk untouched
    }
    s->publish();
    sessions_[s->id] = std::move(s);
  }
}

std::string SessionManager::create(const json& request) {
  if (!request.is_object()) throw Error("create request must be an object");
  fs::path base_dir;
  if (request.contains("base_dir")) base_dir = request.at("base_dir").get<std::string>();
  auto s = std::make_shared<Session>();
  s->phantom = load_phantom_spec(request.value("phantom", json::object()), base_dir);
  s->config = search_config_from_json(request.value("search", json::object()));
  s->search_json = to_json(s->config);
  s->bake = bake_params_from_json(request.value("overlay", json::object()));
  s->base_texture = load_base_texture(s->phantom, s->bake);
  {
    std::lock_guard lock(mutex_);
    s->id = new_id();
    sessions_[s->id] = s;
  }
  std::lock_guard op(s->op_mutex);
  s->publish();
  persist(*s);
  return s->id;
}

RegistrationResult SessionManager::register_session(const std::string& id, const json& request) {
  auto s = get(id);
  std::lock_guard op(s->op_mutex);
  if (s->status != SessionStatus::created && s->status != SessionStatus::registered)
    throw Conflict(std::string("cannot register in status ") + to_string(s->status));
  fs::path base_dir;
  if (request.contains("base_dir")) base_dir = request.at("base_dir").get<std::string>();
  const PointCloud cloud = cloud_from_request(request.value("cloud", json{{"synthesize", json::object()}}),
                                              *s->phantom.model, base_dir);
  IcpParams icp;
  if (request.contains("icp")) {
    const json& ij = request.at("icp");
    icp.max_iterations = ij.value("max_iterations", icp.max_iterations);
    icp.convergence_tol_mm = ij.value("convergence_tol_mm", icp.convergence_tol_mm);
    icp.trim_fraction = ij.value("trim_fraction", icp.trim_fraction);
  }
  std::optional<RigidTransform> init;
  if (request.contains("init") && !request.at("init").is_null()) init = transform_from_json(request.at("init"));

  RegistrationResult result;
  try {
    result = icp_register(cloud, s->phantom.model->mesh(), s->phantom.model->index(), init, icp);
  } catch (const Error& e) {
    throw RegistrationFailed(std::string("registration failed: ") + e.what(), {{"n_points", cloud.points.size()}});
  }
  if (request.contains("max_rmse_mm") && !(result.rmse_all <= request.at("max_rmse_mm").get<double>()))
    throw RegistrationFailed("registration failed: rmse above limit", to_json(result));
  s->registration_request = request;
  s->registration = result;
  s->set_status(SessionStatus::registered);
  persist(*s);
  return result;
}

json SessionManager::set_roi(const std::string& id, const json& roi_json) {
  auto s = get(id);
  std::lock_guard op(s->op_mutex);
  if (s->status != SessionStatus::registered && s->status != SessionStatus::roi_set)
    throw Conflict(std::string("cannot set ROI in status ") + to_string(s->status));
  Roi roi = roi_from_json(roi_json);
  auto engine = std::make_unique<SearchEngine>(s->phantom.model, roi, s->config);
  s->roi = std::move(roi);
  s->engine = std::move(engine);
  s->log.clear();
  s->failures.clear();
  s->consecutive_failures = 0;
  s->set_status(SessionStatus::roi_set);
  persist(*s);
  const SearchGrid& g = s->engine->grid();
  const auto summary = summarize(g);
  return {{"grid_res", g.resolution},
          {"n_nodes", g.size()},
          {"n_in_roi", std::count(g.in_roi.begin(), g.in_roi.end(), true)},
          {"in_roi", g.in_roi},
          {"summary", {{"n_above", summary.above}, {"n_below", summary.below}, {"n_unknown", summary.unknown}}},
          {"status", to_string(s->status)}};
}

json SessionManager::run(const std::string& id, RunMode mode, std::optional<int> budget) {
  auto s = get(id);
  if (budget && *budget < 0) throw Error("budget must be non-negative");
  std::lock_guard rl(s->runner_mutex);
  std::unique_lock op(s->op_mutex);
  if (s->status == SessionStatus::complete) throw Conflict("session complete");
  if (s->status != SessionStatus::roi_set && s->status != SessionStatus::paused && s->status != SessionStatus::searching)
    throw Conflict(std::string("cannot run in status ") + to_string(s->status));
  if (s->running) throw Conflict("run already in progress");

  if (mode == RunMode::step) {
    s->set_status(SessionStatus::searching);
    try {
      const StepReport r = attempt_step(*s);
      const json report = to_json(r, true);
      s->publish();
      s->events.publish("step", to_json(r, false));
      s->set_status(search_finished(*s) ? SessionStatus::complete : SessionStatus::paused);
      persist(*s);
      return report;
    } catch (const SearchComplete& e) {
      s->set_status(SessionStatus::complete);
      persist(*s);
      throw Conflict(e.what());
    } catch (const BudgetExhausted& e) {
      s->set_status(SessionStatus::complete);
      persist(*s);
      throw Conflict(e.what());
    } catch (const Error& e) {
      s->events.publish("error", {{"error", e.what()}, {"step", s->log.size()}});
      s->set_status(SessionStatus::paused);
      persist(*s);
      throw;
    }
  }

  if (s->runner.joinable()) s->runner.join();  // previous run has finished
  s->stop_kind = StopKind::none;
  s->running = true;
  s->set_status(SessionStatus::searching);
  const int allowed = budget.value_or(s->config.budget);
  s->runner = std::thread([this, s, allowed] {
    int done = 0;
    std::optional<SessionStatus> final_status;
    for (;;) {
      if (s->stop_kind != StopKind::none) break;
      std::lock_guard lock(s->op_mutex);
      if (s->stop_kind != StopKind::none) break;
      if (done >= allowed) break;
      try {
        const StepReport r = attempt_step(*s);
        ++done;
        s->publish();
        s->events.publish("step", to_json(r, false));
        persist(*s);
        if (search_finished(*s)) {
          final_status = SessionStatus::complete;
          break;
        }
      } catch (const SearchComplete&) {
        final_status = SessionStatus::complete;
        break;
      } catch (const BudgetExhausted&) {
        final_status = SessionStatus::complete;
        break;
      } catch (const Error& e) {
        s->events.publish("error", {{"error", e.what()}, {"step", s->log.size()}});
        if (s->consecutive_failures >= options_.max_consecutive_failures) break;
      }
    }
    std::lock_guard lock(s->op_mutex);
    if (s->stop_kind == StopKind::stop) final_status = SessionStatus::complete;
    s->running = false;
    s->set_status(final_status.value_or(SessionStatus::paused));
    persist(*s);
  });
  return {{"status", to_string(s->status)}, {"step", s->log.size()}, {"budget", allowed}};
}

json SessionManager::pause(const std::string& id) {
  auto s = get(id);
  std::lock_guard rl(s->runner_mutex);
  {
    std::lock_guard op(s->op_mutex);
    if (s->status == SessionStatus::created || s->status == SessionStatus::registered ||
        s->status == SessionStatus::complete)
      throw Conflict(std::string("cannot pause in status ") + to_string(s->status));
    if (s->running) s->stop_kind = StopKind::pause;
  }
  if (s->runner.joinable()) s->runner.join();
  std::lock_guard op(s->op_mutex);
  return {{"status", to_string(s->status)}, {"step", s->log.size()}};
}

json SessionManager::stop(const std::string& id) {
  auto s = get(id);
  std::lock_guard rl(s->runner_mutex);
  {
    std::lock_guard op(s->op_mutex);
    if (s->status == SessionStatus::created || s->status == SessionStatus::registered)
      throw Conflict(std::string("cannot stop in status ") + to_string(s->status));
    if (s->running) s->stop_kind = StopKind::stop;
  }
  if (s->runner.joinable()) s->runner.join();
  std::lock_guard op(s->op_mutex);
  if (s->status != SessionStatus::complete) {
    s->set_status(SessionStatus::complete);
    persist(*s);
  }
  return {{"status", to_string(s->status)}, {"step", s->log.size()}};
}

void SessionManager::wait(const std::string& id) {
  auto s = get(id);
  std::lock_guard rl(s->runner_mutex);
  if (s->runner.joinable()) s->runner.join();
}

std::shared_ptr<const SessionSnapshot> SessionManager::snapshot(const std::string& id) const {
  return get(id)->snapshot();
}

const EventChannel& SessionManager::events(const std::string& id) const { return get(id)->events; }

std::shared_ptr<const HeatmapTexture> SessionManager::heatmap(const std::string& id, int* step) {
  auto s = get(id);
  const auto snap = s->snapshot();
  if (!snap->grid) throw Conflict("no ROI set");
  if (step) *step = snap->step;
  {
    std::lock_guard lock(s->cache_mutex);
    if (s->heat && s->heat_version == snap->version) return s->heat;
  }
  auto baked = std::make_shared<const HeatmapTexture>(bake_heatmap(*snap->grid, *snap->roi, s->bake));
  std::lock_guard lock(s->cache_mutex);
  if (s->heat_version < snap->version) {
    s->heat_version = snap->version;
    s->heat = baked;
  }
  return s->heat_version == snap->version ? s->heat : baked;
}

std::shared_ptr<const std::vector<std::uint8_t>> SessionManager::heatmap_png(const std::string& id, int* step) {
  auto s = get(id);
  const auto version = s->snapshot()->version;
  {
    std::lock_guard lock(s->cache_mutex);
    if (s->png && s->png_version == version) {
      if (step) *step = s->snapshot()->step;
      return s->png;
    }
  }
  const auto heat = heatmap(id, step);
  auto png = std::make_shared<const std::vector<std::uint8_t>>(encode_png(heat->image));
  std::lock_guard lock(s->cache_mutex);
  if (s->png_version < version) {
    s->png_version = version;
    s->png = png;
  }
  return png;
}

std::shared_ptr<const Texture> SessionManager::blended(const std::string& id, std::optional<double> opacity, int* step) {
  auto s = get(id);
  const double alpha = opacity.value_or(s->bake.opacity);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("opacity must be in [0, 1]");
  const auto version = s->snapshot()->version;
  {
    std::lock_guard lock(s->cache_mutex);
    if (s->blend_version == version) {
      const auto it = s->blends.find(alpha);
      if (it != s->blends.end()) {
        if (step) *step = s->snapshot()->step;
        return it->second;
      }
    }
  }
  const auto heat = heatmap(id, step);
  auto out = std::make_shared<const Texture>(blend_textures(*s->base_texture, *heat, alpha));
  std::lock_guard lock(s->cache_mutex);
  if (s->blend_version < version) {
    s->blend_version = version;
    s->blends.clear();
  }
  if (s->blend_version == version) s->blends[alpha] = out;
  return out;
}

namespace {

std::string fnv1a_hex(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto b : bytes) h = (h ^ b) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json summary_json(const ClassSummary& s) {
  return {{"n_above", s.above}, {"n_below", s.below}, {"n_unknown", s.unknown}};
}

}  // namespace

json SessionManager::state(const std::string& id, const std::string& what, std::optional<double> opacity) {
  auto s = get(id);
  const auto snap = s->snapshot();
  json out{{"id", id}, {"step", snap->step}, {"status", to_string(snap->status)}, {"what", what}};
  if (what == "status") {
    out["running"] = snap->running;
    out["budget"] = s->config.budget;
    out["threshold"] = snap->threshold;
    out["summary"] = summary_json(snap->summary);
    out["failures"] = snap->failures->size();
  } else if (what == "grid") {
    if (!snap->grid) throw Conflict("no ROI set");
    out["grid"] = grid_to_json(*snap->grid);
    out["threshold"] = snap->threshold;
    out["epsilon"] = snap->epsilon;
    out["summary"] = summary_json(snap->summary);
    out["roi"] = to_json(*snap->roi);
  } else if (what == "heatmap" || what == "blended") {
    if (!snap->grid) throw Conflict("no ROI set");
    int step = 0;
    const auto heat = heatmap(id, &step);
    out["width"] = heat->image.width;
    out["height"] = heat->image.height;
    out["range"] = {heat->range_lo, heat->range_hi};
    out["format"] = "rgba8, row-major, row 0 at v = 1";
    if (what == "heatmap") {
      out["digest"] = fnv1a_hex(heat->image.rgba);
      out["opacity"] = s->bake.opacity;
    } else {
      const double alpha = opacity.value_or(s->bake.opacity);
      const auto tex = blended(id, alpha, &step);
      out["digest"] = fnv1a_hex(tex->rgba);
      out["opacity"] = alpha;
    }
    out["step"] = step;
  } else if (what == "probes") {
    json probes = json::array();
    for (const auto& r : *snap->probes) probes.push_back(to_json(r, true));
    json failures = json::array();
    for (const auto& f : *snap->failures) failures.push_back(to_json(f));
    out["probes"] = probes;
    out["failures"] = failures;
  } else if (what == "registration") {
    out["registration"] = snap->registration ? to_json(*snap->registration) : json(nullptr);
  } else {
    throw Error("unknown state '" + what + "'");
  }
  return out;
}

json SessionManager::export_session(const std::string& id) const {
  auto s = get(id);
  std::lock_guard op(s->op_mutex);
  return bundle_of(*s);
}

std::string SessionManager::import_session(const json& bundle) {
  validate_bundle(bundle);
  auto s = std::make_shared<Session>();
  replay_into(*s, bundle);
  {
    std::lock_guard lock(mutex_);
    s->id = new_id();
    sessions_[s->id] = s;
  }
  std::lock_guard op(s->op_mutex);
  s->publish();
  persist(*s);
  return s->id;
}

json replay_bundle(const json& bundle) {
  validate_bundle(bundle);
  Session s;
  replay_into(s, bundle);
  return s.engine ? grid_to_json(s.engine->grid()) : json(nullptr);
}

}  // namespace palpation
