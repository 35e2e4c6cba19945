#pragma once

#include "palpation/active_search.hpp"
#include "palpation/overlay.hpp"
#include "palpation/phantom.hpp"
#include "palpation/registration.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace palpation {

class NotFound : public Error {
 public:
  using Error::Error;
};

/// Operation not allowed in the session's current status.
class Conflict : public Error {
 public:
  using Error::Error;
};

class RegistrationFailed : public Error {
 public:
  RegistrationFailed(const std::string& what, nlohmann::json diagnostics)
      : Error(what), diagnostics(std::move(diagnostics)) {}
  nlohmann::json diagnostics;
};

// ---------------------------------------------------------------------------
// Phantom configuration

nlohmann::json to_json(const DomeParams& p);
DomeParams dome_params_from_json(const nlohmann::json& j);

/// A loaded phantom together with what is needed to rebuild it elsewhere.
struct PhantomSpec {
  std::shared_ptr<const PhantomModel> model;
  std::string obj_text;  // canonical OBJ of the mesh
  std::optional<std::string> texture_path;
};

/// Accepts {"mesh": {"dome": {...}} | {"obj_path": p} | {"obj_text": s},
///          "stiffness": {...} | "stiffness_path": p, "texture_path": p}.
/// Relative paths resolve against base_dir.
PhantomSpec load_phantom_spec(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

BakeParams bake_params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BakeParams& p);

// ---------------------------------------------------------------------------
// Sessions

enum class SessionStatus { created, registered, roi_set, searching, paused, complete };
const char* to_string(SessionStatus s);
SessionStatus session_status_from_string(const std::string& s);

/// A failed probe attempt (estimation error); the attempt's seed is consumed.
struct ProbeFailure {
  int attempt = 0;
  int step = 0;  // steps completed before the attempt
  std::string error;
};

/// Immutable view published after every mutation.
struct SessionSnapshot {
  std::uint64_t version = 0;
  int step = 0;
  SessionStatus status = SessionStatus::created;
  bool running = false;
  std::optional<RegistrationResult> registration;
  std::optional<Roi> roi;
  std::shared_ptr<const SearchGrid> grid;
  double threshold = 0.0;
  double epsilon = 0.0;
  ClassSummary summary;
  std::shared_ptr<const std::vector<StepReport>> probes;
  std::shared_ptr<const std::vector<ProbeFailure>> failures;
};

struct Event {
  std::uint64_t seq = 0;
  std::string type;  // "step", "status", "error"
  std::string data;  // JSON text
};

/// Append-only event log with blocking reads.
class EventChannel {
 public:
  explicit EventChannel(std::size_t capacity = 4096) : capacity_(capacity) {}
  void publish(std::string type, const nlohmann::json& data);
  /// Events with seq > after; waits up to `timeout` when none are pending.
  std::vector<Event> wait(std::uint64_t after, std::chrono::milliseconds timeout) const;
  std::uint64_t last_seq() const;

 private:
  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  std::deque<Event> events_;
  std::uint64_t next_seq_ = 1;
  std::size_t capacity_;
};

enum class RunMode { step, continuous };

struct SessionOptions {
  /// Consecutive failed probe attempts after which a continuous run pauses.
  int max_consecutive_failures = 5;
};

class Session;

/// Owns all sessions; every public method is thread safe.
class SessionManager {
 public:
  explicit SessionManager(std::optional<std::filesystem::path> storage_dir = std::nullopt,
                          SessionOptions options = {});
  ~SessionManager();
  SessionManager(const SessionManager&) = delete;
  SessionManager& operator=(const SessionManager&) = delete;

  /// Request: {"phantom": {...}, "search": {...}, "overlay": {...}}.
  std::string create(const nlohmann::json& request);

  /// Request: {"cloud": {"points": [[x,y,z],...]} | {"ply_path": p} |
  ///           {"synthesize": {...}}, "init": transform?, "icp": {...},
  ///           "max_rmse_mm": r?}.
  RegistrationResult register_session(const std::string& id, const nlohmann::json& request);

  nlohmann::json set_roi(const std::string& id, const nlohmann::json& roi);

  /// Step mode runs one probe synchronously and returns its StepReport.
  /// Continuous mode starts a background run of up to `budget` probes.
  nlohmann::json run(const std::string& id, RunMode mode, std::optional<int> budget = std::nullopt);
  /// Returns once the background run (if any) has stopped probing.
  nlohmann::json pause(const std::string& id);
  nlohmann::json stop(const std::string& id);
  /// Blocks until no background run is active.
  void wait(const std::string& id);

  std::shared_ptr<const SessionSnapshot> snapshot(const std::string& id) const;
  /// what in {grid, heatmap, blended, probes, registration, status}.
  nlohmann::json state(const std::string& id, const std::string& what, std::optional<double> opacity = std::nullopt);
  /// Heat map of the latest snapshot; repeated calls at one step return the
  /// same object.
  std::shared_ptr<const HeatmapTexture> heatmap(const std::string& id, int* step = nullptr);
  std::shared_ptr<const Texture> blended(const std::string& id, std::optional<double> opacity = std::nullopt,
                                         int* step = nullptr);
  std::shared_ptr<const std::vector<std::uint8_t>> heatmap_png(const std::string& id, int* step = nullptr);

  const EventChannel& events(const std::string& id) const;

  nlohmann::json export_session(const std::string& id) const;
  /// Rebuilds the session and replays its probe log; throws "replay diverged"
  /// when the replayed probes differ from the log.
  std::string import_session(const nlohmann::json& bundle);

  std::vector<std::string> list() const;

 private:
  std::shared_ptr<Session> get(const std::string& id) const;
  std::string new_id();
  void persist(Session& s) const;
  void load_storage();

  std::optional<std::filesystem::path> storage_dir_;
  SessionOptions options_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t counter_ = 0;
};

/// Re-executes a bundle's probe log on a fresh engine and returns the final
/// grid export; used by import and by the acceptance suite.
nlohmann::json replay_bundle(const nlohmann::json& bundle);

}  // namespace palpation
