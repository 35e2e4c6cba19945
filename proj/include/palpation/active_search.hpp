#pragma once

#include "palpation/geometry.hpp"
#include "palpation/phantom.hpp"
#include "palpation/probe_sim.hpp"
#include "palpation/stiffness_est.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace palpation {

// ---------------------------------------------------------------------------
// Gaussian process over UV space

struct KernelParams {
  double lengthscale = 0.1;  // UV units
  /// Fixed sigma_f^2. When unset ("auto"): 1.0 until five observations
  /// exist, then the sample variance of the first five (floored at
  /// min_signal_variance) for the rest of the session.
  std::optional<double> signal_variance = 1.0;
  double min_signal_variance = 0.05;
  double noise_variance = 0.01;
  double prior_mean = 0.0;  // N/mm
};

struct Observation {
  Vec2 uv;
  double value = 0.0;
  int count = 1;  // samples merged into this observation
};

struct Posterior {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Exact GP regression with a squared-exponential kernel.
class GaussianProcess {
 public:
  explicit GaussianProcess(KernelParams params = {});

  /// Appends an observation; an observation within 1e-9 of an existing uv is
  /// averaged into it instead. Returns true when merged.
  bool update(const Vec2& uv, double value);
  bool update(const StiffnessSample& sample) { return update(sample.uv, sample.stiffness); }

  /// Posterior mean and standard deviation at every point.
  /// Throws "ill-conditioned kernel matrix" when Cholesky fails.
  Posterior predict(std::span<const Vec2> points) const;

  double kernel(const Vec2& a, const Vec2& b) const;
  double signal_variance() const;
  const KernelParams& params() const { return params_; }
  const std::vector<Observation>& observations() const { return observations_; }

 private:
  KernelParams params_;
  std::vector<Observation> observations_;
  std::optional<double> frozen_signal_variance_;
};

// ---------------------------------------------------------------------------
// Region of interest and search grid

struct Roi {
  enum class Shape { circle, polygon };
  Shape shape = Shape::circle;
  Vec2 center = Vec2(0.5, 0.5);
  double radius = 0.25;
  std::vector<Vec2> polygon;
  int resolution = 25;

  void validate() const;
  bool contains(const Vec2& uv) const;
  Eigen::AlignedBox2d bounds() const;
};

nlohmann::json to_json(const Roi& roi);
Roi roi_from_json(const nlohmann::json& j);

enum class Label : std::uint8_t { unknown, above, below, outside };
const char* to_string(Label label);

/// R x R lattice over the ROI's bounding box, row-major with rows along v.
/// Nodes outside the ROI carry Label::outside and are never candidates.
struct SearchGrid {
  int resolution = 0;
  std::vector<Vec2> uv;
  std::vector<bool> in_roi;
  std::vector<double> mu;
  std::vector<double> sigma;
  std::vector<double> c_lo;
  std::vector<double> c_hi;
  std::vector<double> ambiguity;
  std::vector<Label> label;
  /// Number of confidence updates applied so far.
  int updates = 0;

  std::size_t size() const { return uv.size(); }
};

SearchGrid make_grid(const Roi& roi);

/// Q_t = [mu - sqrt(beta) sigma, mu + sqrt(beta) sigma]; C_t = C_{t-1} ∩ Q_t.
/// An empty intersection collapses C_t to the endpoint of C_{t-1} nearest
/// Q_t. Returns the number of nodes that collapsed.
int update_confidence(SearchGrid& grid, std::span<const double> mu, std::span<const double> sigma, double beta);

/// min(hi - h, h - lo); negative once the interval clears h.
double ambiguity(double lo, double hi, double h);

/// Recomputes grid.ambiguity for threshold h.
void refresh_ambiguity(SearchGrid& grid, double h);

struct ClassSummary {
  int above = 0;
  int below = 0;
  int unknown = 0;
};

/// above <=> lo > h - eps, below <=> hi < h + eps (when both hold the interval
/// midpoint decides). Labels never change once assigned.
ClassSummary classify(SearchGrid& grid, double h, double eps, std::vector<int>* newly_labeled = nullptr);
ClassSummary summarize(const SearchGrid& grid);

/// Argmax of ambiguity over unknown ROI nodes, lowest index on ties.
/// nullopt when no unknown node remains.
std::optional<int> select_next(const SearchGrid& grid);

/// Argmax of mu + sqrt(beta) sigma over ROI nodes, lowest index on ties.
int ucb_select(const SearchGrid& grid, std::span<const double> mu, std::span<const double> sigma, double beta);

/// Regular raster over the ROI snapped to grid nodes, serpentine order,
/// with as many points as fit in `budget`.
std::vector<int> raster_sequence(const SearchGrid& grid, const Roi& roi, int budget);

nlohmann::json grid_to_json(const SearchGrid& grid);

// ---------------------------------------------------------------------------
// Search session

enum class Acquisition { lse, ucb, raster };
const char* to_string(Acquisition a);
Acquisition acquisition_from_string(const std::string& s);

struct SearchConfig {
  Acquisition acquisition = Acquisition::lse;
  double beta = 9.0;
  /// Explicit threshold h; when unset h = omega * max posterior mean over the
  /// ROI, re-evaluated every step.
  std::optional<double> threshold;
  double omega = 0.6;
  /// Classification slack; defaults to 0.05 * sigma_f.
  std::optional<double> epsilon;
  KernelParams kernel;
  int budget = 30;
  std::uint64_t seed = 1;
  ProbeParams probe;
  SensorModel sensor;
  EstimatorParams estimator;
};

nlohmann::json to_json(const SearchConfig& c);
SearchConfig search_config_from_json(const nlohmann::json& j);

struct StepReport {
  int step = 0;  // 1-based index of this probe
  int grid_index = -1;
  Vec2 probed_uv = Vec2::Zero();
  StiffnessSample sample;
  ProbeRecord record;
  bool merged = false;
  double threshold = 0.0;
  int collapsed = 0;
  std::vector<int> newly_labeled;
  ClassSummary summary;
};

nlohmann::json to_json(const StepReport& r, bool include_record = true);

/// Raised by SearchEngine::step when no unknown node remains.
class SearchComplete : public Error {
 public:
  SearchComplete() : Error("search complete") {}
};

/// Raised by SearchEngine::step when the probe budget is used up.
class BudgetExhausted : public Error {
 public:
  BudgetExhausted() : Error("budget exhausted") {}
};

/// One palpation search over an ROI: a strictly sequential state machine.
class SearchEngine {
 public:
  SearchEngine(std::shared_ptr<const PhantomModel> phantom, Roi roi, SearchConfig config);

  /// select -> plan -> execute -> estimate -> gp update -> predict ->
  /// confidence update -> classify. Exactly one new observation per call.
  StepReport step();

  /// Grid node the next step would probe, or nullopt if complete.
  std::optional<int> peek_next() const;

  const SearchGrid& grid() const { return grid_; }
  const GaussianProcess& gp() const { return gp_; }
  const Roi& roi() const { return roi_; }
  const SearchConfig& config() const { return config_; }
  const PhantomModel& phantom() const { return *phantom_; }
  int steps() const { return steps_; }
  double threshold() const { return threshold_; }
  double epsilon() const;
  bool complete() const;

  /// Estimated superlevel set: above, or unknown with mu >= h.
  std::vector<bool> superlevel_estimate() const;

 private:
  void refresh();
  std::uint64_t probe_seed(int attempt) const;

  std::shared_ptr<const PhantomModel> phantom_;
  Roi roi_;
  SearchConfig config_;
  GaussianProcess gp_;
  SearchGrid grid_;
  std::vector<int> raster_;
  int steps_ = 0;
  int attempts_ = 0;
  double threshold_ = 0.0;
};

/// F1 of the estimated superlevel set against truth over ROI nodes.
double superlevel_f1(const SearchGrid& grid, const std::vector<bool>& estimate, const std::vector<bool>& truth);

/// Ground-truth superlevel membership of each ROI node: k(uv) >= h.
std::vector<bool> true_superlevel(const PhantomModel& phantom, const SearchGrid& grid, double h);

}  // namespace palpation
