#include "palpation/active_search.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace palpation {

// ---------------------------------------------------------------------------
// GaussianProcess

GaussianProcess::GaussianProcess(KernelParams params) : params_(params) {
  if (!(params_.lengthscale > 0.0)) throw Error("kernel lengthscale must be positive");
  if (params_.signal_variance && !(*params_.signal_variance > 0.0)) throw Error("signal variance must be positive");
  if (!(params_.noise_variance > 0.0)) throw Error("noise variance must be positive");
  if (!(params_.min_signal_variance > 0.0)) throw Error("signal variance floor must be positive");
}

double GaussianProcess::signal_variance() const {
  if (params_.signal_variance) return *params_.signal_variance;
  return frozen_signal_variance_ ? *frozen_signal_variance_ : 1.0;
}

double GaussianProcess::kernel(const Vec2& a, const Vec2& b) const {
  const double l = params_.lengthscale;
  return signal_variance() * std::exp(-(a - b).squaredNorm() / (2.0 * l * l));
}

bool GaussianProcess::update(const Vec2& uv, double value) {
  if (!uv.allFinite() || !std::isfinite(value)) throw Error("observation must be finite");
  bool merged = false;
  for (auto& obs : observations_) {
    if ((obs.uv - uv).norm() <= 1e-9) {
      obs.value = (obs.value * obs.count + value) / (obs.count + 1);
      ++obs.count;
      merged = true;
      break;
    }
  }
  if (!merged) observations_.push_back({uv, value, 1});
  if (!params_.signal_variance && !frozen_signal_variance_ && observations_.size() >= 5) {
    double mean = 0.0;
    for (int i = 0; i < 5; ++i) mean += observations_[i].value;
    mean /= 5.0;
    double var = 0.0;
    for (int i = 0; i < 5; ++i) var += (observations_[i].value - mean) * (observations_[i].value - mean);
    frozen_signal_variance_ = std::max(var / 4.0, params_.min_signal_variance);
  }
  return merged;
}

Posterior GaussianProcess::predict(std::span<const Vec2> points) const {
  const double sf2 = signal_variance();
  Posterior out;
  out.mean.assign(points.size(), params_.prior_mean);
  out.stddev.assign(points.size(), std::sqrt(sf2));
  const int n = static_cast<int>(observations_.size());
  if (n == 0) return out;

  Eigen::MatrixXd k(n, n);
  Eigen::VectorXd resid(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) k(i, j) = k(j, i) = kernel(observations_[i].uv, observations_[j].uv);
    k(i, i) += params_.noise_variance;
    resid[i] = observations_[i].value - params_.prior_mean;
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) throw Error("ill-conditioned kernel matrix");
  const Eigen::VectorXd alpha = llt.solve(resid);
  if (!alpha.allFinite()) throw Error("ill-conditioned kernel matrix");

  Eigen::VectorXd ks(n);
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (int i = 0; i < n; ++i) ks[i] = kernel(points[p], observations_[i].uv);
    out.mean[p] = params_.prior_mean + ks.dot(alpha);
    const Eigen::VectorXd v = llt.matrixL().solve(ks);
    out.stddev[p] = std::sqrt(std::max(0.0, sf2 - v.squaredNorm()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// ROI

void Roi::validate() const {
  if (resolution < 2) throw Error("grid resolution must be at least 2");
  const auto in_unit = [](const Vec2& p) { return p.x() >= 0.0 && p.x() <= 1.0 && p.y() >= 0.0 && p.y() <= 1.0; };
  if (shape == Shape::circle) {
    if (!(radius > 0.0)) throw Error("ROI has zero area");
    if (!in_unit(center - Vec2(radius, radius)) || !in_unit(center + Vec2(radius, radius)))
      throw Error("ROI not contained in [0,1]^2");
    return;
  }
  if (polygon.size() < 3) throw Error("ROI polygon needs at least 3 vertices");
  double area = 0.0;
  for (std::size_t i = 0; i < polygon.size(); ++i) {
    if (!in_unit(polygon[i])) throw Error("ROI not contained in [0,1]^2");
    const Vec2& a = polygon[i];
    const Vec2& b = polygon[(i + 1) % polygon.size()];
    area += a.x() * b.y() - b.x() * a.y();
  }
  if (std::abs(area) <= 1e-12) throw Error("ROI has zero area");
}

bool Roi::contains(const Vec2& uv) const {
  if (shape == Shape::circle) return (uv - center).squaredNorm() <= radius * radius;
  // Winding number; boundary points count as inside only when they wind.
  int winding = 0;
  for (std::size_t i = 0; i < polygon.size(); ++i) {
    const Vec2& a = polygon[i];
    const Vec2& b = polygon[(i + 1) % polygon.size()];
    const double cross = (b.x() - a.x()) * (uv.y() - a.y()) - (uv.x() - a.x()) * (b.y() - a.y());
    if (a.y() <= uv.y()) {
      if (b.y() > uv.y() && cross > 0.0) ++winding;
    } else if (b.y() <= uv.y() && cross < 0.0) {
      --winding;
    }
  }
  return winding != 0;
}

Eigen::AlignedBox2d Roi::bounds() const {
  Eigen::AlignedBox2d box;
  if (shape == Shape::circle) {
    box.extend(center - Vec2(radius, radius));
    box.extend(center + Vec2(radius, radius));
  } else {
    for (const auto& p : polygon) box.extend(p);
  }
  return box;
}

nlohmann::json to_json(const Roi& roi) {
  nlohmann::json j{{"resolution", roi.resolution}};
  if (roi.shape == Roi::Shape::circle) {
    j["shape"] = "circle";
    j["center_uv"] = {roi.center.x(), roi.center.y()};
    j["radius_uv"] = roi.radius;
  } else {
    j["shape"] = "polygon";
    j["vertices_uv"] = nlohmann::json::array();
    for (const auto& p : roi.polygon) j["vertices_uv"].push_back({p.x(), p.y()});
  }
  return j;
}

Roi roi_from_json(const nlohmann::json& j) {
  Roi roi;
  try {
    roi.resolution = j.value("resolution", 25);
    const std::string shape = j.value("shape", std::string("circle"));
    if (shape == "circle") {
      roi.shape = Roi::Shape::circle;
      roi.center = Vec2(j.at("center_uv").at(0).get<double>(), j.at("center_uv").at(1).get<double>());
      roi.radius = j.at("radius_uv").get<double>();
    } else if (shape == "polygon") {
      roi.shape = Roi::Shape::polygon;
      for (const auto& p : j.at("vertices_uv")) roi.polygon.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
    } else {
      throw Error("unknown ROI shape '" + shape + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid ROI: ") + e.what());
  }
  roi.validate();
  return roi;
}

// ---------------------------------------------------------------------------
// Grid and LSE

const char* to_string(Label label) {
  switch (label) {
    case Label::above: return "above";
    case Label::below: return "below";
    case Label::outside: return "outside";
    case Label::unknown: break;
  }
  return "unknown";
}

SearchGrid make_grid(const Roi& roi) {
  roi.validate();
  const auto box = roi.bounds();
  const int r = roi.resolution;
  SearchGrid g;
  g.resolution = r;
  const std::size_t n = static_cast<std::size_t>(r) * r;
  g.uv.reserve(n);
  g.in_roi.reserve(n);
  for (int row = 0; row < r; ++row) {
    for (int col = 0; col < r; ++col) {
      const Vec2 uv(box.min().x() + box.sizes().x() * col / (r - 1),
                    box.min().y() + box.sizes().y() * row / (r - 1));
      g.uv.push_back(uv);
      g.in_roi.push_back(roi.contains(uv));
    }
  }
  if (std::find(g.in_roi.begin(), g.in_roi.end(), true) == g.in_roi.end())
    throw Error("ROI contains no grid nodes");
  g.mu.assign(n, 0.0);
  g.sigma.assign(n, 0.0);
  g.c_lo.assign(n, -std::numeric_limits<double>::infinity());
  g.c_hi.assign(n, std::numeric_limits<double>::infinity());
  g.ambiguity.assign(n, std::numeric_limits<double>::infinity());
  g.label.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.label[i] = g.in_roi[i] ? Label::unknown : Label::outside;
  return g;
}

int update_confidence(SearchGrid& grid, std::span<const double> mu, std::span<const double> sigma, double beta) {
  if (!(beta > 0.0)) throw Error("beta must be positive");
  if (mu.size() != grid.size() || sigma.size() != grid.size()) throw Error("posterior size does not match grid");
  const double scale = std::sqrt(beta);
  int collapsed = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid.mu[i] = mu[i];
    grid.sigma[i] = sigma[i];
    const double q_lo = mu[i] - scale * sigma[i];
    const double q_hi = mu[i] + scale * sigma[i];
    if (grid.updates == 0) {
      grid.c_lo[i] = q_lo;
      grid.c_hi[i] = q_hi;
      continue;
    }
    const double lo = std::max(grid.c_lo[i], q_lo);
    const double hi = std::min(grid.c_hi[i], q_hi);
    if (lo <= hi) {
      grid.c_lo[i] = lo;
      grid.c_hi[i] = hi;
    } else {
      ++collapsed;
      const double point = q_lo > grid.c_hi[i] ? grid.c_hi[i] : grid.c_lo[i];
      grid.c_lo[i] = grid.c_hi[i] = point;
    }
  }
  ++grid.updates;
  return collapsed;
}

double ambiguity(double lo, double hi, double h) { return std::min(hi - h, h - lo); }

void refresh_ambiguity(SearchGrid& grid, double h) {
  for (std::size_t i = 0; i < grid.size(); ++i) grid.ambiguity[i] = ambiguity(grid.c_lo[i], grid.c_hi[i], h);
}

ClassSummary summarize(const SearchGrid& grid) {
  ClassSummary s;
  for (const Label l : grid.label) {
    if (l == Label::above) ++s.above;
    if (l == Label::below) ++s.below;
    if (l == Label::unknown) ++s.unknown;
  }
  return s;
}

ClassSummary classify(SearchGrid& grid, double h, double eps, std::vector<int>* newly_labeled) {
  if (!(eps >= 0.0)) throw Error("epsilon must be non-negative");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid.label[i] != Label::unknown) continue;
    const bool above = grid.c_lo[i] > h - eps;
    const bool below = grid.c_hi[i] < h + eps;
    if (!above && !below) continue;
    if (above && below)
      grid.label[i] = 0.5 * (grid.c_lo[i] + grid.c_hi[i]) >= h ? Label::above : Label::below;
    else
      grid.label[i] = above ? Label::above : Label::below;
    if (newly_labeled) newly_labeled->push_back(static_cast<int>(i));
  }
  return summarize(grid);
}

std::optional<int> select_next(const SearchGrid& grid) {
  std::optional<int> best;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid.label[i] != Label::unknown) continue;
    if (!best || grid.ambiguity[i] > grid.ambiguity[*best]) best = static_cast<int>(i);
  }
  return best;
}

int ucb_select(const SearchGrid& grid, std::span<const double> mu, std::span<const double> sigma, double beta) {
  if (mu.size() != grid.size() || sigma.size() != grid.size()) throw Error("posterior size does not match grid");
  const double scale = std::sqrt(beta);
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!grid.in_roi[i]) continue;
    const double score = mu[i] + scale * sigma[i];
    if (best < 0 || score > best_score) {
      best = static_cast<int>(i);
      best_score = score;
    }
  }
  if (best < 0) throw Error("ROI contains no grid nodes");
  return best;
}

std::vector<int> raster_sequence(const SearchGrid& grid, const Roi& roi, int budget) {
  if (budget < 1) return {};
  const auto box = roi.bounds();
  const int r = grid.resolution;
  const auto nearest_node = [&](const Vec2& uv) {
    const int col = std::clamp(static_cast<int>(std::lround((uv.x() - box.min().x()) / box.sizes().x() * (r - 1))), 0, r - 1);
    const int row = std::clamp(static_cast<int>(std::lround((uv.y() - box.min().y()) / box.sizes().y() * (r - 1))), 0, r - 1);
    return row * r + col;
  };
  std::vector<int> best;
  for (int m = 1; m <= r; ++m) {
    std::vector<int> seq;
    std::set<int> seen;
    for (int row = 0; row < m; ++row) {
      for (int k = 0; k < m; ++k) {
        const int col = row % 2 == 0 ? k : m - 1 - k;
        const Vec2 uv(box.min().x() + box.sizes().x() * (col + 0.5) / m,
                      box.min().y() + box.sizes().y() * (row + 0.5) / m);
        const int node = nearest_node(uv);
        if (!grid.in_roi[node] || !seen.insert(node).second) continue;
        seq.push_back(node);
      }
    }
    if (static_cast<int>(seq.size()) > budget) break;
    best = std::move(seq);
  }
  return best;
}

nlohmann::json grid_to_json(const SearchGrid& grid) {
  nlohmann::json uv = nlohmann::json::array();
  for (const auto& p : grid.uv) uv.push_back({p.x(), p.y()});
  std::vector<std::string> labels;
  for (const Label l : grid.label) labels.emplace_back(to_string(l));
  // Infinite bounds cannot occur after the first update but are emitted as
  // null rather than invalid JSON.
  const auto finite_or_null = [](const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    return a;
  };
  return {{"grid_res", grid.resolution},
          {"uv", uv},
          {"in_roi", grid.in_roi},
          {"mu", grid.mu},
          {"sigma", grid.sigma},
          {"c_lo", finite_or_null(grid.c_lo)},
          {"c_hi", finite_or_null(grid.c_hi)},
          {"ambiguity", finite_or_null(grid.ambiguity)},
          {"label", labels},
          {"updates", grid.updates}};
}

// ---------------------------------------------------------------------------
// Config and reports

const char* to_string(Acquisition a) {
  switch (a) {
    case Acquisition::ucb: return "ucb";
    case Acquisition::raster: return "raster";
    case Acquisition::lse: break;
  }
  return "lse";
}

Acquisition acquisition_from_string(const std::string& s) {
  if (s == "lse") return Acquisition::lse;
  if (s == "ucb") return Acquisition::ucb;
  if (s == "raster") return Acquisition::raster;
  throw Error("unknown acquisition '" + s + "'");
}

nlohmann::json to_json(const SearchConfig& c) {
  nlohmann::json kernel{{"lengthscale_uv", c.kernel.lengthscale},
                        {"noise_variance", c.kernel.noise_variance},
                        {"prior_mean", c.kernel.prior_mean},
                        {"min_signal_variance", c.kernel.min_signal_variance}};
  kernel["signal_variance"] = c.kernel.signal_variance ? nlohmann::json(*c.kernel.signal_variance) : nlohmann::json("auto");
  nlohmann::json sensor{{"noise_sigma_n", c.sensor.noise_sigma_n},
                        {"outlier_rate", c.sensor.outlier_rate},
                        {"outlier_scale", c.sensor.outlier_scale}};
  sensor["baseline_n"] = c.sensor.baseline_n ? nlohmann::json(*c.sensor.baseline_n) : nlohmann::json("random");
  nlohmann::json j{
      {"acquisition", to_string(c.acquisition)},
      {"beta", c.beta},
      {"omega", c.omega},
      {"kernel", kernel},
      {"budget", c.budget},
      {"seed", c.seed},
      {"probe",
       {{"lambda_mm", c.probe.lambda_mm},
        {"d_max_mm", c.probe.d_max_mm},
        {"f_max_n", c.probe.f_max_n},
        {"z_safe_mm", c.probe.z_safe_mm},
        {"step_mm", c.probe.step_mm}}},
      {"sensor", sensor},
      {"ransac",
       {{"iterations", c.estimator.ransac.iterations},
        {"inlier_tol_n", c.estimator.ransac.inlier_tol_n},
        {"min_inlier_fraction", c.estimator.ransac.min_inlier_fraction},
        {"seed", c.estimator.ransac.seed}}}};
  j["threshold"] = c.threshold ? nlohmann::json(*c.threshold) : nlohmann::json("implicit");
  j["epsilon"] = c.epsilon ? nlohmann::json(*c.epsilon) : nlohmann::json("auto");
  return j;
}

SearchConfig search_config_from_json(const nlohmann::json& j) {
  SearchConfig c;
  try {
    c.acquisition = acquisition_from_string(j.value("acquisition", std::string("lse")));
    c.beta = j.value("beta", c.beta);
    c.omega = j.value("omega", c.omega);
    if (j.contains("threshold") && j.at("threshold").is_number()) c.threshold = j.at("threshold").get<double>();
    if (j.contains("epsilon") && j.at("epsilon").is_number()) c.epsilon = j.at("epsilon").get<double>();
    c.budget = j.value("budget", c.budget);
    c.seed = j.value("seed", c.seed);
    if (j.contains("kernel")) {
      const auto& k = j.at("kernel");
      c.kernel.lengthscale = k.value("lengthscale_uv", c.kernel.lengthscale);
      c.kernel.noise_variance = k.value("noise_variance", c.kernel.noise_variance);
      c.kernel.prior_mean = k.value("prior_mean", c.kernel.prior_mean);
      c.kernel.min_signal_variance = k.value("min_signal_variance", c.kernel.min_signal_variance);
      if (k.contains("signal_variance")) {
        const auto& sv = k.at("signal_variance");
        if (sv.is_number())
          c.kernel.signal_variance = sv.get<double>();
        else if (sv.is_string() && sv.get<std::string>() == "auto")
          c.kernel.signal_variance.reset();
        else
          throw Error("signal_variance must be a number or \"auto\"");
      }
    }
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      c.probe.lambda_mm = p.value("lambda_mm", c.probe.lambda_mm);
      c.probe.d_max_mm = p.value("d_max_mm", c.probe.d_max_mm);
      c.probe.f_max_n = p.value("f_max_n", c.probe.f_max_n);
      c.probe.z_safe_mm = p.value("z_safe_mm", c.probe.z_safe_mm);
      c.probe.step_mm = p.value("step_mm", c.probe.step_mm);
    }
    if (j.contains("sensor")) {
      const auto& s = j.at("sensor");
      c.sensor.noise_sigma_n = s.value("noise_sigma_n", c.sensor.noise_sigma_n);
      c.sensor.outlier_rate = s.value("outlier_rate", c.sensor.outlier_rate);
      c.sensor.outlier_scale = s.value("outlier_scale", c.sensor.outlier_scale);
      if (s.contains("baseline_n") && s.at("baseline_n").is_number()) c.sensor.baseline_n = s.at("baseline_n").get<double>();
    }
    if (j.contains("ransac")) {
      const auto& r = j.at("ransac");
      c.estimator.ransac.iterations = r.value("iterations", c.estimator.ransac.iterations);
      c.estimator.ransac.inlier_tol_n = r.value("inlier_tol_n", c.estimator.ransac.inlier_tol_n);
      c.estimator.ransac.min_inlier_fraction = r.value("min_inlier_fraction", c.estimator.ransac.min_inlier_fraction);
      c.estimator.ransac.seed = r.value("seed", c.estimator.ransac.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid search config: ") + e.what());
  }
  if (!(c.beta > 0.0)) throw Error("beta must be positive");
  if (c.budget < 0) throw Error("budget must be non-negative");
  if (c.epsilon && !(*c.epsilon >= 0.0)) throw Error("epsilon must be non-negative");
  GaussianProcess check(c.kernel);  // validates kernel parameters
  (void)check;
  return c;
}

nlohmann::json to_json(const StepReport& r, bool include_record) {
  nlohmann::json j{{"step", r.step},
                   {"grid_index", r.grid_index},
                   {"probed_uv", {r.probed_uv.x(), r.probed_uv.y()}},
                   {"sample", to_json(r.sample)},
                   {"merged", r.merged},
                   {"threshold", r.threshold},
                   {"collapsed", r.collapsed},
                   {"newly_labeled", r.newly_labeled},
                   {"summary", {{"n_above", r.summary.above}, {"n_below", r.summary.below}, {"n_unknown", r.summary.unknown}}}};
  if (include_record) j["probe"] = to_json(r.record);
  return j;
}

// ---------------------------------------------------------------------------
// SearchEngine

SearchEngine::SearchEngine(std::shared_ptr<const PhantomModel> phantom, Roi roi, SearchConfig config)
    : phantom_(std::move(phantom)), roi_(std::move(roi)), config_(std::move(config)), gp_(config_.kernel),
      grid_(make_grid(roi_)) {
  if (!phantom_) throw Error("search needs a phantom");
  for (std::size_t i = 0; i < grid_.size(); ++i)
    if (grid_.in_roi[i] && !phantom_->locator().locate(grid_.uv[i])) throw Error("ROI outside the UV atlas");
  if (config_.acquisition == Acquisition::raster) raster_ = raster_sequence(grid_, roi_, config_.budget);
  refresh();
}

double SearchEngine::epsilon() const {
  return config_.epsilon ? *config_.epsilon : 0.05 * std::sqrt(gp_.signal_variance());
}

void SearchEngine::refresh() {
  // Prior (no observations) or posterior at every grid node.
  const Posterior post = gp_.predict(grid_.uv);
  update_confidence(grid_, post.mean, post.stddev, config_.beta);
  if (config_.threshold) {
    threshold_ = *config_.threshold;
  } else {
    double max_mu = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < grid_.size(); ++i)
      if (grid_.in_roi[i]) max_mu = std::max(max_mu, grid_.mu[i]);
    threshold_ = config_.omega * max_mu;
  }
  refresh_ambiguity(grid_, threshold_);
  classify(grid_, threshold_, epsilon());
}

bool SearchEngine::complete() const { return !select_next(grid_).has_value(); }

std::optional<int> SearchEngine::peek_next() const {
  const auto lse = select_next(grid_);
  if (!lse) return std::nullopt;
  switch (config_.acquisition) {
    case Acquisition::ucb: return ucb_select(grid_, grid_.mu, grid_.sigma, config_.beta);
    case Acquisition::raster:
      if (steps_ >= static_cast<int>(raster_.size())) return std::nullopt;
      return raster_[steps_];
    case Acquisition::lse: break;
  }
  return lse;
}

std::uint64_t SearchEngine::probe_seed(int attempt) const {
  // splitmix64 of (seed, attempt)
  std::uint64_t z = config_.seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(attempt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

StepReport SearchEngine::step() {
  if (steps_ >= config_.budget) throw BudgetExhausted();
  if (complete()) throw SearchComplete();
  const auto target = peek_next();
  if (!target) throw BudgetExhausted();  // raster exhausted before budget

  StepReport report;
  report.grid_index = *target;
  report.probed_uv = grid_.uv[*target];
  const std::uint64_t seed = probe_seed(attempts_++);
  const ProbePlan plan = plan_probe(*phantom_, report.probed_uv, config_.probe);
  report.record = execute_probe(*phantom_, plan, config_.sensor, seed);
  EstimatorParams est = config_.estimator;
  est.ransac.seed = est.ransac.seed ^ seed;
  report.sample = estimate_stiffness(report.record, est);

  if (!roi_.contains(report.sample.uv)) throw Error("sample outside ROI");
  report.merged = gp_.update(report.sample);
  ++steps_;
  report.step = steps_;

  const Posterior post = gp_.predict(grid_.uv);
  report.collapsed = update_confidence(grid_, post.mean, post.stddev, config_.beta);
  if (config_.threshold) {
    threshold_ = *config_.threshold;
  } else {
    double max_mu = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < grid_.size(); ++i)
      if (grid_.in_roi[i]) max_mu = std::max(max_mu, grid_.mu[i]);
    threshold_ = config_.omega * max_mu;
  }
  refresh_ambiguity(grid_, threshold_);
  report.summary = classify(grid_, threshold_, epsilon(), &report.newly_labeled);
  report.threshold = threshold_;
  return report;
}

std::vector<bool> SearchEngine::superlevel_estimate() const {
  std::vector<bool> out(grid_.size(), false);
  for (std::size_t i = 0; i < grid_.size(); ++i) {
    if (!grid_.in_roi[i]) continue;
    out[i] = grid_.label[i] == Label::above || (grid_.label[i] == Label::unknown && grid_.mu[i] >= threshold_);
  }
  return out;
}

std::vector<bool> true_superlevel(const PhantomModel& phantom, const SearchGrid& grid, double h) {
  std::vector<bool> out(grid.size(), false);
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (grid.in_roi[i]) out[i] = true_stiffness(phantom, grid.uv[i]) >= h;
  return out;
}

double superlevel_f1(const SearchGrid& grid, const std::vector<bool>& estimate, const std::vector<bool>& truth) {
  int tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!grid.in_roi[i]) continue;
    if (estimate[i] && truth[i]) ++tp;
    if (estimate[i] && !truth[i]) ++fp;
    if (!estimate[i] && truth[i]) ++fn;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * tp / (2.0 * tp + fp + fn);
}

}  // namespace palpation
