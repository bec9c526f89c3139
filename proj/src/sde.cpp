#include "rsde/sde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace rsde {

const char* scheme_name(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::projection: return "projection";
    case SchemeKind::penalization: return "penalization";
    case SchemeKind::transformed: return "transformed";
  }
  return "unknown";
}

namespace {

constexpr int kMaxHalvings = 6;

bool power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

int log2_exact(int n) {
  int k = 0;
  while ((1 << k) < n) ++k;
  return k;
}

// Increment matrices per refinement level, fetched lazily; bridge halvings
// reach one level deeper than the leg's own grid.
class IncrementCache {
 public:
  explicit IncrementCache(BrownianPath& path) : path_(&path) {}

  Vec column(int level, long col) {
    auto it = levels_.find(level);
    if (it == levels_.end())
      it = levels_.emplace(level, path_->increments(level)).first;
    return it->second.col(col);
  }

 private:
  BrownianPath* path_;
  std::map<int, Mat> levels_;
};

struct StepOutcome {
  Vec state;
  Vec push;
  bool contact = false;
};

void validate_leg(const DomainSpec& domain, const Vec& x0, double horizon,
                  const BrownianPath& path, int level, int substeps) {
  if (path.dimension() != domain.dimension())
    throw ConfigError("simulate: path dimension does not match the domain");
  if (static_cast<int>(x0.size()) != domain.dimension())
    throw ConfigError("simulate: start point has the wrong dimension");
  if (!domain.inside_closed(x0, 1e-12))
    throw ConfigError("simulate: start point outside the closed domain");
  if (horizon <= 0.0 || horizon > path.horizon() + 1e-12)
    throw ConfigError("simulate: horizon outside the driving path");
  if (level < 0) throw ConfigError("simulate: negative refinement level");
  if (!power_of_two(substeps))
    throw ConfigError("simulate: substeps must be a power of two");
}

int leg_steps(double horizon, double dt) {
  double raw = horizon / dt;
  int steps = static_cast<int>(std::lround(raw));
  if (steps < 1 || std::abs(raw - steps) > 1e-9 * std::max(1.0, raw))
    throw ConfigError("simulate: horizon does not sit on the step grid");
  return steps;
}

}  // namespace

ReflectedPath simulate_reflected(const SchemeConfig& scheme,
                                 const DriftField& drift,
                                 const DomainSpec& domain, const Vec& x0,
                                 double horizon, BrownianPath& path,
                                 int level) {
  if (scheme.kind == SchemeKind::transformed)
    throw ConfigError("simulate_reflected: use simulate_transformed");
  validate_leg(domain, x0, horizon, path, level, scheme.substeps);

  const int base_level = level + log2_exact(scheme.substeps);
  const double dt0 = path.step(base_level);
  const int steps = leg_steps(horizon, dt0);
  const double guard = 0.5 * domain.collar_width();
  const bool penalize = scheme.kind == SchemeKind::penalization;

  ReflectedPath out;
  out.scheme = scheme.kind;
  out.times.reserve(steps + 1);
  out.states.reserve(steps + 1);
  out.local_time.reserve(steps + 1);
  out.pushes.reserve(steps);
  out.noise.reserve(steps);
  out.times.push_back(0.0);
  out.states.push_back(x0);
  out.local_time.push_back(0.0);

  IncrementCache cache(path);

  // One Euler step from the current tail; halves the increment through the
  // bridge when the excursion leaves the certified collar.
  std::function<void(int, long, int)> take = [&](int lvl, long col, int depth) {
    const double dt = path.step(lvl);
    const double t = out.times.back();
    const Vec& x = out.states.back();
    const Vec dw = cache.column(lvl, col);
    const Vec b = drift(t, x);

    StepOutcome step;
    double kappa = 0.0;
    if (penalize) {
      kappa = scheme.penalty > 0.0 ? scheme.penalty : 1.0 / dt;
      double out_dist = std::max(0.0, -signed_distance(domain, x));
      step.push = Vec::Zero(x.size());
      if (out_dist > 0.0) {
        step.push = (kappa * out_dist * dt) * inward_normal_extended(domain, x);
        step.contact = true;
      }
      step.state = x + b * dt + step.push + dw;
      double escaped = -signed_distance(domain, step.state);
      if (escaped >= guard) {
        if (depth >= kMaxHalvings) {
          std::ostringstream msg;
          msg << "penalized step leaves the collar: distance " << escaped
              << " at t=" << t << ", dt=" << dt;
          throw StepTooLarge(msg.str());
        }
        ++out.splits;
        take(lvl + 1, 2 * col, depth + 1);
        take(lvl + 1, 2 * col + 1, depth + 1);
        return;
      }
      out.penalty_slack = std::max(out.penalty_slack, std::max(0.0, escaped));
    } else {
      Vec prop = x + b * dt + dw;
      double sd = signed_distance(domain, prop);
      if (sd >= 0.0) {
        step.state = prop;
        step.push = Vec::Zero(x.size());
      } else {
        if (-sd >= guard) {
          if (depth >= kMaxHalvings) {
            std::ostringstream msg;
            msg << "projected step leaves the collar: overshoot " << -sd
                << " at t=" << t << ", dt=" << dt;
            throw StepTooLarge(msg.str());
          }
          ++out.splits;
          take(lvl + 1, 2 * col, depth + 1);
          take(lvl + 1, 2 * col + 1, depth + 1);
          return;
        }
        step.state = project_to_boundary(domain, prop);
        step.push = step.state - prop;
        step.contact = true;
      }
    }

    out.times.push_back(t + dt);
    out.states.push_back(step.state);
    out.local_time.push_back(out.local_time.back() + step.push.norm());
    out.pushes.push_back(step.push);
    out.noise.push_back(dw);
    if (step.contact) ++out.reflections;
  };

  for (int k = 0; k < steps; ++k) take(base_level, k, 0);
  out.penalty = penalize
                    ? (scheme.penalty > 0.0 ? scheme.penalty : 1.0 / dt0)
                    : 0.0;
  return out;
}

ReflectedPath simulate_transformed(const ZvonkinTransform& z, const Vec& x0,
                                   double horizon, BrownianPath& path,
                                   int level) {
  const DomainSpec& domain = z.domain();
  validate_leg(domain, x0, horizon, path, level, 1);
  if (horizon > z.horizon() + 1e-12)
    throw ConfigError("simulate_transformed: horizon beyond the transform");

  const double dt0 = path.step(level);
  const int steps = leg_steps(horizon, dt0);
  const double guard = 0.5 * domain.collar_width();

  ReflectedPath out;
  out.scheme = SchemeKind::transformed;
  out.times.reserve(steps + 1);
  out.states.reserve(steps + 1);
  out.local_time.reserve(steps + 1);
  out.times.push_back(0.0);
  out.states.push_back(x0);
  out.local_time.push_back(0.0);

  IncrementCache cache(path);

  std::function<void(int, long, int)> take = [&](int lvl, long col, int depth) {
    const double dt = path.step(lvl);
    const double t = out.times.back();
    const Vec& x = out.states.back();
    const Vec dw = cache.column(lvl, col);

    const Vec y_star = z.value(t, x) + z.jacobian(t, x) * dw;
    Vec pre;
    auto status = z.try_invert(t + dt, y_star, x, pre);
    double sd = status == ZvonkinTransform::InvertStatus::ok
                    ? signed_distance(domain, pre)
                    : -2.0 * guard;
    if (status != ZvonkinTransform::InvertStatus::ok || -sd >= guard) {
      if (depth >= kMaxHalvings) {
        if (status == ZvonkinTransform::InvertStatus::ok) {
          std::ostringstream msg;
          msg << "transformed step leaves the collar: overshoot " << -sd
              << " at t=" << t << ", dt=" << dt;
          throw StepTooLarge(msg.str());
        }
        z.invert(t + dt, y_star);  // surfaces the inversion failure
        throw NewtonDivergence("transformed step: inversion stalled");
      }
      ++out.splits;
      take(lvl + 1, 2 * col, depth + 1);
      take(lvl + 1, 2 * col + 1, depth + 1);
      return;
    }

    Vec state;
    Vec push;
    bool contact = false;
    if (sd >= 0.0) {
      state = pre;
      push = Vec::Zero(x.size());
    } else {
      state = project_to_boundary(domain, pre);
      push = state - pre;
      contact = true;
    }

    out.times.push_back(t + dt);
    out.states.push_back(state);
    out.local_time.push_back(out.local_time.back() + push.norm());
    out.pushes.push_back(push);
    out.noise.push_back(dw);
    if (contact) ++out.reflections;
  };

  for (int k = 0; k < steps; ++k) take(level, k, 0);
  return out;
}

PathCheckReport check_reflected_path(const ReflectedPath& path,
                                     const DomainSpec& domain) {
  PathCheckReport report;
  report.steps = path.steps();
  for (const Vec& x : path.states)
    report.max_outside =
        std::max(report.max_outside, -signed_distance(domain, x));
  for (int k = 0; k < path.steps(); ++k) {
    const Vec& push = path.pushes[k];
    double pn = push.norm();
    double dl = path.local_time[k + 1] - path.local_time[k];
    report.flat_defect = std::max(report.flat_defect, std::abs(dl - pn));
    if (pn == 0.0) continue;
    ++report.reflections;
    const Vec& contact = path.scheme == SchemeKind::penalization
                             ? path.states[k]
                             : path.states[k + 1];
    Vec n = inward_normal_extended(domain, contact);
    double nn = n.norm();
    if (nn == 0.0) {
      report.worst_angle = kPi;
      continue;
    }
    double c = push.dot(n) / (pn * nn);
    report.worst_angle =
        std::max(report.worst_angle, std::acos(std::clamp(c, -1.0, 1.0)));
  }
  return report;
}

OccupationReport krylov_check(const std::vector<ReflectedPath>& paths,
                              const std::function<double(double, const Vec&)>& f,
                              const DomainSpec& domain, double p,
                              int norm_base_resolution,
                              int norm_max_resolution) {
  if (paths.empty()) throw ConfigError("krylov_check: no paths");
  const double horizon = paths.front().horizon();
  OccupationReport report;
  report.paths = static_cast<int>(paths.size());
  double acc = 0.0;
  for (const ReflectedPath& path : paths) {
    double along = 0.0;
    for (int k = 0; k < path.steps(); ++k)
      along += std::abs(f(path.times[k], path.states[k])) *
               (path.times[k + 1] - path.times[k]);
    acc += along;
  }
  report.lhs = acc / report.paths;
  report.rhs_norm =
      norm_Lp_spacetime(f, p, SpaceTimeRegion::cylinder(domain, 0.0, horizon),
                        norm_base_resolution, norm_max_resolution);
  report.ratio = report.rhs_norm > 0.0 ? report.lhs / report.rhs_norm : 0.0;
  return report;
}

OccupationFamilyReport krylov_family(const std::vector<ReflectedPath>& paths,
                                     const DomainSpec& domain,
                                     const std::vector<double>& widths,
                                     ConstantsLedger* ledger) {
  if (widths.empty()) throw ConfigError("krylov_family: no widths");
  Vec lo, hi;
  domain.bounding_box(lo, hi);
  const double center = 0.5 * (lo[0] + hi[0]);
  const double p = domain.dimension() + 1.0;

  OccupationFamilyReport family;
  family.widths = widths;
  double worst = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (double w : widths) {
    if (w <= 0.0) throw ConfigError("krylov_family: nonpositive width");
    auto slab = [center, w](double, const Vec& x) {
      return std::abs(x[0] - center) < 0.5 * w ? 1.0 : 0.0;
    };
    OccupationReport r = krylov_check(paths, slab, domain, p);
    worst = std::max(worst, r.ratio);
    best = std::min(best, r.ratio);
    family.slabs.push_back(r);
  }
  family.occupation_coef = worst;
  family.spread = worst > 0.0 ? (worst - best) / worst : 0.0;
  if (ledger)
    ledger->set("occupation_coef", family.occupation_coef, Provenance::fitted);
  return family;
}

SpaceTimeTestFn SpaceTimeTestFn::coordinate(int axis, int dim) {
  SpaceTimeTestFn fn;
  fn.value = [axis](double, const Vec& x) { return x[axis]; };
  fn.gradient = [axis, dim](double, const Vec&) {
    Vec g = Vec::Zero(dim);
    g[axis] = 1.0;
    return g;
  };
  fn.laplacian = [](double, const Vec&) { return 0.0; };
  fn.time_derivative = [](double, const Vec&) { return 0.0; };
  return fn;
}

SpaceTimeTestFn SpaceTimeTestFn::norm_squared(int dim) {
  SpaceTimeTestFn fn;
  fn.value = [](double, const Vec& x) { return x.squaredNorm(); };
  fn.gradient = [](double, const Vec& x) { return Vec(2.0 * x); };
  fn.laplacian = [dim](double, const Vec&) { return 2.0 * dim; };
  fn.time_derivative = [](double, const Vec&) { return 0.0; };
  return fn;
}

ItoBreakdown ito_residual(const SpaceTimeTestFn& fn, const ReflectedPath& path,
                          const DriftField& drift) {
  if (path.scheme == SchemeKind::transformed)
    throw ConfigError("ito_residual: direct schemes only");
  if (static_cast<int>(path.noise.size()) != path.steps())
    throw ConfigError("ito_residual: path carries no noise record");

  ItoBreakdown sums;
  const bool penalize = path.scheme == SchemeKind::penalization;
  for (int k = 0; k < path.steps(); ++k) {
    const double t = path.times[k];
    const double dt = path.times[k + 1] - t;
    const Vec& x = path.states[k];
    Vec grad = fn.gradient(t, x);
    sums.time_term += fn.time_derivative(t, x) * dt;
    sums.martingale_term += grad.dot(path.noise[k]);
    sums.drift_term += grad.dot(drift(t, x)) * dt;
    sums.laplace_term += 0.5 * fn.laplacian(t, x) * dt;
    const Vec& push = path.pushes[k];
    if (push.norm() > 0.0) {
      // Midpoint of the push segment; exact for gradients of quadratics.
      Vec mid = penalize ? Vec(x + 0.5 * push)
                         : Vec(path.states[k + 1] - 0.5 * push);
      double tc = penalize ? t : path.times[k + 1];
      sums.boundary_term += fn.gradient(tc, mid).dot(push);
    }
  }
  double change = fn.value(path.times.back(), path.states.back()) -
                  fn.value(path.times.front(), path.states.front());
  sums.residual = change - sums.time_term - sums.martingale_term -
                  sums.drift_term - sums.boundary_term - sums.laplace_term;
  return sums;
}

namespace {

// Indices of the regular nodes j * horizon / count inside a path whose time
// grid may carry bridge midpoints.
std::vector<int> regular_nodes(const ReflectedPath& path, int count) {
  std::vector<int> idx(count + 1, -1);
  const double horizon = path.horizon();
  int j = 0;
  for (int i = 0; i < static_cast<int>(path.times.size()); ++i) {
    double target = horizon * j / count;
    if (std::abs(path.times[i] - target) <= 1e-9) {
      idx[j] = i;
      if (++j > count) break;
    }
  }
  if (idx.back() < 0)
    throw GridMismatch("refinement_order: node grids do not align");
  return idx;
}

}  // namespace

RefinementReport refinement_order(const SchemeConfig& scheme,
                                  const DriftField& drift,
                                  const DomainSpec& domain, const Vec& x0,
                                  double horizon, int base_steps, int rungs,
                                  int n_paths, uint64_t seed) {
  if (rungs < 2) throw ConfigError("refinement_order: need at least two rungs");
  if (n_paths < 1) throw ConfigError("refinement_order: need paths");

  RefinementReport report;
  report.paths = n_paths;
  for (int r = 0; r < rungs; ++r)
    report.dts.push_back(horizon / (base_steps * (1 << r)));
  report.errors.assign(rungs, 0.0);

  for (int p = 0; p < n_paths; ++p) {
    BrownianPath path(domain.dimension(), horizon, base_steps, seed, p);
    std::vector<ReflectedPath> legs;
    for (int r = 0; r <= rungs; ++r)
      legs.push_back(
          simulate_reflected(scheme, drift, domain, x0, horizon, path, r));
    for (int r = 0; r < rungs; ++r) {
      int count = base_steps * (1 << r);
      std::vector<int> coarse = regular_nodes(legs[r], count);
      std::vector<int> fine = regular_nodes(legs[r + 1], count);
      double sup = 0.0;
      for (int j = 0; j <= count; ++j)
        sup = std::max(sup, (legs[r].states[coarse[j]] -
                             legs[r + 1].states[fine[j]])
                                .norm());
      report.errors[r] += sup / n_paths;
    }
  }

  // Least-squares slope of log error against log step.
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (int r = 0; r < rungs; ++r) {
    double lx = std::log(report.dts[r]);
    double ly = std::log(std::max(report.errors[r], 1e-300));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  double denom = rungs * sxx - sx * sx;
  report.order = denom != 0.0 ? (rungs * sxy - sx * sy) / denom : 0.0;
  return report;
}

double girsanov_weight(const ReflectedPath& path, const DriftField& drift) {
  if (static_cast<int>(path.noise.size()) != path.steps())
    throw ConfigError("girsanov_weight: path carries no noise record");
  double log_w = 0.0;
  for (int k = 0; k < path.steps(); ++k) {
    const double dt = path.times[k + 1] - path.times[k];
    const Vec b = drift(path.times[k], path.states[k]);
    log_w += b.dot(path.noise[k]) - 0.5 * b.squaredNorm() * dt;
  }
  return std::exp(log_w);
}

namespace {

// Regularized incomplete gamma pair, series inside, continued fraction
// outside.
double gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw ConfigError("gamma_p: bad arguments");
  if (x == 0.0) return 0.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int n = 0; n < 500; ++n) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15)
        return sum * std::exp(-x + a * std::log(x) - lg);
    }
    throw NonConvergence("gamma_p: series stalled");
  }
  double b = x + 1.0 - a;
  double c = 1e300;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) {
      double q = std::exp(-x + a * std::log(x) - lg) * h;
      return 1.0 - q;
    }
  }
  throw NonConvergence("gamma_p: continued fraction stalled");
}

}  // namespace

double chi_squared_pvalue(double statistic, int dof) {
  if (dof < 1) throw ConfigError("chi_squared_pvalue: dof must be positive");
  if (statistic <= 0.0) return 1.0;
  return 1.0 - gamma_p(0.5 * dof, 0.5 * statistic);
}

}  // namespace rsde
