#include "rsde/zvonkin.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "rsde/rng.hpp"

namespace rsde {

namespace {

// Rejection draw from the enlarged domain: bounding box grown by `inflate`,
// accepted when within `inflate` of the base domain.
Vec draw_in_enlarged(const DomainSpec& dom, double inflate,
                     UniformStream& rng) {
  Vec lo, hi;
  dom.bounding_box(lo, hi);
  int d = dom.dimension();
  Vec x(d);
  while (true) {
    for (int a = 0; a < d; ++a)
      x[a] = rng.range(lo[a] - inflate, hi[a] + inflate);
    if (signed_distance(dom, x) > -inflate) return x;
  }
}

Vec planar_direction(int dim, UniformStream& rng) {
  Vec v(dim);
  if (dim == 1) {
    v[0] = rng.next() < 0.5 ? -1.0 : 1.0;
  } else {
    double ang = rng.range(0.0, 2.0 * kPi);
    v[0] = std::cos(ang);
    v[1] = std::sin(ang);
  }
  return v;
}

// Direction within `angle` of `axis`, uniform in the offset angle.
Vec cone_direction(const Vec& axis, double angle, UniformStream& rng) {
  if (axis.size() == 1) return axis;
  double psi = angle * rng.next();
  if (rng.next() < 0.5) psi = -psi;
  Vec w(2);
  w[0] = -axis[1];
  w[1] = axis[0];
  return std::cos(psi) * axis + std::sin(psi) * w;
}

}  // namespace

ZvonkinTransform::ZvonkinTransform(SpaceTimeVectorField field,
                                   DomainSpec domain, NewtonOptions newton)
    : field_(std::move(field)), domain_(std::move(domain)), newton_(newton) {
  if (field_.in_dimension() != domain_.dimension() ||
      field_.out_dimension() != domain_.dimension()) {
    throw GridMismatch("transform: field and domain dimensions differ");
  }
  if (newton_.max_iter < 1 || !(newton_.tol > 0.0)) {
    throw ConfigError("transform: bad newton options");
  }
  horizon_ = field_.times().back();
  int d = domain_.dimension();
  clamp_lo_ = Vec(d);
  clamp_hi_ = Vec(d);
  for (int a = 0; a < d; ++a) {
    clamp_lo_[a] = field_.axis(a).front();
    clamp_hi_[a] = field_.axis(a).back();
  }
}

ZvonkinTransform::InvertStatus ZvonkinTransform::try_invert(
    double t, const Vec& y, Vec& preimage) const {
  int d = dimension();

  // Seed from the stored slab nearest in time: the node whose recorded value
  // is closest to y.  Coarse but globally reliable at these resolutions.
  const auto& times = field_.times();
  auto it = std::lower_bound(times.begin(), times.end(), t);
  int ti = static_cast<int>(it - times.begin());
  if (ti > 0 &&
      (ti >= field_.num_times() || t - times[ti - 1] < times[ti] - t)) {
    --ti;
  }
  const Mat& slab = field_.slab(ti);
  std::int64_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::int64_t r = 0; r < slab.rows(); ++r) {
    double d2 = 0.0;
    for (int c = 0; c < d; ++c) d2 += sqr(slab(r, c) - y[c]);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = r;
    }
  }
  return newton_from(t, y, field_.node_point(best), preimage);
}

ZvonkinTransform::InvertStatus ZvonkinTransform::try_invert(
    double t, const Vec& y, const Vec& seed, Vec& preimage) const {
  Vec x = seed;
  for (int a = 0; a < dimension(); ++a)
    x[a] = std::clamp(x[a], clamp_lo_[a], clamp_hi_[a]);
  InvertStatus st = newton_from(t, y, std::move(x), preimage);
  if (st == InvertStatus::diverged) return try_invert(t, y, preimage);
  return st;
}

ZvonkinTransform::InvertStatus ZvonkinTransform::newton_from(
    double t, const Vec& y, Vec x, Vec& preimage) const {
  int d = dimension();
  for (int iter = 0; iter < newton_.max_iter; ++iter) {
    Vec resid = y - field_.value(t, x);
    if (resid.norm() <= newton_.tol) {
      preimage = x;
      double sd = signed_distance(domain_, x);
      if (sd <= -0.5 * domain_.collar_width() - 1e-9) {
        return InvertStatus::out_of_region;
      }
      return InvertStatus::ok;
    }
    Mat jac = field_.jacobian(t, x);
    Vec step(d);
    if (d == 1) {
      if (std::abs(jac(0, 0)) < 1e-14) return InvertStatus::diverged;
      step[0] = resid[0] / jac(0, 0);
    } else {
      double det = jac.determinant();
      if (std::abs(det) < 1e-14) return InvertStatus::diverged;
      step = jac.partialPivLu().solve(resid);
    }
    x += step;
    for (int a = 0; a < d; ++a) x[a] = std::clamp(x[a], clamp_lo_[a], clamp_hi_[a]);
  }
  preimage = x;
  return InvertStatus::diverged;
}

Vec ZvonkinTransform::invert(double t, const Vec& y) const {
  Vec x;
  switch (try_invert(t, y, x)) {
    case InvertStatus::ok:
      return x;
    case InvertStatus::out_of_region:
      throw OutOfRegion("inverse fell outside the enlarged domain");
    case InvertStatus::diverged:
      break;
  }
  throw NewtonDivergence(
      "inverse iteration stalled (horizon too large or grid too coarse)");
}

bool TimeDependentDomain::membership(double t, const Vec& y) const {
  Vec x;
  if (transform->try_invert(t, y, x) != ZvonkinTransform::InvertStatus::ok) {
    return false;
  }
  return signed_distance(transform->domain(), x) > 0.0;
}

bool TimeDependentDomain::inner_region(double t, const Vec& y,
                                       double clearance,
                                       double contraction_floor) const {
  Vec x;
  if (transform->try_invert(t, y, x) != ZvonkinTransform::InvertStatus::ok) {
    return false;
  }
  return signed_distance(transform->domain(), x) * contraction_floor >
         clearance;
}

BilipschitzEstimate estimate_bilipschitz(const ZvonkinTransform& z,
                                         int samples, uint64_t seed,
                                         ConstantsLedger* ledger) {
  if (samples < 1000) throw ConfigError("bilipschitz sweep needs >= 1000 pairs");
  const DomainSpec& dom = z.domain();
  double inflate = 0.5 * dom.collar_width();
  UniformStream rng(seed, 0);
  BilipschitzEstimate est{std::numeric_limits<double>::infinity(), 0.0};
  for (int i = 0; i < samples; ++i) {
    Vec x = draw_in_enlarged(dom, inflate, rng);
    Vec y = draw_in_enlarged(dom, inflate, rng);
    while ((x - y).norm() < 1e-9) y = draw_in_enlarged(dom, inflate, rng);
    double t = rng.range(0.0, z.horizon());
    double ratio = (z.value(t, x) - z.value(t, y)).norm() / (x - y).norm();
    est.lower = std::min(est.lower, ratio);
    est.upper = std::max(est.upper, ratio);
  }
  if (ledger) {
    ledger->set(keys::bilip_lower, est.lower, Provenance::fitted);
    ledger->set(keys::bilip_upper, est.upper, Provenance::fitted);
    if (ledger->has(keys::collar_width)) {
      ledger->set(keys::image_collar_width,
                  est.lower * ledger->require(keys::collar_width) / 2.0,
                  Provenance::fitted);
    }
  }
  return est;
}

double close_pair_coefficient(const ZvonkinTransform& z, double time_exponent,
                              int samples, uint64_t seed) {
  if (samples < 100) throw ConfigError("close-pair sweep needs >= 100 pairs");
  const DomainSpec& dom = z.domain();
  double collar = dom.collar_width();
  double inflate = 0.5 * collar;
  UniformStream rng(seed, 0);
  double worst = std::numeric_limits<double>::infinity();
  for (int i = 0; i < samples; ++i) {
    Vec x, y;
    while (true) {
      x = draw_in_enlarged(dom, inflate, rng);
      double gap = 0.5 * collar * std::max(rng.next(), 1e-3);
      y = x + gap * planar_direction(dom.dimension(), rng);
      if (signed_distance(dom, y) > -inflate) break;
    }
    double t = rng.range(0.0, z.horizon());
    worst = std::min(worst,
                     (z.value(t, x) - z.value(t, y)).norm() / (x - y).norm());
  }
  double deficit = std::max(0.0, 1.0 - worst);
  if (deficit < 1e-10) deficit = 0.0;  // below interpolation roundoff
  return 1.05 * deficit / std::pow(z.horizon(), time_exponent);
}

DetBandReport jacobian_det_report(const ZvonkinTransform& z, int samples,
                                  uint64_t seed) {
  const DomainSpec& dom = z.domain();
  double inflate = 0.5 * dom.collar_width();
  UniformStream rng(seed, 0);
  DetBandReport report;
  report.samples = samples;
  report.min_det = std::numeric_limits<double>::infinity();
  for (int i = 0; i < samples; ++i) {
    Vec x = draw_in_enlarged(dom, inflate, rng);
    double t = rng.range(0.0, z.horizon());
    double det = std::abs(z.jacobian(t, x).determinant());
    report.min_det = std::min(report.min_det, det);
    report.max_det = std::max(report.max_det, det);
    if (det < report.band_lo || det > report.band_hi) ++report.violations;
  }
  return report;
}

ConeReport verify_cone_conditions(const ZvonkinTransform& z, double cone_angle,
                                  double cone_radius, int trials,
                                  uint64_t seed) {
  if (!(cone_angle > 0.0) || cone_angle >= 0.5 * kPi) {
    throw ConfigError("cone verification: angle must lie in (0, pi/2)");
  }
  if (!(cone_radius > 0.0)) {
    throw ConfigError("cone verification: radius must be positive");
  }
  const DomainSpec& dom = z.domain();
  auto boundary =
      sample_boundary(dom, std::clamp(trials, 256, 4096));
  UniformStream rng(seed, 0);
  ConeReport report;
  report.trials = trials;
  double worst_ext = std::numeric_limits<double>::infinity();
  double worst_int = std::numeric_limits<double>::infinity();

  for (int i = 0; i < trials; ++i) {
    const Vec& x = boundary[static_cast<size_t>(rng.index(
        static_cast<int>(boundary.size())))];
    double t = rng.range(0.0, z.horizon());
    Vec inward = boundary_normal(dom, x);
    Vec apex = z.value(t, x);

    // Outward cone: every probe must pull back strictly outside the closed
    // base domain.
    {
      double rho = cone_radius * std::max(rng.next(), 1e-3);
      Vec dir = cone_direction(-inward, cone_angle, rng);
      Vec probe = apex + rho * dir;
      Vec pre;
      auto st = z.try_invert(t, probe, pre);
      if (st == ZvonkinTransform::InvertStatus::diverged) {
        ++report.exterior_violations;
      } else {
        double margin = -signed_distance(dom, pre);
        worst_ext = std::min(worst_ext, margin);
        if (margin <= 0.0) ++report.exterior_violations;
      }
    }

    // Inward cone: every probe must pull back strictly inside the open base
    // domain.
    {
      double rho = cone_radius * std::max(rng.next(), 1e-3);
      Vec dir = cone_direction(inward, cone_angle, rng);
      Vec probe = apex + rho * dir;
      Vec pre;
      auto st = z.try_invert(t, probe, pre);
      if (st != ZvonkinTransform::InvertStatus::ok) {
        ++report.interior_violations;
      } else {
        double margin = signed_distance(dom, pre);
        worst_int = std::min(worst_int, margin);
        if (margin <= 0.0) ++report.interior_violations;
      }
    }
  }
  report.worst_exterior_margin = std::isfinite(worst_ext) ? worst_ext : 0.0;
  report.worst_interior_margin = std::isfinite(worst_int) ? worst_int : 0.0;
  return report;
}

std::array<double, 4> patch_angle_margins(double patch_angle,
                                          double image_angle) {
  double c = std::cos(patch_angle);
  double tn = std::tan(patch_angle);
  double chord = std::sqrt(2.0 - 2.0 * c);  // direction gap at this angle
  double core = (c - chord) / (1.0 + 12.0 * tn) - chord;
  double root = std::sqrt(std::max(0.0, 1.0 - 4.0 * tn * tn)) * c;
  double exterior_lhs = (root - 2.0 * tn - 0.5) /
                        std::sqrt(1.25 + 4.0 * tn * tn + 2.0 * tn - root);
  double interior_lhs = (root - 2.0 * tn + 0.5 * c) /
                        std::sqrt(2.25 + 4.0 * tn * tn + 2.0 * tn);
  return {c * c + core * core - 1.0, core - std::cos(0.5 * image_angle),
          exterior_lhs - std::cos(image_angle),
          interior_lhs - std::cos(image_angle)};
}

bool patch_angle_feasible(double patch_angle, double image_angle) {
  auto m = patch_angle_margins(patch_angle, image_angle);
  return m[0] >= 0.0 && m[1] >= 0.0 && m[2] > 0.0 && m[3] > 0.0;
}

double solve_theta1(double image_angle) {
  if (!(image_angle > 0.0) || image_angle >= 0.5 * kPi) {
    throw ConfigError("patch angle solve: image angle must lie in (0, pi/2)");
  }
  double cap = std::min(0.5 * image_angle, std::atan(1.0 / 24.0));
  const int n = 100000;
  for (int k = n - 1; k >= 1; --k) {
    double angle = cap * k / n;
    if (angle < 1e-6) break;
    if (patch_angle_feasible(angle, image_angle)) return angle;
  }
  throw NoFeasibleTheta1("scan reached its floor of 1e-6 without a feasible "
                         "patch angle");
}

ZvonkinTransform build_transform(const DomainSpec& dom, const DriftField& drift,
                                 double horizon,
                                 const TransformBuildOptions& opts) {
  ParabolicProblem prob{dom,
                        drift,
                        horizon,
                        std::min(opts.dt, horizon / 16.0),
                        opts.h,
                        opts.angular_nodes,
                        opts.output_time_stride};
  SpaceTimeVectorField u = solve_neumann_terminal(prob);
  SpaceTimeVectorField extended = extend_across_boundary(u, dom);
  return ZvonkinTransform(std::move(extended), dom, opts.newton);
}

namespace {

struct HorizonCandidate {
  bool pass = false;
  double horizon = 0.0;
  double theta0 = 0.0;
  double delta2 = 0.0;
  HolderFit fit{};
  BilipschitzEstimate distortion{};
  double close_pair = 0.0;
};

}  // namespace

double select_T1(const DomainSpec& dom, const DriftField& drift,
                 ConstantsLedger& ledger, const HorizonSearchOptions& opts) {
  double base_radius = 0.0;
  double base_angle = probe_cone_angle(dom, base_radius);
  double collar = dom.collar_width();
  int d = dom.dimension();

  auto evaluate = [&](int expo) {
    HorizonCandidate cand;
    cand.horizon = std::ldexp(1.0, -expo);
    uint64_t lane = static_cast<uint64_t>(expo) * 16;

    TransformBuildOptions bopts = opts.build;
    ParabolicProblem prob{dom,
                          drift,
                          cand.horizon,
                          std::min(bopts.dt, cand.horizon / 16.0),
                          bopts.h,
                          bopts.angular_nodes,
                          bopts.output_time_stride};
    SpaceTimeVectorField interior = solve_neumann_terminal(prob);
    cand.fit = holder_estimate(interior);
    ZvonkinTransform z(extend_across_boundary(interior, dom), dom,
                       bopts.newton);

    DetBandReport det = jacobian_det_report(z, opts.det_samples,
                                            opts.seed + lane);
    if (!det.pass()) return cand;

    cand.distortion =
        estimate_bilipschitz(z, opts.pair_samples, opts.seed + lane + 1);
    if (cand.distortion.lower <= 1e-6) return cand;
    cand.close_pair = close_pair_coefficient(z, cand.fit.exponent,
                                             opts.pair_samples,
                                             opts.seed + lane + 2);

    double delta1 = cand.distortion.lower * collar / 2.0;
    cand.delta2 =
        std::min(delta1 / 2.0, cand.distortion.lower * base_radius);

    // Image angle candidates: the closed-form shrink of the base angle when
    // its argument is valid, then a descending ladder of base-angle
    // fractions.  The verifier is the actual gate.
    std::vector<double> angles;
    double pow_t = std::pow(cand.horizon, cand.fit.exponent);
    double denom = 1.0 - cand.close_pair * pow_t;
    if (denom > 0.0) {
      double arg =
          (std::cos(base_angle) + d * cand.fit.coefficient * pow_t) / denom;
      if (arg > 0.0 && arg < 1.0) angles.push_back(std::acos(arg));
    }
    for (double f : {1.0, 0.9, 0.75, 0.6, 0.45, 0.3})
      angles.push_back(f * base_angle);
    std::sort(angles.rbegin(), angles.rend());

    for (size_t ai = 0; ai < angles.size(); ++ai) {
      ConeReport cones = verify_cone_conditions(
          z, angles[ai], cand.delta2, opts.cone_trials,
          opts.seed + lane + 3 + ai);
      if (cones.pass()) {
        cand.theta0 = angles[ai];
        cand.pass = true;
        return cand;
      }
    }
    return cand;
  };

  HorizonCandidate winner = evaluate(0);
  if (!winner.pass) {
    HorizonCandidate floor = evaluate(10);
    if (!floor.pass) {
      throw NoAdmissibleT(
          "no dyadic horizon down to 2^-10 passes the determinant and cone "
          "checks (resolution too coarse)");
    }
    // Exponent bisection between the failing top and the passing floor;
    // midpoint rounds toward the smaller horizon.
    int lo = 0, hi = 10;
    winner = floor;
    while (hi - lo > 1) {
      int mid = (lo + hi + 1) / 2;
      HorizonCandidate res = evaluate(mid);
      if (res.pass) {
        hi = mid;
        winner = res;
      } else {
        lo = mid;
      }
    }
  }

  double m0 = winner.fit.coefficient;
  double t0 = (m0 > 1e-12)
                  ? std::min(1.0, std::pow(1.0 / (d * m0),
                                           1.0 / winner.fit.exponent))
                  : 1.0;

  ledger.set(keys::collar_width, collar, Provenance::verified);
  ledger.set(keys::domain_cone_angle, base_angle, Provenance::fitted);
  ledger.set(keys::domain_cone_radius, base_radius, Provenance::fitted);
  ledger.set(keys::time_holder_coef, winner.fit.coefficient,
             Provenance::fitted);
  ledger.set(keys::time_holder_exponent, winner.fit.exponent,
             Provenance::fitted);
  ledger.set(keys::bilip_lower, winner.distortion.lower, Provenance::fitted);
  ledger.set(keys::bilip_upper, winner.distortion.upper, Provenance::fitted);
  ledger.set(keys::close_pair_coef, winner.close_pair, Provenance::fitted);
  ledger.set(keys::image_collar_width,
             winner.distortion.lower * collar / 2.0, Provenance::fitted);
  ledger.set(keys::base_horizon, t0, Provenance::fitted);
  ledger.set(keys::horizon, winner.horizon, Provenance::verified);
  ledger.set(keys::image_cone_angle, winner.theta0, Provenance::verified);
  ledger.set(keys::image_cone_radius, winner.delta2, Provenance::verified);
  ledger.validate();
  return winner.horizon;
}

}  // namespace rsde
