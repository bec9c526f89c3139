#include "rsde/flows.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <utility>
#include <vector>

#include "rsde/parallel.hpp"
#include "rsde/rng.hpp"

namespace rsde {

namespace {

Vec domain_boundary_point(const DomainSpec& dom, double param) {
  const Vec& q = dom.params();
  Vec x(dom.dimension());
  if (dom.preset() == "interval") {
    x[0] = param < 0.5 ? q[0] : q[1];
  } else if (dom.preset() == "disk") {
    double th = 2.0 * kPi * param;
    x << q[0] * std::cos(th), q[0] * std::sin(th);
  } else {
    double th = 2.0 * kPi * param;
    x << q[0] * std::cos(th), q[1] * std::sin(th);
  }
  return x;
}

Vec draw_in_ball(const Vec& center, double radius, UniformStream& rng) {
  int d = static_cast<int>(center.size());
  Vec x(d);
  while (true) {
    for (int a = 0; a < d; ++a)
      x[a] = center[a] + radius * rng.range(-1.0, 1.0);
    if ((x - center).norm() < radius) return x;
  }
}

}  // namespace

double image_boundary_distance(const ZvonkinTransform& transform, double t,
                               const Vec& x, int boundary_samples) {
  const DomainSpec& dom = transform.domain();
  if (dom.dimension() == 1) {
    Vec pa(1), pb(1);
    pa[0] = dom.params()[0];
    pb[0] = dom.params()[1];
    return std::min((x - transform.value(t, pa)).norm(),
                    (x - transform.value(t, pb)).norm());
  }
  if (boundary_samples < 8) {
    throw ConfigError("boundary distance: need at least 8 samples");
  }
  auto gap2 = [&](double th) {
    return (x - transform.value(t, domain_boundary_point(dom, th / (2.0 * kPi))))
        .squaredNorm();
  };
  int best = 0;
  double best_v = std::numeric_limits<double>::infinity();
  double dth = 2.0 * kPi / boundary_samples;
  for (int k = 0; k < boundary_samples; ++k) {
    double v = gap2(k * dth);
    if (v < best_v) {
      best_v = v;
      best = k;
    }
  }
  // Golden-section refinement on the bracketing arc.
  double lo = (best - 1) * dth, hi = (best + 1) * dth;
  const double inv_phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = hi - inv_phi * (hi - lo), b = lo + inv_phi * (hi - lo);
  double fa = gap2(a), fb = gap2(b);
  for (int it = 0; it < 40; ++it) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - inv_phi * (hi - lo);
      fa = gap2(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + inv_phi * (hi - lo);
      fb = gap2(b);
    }
  }
  return std::sqrt(std::min({best_v, fa, fb}));
}

DirectionField::DirectionField(const ZvonkinTransform& transform,
                               double image_collar, DirectionFieldOptions opts)
    : transform_(&transform), image_collar_(image_collar), opts_(opts) {
  if (!(image_collar > 0.0)) {
    throw ConfigError("direction field: image collar must be positive");
  }
  const SpaceTimeVectorField& f = transform.field();
  double h = 0.0;
  for (int a = 0; a < f.in_dimension(); ++a) h = std::max(h, f.axis_step(a));
  fd_step_ = opts_.fd_step > 0.0 ? opts_.fd_step : 2.0 * h;
  double slab = 0.0;
  const auto& times = f.times();
  for (size_t i = 1; i < times.size(); ++i)
    slab = std::max(slab, times[i] - times[i - 1]);
  if (slab <= 0.0) slab = std::max(transform.horizon(), 1.0) / 64.0;
  time_step_ = opts_.time_fd_step > 0.0 ? opts_.time_fd_step : slab;
  if (opts_.boundary_samples < 8) {
    throw ConfigError("direction field: boundary scan too coarse");
  }
}

double DirectionField::cutoff(double t, const Vec& x) const {
  Vec pre;
  if (transform_->try_invert(t, x, pre) != ZvonkinTransform::InvertStatus::ok) {
    return 0.0;
  }
  if (signed_distance(transform_->domain(), pre) >= 0.0) return 1.0;
  double gap =
      image_boundary_distance(*transform_, t, x, opts_.boundary_samples);
  return ramp_down(gap, 0.5 * image_collar_, 0.75 * image_collar_);
}

Vec DirectionField::eval(double t, const Vec& x) const {
  return eval(t, x, nullptr);
}

Vec DirectionField::eval(double t, const Vec& x, Vec* preimage_hint) const {
  int d = dimension();
  Vec pre;
  auto st = (preimage_hint && preimage_hint->size() == d)
                ? transform_->try_invert(t, x, *preimage_hint, pre)
                : transform_->try_invert(t, x, pre);
  if (st != ZvonkinTransform::InvertStatus::ok) return Vec::Zero(d);
  if (preimage_hint) *preimage_hint = pre;
  double phi = 1.0;
  if (signed_distance(transform_->domain(), pre) < 0.0) {
    double gap =
        image_boundary_distance(*transform_, t, x, opts_.boundary_samples);
    phi = ramp_down(gap, 0.5 * image_collar_, 0.75 * image_collar_);
    if (phi == 0.0) return Vec::Zero(d);
  }
  return phi * inward_normal_extended(transform_->domain(), pre);
}

Mat DirectionField::jacobian(double t, const Vec& x) const {
  return jacobian(t, x, nullptr);
}

Mat DirectionField::jacobian(double t, const Vec& x, Vec* preimage_hint) const {
  int d = dimension();
  Vec center;
  if (preimage_hint && preimage_hint->size() == d) {
    center = *preimage_hint;
  } else {
    Vec pre;
    if (transform_->try_invert(t, x, pre) ==
        ZvonkinTransform::InvertStatus::ok) {
      center = pre;
    }
  }
  double h = fd_step_;
  Mat jac(d, d);
  for (int i = 0; i < d; ++i) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    Vec hp = center, hm = center;
    Vec gp = eval(t, xp, center.size() == d ? &hp : nullptr);
    Vec gm = eval(t, xm, center.size() == d ? &hm : nullptr);
    jac.col(i) = (gp - gm) / (2.0 * h);
  }
  return jac;
}

Vec DirectionField::time_derivative(double t, const Vec& x) const {
  return time_derivative(t, x, nullptr);
}

Vec DirectionField::time_derivative(double t, const Vec& x,
                                    Vec* preimage_hint) const {
  int d = dimension();
  double lo = std::max(0.0, t - time_step_);
  double hi = std::min(horizon(), t + time_step_);
  if (!(hi > lo)) return Vec::Zero(d);
  Vec center;
  if (preimage_hint && preimage_hint->size() == d) center = *preimage_hint;
  Vec h1 = center, h2 = center;
  Vec ghi = eval(hi, x, center.size() == d ? &h1 : nullptr);
  Vec glo = eval(lo, x, center.size() == d ? &h2 : nullptr);
  return (ghi - glo) / (hi - lo);
}

Vec DirectionField::boundary_anchor(double t, double param) const {
  return transform_->value(t,
                           domain_boundary_point(transform_->domain(), param));
}

namespace {

// One classical step of the coupled system at fixed base time.  The hint
// threads the preimage through the stages, which keeps the inversions warm.
void rk4_step(const DirectionField& dir, double t, double h, bool jac,
              bool timed, Vec& y, Mat& psi, Vec& lam, Vec& hint) {
  struct Stage {
    Vec ky;
    Mat kp;
    Vec kl;
  };
  auto rhs = [&](const Vec& yy, const Mat& pp, const Vec& ll) {
    Stage s;
    s.ky = dir.eval(t, yy, &hint);
    if (jac || timed) {
      Mat g = dir.jacobian(t, yy, &hint);
      if (jac) s.kp = g * pp;
      if (timed) s.kl = dir.time_derivative(t, yy, &hint) + g * ll;
    }
    return s;
  };
  Stage s1 = rhs(y, psi, lam);
  Stage s2 = rhs(y + 0.5 * h * s1.ky,
                 jac ? Mat(psi + 0.5 * h * s1.kp) : psi,
                 timed ? Vec(lam + 0.5 * h * s1.kl) : lam);
  Stage s3 = rhs(y + 0.5 * h * s2.ky,
                 jac ? Mat(psi + 0.5 * h * s2.kp) : psi,
                 timed ? Vec(lam + 0.5 * h * s2.kl) : lam);
  Stage s4 = rhs(y + h * s3.ky, jac ? Mat(psi + h * s3.kp) : psi,
                 timed ? Vec(lam + h * s3.kl) : lam);
  y += (h / 6.0) * (s1.ky + 2.0 * s2.ky + 2.0 * s3.ky + s4.ky);
  if (jac) psi += (h / 6.0) * (s1.kp + 2.0 * s2.kp + 2.0 * s3.kp + s4.kp);
  if (timed) lam += (h / 6.0) * (s1.kl + 2.0 * s2.kl + 2.0 * s3.kl + s4.kl);
}

void check_flow_options(const FlowOptions& opts) {
  if (!(opts.step > 0.0)) throw ConfigError("flow: step must be positive");
  if (opts.step > 1e-3 * (1.0 + 1e-12)) {
    throw StepTooLarge("flow: sub-step cap is 1e-3");
  }
}

// Advance the state by `len` in the flow parameter, splitting into sub-steps
// no larger than `step`.
void advance(const DirectionField& dir, double t, double len, double step,
             bool jac, bool timed, Vec& y, Mat& psi, Vec& lam, Vec& hint) {
  if (len == 0.0) return;
  int n = static_cast<int>(std::ceil(std::abs(len) / step - 1e-12));
  n = std::max(n, 1);
  double h = len / n;
  for (int k = 0; k < n; ++k) rk4_step(dir, t, h, jac, timed, y, psi, lam, hint);
}

}  // namespace

FlowState flow(const DirectionField& dir, double t, const Vec& x, double r,
               const FlowOptions& opts) {
  int d = dir.dimension();
  if (x.size() != d) throw GridMismatch("flow: point dimension mismatch");
  check_flow_options(opts);
  FlowState st;
  st.t = t;
  st.x = x;
  st.r = r;
  st.y = x;
  st.psi = Mat::Identity(d, d);
  st.lambda = Vec::Zero(d);
  if (r == 0.0) return st;
  Vec hint = x;
  advance(dir, t, r, opts.step, opts.track_jacobian,
          opts.track_time_derivative, st.y, st.psi, st.lambda, hint);
  st.left_support = dir.eval(t, st.y, &hint).squaredNorm() == 0.0;
  if (st.left_support && opts.require_support) {
    throw LeftDomainOfDefinition("flow endpoint left the field support");
  }
  return st;
}

HittingRecord hitting_time(const DirectionField& dir, double t, const Vec& x,
                           double t0, const Vec& z,
                           const HittingOptions& opts) {
  int d = dir.dimension();
  if (x.size() != d || z.size() != d) {
    throw GridMismatch("hitting: point dimension mismatch");
  }
  if (!(opts.radius > 0.0)) {
    throw ConfigError("hitting: search radius must be positive");
  }
  if (!(opts.tol > 0.0)) throw ConfigError("hitting: tolerance must be positive");
  FlowOptions fo;
  fo.step = opts.step;
  check_flow_options(fo);

  Vec axis = dir.eval(t0, z);
  double axis_norm = axis.norm();
  if (axis_norm < 0.5) {
    throw NoRootInInterval("hitting: field degenerate at the anchor");
  }
  axis /= axis_norm;

  HittingRecord rec;
  rec.t0 = t0;
  rec.z = z;
  rec.t = t;
  rec.x = x;
  rec.grad_r_hit = Vec::Zero(d);

  double res0 = (x - z).dot(axis);
  Vec hint = x;
  Mat unused_psi;
  Vec unused_lam;
  auto residual_at = [&](const Vec& y) { return (y - z).dot(axis); };

  double r_cur = 0.0, res_cur = res0;
  Vec y_cur = x;
  if (std::abs(res0) > opts.tol) {
    // The residual is increasing in r wherever transversality holds, so the
    // root lies on the side that cancels the initial sign.
    double dirn = res0 > 0.0 ? -1.0 : 1.0;
    double leg = opts.radius / 32.0;
    bool bracketed = false;
    double r_prev = 0.0, res_prev = res0;
    Vec y_prev = x;
    while (std::abs(r_cur) < opts.radius - 1e-15) {
      r_prev = r_cur;
      res_prev = res_cur;
      y_prev = y_cur;
      double l = std::min(leg, opts.radius - std::abs(r_cur));
      advance(dir, t, dirn * l, opts.step, false, false, y_cur, unused_psi,
              unused_lam, hint);
      r_cur += dirn * l;
      res_cur = residual_at(y_cur);
      if (res_cur == res_prev && (y_cur - y_prev).squaredNorm() == 0.0) {
        break;  // frozen: the trajectory cannot reach the hyperplane
      }
      if (res_cur * res0 <= 0.0) {
        bracketed = true;
        break;
      }
    }
    if (!bracketed) {
      throw NoRootInInterval("hitting: no sign change within the radius");
    }
    // Bisection inside the bracketing leg, flowing from its cached start.
    double sa = 0.0, sb = r_cur - r_prev;
    double resa = res_prev;
    for (int it = 0; it < 50 && std::abs(sb - sa) > 1e-14; ++it) {
      double sm = 0.5 * (sa + sb);
      Vec ym = y_prev;
      Vec hm = hint;
      advance(dir, t, sm, opts.step, false, false, ym, unused_psi, unused_lam,
              hm);
      double resm = residual_at(ym);
      if (std::abs(resm) <= opts.tol) {
        sa = sb = sm;
        resa = resm;
        break;
      }
      if (resm * resa <= 0.0) {
        sb = sm;
      } else {
        sa = sm;
        resa = resm;
      }
    }
    r_cur = r_prev + 0.5 * (sa + sb);
    // Newton polish: the residual derivative is the field against the axis.
    for (int it = 0; it < 12; ++it) {
      Vec yr = y_prev;
      Vec hr = hint;
      advance(dir, t, r_cur - r_prev, opts.step, false, false, yr, unused_psi,
              unused_lam, hr);
      double res = residual_at(yr);
      y_cur = yr;
      res_cur = res;
      if (std::abs(res) <= opts.tol) break;
      double slope = dir.eval(t, yr, &hr).dot(axis);
      if (std::abs(slope) < 0.25) break;
      double next = r_cur - res / slope;
      double pad = std::abs(sb - sa);
      next = std::clamp(next, r_prev + std::min(sa, sb) - pad,
                        r_prev + std::max(sa, sb) + pad);
      if (next == r_cur) break;
      r_cur = next;
    }
    if (std::abs(res_cur) > opts.tol) {
      throw NoRootInInterval("hitting: polish did not reach tolerance");
    }
    if (std::abs(r_cur) >= opts.radius) {
      throw NoRootInInterval("hitting: root at the edge of the radius");
    }
  }

  rec.r_hit = r_cur;
  rec.hit_point = y_cur;
  rec.defect = res_cur;
  Vec hhit = hint;
  rec.axis_dot = dir.eval(t, y_cur, &hhit).dot(axis);
  if (opts.derivatives) {
    FlowOptions full;
    full.step = opts.step;
    full.track_jacobian = true;
    full.track_time_derivative = true;
    FlowState st = flow(dir, t, x, r_cur, full);
    if (std::abs(rec.axis_dot) > 1e-12) {
      rec.grad_r_hit = -(st.psi.transpose() * axis) / rec.axis_dot;
      rec.dt_r_hit = -st.lambda.dot(axis) / rec.axis_dot;
    }
  }
  return rec;
}

bool cone_Cz_contains(const Vec& z, const Vec& axis, double radius,
                      double patch_angle, const Vec& x) {
  Vec w = x - z;
  if (!(w.norm() < radius)) return false;
  double an = axis.norm();
  if (an == 0.0) return false;
  Vec a = axis / an;
  Vec perp = w - w.dot(a) * a;
  return perp.norm() < 2.0 * radius * std::tan(patch_angle);
}

namespace {

struct AnchorDraw {
  double t0 = 0.0;
  double t = 0.0;
  Vec x;
  Vec z0;
};

}  // namespace

TransversalityReport transversality_check(const DirectionField& dir,
                                          const ConstantsLedger& ledger,
                                          int samples, uint64_t seed) {
  if (samples < 1) throw ConfigError("transversality: need samples");
  double T = dir.horizon();
  double theta1 = ledger.require(keys::patch_cone_angle);
  double eta1 = ledger.require(keys::hitting_window_halftime);
  double d4 = ledger.require(keys::hitting_seed_radius);
  double d5 = ledger.require(keys::patch_radius);
  double rho1 = ledger.require(keys::hitting_time_radius);

  TransversalityReport rep;
  rep.threshold = std::cos(theta1) - 1e-6;

  std::vector<AnchorDraw> draws(samples);
  UniformStream rng(seed, 0);
  for (int i = 0; i < samples; ++i) {
    draws[i].t0 = rng.range(0.0, T);
    draws[i].z0 = dir.boundary_anchor(draws[i].t0, rng.next());
    draws[i].t = rng.range(std::max(0.0, draws[i].t0 - eta1),
                           std::min(T, draws[i].t0 + eta1));
    draws[i].x = draw_in_ball(draws[i].z0, d4, rng);
  }

  struct Outcome {
    int status = 0;  // 0 ok, 1 no root
    double dot = 1.0;
  };
  std::vector<Outcome> out(samples);
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  parallel_for(samples, [&](int i) {
    try {
      FlowOptions fo;
      fo.track_jacobian = false;
      Vec z = flow(dir, draws[i].t0, draws[i].z0, 0.5 * d5, fo).y;
      HittingOptions ho;
      ho.radius = rho1;
      ho.derivatives = false;
      HittingRecord rec = hitting_time(dir, draws[i].t, draws[i].x,
                                       draws[i].t0, z, ho);
      out[i].dot = rec.axis_dot;
    } catch (const NoRootInInterval&) {
      out[i].status = 1;
    } catch (...) {
      if (!failed.exchange(true)) first_error = std::current_exception();
    }
  });
  if (first_error) std::rethrow_exception(first_error);

  for (const Outcome& o : out) {
    if (o.status == 0) {
      ++rep.samples;
      rep.min_dot = std::min(rep.min_dot, o.dot);
    } else {
      ++rep.root_failures;
    }
  }
  return rep;
}

namespace {

// Membership in the depth-c interior of the image: invertible, preimage
// inside, and clearance from the boundary image above c.
bool in_image_depth(const DirectionField& dir, double t, const Vec& x,
                    double c, int boundary_samples) {
  Vec pre;
  if (dir.transform().try_invert(t, x, pre) !=
      ZvonkinTransform::InvertStatus::ok) {
    return false;
  }
  if (signed_distance(dir.transform().domain(), pre) <= 0.0) return false;
  return image_boundary_distance(dir.transform(), t, x, boundary_samples) > c;
}

}  // namespace

InteriorReport interior_preservation_check(const DirectionField& dir,
                                           const ConstantsLedger& ledger,
                                           double eps, int samples,
                                           uint64_t seed) {
  if (samples < 1) throw ConfigError("interior check: need samples");
  if (!(eps > 0.0)) throw ConfigError("interior check: eps must be positive");
  double T = dir.horizon();
  double theta0 = ledger.require(keys::image_cone_angle);
  double theta1 = ledger.require(keys::patch_cone_angle);
  double eta2 = ledger.require(keys::interior_window_halftime);
  double d5 = ledger.require(keys::patch_radius);
  double rho1 = ledger.require(keys::hitting_time_radius);
  double clearance = std::min(eps, d5 / 16.0) * std::sin(0.5 * theta0);

  InteriorReport rep;
  rep.requested = samples;

  struct Draw {
    double t0 = 0.0;
    double t = 0.0;
    double along = 0.0;
    double across = 0.0;
    Vec z0;
  };
  std::vector<Draw> draws(samples);
  UniformStream rng(seed, 0);
  double tube = 2.0 * d5 * std::tan(theta1);
  for (int i = 0; i < samples; ++i) {
    draws[i].t0 = rng.range(0.0, T);
    draws[i].z0 = dir.boundary_anchor(draws[i].t0, rng.next());
    draws[i].t = rng.range(std::max(0.0, draws[i].t0 - eta2),
                           std::min(T, draws[i].t0 + eta2));
    draws[i].along = rng.range(-0.9 * d5, 0.9 * d5);
    draws[i].across = rng.range(-0.9 * tube, 0.9 * tube);
  }

  struct Outcome {
    bool selected = false;
    int checks = 0;
    int violations = 0;
  };
  std::vector<Outcome> out(samples);
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  parallel_for(samples, [&](int i) {
    try {
      const Draw& dw = draws[i];
      int d = dir.dimension();
      FlowOptions fo;
      fo.track_jacobian = false;
      Vec z = flow(dir, dw.t0, dw.z0, 0.5 * d5, fo).y;
      Vec hz = z;
      Vec axis = dir.eval(dw.t0, z, &hz);
      double an = axis.norm();
      if (an < 0.5) return;
      axis /= an;
      Vec x = z + dw.along * axis;
      if (d == 2) {
        Vec perp(2);
        perp << -axis[1], axis[0];
        x += dw.across * perp;
      }
      if (!cone_Cz_contains(z, axis, d5, theta1, x)) return;
      if (!in_image_depth(dir, dw.t, x, eps, 48)) return;
      HittingOptions ho;
      ho.radius = rho1;
      ho.derivatives = false;
      HittingRecord rec;
      try {
        rec = hitting_time(dir, dw.t, x, dw.t0, z, ho);
      } catch (const NoRootInInterval&) {
        out[i].selected = true;
        out[i].violations = 1;  // the window promised a root
        return;
      }
      out[i].selected = true;
      if (std::abs(rec.r_hit) <= ho.tol) return;  // empty parameter range
      Vec y = x;
      Vec hint = x;
      Mat psi_unused;
      Vec lam_unused;
      double prev = 0.0;
      for (int k = 1; k <= 32; ++k) {
        double rk = rec.r_hit * k / 32.0;
        advance(dir, dw.t, rk - prev, 1e-3, false, false, y, psi_unused,
                lam_unused, hint);
        prev = rk;
        ++out[i].checks;
        if (!in_image_depth(dir, dw.t, y, clearance, 48)) ++out[i].violations;
      }
    } catch (...) {
      if (!failed.exchange(true)) first_error = std::current_exception();
    }
  });
  if (first_error) std::rethrow_exception(first_error);

  for (const Outcome& o : out) {
    if (o.selected) ++rep.selected;
    rep.checks += o.checks;
    rep.violations += o.violations;
  }
  return rep;
}

MeasureChangeResult measure_change_bound(
    const DirectionField& dir, double t, double r,
    const std::function<double(const Vec&)>& f, const SpatialRegion& region,
    int resolution, const FlowOptions& fopts) {
  int d = dir.dimension();
  if (region.lo.size() != d || region.hi.size() != d) {
    throw GridMismatch("measure change: region dimension mismatch");
  }
  if (resolution < 1) throw ConfigError("measure change: resolution < 1");
  if (!f) throw ConfigError("measure change: integrand missing");
  FlowOptions fo = fopts;
  fo.track_jacobian = true;
  check_flow_options(fo);

  long total = 1;
  for (int a = 0; a < d; ++a) total *= resolution;
  double cell = 1.0;
  Vec width(d);
  for (int a = 0; a < d; ++a) {
    width[a] = (region.hi[a] - region.lo[a]) / resolution;
    cell *= width[a];
  }
  auto midpoint = [&](long flat) {
    Vec p(d);
    for (int a = d - 1; a >= 0; --a) {
      p[a] = region.lo[a] + (flat % resolution + 0.5) * width[a];
      flat /= resolution;
    }
    return p;
  };

  std::vector<double> lhs_part(total, 0.0), rhs_part(total, 0.0);
  std::vector<char> kept(total, 0);
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  parallel_for(static_cast<int>(total), [&](int i) {
    try {
      Vec p = midpoint(i);
      if (region.contains && !region.contains(p)) return;
      FlowState st = flow(dir, t, p, r, fo);
      double fv = f(st.y);
      lhs_part[i] = fv * cell;
      rhs_part[i] = fv * std::abs(st.psi.determinant()) * cell;
      kept[i] = 1;
    } catch (...) {
      if (!failed.exchange(true)) first_error = std::current_exception();
    }
  });
  if (first_error) std::rethrow_exception(first_error);

  MeasureChangeResult res;
  for (long i = 0; i < total; ++i) {
    if (!kept[i]) continue;
    res.lhs += lhs_part[i];
    res.rhs += rhs_part[i];
    ++res.cells;
  }
  return res;
}

namespace {

// Direction window predicate: on every anchored window all field samples are
// unit and pairwise aligned within the patch angle.
bool direction_window_passes(const DirectionField& dir, double d3, double eta0,
                             double cos1, const FlowCalibrationOptions& opts,
                             uint64_t lane) {
  double T = dir.horizon();
  UniformStream rng(opts.seed, lane);
  for (int a = 0; a < opts.anchors; ++a) {
    double t0 = rng.range(0.0, T);
    Vec z0 = dir.boundary_anchor(t0, rng.next());
    std::vector<Vec> fields;
    fields.reserve(opts.window_pairs);
    for (int k = 0; k < opts.window_pairs; ++k) {
      double t = rng.range(std::max(0.0, t0 - eta0), std::min(T, t0 + eta0));
      Vec x = draw_in_ball(z0, d3, rng);
      Vec g = dir.eval(t, x);
      if (std::abs(g.norm() - 1.0) > 1e-6) return false;
      fields.push_back(std::move(g));
    }
    for (size_t i = 0; i < fields.size(); ++i) {
      for (size_t j = i + 1; j < fields.size(); ++j) {
        if (fields[i].dot(fields[j]) < cos1 - 1e-12) return false;
      }
    }
  }
  return true;
}

// Determinant sweep: trajectories from the anchored windows keep
// |det psi| >= 1/2 at every station up to +-rho.
bool det_sweep_passes(const DirectionField& dir, double d3, double rho,
                      const FlowCalibrationOptions& opts, uint64_t lane) {
  double T = dir.horizon();
  UniformStream rng(opts.seed, lane);
  for (int a = 0; a < opts.anchors; ++a) {
    double t0 = rng.range(0.0, T);
    Vec z0 = dir.boundary_anchor(t0, rng.next());
    for (int s = 0; s < opts.flow_starts; ++s) {
      double t = rng.range(0.0, T);
      Vec x = draw_in_ball(z0, 0.8 * d3, rng);
      for (double sgn : {1.0, -1.0}) {
        Vec y = x;
        Vec hint = x;
        Mat psi = Mat::Identity(dir.dimension(), dir.dimension());
        Vec lam;
        double prev = 0.0;
        for (int st = 1; st <= opts.det_stations; ++st) {
          double rk = sgn * rho * st / opts.det_stations;
          advance(dir, t, rk - prev, opts.step, true, false, y, psi, lam,
                  hint);
          prev = rk;
          if (std::abs(psi.determinant()) < 0.5) return false;
        }
      }
    }
  }
  return true;
}

// Hitting window predicate: every anchored window yields a root inside the
// radius with the transversality product intact.
bool hitting_window_passes(const DirectionField& dir, double eta1, double d4,
                           double d5, double rho1, double cos1,
                           const FlowCalibrationOptions& opts, uint64_t lane) {
  double T = dir.horizon();
  UniformStream rng(opts.seed, lane);
  for (int a = 0; a < opts.anchors; ++a) {
    double t0 = rng.range(0.0, T);
    Vec z0 = dir.boundary_anchor(t0, rng.next());
    FlowOptions fo;
    fo.step = opts.step;
    fo.track_jacobian = false;
    Vec z = flow(dir, t0, z0, 0.5 * d5, fo).y;
    Vec hz = z;
    if (dir.eval(t0, z, &hz).norm() < 0.999) return false;
    for (int k = 0; k < opts.hitting_trials; ++k) {
      double t = rng.range(std::max(0.0, t0 - eta1), std::min(T, t0 + eta1));
      Vec x = draw_in_ball(z0, d4, rng);
      HittingOptions ho;
      ho.radius = rho1;
      ho.step = opts.step;
      ho.derivatives = false;
      try {
        HittingRecord rec = hitting_time(dir, t, x, t0, z, ho);
        if (rec.axis_dot < cos1 - 1e-6) return false;
      } catch (const NoRootInInterval&) {
        return false;
      }
    }
  }
  return true;
}

}  // namespace

FlowCalibration calibrate_flow_constants(const DirectionField& dir,
                                         ConstantsLedger& ledger,
                                         const FlowCalibrationOptions& opts) {
  if (opts.anchors < 1 || opts.window_pairs < 2) {
    throw ConfigError("flow calibration: too few probes");
  }
  double T = dir.horizon();
  double theta0 = ledger.require(keys::image_cone_angle);
  double theta1 = ledger.require(keys::patch_cone_angle);
  double delta2 = ledger.require(keys::image_cone_radius);
  ledger.require(keys::horizon);
  double cos1 = std::cos(theta1);

  FlowCalibration cal;

  double d3 = 0.75 * delta2;
  double eta0 = std::min(0.25 * T, 0.25);
  int j = 0;
  for (;; ++j) {
    if (j > opts.max_shrink) {
      throw NonConvergence("direction window sweep exhausted its shrinks");
    }
    if (direction_window_passes(dir, d3, eta0, cos1, opts, 10 + j)) break;
    d3 *= opts.shrink;
    eta0 *= opts.shrink;
  }
  cal.window_radius = d3;
  cal.window_halftime = eta0;

  double rho0 = 0.5;
  bool det_ok = false;
  for (j = 0; j <= opts.max_shrink; ++j) {
    if (det_sweep_passes(dir, d3, rho0, opts, 40 + j)) {
      det_ok = true;
      break;
    }
    rho0 *= 0.5;
  }
  if (!det_ok) {
    throw NonConvergence("determinant flow radius sweep exhausted its shrinks");
  }
  cal.flow_radius = rho0;
  cal.hitting_radius = std::min(0.25 * d3, rho0);

  double eta1 = 0.6 * eta0;
  double d4 = 0.45 * d3;
  for (j = 0;; ++j) {
    if (j > opts.max_shrink) {
      throw NonConvergence("hitting window sweep exhausted its shrinks");
    }
    double d5 = d4 * std::sin(theta0) / 16.0;
    if (hitting_window_passes(dir, eta1, d4, d5, cal.hitting_radius, cos1,
                              opts, 70 + j)) {
      break;
    }
    eta1 *= opts.shrink;
    d4 *= opts.shrink;
  }
  cal.hitting_halftime = eta1;
  cal.seed_radius = d4;
  cal.patch_radius = d4 * std::sin(theta0) / 16.0;

  ledger.set(keys::direction_window_radius, cal.window_radius,
             Provenance::fitted);
  ledger.set(keys::direction_window_halftime, cal.window_halftime,
             Provenance::fitted);
  ledger.set(keys::flow_time_radius, cal.flow_radius, Provenance::fitted);
  ledger.set(keys::hitting_time_radius, cal.hitting_radius,
             Provenance::fitted);
  ledger.set(keys::hitting_window_halftime, cal.hitting_halftime,
             Provenance::fitted);
  ledger.set(keys::hitting_seed_radius, cal.seed_radius, Provenance::fitted);
  ledger.set(keys::patch_radius, cal.patch_radius, Provenance::fitted);

  double eta2 = 0.6 * eta1;
  for (j = 0;; ++j) {
    if (j > opts.max_shrink) {
      throw NonConvergence("interior window sweep exhausted its shrinks");
    }
    ledger.set(keys::interior_window_halftime, eta2, Provenance::fitted);
    InteriorReport rep = interior_preservation_check(
        dir, ledger, cal.patch_radius / 8.0, opts.interior_samples,
        opts.seed + 900 + static_cast<uint64_t>(j));
    if (rep.pass()) break;
    eta2 *= opts.shrink;
  }
  cal.interior_halftime = eta2;
  ledger.validate();
  return cal;
}

}  // namespace rsde
