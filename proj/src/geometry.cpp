#include "rsde/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "rsde/rng.hpp"

namespace rsde {

DomainSpec DomainSpec::interval(double a, double b) {
  if (!(b > a)) throw ConfigError("interval needs b > a");
  DomainSpec d;
  d.dim_ = 1;
  d.preset_ = "interval";
  d.params_ = Vec(2);
  d.params_ << a, b;
  return d;
}

DomainSpec DomainSpec::disk(double radius) {
  if (!(radius > 0.0)) throw ConfigError("disk needs radius > 0");
  DomainSpec d;
  d.dim_ = 2;
  d.preset_ = "disk";
  d.params_ = Vec(1);
  d.params_ << radius;
  return d;
}

DomainSpec DomainSpec::ellipse(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw ConfigError("ellipse needs a, b > 0");
  DomainSpec d;
  d.dim_ = 2;
  d.preset_ = "ellipse";
  d.params_ = Vec(2);
  d.params_ << a, b;
  return d;
}

DomainSpec DomainSpec::from_preset(const std::string& name, const Vec& params) {
  if (name == "interval") {
    if (params.size() != 2) throw ConfigError("interval takes [a, b]");
    return interval(params[0], params[1]);
  }
  if (name == "disk") {
    if (params.size() != 1) throw ConfigError("disk takes [radius]");
    return disk(params[0]);
  }
  if (name == "ellipse") {
    if (params.size() != 2) throw ConfigError("ellipse takes [a, b]");
    return ellipse(params[0], params[1]);
  }
  throw ConfigError("unknown domain preset: " + name);
}

double DomainSpec::level(const Vec& x) const {
  if (x.size() != dim_) throw GridMismatch("point dimension mismatch");
  if (preset_ == "interval") {
    return std::min(x[0] - params_[0], params_[1] - x[0]);
  }
  if (preset_ == "disk") {
    return params_[0] - x.norm();
  }
  // ellipse
  return 1.0 - sqr(x[0] / params_[0]) - sqr(x[1] / params_[1]);
}

Vec DomainSpec::level_gradient(const Vec& x) const {
  Vec g = Vec::Zero(dim_);
  if (preset_ == "interval") {
    g[0] = (x[0] - params_[0] <= params_[1] - x[0]) ? 1.0 : -1.0;
  } else if (preset_ == "disk") {
    double r = x.norm();
    if (r > 1e-300) g = -x / r;
  } else {
    g[0] = -2.0 * x[0] / sqr(params_[0]);
    g[1] = -2.0 * x[1] / sqr(params_[1]);
  }
  return g;
}

bool DomainSpec::inside_closed(const Vec& x, double tol) const {
  return level(x) >= -tol;
}

double DomainSpec::collar_width() const {
  if (preset_ == "interval") return 0.5 * (params_[1] - params_[0]);
  if (preset_ == "disk") return params_[0];
  double a = std::max(params_[0], params_[1]);
  double b = std::min(params_[0], params_[1]);
  return b * b / a;
}

void DomainSpec::bounding_box(Vec& lo, Vec& hi) const {
  lo = Vec(dim_);
  hi = Vec(dim_);
  if (preset_ == "interval") {
    lo[0] = params_[0];
    hi[0] = params_[1];
  } else if (preset_ == "disk") {
    lo.setConstant(-params_[0]);
    hi.setConstant(params_[0]);
  } else {
    lo << -params_[0], -params_[1];
    hi << params_[0], params_[1];
  }
}

namespace {

// Nearest ellipse point via Newton on the boundary parameter, multi-start
// with a bisection fallback on the stationarity function.
Vec ellipse_project(double a, double b, const Vec& x) {
  auto point = [&](double t) {
    Vec p(2);
    p << a * std::cos(t), b * std::sin(t);
    return p;
  };
  auto stationarity = [&](double t) {
    // d/dt |x - p(t)|^2 / (-2) = (x - p) . p'(t)
    double ct = std::cos(t), st = std::sin(t);
    return (x[0] - a * ct) * (-a * st) + (x[1] - b * st) * (b * ct);
  };

  double best_t = 0.0;
  double best_d2 = (x - point(0.0)).squaredNorm();
  for (int k = 0; k < 16; ++k) {
    double t = 2.0 * kPi * k / 16.0;
    for (int it = 0; it < 80; ++it) {
      double ct = std::cos(t), st = std::sin(t);
      double g = (x[0] - a * ct) * (-a * st) + (x[1] - b * st) * (b * ct);
      // g' = (x-p).p'' - |p'|^2
      double dg = (x[0] - a * ct) * (-a * ct) + (x[1] - b * st) * (-b * st) -
                  (a * a * st * st + b * b * ct * ct);
      if (std::abs(dg) < 1e-14) break;
      double t_next = t - g / dg;
      if (std::abs(t_next - t) < 1e-14) {
        t = t_next;
        break;
      }
      t = t_next;
    }
    double d2 = (x - point(t)).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best_t = t;
    }
  }

  // Polish with bisection on a sign change around the best candidate.
  double lo = best_t - 0.2, hi = best_t + 0.2;
  double slo = stationarity(lo), shi = stationarity(hi);
  if (slo * shi < 0.0) {
    for (int it = 0; it < 100; ++it) {
      double mid = 0.5 * (lo + hi);
      double smid = stationarity(mid);
      if (slo * smid <= 0.0) {
        hi = mid;
      } else {
        lo = mid;
        slo = smid;
      }
    }
    double t = 0.5 * (lo + hi);
    if ((x - point(t)).squaredNorm() <= best_d2 + 1e-15) best_t = t;
  }
  return point(best_t);
}

}  // namespace

Vec project_to_boundary(const DomainSpec& domain, const Vec& x) {
  const std::string& p = domain.preset();
  const Vec& q = domain.params();
  if (p == "interval") {
    double a = q[0], b = q[1];
    if (std::min(x[0] - a, b - x[0]) >= domain.collar_width() ||
        std::max(a - x[0], x[0] - b) >= domain.collar_width()) {
      throw OutsideTube("interval projection outside collar");
    }
    Vec y(1);
    y[0] = (x[0] - a <= b - x[0]) ? a : b;
    return y;
  }
  if (p == "disk") {
    double r = x.norm();
    if (r < 1e-300) throw OutsideTube("projection undefined at disk center");
    if (std::abs(r - q[0]) >= domain.collar_width()) {
      throw OutsideTube("disk projection outside collar");
    }
    return (q[0] / r) * x;
  }
  Vec y = ellipse_project(q[0], q[1], x);
  if ((x - y).norm() >= domain.collar_width()) {
    throw OutsideTube("ellipse projection outside collar");
  }
  return y;
}

double signed_distance(const DomainSpec& domain, const Vec& x) {
  const std::string& p = domain.preset();
  if (p == "interval" || p == "disk") return domain.level(x);
  // Distance queries are global; the collar precondition only applies to the
  // projection op itself.
  const Vec& q = domain.params();
  double mag = (x - ellipse_project(q[0], q[1], x)).norm();
  return domain.level(x) >= 0.0 ? mag : -mag;
}

Vec boundary_normal(const DomainSpec& domain, const Vec& boundary_point) {
  Vec g = domain.level_gradient(boundary_point);
  double n = g.norm();
  if (n < 1e-300) throw NonConvergence("degenerate level gradient");
  return g / n;
}

Vec inward_normal_extended(const DomainSpec& domain, const Vec& x) {
  double half = 0.5 * domain.collar_width();
  double dist = std::abs(signed_distance(domain, x));
  if (dist >= domain.collar_width()) return Vec::Zero(domain.dimension());
  double bump = ramp_down(dist, half, domain.collar_width());
  return bump * boundary_normal(domain, project_to_boundary(domain, x));
}

Mat inward_normal_gradient(const DomainSpec& domain, const Vec& x) {
  const std::string& p = domain.preset();
  const Vec& q = domain.params();
  double collar = domain.collar_width();
  double half = 0.5 * collar;
  int d = domain.dimension();

  if (p == "interval") {
    // n is piecewise constant in the plateau; only the bump varies.
    Mat g(1, 1);
    double sd = signed_distance(domain, x);
    double dist = std::abs(sd);
    if (dist >= collar) return Mat::Zero(1, 1);
    double orient = (x[0] - q[0] <= q[1] - x[0]) ? 1.0 : -1.0;  // n sign
    double ddist_dx = orient * sign_of(sd);  // d|sd|/dx
    g(0, 0) = orient * (-ramp_up_derivative(dist, half, collar)) * ddist_dx;
    return g;
  }
  if (p == "disk") {
    double r = x.norm();
    if (r < 1e-300) return Mat::Zero(2, 2);
    double sd = q[0] - r;
    double dist = std::abs(sd);
    if (dist >= collar) return Mat::Zero(2, 2);
    double bump = ramp_down(dist, half, collar);
    double dbump = -ramp_up_derivative(dist, half, collar);
    Vec xh = x / r;
    Mat tangential = (Mat::Identity(2, 2) - xh * xh.transpose()) / r;
    // n = -xh * bump(|R - r|); radial derivative moves the bump only.
    Mat out = -bump * tangential;
    out += (dbump * sign_of(sd)) * (xh * xh.transpose());
    return out;
  }
  // Ellipse: central differences of the extended normal.
  double h = 1e-6;
  Mat g(d, d);
  for (int j = 0; j < d; ++j) {
    Vec xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    g.col(j) = (inward_normal_extended(domain, xp) -
                inward_normal_extended(domain, xm)) /
               (2.0 * h);
  }
  return g.transpose();  // (i,j) = d n^i / d x_j
}

double uniform_sphere_radius(const DomainSpec& domain) {
  return domain.collar_width();
}

bool cone_contains(const Cone& cone, const Vec& y) {
  Vec offset = y - cone.apex;
  double len = offset.norm();
  if (len <= 0.0 || len >= cone.radius) return false;
  return offset.dot(cone.axis) > std::cos(cone.half_angle) * len;
}

std::vector<Vec> sample_boundary(const DomainSpec& domain, int count) {
  std::vector<Vec> pts;
  pts.reserve(count);
  const std::string& p = domain.preset();
  const Vec& q = domain.params();
  for (int i = 0; i < count; ++i) {
    Vec x(domain.dimension());
    if (p == "interval") {
      x[0] = (i % 2 == 0) ? q[0] : q[1];
    } else if (p == "disk") {
      double t = 2.0 * kPi * i / count;
      x << q[0] * std::cos(t), q[0] * std::sin(t);
    } else {
      double t = 2.0 * kPi * i / count;
      x << q[0] * std::cos(t), q[1] * std::sin(t);
    }
    pts.push_back(x);
  }
  return pts;
}

namespace {

// Cones on both sides of a probed boundary point, checked by dense sampling.
bool cones_fit(const DomainSpec& domain, const Vec& bp, double angle,
               double radius, int rings) {
  Vec n = boundary_normal(domain, bp);
  int d = domain.dimension();
  for (int side = 0; side < 2; ++side) {
    Vec axis = (side == 0) ? n : Vec(-n);
    bool want_inside = (side == 0);
    for (int i = 1; i <= rings; ++i) {
      double rho = radius * i / rings;
      int dirs = (d == 1) ? 1 : rings;
      for (int jd = 0; jd < dirs; ++jd) {
        Vec dir = axis;
        if (d == 2) {
          double alpha = angle * jd / std::max(1, dirs - 1);
          Vec perp(2);
          perp << -axis[1], axis[0];
          // Probe just inside the cone edge.
          dir = std::cos(alpha * 0.999) * axis + std::sin(alpha * 0.999) * perp;
          if (jd % 2 == 1) dir = std::cos(alpha * 0.999) * axis -
                                 std::sin(alpha * 0.999) * perp;
        }
        Vec y = bp + rho * dir;
        double lv = domain.level(y);
        if (want_inside ? (lv <= 0.0) : (lv >= 0.0)) return false;
      }
    }
  }
  return true;
}

}  // namespace

double probe_cone_angle(const DomainSpec& domain, double& radius,
                        int boundary_samples, int angle_steps, uint64_t seed) {
  auto pts = sample_boundary(domain, boundary_samples);
  // Random extra boundary points for robustness.
  for (int i = 0; i < boundary_samples; ++i) {
    auto u = uniform4(seed, 7, i);
    const Vec& q = domain.params();
    Vec x(domain.dimension());
    if (domain.preset() == "interval") {
      x[0] = (u[0] < 0.5) ? q[0] : q[1];
    } else if (domain.preset() == "disk") {
      x << q[0] * std::cos(2.0 * kPi * u[0]), q[0] * std::sin(2.0 * kPi * u[0]);
    } else {
      x << q[0] * std::cos(2.0 * kPi * u[0]), q[1] * std::sin(2.0 * kPi * u[0]);
    }
    pts.push_back(x);
  }

  // Prefer the largest radius tier that admits cones at all, then the widest
  // angle at that radius; one grid step of angular margin absorbs the finite
  // probe resolution.
  double collar = domain.collar_width();
  for (double r = 0.25 * collar; r > 0.04 * collar; r *= 0.5) {
    for (int k = angle_steps - 1; k >= 1; --k) {
      double angle = 0.5 * kPi * k / angle_steps;
      bool ok = true;
      for (const Vec& bp : pts) {
        if (!cones_fit(domain, bp, angle, r, 24)) {
          ok = false;
          break;
        }
      }
      if (ok) {
        radius = r;
        return 0.5 * kPi * std::max(1, k - 1) / angle_steps;
      }
    }
  }
  throw NonConvergence("no admissible cone angle found for domain");
}

}  // namespace rsde
