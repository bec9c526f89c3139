#include "rsde/pde.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <unsupported/Eigen/FFT>
#include <vector>

namespace rsde {

namespace {

using Cplx = std::complex<double>;
using VecC = Eigen::VectorXcd;
using MatC = Eigen::MatrixXcd;

Vec make_vec(std::initializer_list<double> v) {
  Vec x(static_cast<int>(v.size()));
  int i = 0;
  for (double s : v) x[i++] = s;
  return x;
}

int step_count(double horizon, double dt) {
  return std::max(1, static_cast<int>(std::llround(horizon / dt)));
}

int output_stride(int steps, int requested) {
  if (requested > 0) {
    if (steps % requested != 0)
      throw ConfigError("output_time_stride must divide the step count");
    return requested;
  }
  for (int s = std::max(1, steps / 128); s >= 1; --s)
    if (steps % s == 0) return s;
  return 1;
}

// Tridiagonal solve, rhs overwritten with the solution.  The matrix has real
// bands; the right-hand side may be complex.
template <typename RhsVec>
void thomas_solve(const Vec& lower, const Vec& diag, const Vec& upper,
                  RhsVec& rhs) {
  int n = static_cast<int>(diag.size());
  Vec cp(n);
  double piv = diag[0];
  if (std::abs(piv) < 1e-300) throw LinearSolveFailure("zero pivot");
  cp[0] = upper[0] / piv;
  rhs[0] /= piv;
  for (int i = 1; i < n; ++i) {
    piv = diag[i] - lower[i] * cp[i - 1];
    if (std::abs(piv) < 1e-300) throw LinearSolveFailure("zero pivot");
    cp[i] = (i < n - 1) ? upper[i] / piv : 0.0;
    rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / piv;
  }
  for (int i = n - 2; i >= 0; --i) rhs[i] -= cp[i] * rhs[i + 1];
}

template <typename RhsVec>
void tridiag_apply(const Vec& lower, const Vec& diag, const Vec& upper,
                   const RhsVec& x, RhsVec& out) {
  int n = static_cast<int>(diag.size());
  for (int i = 0; i < n; ++i) {
    out[i] = diag[i] * x[i];
    if (i > 0) out[i] += lower[i] * x[i - 1];
    if (i < n - 1) out[i] += upper[i] * x[i + 1];
  }
}

// ---------------------------------------------------------------- interval

SpaceTimeVectorField solve_interval(const ParabolicProblem& p,
                                    const std::vector<ScalarNeumannData>& comps) {
  double lo = p.domain.params()[0], hi = p.domain.params()[1];
  int n = std::max(2, static_cast<int>(std::llround((hi - lo) / p.h)));
  double h = (hi - lo) / n;
  int steps = step_count(p.horizon, p.dt);
  double dtau = p.horizon / steps;
  int stride = output_stride(steps, p.output_time_stride);
  int ncomp = static_cast<int>(comps.size());

  std::vector<double> axis(n + 1);
  for (int i = 0; i <= n; ++i) axis[i] = lo + i * h;

  // Outward-normal data translated into du/dx at each end.
  Vec gl(ncomp), gr(ncomp);
  for (int c = 0; c < ncomp; ++c) {
    gl[c] = -comps[c].neumann(make_vec({lo}));
    gr[c] = comps[c].neumann(make_vec({hi}));
  }

  auto drift_nodes = [&](double t) {
    Vec bv(n + 1);
    Vec x(1);
    for (int i = 0; i <= n; ++i) {
      x[0] = axis[i];
      bv[i] = p.drift.eval(t, x)[0];
    }
    return bv;
  };
  bool frozen = p.drift.time_independent;
  Vec b_frozen = frozen ? drift_nodes(0.0) : Vec();

  // Half-Laplacian plus advection rows; boundary rows eliminate the ghosts
  // u(-1) = u(1) - 2h gl and u(n+1) = u(n-1) + 2h gr.
  struct Operator {
    Vec lower, diag, upper;
    Mat constant;  // per component
  };
  auto build = [&](const Vec& bv) {
    Operator op;
    op.lower = Vec::Zero(n + 1);
    op.diag = Vec::Zero(n + 1);
    op.upper = Vec::Zero(n + 1);
    op.constant = Mat::Zero(n + 1, ncomp);
    double ih2 = 1.0 / (h * h);
    for (int i = 1; i < n; ++i) {
      op.lower[i] = 0.5 * ih2 - bv[i] / (2.0 * h);
      op.diag[i] = -ih2;
      op.upper[i] = 0.5 * ih2 + bv[i] / (2.0 * h);
    }
    op.diag[0] = -ih2;
    op.upper[0] = ih2;
    op.lower[n] = ih2;
    op.diag[n] = -ih2;
    for (int c = 0; c < ncomp; ++c) {
      op.constant(0, c) = gl[c] * (-1.0 / h + bv[0]);
      op.constant(n, c) = gr[c] * (1.0 / h + bv[n]);
    }
    return op;
  };
  Operator frozen_op = frozen ? build(b_frozen) : Operator{};

  Mat v(n + 1, ncomp);
  {
    Vec x(1);
    for (int i = 0; i <= n; ++i) {
      x[0] = axis[i];
      for (int c = 0; c < ncomp; ++c) v(i, c) = comps[c].terminal(x);
    }
  }

  std::vector<double> times(steps / stride + 1);
  for (size_t i = 0; i < times.size(); ++i) times[i] = static_cast<double>(i) * stride * dtau;
  SpaceTimeVectorField out(times, {axis}, ncomp, Interp::cubic);
  out.slab(static_cast<int>(times.size()) - 1) = v;

  for (int m = 0; m < steps; ++m) {
    double t_now = p.horizon - m * dtau;
    double t_next = p.horizon - (m + 1) * dtau;
    Operator now_store, next_store;
    if (!frozen) {
      now_store = build(drift_nodes(t_now));
      next_store = build(drift_nodes(t_next));
    }
    const Operator& a_now = frozen ? frozen_op : now_store;
    const Operator& a_next = frozen ? frozen_op : next_store;

    Vec ld = -0.5 * dtau * a_next.lower;
    Vec dd = Vec::Ones(n + 1) - 0.5 * dtau * a_next.diag;
    Vec ud = -0.5 * dtau * a_next.upper;

    for (int c = 0; c < ncomp; ++c) {
      Vec col = v.col(c);
      Vec av(n + 1);
      tridiag_apply(a_now.lower, a_now.diag, a_now.upper, col, av);
      Vec rhs = col + 0.5 * dtau * (av + a_now.constant.col(c)) +
                0.5 * dtau * a_next.constant.col(c);
      Vec sol = rhs;
      thomas_solve(ld, dd, ud, sol);
      Vec resid(n + 1);
      tridiag_apply(ld, dd, ud, sol, resid);
      resid -= rhs;
      if (resid.cwiseAbs().maxCoeff() >
          1e-8 * std::max(1.0, rhs.cwiseAbs().maxCoeff()))
        throw LinearSolveFailure("interval step residual above tolerance");
      v.col(c) = sol;
    }
    if ((m + 1) % stride == 0) out.slab((steps - m - 1) / stride) = v;
  }
  return out;
}

// -------------------------------------------------------------------- disk

class DiskCore {
 public:
  DiskCore(const ParabolicProblem& p, std::vector<ScalarNeumannData> comps)
      : p_(p), comps_(std::move(comps)) {
    R_ = p.domain.params()[0];
    nr_ = std::max(3, static_cast<int>(std::llround(R_ / p.h)));
    dr_ = R_ / nr_;
    nphi_ = p.angular_nodes;
    ncomp_ = static_cast<int>(comps_.size());
    steps_ = step_count(p.horizon, p.dt);
    dtau_ = p.horizon / steps_;
    stride_ = output_stride(steps_, p.output_time_stride);
    if (p.drift.bound > 0.0 && dtau_ > dr_ / (2.0 * p.drift.bound))
      throw CFLViolation("disk scheme needs dt <= h / (2 drift bound)");

    rj_.resize(nr_);
    for (int j = 0; j < nr_; ++j) rj_[j] = (j + 0.5) * dr_;
    phis_.resize(nphi_);
    for (int l = 0; l < nphi_; ++l) phis_[l] = 2.0 * kPi * l / nphi_;

    // Neumann ring data and its spectrum per component.
    gdata_.assign(ncomp_, Vec(nphi_));
    gmodes_.assign(ncomp_, VecC(nphi_));
    for (int c = 0; c < ncomp_; ++c) {
      for (int l = 0; l < nphi_; ++l)
        gdata_[c][l] = comps_[c].neumann(make_vec(
            {R_ * std::cos(phis_[l]), R_ * std::sin(phis_[l])}));
      gmodes_[c] = forward(gdata_[c]);
    }

    build_mode_operators();
  }

  SpaceTimeVectorField run() {
    std::vector<Mat> v(ncomp_, Mat(nr_, nphi_));
    for (int c = 0; c < ncomp_; ++c)
      for (int j = 0; j < nr_; ++j)
        for (int l = 0; l < nphi_; ++l)
          v[c](j, l) = comps_[c].terminal(node(j, l));

    int nslab = steps_ / stride_ + 1;
    std::vector<double> times(nslab);
    for (int i = 0; i < nslab; ++i) times[i] = static_cast<double>(i) * stride_ * dtau_;
    std::vector<std::vector<Mat>> rec(ncomp_, std::vector<Mat>(nslab));
    for (int c = 0; c < ncomp_; ++c) rec[c][nslab - 1] = v[c];

    bool frozen = p_.drift.time_independent;
    bool with_adv = p_.drift.bound > 0.0;
    Mat b1 = Mat::Zero(nr_, nphi_), b2 = Mat::Zero(nr_, nphi_);
    if (frozen && with_adv) drift_grid(0.0, b1, b2);

    for (int m = 0; m < steps_; ++m) {
      double t_now = p_.horizon - m * dtau_;
      if (!frozen && with_adv) drift_grid(t_now, b1, b2);
      for (int c = 0; c < ncomp_; ++c) step_component(v[c], b1, b2, c, with_adv);
      if ((m + 1) % stride_ == 0)
        for (int c = 0; c < ncomp_; ++c) rec[c][(steps_ - m - 1) / stride_] = v[c];
    }
    return resample(times, rec);
  }

 private:
  Vec node(int j, int l) const {
    return make_vec({rj_[j] * std::cos(phis_[l]), rj_[j] * std::sin(phis_[l])});
  }

  int kappa(int k) const { return k <= nphi_ / 2 ? k : k - nphi_; }

  VecC forward(const Vec& ring) {
    std::vector<Cplx> in(static_cast<size_t>(nphi_)), out(static_cast<size_t>(nphi_));
    for (int l = 0; l < nphi_; ++l) in[static_cast<size_t>(l)] = ring[l];
    fft_.fwd(out, in);
    VecC r(nphi_);
    for (int k = 0; k < nphi_; ++k) r[k] = out[static_cast<size_t>(k)];
    return r;
  }

  Vec inverse(const VecC& modes) {
    std::vector<Cplx> in(static_cast<size_t>(nphi_)), out(static_cast<size_t>(nphi_));
    for (int k = 0; k < nphi_; ++k) in[static_cast<size_t>(k)] = modes[k];
    fft_.inv(out, in);
    Vec r(nphi_);
    for (int l = 0; l < nphi_; ++l) r[l] = out[static_cast<size_t>(l)].real();
    return r;
  }

  void build_mode_operators() {
    lowerA_.assign(nphi_, Vec::Zero(nr_));
    diagA_.assign(nphi_, Vec::Zero(nr_));
    upperA_.assign(nphi_, Vec::Zero(nr_));
    for (int k = 0; k < nphi_; ++k) {
      double k2 = sqr(static_cast<double>(kappa(k)));
      for (int j = 0; j < nr_; ++j) {
        double rin = j * dr_;
        double rout = (j + 1) * dr_;
        double scale = 0.5 / (rj_[j] * dr_ * dr_);
        if (j > 0) lowerA_[k][j] = scale * rin;
        double flux_out = (j < nr_ - 1) ? rout : 0.0;  // last flux carries data
        upperA_[k][j] = (j < nr_ - 1) ? scale * flux_out : 0.0;
        diagA_[k][j] = -scale * (rin + flux_out) - 0.5 * k2 / sqr(rj_[j]);
      }
    }
  }

  // Data constant of the half-Laplacian at the outer ring for mode k.
  Cplx data_term(int c, int k) const {
    return 0.5 * R_ * gmodes_[c][k] / (rj_[nr_ - 1] * dr_);
  }

  void drift_grid(double t, Mat& b1, Mat& b2) {
    b1.resize(nr_, nphi_);
    b2.resize(nr_, nphi_);
    for (int j = 0; j < nr_; ++j)
      for (int l = 0; l < nphi_; ++l) {
        Vec bv = p_.drift.eval(t, node(j, l));
        b1(j, l) = bv[0];
        b2(j, l) = bv[1];
      }
  }

  void step_component(Mat& v, const Mat& b1, const Mat& b2, int c,
                      bool with_adv) {
    // Ring spectra of the current state.
    MatC w(nr_, nphi_);
    for (int j = 0; j < nr_; ++j) w.row(j) = forward(v.row(j).transpose()).transpose();

    MatC advw = MatC::Zero(nr_, nphi_);
    if (with_adv) {
      // Angular derivative, ring-local mode cap for explicit stability.
      Mat dphi(nr_, nphi_);
      for (int j = 0; j < nr_; ++j) {
        int cap = std::min(std::max(1, j), nphi_ / 2 - 1);
        VecC t(nphi_);
        for (int k = 0; k < nphi_; ++k) {
          int kp = kappa(k);
          t[k] = (std::abs(kp) <= cap) ? Cplx(0.0, kp) * w(j, k) : Cplx(0.0, 0.0);
        }
        dphi.row(j) = inverse(t).transpose();
      }

      // Radial derivative: antipodal ring across the center, Neumann ghost
      // at the rim.
      Mat drv(nr_, nphi_);
      int half = nphi_ / 2;
      for (int l = 0; l < nphi_; ++l) {
        int anti = (l + half) % nphi_;
        drv(0, l) = (v(1, l) - v(0, anti)) / (2.0 * dr_);
        for (int j = 1; j < nr_ - 1; ++j)
          drv(j, l) = (v(j + 1, l) - v(j - 1, l)) / (2.0 * dr_);
        double ghost = v(nr_ - 1, l) + dr_ * gdata_[c][l];
        drv(nr_ - 1, l) = (ghost - v(nr_ - 2, l)) / (2.0 * dr_);
      }

      // Cartesian advection term b . grad v.
      Mat adv(nr_, nphi_);
      for (int j = 0; j < nr_; ++j)
        for (int l = 0; l < nphi_; ++l) {
          double cs = std::cos(phis_[l]), sn = std::sin(phis_[l]);
          double gx = cs * drv(j, l) - sn * dphi(j, l) / rj_[j];
          double gy = sn * drv(j, l) + cs * dphi(j, l) / rj_[j];
          adv(j, l) = b1(j, l) * gx + b2(j, l) * gy;
        }
      for (int j = 0; j < nr_; ++j)
        advw.row(j) = forward(adv.row(j).transpose()).transpose();
    }

    // Crank-Nicolson diffusion per mode, explicit advection.
    for (int k = 0; k < nphi_; ++k) {
      VecC col = w.col(k);
      VecC lv(nr_);
      tridiag_apply(lowerA_[k], diagA_[k], upperA_[k], col, lv);
      VecC rhs = col + 0.5 * dtau_ * lv + dtau_ * advw.col(k);
      rhs[nr_ - 1] += dtau_ * data_term(c, k);

      Vec ld = -0.5 * dtau_ * lowerA_[k];
      Vec dd = Vec::Ones(nr_) - 0.5 * dtau_ * diagA_[k];
      Vec ud = -0.5 * dtau_ * upperA_[k];
      VecC sol = rhs;
      thomas_solve(ld, dd, ud, sol);
      VecC resid(nr_);
      tridiag_apply(ld, dd, ud, sol, resid);
      resid -= rhs;
      double scale = std::max(1.0, rhs.cwiseAbs().maxCoeff());
      if (resid.cwiseAbs().maxCoeff() > 1e-8 * scale)
        throw LinearSolveFailure("disk step residual above tolerance");
      w.col(k) = sol;
    }

    for (int j = 0; j < nr_; ++j)
      v.row(j) = inverse(w.row(j).transpose()).transpose();
  }

  // Spectral-in-angle, cubic-in-radius evaluation onto a Cartesian grid.
  SpaceTimeVectorField resample(const std::vector<double>& times,
                                const std::vector<std::vector<Mat>>& rec) {
    std::vector<double> axis(2 * nr_ + 1);
    for (int i = 0; i <= 2 * nr_; ++i) axis[i] = -R_ + i * dr_;
    SpaceTimeVectorField out(times, {axis, axis}, ncomp_, Interp::cubic);

    int next = nr_ + 4;  // two mirror rings, data ghost, extrapolated ghost
    double rho0 = -1.5 * dr_;
    for (int c = 0; c < ncomp_; ++c) {
      for (size_t ti = 0; ti < times.size(); ++ti) {
        const Mat& slabv = rec[c][ti];
        MatC spec(nr_, nphi_);
        for (int j = 0; j < nr_; ++j)
          spec.row(j) = forward(slabv.row(j).transpose()).transpose();

        MatC ext(next, nphi_);
        for (int k = 0; k < nphi_; ++k) {
          double parity = (std::abs(kappa(k)) % 2 == 0) ? 1.0 : -1.0;
          ext(0, k) = parity * spec(1, k);
          ext(1, k) = parity * spec(0, k);
          for (int j = 0; j < nr_; ++j) ext(2 + j, k) = spec(j, k);
          ext(nr_ + 2, k) = spec(nr_ - 1, k) + dr_ * gmodes_[c][k];
          ext(nr_ + 3, k) =
              3.0 * ext(nr_ + 2, k) - 3.0 * ext(nr_ + 1, k) + ext(nr_, k);
        }

        // radial interp per mode, then the angular sum
        auto eval_at = [&](double r, double phi) {
          double u = (r - rho0) / dr_;
          int i = std::clamp(static_cast<int>(std::floor(u)), 1, next - 3);
          double s = u - i;
          double s2 = s * s, s3 = s2 * s;
          double wm = 0.5 * (-s3 + 2.0 * s2 - s);
          double w0 = 0.5 * (3.0 * s3 - 5.0 * s2 + 2.0);
          double w1 = 0.5 * (-3.0 * s3 + 4.0 * s2 + s);
          double w2 = 0.5 * (s3 - s2);
          Cplx zstep = std::polar(1.0, phi);
          Cplx acc = 0.0;
          int kneg = -nphi_ / 2 + 1;
          Cplx phase = std::polar(1.0, kneg * phi);
          for (int kp = kneg; kp <= nphi_ / 2; ++kp) {
            int k = (kp + nphi_) % nphi_;
            Cplx ck = wm * ext(i - 1, k) + w0 * ext(i, k) + w1 * ext(i + 1, k) +
                      w2 * ext(i + 2, k);
            acc += ck * phase;
            phase *= zstep;
          }
          return acc.real() / nphi_;
        };

        Mat& slab = out.slab(static_cast<int>(ti));
        std::int64_t flat = 0;
        for (int ix = 0; ix <= 2 * nr_; ++ix)
          for (int iy = 0; iy <= 2 * nr_; ++iy, ++flat) {
            double x = axis[static_cast<size_t>(ix)], y = axis[static_cast<size_t>(iy)];
            double r = std::hypot(x, y);
            double phi = (r > 0.0) ? std::atan2(y, x) : 0.0;
            // Box corners outside the rim carry the reflection continuation,
            // so interpolation near the boundary stays clean.
            slab(flat, c) = (r <= R_)
                                ? eval_at(r, phi)
                                : 2.0 * eval_at(R_, phi) - eval_at(2.0 * R_ - r, phi);
          }
      }
    }
    return out;
  }

  const ParabolicProblem& p_;
  std::vector<ScalarNeumannData> comps_;
  double R_ = 1.0, dr_ = 0.0, dtau_ = 0.0;
  int nr_ = 0, nphi_ = 0, ncomp_ = 0, steps_ = 0, stride_ = 0;
  std::vector<double> rj_, phis_;
  std::vector<Vec> gdata_;
  std::vector<VecC> gmodes_;
  std::vector<Vec> lowerA_, diagA_, upperA_;
  Eigen::FFT<double> fft_;
};

std::vector<ScalarNeumannData> identity_components(const DomainSpec& dom) {
  int d = dom.dimension();
  std::vector<ScalarNeumannData> comps;
  DomainSpec dcopy = dom;
  for (int c = 0; c < d; ++c) {
    ScalarNeumannData s;
    s.terminal = [c](const Vec& x) { return x[c]; };
    // outward normal component
    s.neumann = [dcopy, c](const Vec& x) { return -boundary_normal(dcopy, x)[c]; };
    comps.push_back(std::move(s));
  }
  return comps;
}

}  // namespace

void ParabolicProblem::validate() const {
  if (!(horizon > 0.0) || horizon > 1.0)
    throw ConfigError("pde: horizon must lie in (0, 1]");
  if (!(dt > 0.0) || !(h > 0.0)) throw ConfigError("pde: dt and h must be positive");
  if (domain.preset() != "interval" && domain.preset() != "disk")
    throw ConfigError("pde: unsupported domain preset '" + domain.preset() + "'");
  if (drift.dimension != domain.dimension())
    throw GridMismatch("pde: drift dimension differs from domain dimension");
  if (angular_nodes < 8 || angular_nodes % 2 != 0)
    throw ConfigError("pde: angular_nodes must be even and at least 8");
}

SpaceTimeVectorField solve_neumann_terminal(const ParabolicProblem& p) {
  p.validate();
  auto comps = identity_components(p.domain);
  if (p.domain.preset() == "interval") return solve_interval(p, comps);
  return DiskCore(p, comps).run();
}

SpaceTimeVectorField solve_scalar_neumann(const ParabolicProblem& p,
                                          const ScalarNeumannData& data) {
  p.validate();
  if (!data.terminal || !data.neumann)
    throw ConfigError("pde: scalar problem needs terminal and neumann data");
  std::vector<ScalarNeumannData> comps = {data};
  if (p.domain.preset() == "interval") return solve_interval(p, comps);
  return DiskCore(p, comps).run();
}

SpaceTimeVectorField extend_across_boundary(const SpaceTimeVectorField& u,
                                            const DomainSpec& dom,
                                            double margin_fraction) {
  if (!(margin_fraction > 0.0) || margin_fraction >= 1.0)
    throw ConfigError("extension margin fraction must lie in (0, 1)");
  double margin = margin_fraction * dom.collar_width();

  if (dom.preset() == "interval") {
    if (u.in_dimension() != 1) throw GridMismatch("extension: dimension mismatch");
    double lo = dom.params()[0], hi = dom.params()[1];
    double h = u.axis_step(0);
    int extra = static_cast<int>(std::floor(margin / h));
    std::vector<double> axis;
    for (int i = -extra; i <= static_cast<int>(u.axis(0).size()) - 1 + extra; ++i)
      axis.push_back(lo + i * h);
    SpaceTimeVectorField out(u.times(), {axis}, u.out_dimension(), Interp::cubic);
    Vec q(1), qe(1);
    for (int ti = 0; ti < out.num_times(); ++ti) {
      double t = u.times()[static_cast<size_t>(ti)];
      for (std::int64_t r = 0; r < out.nodes_per_slab(); ++r) {
        double x = axis[static_cast<size_t>(r)];
        Vec val;
        if (x >= lo && x <= hi) {
          q[0] = x;
          val = u.value(t, q);
        } else {
          double bp = (x < lo) ? lo : hi;
          q[0] = bp;
          qe[0] = 2.0 * bp - x;
          val = 2.0 * u.value(t, q) - u.value(t, qe);
        }
        out.slab(ti).row(r) = val.transpose();
      }
    }
    return out;
  }

  if (dom.preset() != "disk")
    throw ConfigError("extension: unsupported domain preset '" + dom.preset() + "'");
  if (u.in_dimension() != 2) throw GridMismatch("extension: dimension mismatch");
  double R = dom.params()[0];
  double h = u.axis_step(0);
  int extra = static_cast<int>(std::floor(margin / h));
  int n = static_cast<int>(u.axis(0).size()) - 1 + 2 * extra;
  std::vector<double> axis(static_cast<size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) axis[static_cast<size_t>(i)] = -R + (i - extra) * h;

  SpaceTimeVectorField out(u.times(), {axis, axis}, u.out_dimension(), Interp::cubic);
  for (int ti = 0; ti < out.num_times(); ++ti) {
    double t = u.times()[static_cast<size_t>(ti)];
    Mat& slab = out.slab(ti);
    for (std::int64_t flat = 0; flat < out.nodes_per_slab(); ++flat) {
      Vec x = out.node_point(flat);
      double r = x.norm();
      Vec val;
      if (r <= R) {
        val = u.value(t, x);
      } else {
        double d = r - R;
        if (d <= margin) {
          Vec xb = (R / r) * x;
          Vec xin = ((2.0 * R - r) / r) * x;
          val = 2.0 * u.value(t, xb) - u.value(t, xin);
          // blend toward the identity approaching the collar edge
          double w = ramp_down(d, 0.9 * margin, margin);
          val = w * val + (1.0 - w) * x;
        } else {
          val = x;
        }
      }
      slab.row(flat) = val.transpose();
    }
  }
  return out;
}

HolderFit holder_estimate(const SpaceTimeVectorField& u, int gradient_samples) {
  int nt = u.num_times();
  if (nt < 2) throw DegenerateFit("holder fit needs at least two time slabs");

  std::vector<int> tids;
  int tstride = std::max(1, nt / 24);
  for (int i = 0; i < nt; i += tstride) tids.push_back(i);
  if (tids.back() != nt - 1) tids.push_back(nt - 1);

  std::int64_t nodes = u.nodes_per_slab();
  std::int64_t gstride = std::max<std::int64_t>(1, nodes / std::max(1, gradient_samples));
  std::vector<std::int64_t> gnodes;
  for (std::int64_t r = 0; r < nodes; r += gstride) gnodes.push_back(r);

  struct Pair {
    double gap, modulus;
  };
  std::vector<Pair> pairs;
  for (size_t a = 0; a < tids.size(); ++a)
    for (size_t b = a + 1; b < tids.size(); ++b) {
      int i = tids[a], j = tids[b];
      double ti = u.times()[static_cast<size_t>(i)], tj = u.times()[static_cast<size_t>(j)];
      double vmax = (u.slab(i) - u.slab(j)).rowwise().norm().maxCoeff();
      double gmax = 0.0;
      for (std::int64_t r : gnodes) {
        Vec x = u.node_point(r);
        gmax = std::max(gmax, (u.jacobian(ti, x) - u.jacobian(tj, x)).norm());
      }
      pairs.push_back({tj - ti, vmax + gmax});
    }

  std::vector<Pair> usable;
  for (const Pair& p : pairs)
    if (p.modulus > 1e-10) usable.push_back(p);
  if (usable.empty()) return {0.0, 1.0};
  if (usable.size() < 3) throw DegenerateFit("holder fit has too few usable pairs");

  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const Pair& p : usable) {
    double lx = std::log(p.gap), ly = std::log(p.modulus);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  double nn = static_cast<double>(usable.size());
  double denom = nn * sxx - sx * sx;
  if (std::abs(denom) < 1e-12) throw DegenerateFit("holder fit is rank deficient");
  double slope = (nn * sxy - sx * sy) / denom;
  double alpha = std::clamp(slope, 0.01, 1.0);

  double coef = 0.0;
  for (const Pair& p : usable)
    coef = std::max(coef, p.modulus / std::pow(p.gap, alpha));
  return {coef, alpha};
}

}  // namespace rsde
