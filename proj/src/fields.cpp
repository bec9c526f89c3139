#include "rsde/fields.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

namespace rsde {

namespace {

Vec make_vec(std::initializer_list<double> v) {
  Vec x(static_cast<int>(v.size()));
  int i = 0;
  for (double s : v) x[i++] = s;
  return x;
}

}  // namespace

DriftField DriftField::zero(int dim) {
  DriftField f;
  f.dimension = dim;
  f.bound = 0.0;
  f.time_independent = true;
  f.preset = "zero";
  f.eval = [dim](double, const Vec&) { return Vec::Zero(dim).eval(); };
  return f;
}

DriftField DriftField::constant(const Vec& c) {
  DriftField f;
  f.dimension = static_cast<int>(c.size());
  f.bound = c.norm();
  f.time_independent = true;
  f.preset = "constant";
  Vec cc = c;
  f.eval = [cc](double, const Vec&) { return cc; };
  return f;
}

DriftField DriftField::sign1d(double bound, double mid) {
  if (bound < 0.0) throw ConfigError("sign1d: bound must be nonnegative");
  DriftField f;
  f.dimension = 1;
  f.bound = bound;
  f.time_independent = true;
  f.preset = "sign1d";
  f.eval = [bound, mid](double, const Vec& x) {
    return make_vec({bound * sign_of(x[0] - mid)});
  };
  return f;
}

DriftField DriftField::checkerboard2d(double bound, double cell) {
  if (bound < 0.0 || cell <= 0.0) throw ConfigError("checkerboard2d: bad parameters");
  DriftField f;
  f.dimension = 2;
  f.bound = bound;
  f.time_independent = true;
  f.preset = "checkerboard2d";
  double comp = bound / std::sqrt(2.0);
  f.eval = [comp, cell](double, const Vec& x) {
    long ix = static_cast<long>(std::floor(x[0] / cell));
    long iy = static_cast<long>(std::floor(x[1] / cell));
    double s = ((ix + iy) % 2 == 0) ? 1.0 : -1.0;
    return make_vec({s * comp, s * comp});
  };
  return f;
}

DriftField DriftField::radial_jump(double bound, double radius) {
  if (bound < 0.0 || radius <= 0.0) throw ConfigError("radial_jump: bad parameters");
  DriftField f;
  f.dimension = 2;
  f.bound = bound;
  f.time_independent = true;
  f.preset = "radial_jump";
  double mid = 0.5 * radius;
  f.eval = [bound, mid](double, const Vec& x) {
    double r = x.norm();
    if (r < 1e-14) return Vec::Zero(2).eval();
    return (bound * sign_of(r - mid) / r * x).eval();
  };
  return f;
}

DriftField DriftField::from_preset(const std::string& name,
                                   const std::vector<double>& params, int dim) {
  auto need = [&](size_t n) {
    if (params.size() != n)
      throw ConfigError("drift preset '" + name + "': wrong parameter count");
  };
  if (name == "zero") {
    need(0);
    return zero(dim);
  }
  if (name == "constant") {
    if (params.size() != static_cast<size_t>(dim))
      throw ConfigError("drift preset 'constant': need one component per dimension");
    Vec c(dim);
    for (int i = 0; i < dim; ++i) c[i] = params[i];
    return constant(c);
  }
  if (name == "sign1d") {
    need(2);
    return sign1d(params[0], params[1]);
  }
  if (name == "checkerboard2d") {
    need(2);
    return checkerboard2d(params[0], params[1]);
  }
  if (name == "radial_jump") {
    need(2);
    return radial_jump(params[0], params[1]);
  }
  throw ConfigError("unknown drift preset '" + name + "'");
}

namespace {

double bump_raw(double s) {
  double u = 1.0 - s * s;
  return u > 0.0 ? std::exp(-1.0 / u) : 0.0;
}

double bump_norm1d() {
  static const double z = [] {
    int n = 1 << 14;
    double h = 2.0 / n;
    double acc = bump_raw(-1.0) + bump_raw(1.0);
    for (int i = 1; i < n; ++i)
      acc += bump_raw(-1.0 + i * h) * ((i & 1) ? 4.0 : 2.0);
    return acc * h / 3.0;
  }();
  return z;
}

}  // namespace

MollifierKernel::MollifierKernel(int space_dim, int level)
    : dim_(space_dim), level_(level), scale_(std::ldexp(1.0, -level)) {
  if (space_dim < 1 || level < 0)
    throw ConfigError("mollifier: dimension and level must be positive");
}

double MollifierKernel::profile1d(double s) const {
  return bump_raw(s) / bump_norm1d();
}

double MollifierKernel::factor(double z) const {
  return profile1d(z / scale_) / scale_;
}

double MollifierKernel::density(double t, const Vec& y) const {
  double v = factor(t);
  for (int i = 0; i < static_cast<int>(y.size()); ++i) v *= factor(y[i]);
  return v;
}

double MollifierKernel::mass(int panels) const {
  int n = 2 * panels;
  double h = 2.0 * scale_ / n;
  double acc = factor(-scale_) + factor(scale_);
  for (int i = 1; i < n; ++i)
    acc += factor(-scale_ + i * h) * ((i & 1) ? 4.0 : 2.0);
  double one_axis = acc * h / 3.0;
  return std::pow(one_axis, dim_ + 1);
}

namespace {

// Gauss-Legendre 4 on (-1,1); positive weights keep the normalized
// convolution a convex combination of drift values.
constexpr double kGlNode[4] = {-0.8611363115940526, -0.3399810435848563,
                               0.3399810435848563, 0.8611363115940526};
constexpr double kGlWeight[4] = {0.3478548451374538, 0.6521451548625461,
                                 0.6521451548625461, 0.3478548451374538};

struct MollCtx {
  const DriftField* b;
  const MollifierKernel* kernel;
  double t;
  const Vec* x;
  bool with_time;  // integrate the time-shift axis explicitly
  int axes;        // active integration axes
  double root_vol;
  double scale_b;
  double tol;  // per-unit-volume absolute target for num/scale_b and den
  int max_depth;
  long cells = 0;
  long cell_budget = 400000;
  double deficit_num = 0.0;
  double deficit_den = 0.0;
};

void cell_rule(const MollCtx& c, const Vec& lo, const Vec& hi, Vec& num,
               double& den) {
  int d = c.b->dimension;
  num = Vec::Zero(d);
  den = 0.0;
  int k = c.axes;
  int total = 1;
  for (int a = 0; a < k; ++a) total *= 4;
  Vec z(k);
  Vec y(d);
  for (int it = 0; it < total; ++it) {
    int rest = it;
    double w = 1.0;
    for (int a = 0; a < k; ++a) {
      int j = rest & 3;
      rest >>= 2;
      double half = 0.5 * (hi[a] - lo[a]);
      z[a] = 0.5 * (lo[a] + hi[a]) + half * kGlNode[j];
      w *= half * kGlWeight[j];
    }
    double psi = 1.0;
    for (int a = 0; a < k; ++a) psi *= c.kernel->factor(z[a]);
    if (psi <= 0.0) continue;
    double ts = c.with_time ? c.t - z[0] : c.t;
    int off = c.with_time ? 1 : 0;
    for (int i = 0; i < d; ++i) y[i] = (*c.x)[i] - z[off + i];
    num += (w * psi) * c.b->eval(ts, y);
    den += w * psi;
  }
}

void integrate_cell(MollCtx& c, const Vec& lo, const Vec& hi, const Vec& pnum,
                    double pden, int depth, Vec& num, double& den) {
  ++c.cells;
  int split = 0;
  for (int a = 1; a < c.axes; ++a)
    if (hi[a] - lo[a] > hi[split] - lo[split]) split = a;
  double mid = 0.5 * (lo[split] + hi[split]);
  Vec lo2 = lo, hi1 = hi;
  hi1[split] = mid;
  lo2[split] = mid;

  Vec n1, n2;
  double d1 = 0.0, d2 = 0.0;
  cell_rule(c, lo, hi1, n1, d1);
  cell_rule(c, lo2, hi, n2, d2);

  double est_num = (pnum - n1 - n2).cwiseAbs().maxCoeff() / c.scale_b;
  double est_den = std::abs(pden - d1 - d2);
  double vol = 1.0;
  for (int a = 0; a < c.axes; ++a) vol *= hi[a] - lo[a];
  double allow = c.tol * vol / c.root_vol;

  bool converged = est_num <= allow && est_den <= allow;
  bool capped = depth >= c.max_depth || c.cells > c.cell_budget;
  if (converged || capped) {
    if (!converged) {
      c.deficit_num += est_num;
      c.deficit_den += est_den;
    }
    num += n1 + n2;
    den += d1 + d2;
    return;
  }
  integrate_cell(c, lo, hi1, n1, d1, depth + 1, num, den);
  integrate_cell(c, lo2, hi, n2, d2, depth + 1, num, den);
}

}  // namespace

DriftField mollify(const DriftField& b, const MollifierKernel& kernel) {
  if (kernel.space_dimension() != b.dimension)
    throw GridMismatch("mollify: kernel dimension differs from drift dimension");
  if (std::abs(kernel.mass() - 1.0) > 1e-6)
    throw QuadratureFailure("mollify: kernel mass check failed");

  DriftField out;
  out.dimension = b.dimension;
  out.bound = b.bound;
  out.time_independent = b.time_independent;
  DriftField inner = b;
  MollifierKernel k = kernel;
  out.eval = [inner, k](double t, const Vec& x) {
    MollCtx c;
    c.b = &inner;
    c.kernel = &k;
    c.t = t;
    c.x = &x;
    c.with_time = !inner.time_independent;
    c.axes = inner.dimension + (c.with_time ? 1 : 0);
    c.scale_b = std::max(inner.bound, 1e-12);
    c.tol = 1e-6;
    c.max_depth = c.axes == 1 ? 26 : (c.axes == 2 ? 24 : 21);
    double r = k.scale();
    Vec lo = Vec::Constant(c.axes, -r), hi = Vec::Constant(c.axes, r);
    c.root_vol = std::pow(2.0 * r, c.axes);

    Vec pnum;
    double pden = 0.0;
    cell_rule(c, lo, hi, pnum, pden);
    Vec num = Vec::Zero(inner.dimension);
    double den = 0.0;
    integrate_cell(c, lo, hi, pnum, pden, 0, num, den);

    if (c.deficit_num > 1e-3 || c.deficit_den > 1e-3)
      throw QuadratureFailure("mollify: adaptive quadrature did not converge");
    if (den < 1e-12)
      throw QuadratureFailure("mollify: degenerate kernel mass in quadrature");
    return (num / den).eval();
  };
  return out;
}

SpaceTimeVectorField::SpaceTimeVectorField(
    std::vector<double> time_nodes, std::vector<std::vector<double>> axis_nodes,
    int out_dim, Interp interp)
    : times_(std::move(time_nodes)),
      axes_(std::move(axis_nodes)),
      out_dim_(out_dim),
      interp_(interp) {
  if (times_.empty()) throw GridMismatch("field: empty time grid");
  for (size_t i = 1; i < times_.size(); ++i)
    if (times_[i] <= times_[i - 1])
      throw GridMismatch("field: time grid must be strictly increasing");
  if (axes_.empty() || out_dim_ < 1)
    throw GridMismatch("field: need at least one axis and output dimension");
  nodes_per_slab_ = 1;
  for (const auto& ax : axes_) {
    if (ax.size() < 2) throw GridMismatch("field: axis needs at least 2 nodes");
    double step = (ax.back() - ax.front()) / (static_cast<double>(ax.size()) - 1.0);
    if (step <= 0.0) throw GridMismatch("field: axis must be increasing");
    for (size_t i = 1; i < ax.size(); ++i)
      if (std::abs(ax[i] - ax[i - 1] - step) > 1e-9 * std::max(1.0, std::abs(step)))
        throw GridMismatch("field: axis must be uniform");
    steps_.push_back(step);
    nodes_per_slab_ *= static_cast<std::int64_t>(ax.size());
  }
  values_.assign(times_.size(), Mat::Zero(nodes_per_slab_, out_dim_));
}

Vec SpaceTimeVectorField::node_point(std::int64_t flat) const {
  int d = in_dimension();
  Vec x(d);
  for (int a = d - 1; a >= 0; --a) {
    std::int64_t n = static_cast<std::int64_t>(axes_[a].size());
    x[a] = axes_[a][static_cast<size_t>(flat % n)];
    flat /= n;
  }
  return x;
}

void SpaceTimeVectorField::fill(
    const std::function<Vec(double, const Vec&)>& f) {
  for (int ti = 0; ti < num_times(); ++ti) {
    Mat& m = values_[ti];
    for (std::int64_t r = 0; r < nodes_per_slab_; ++r)
      m.row(r) = f(times_[ti], node_point(r)).transpose();
  }
}

SpaceTimeVectorField::AxisWeights SpaceTimeVectorField::axis_weights(
    int a, double x) const {
  const auto& ax = axes_[a];
  int n = static_cast<int>(ax.size());
  double u = (x - ax.front()) / steps_[a];
  int i = static_cast<int>(std::floor(u));
  i = std::clamp(i, 0, n - 2);
  double s = u - i;

  AxisWeights w;
  if (interp_ == Interp::linear || n == 2) {
    w.base = i;
    w.count = 2;
    w.w[0] = 1.0 - s;
    w.w[1] = s;
    return w;
  }
  double s2 = s * s, s3 = s2 * s;
  double wm = 0.5 * (-s3 + 2.0 * s2 - s);
  double w0 = 0.5 * (3.0 * s3 - 5.0 * s2 + 2.0);
  double w1 = 0.5 * (-3.0 * s3 + 4.0 * s2 + s);
  double w2 = 0.5 * (s3 - s2);
  if (i == 0) {
    // ghost f(-1) = 3 f0 - 3 f1 + f2 keeps quadratics exact
    w.base = 0;
    w.count = 3;
    w.w[0] = w0 + 3.0 * wm;
    w.w[1] = w1 - 3.0 * wm;
    w.w[2] = w2 + wm;
  } else if (i == n - 2) {
    w.base = i - 1;
    w.count = 3;
    w.w[0] = wm + w2;
    w.w[1] = w0 - 3.0 * w2;
    w.w[2] = w1 + 3.0 * w2;
  } else {
    w.base = i - 1;
    w.count = 4;
    w.w[0] = wm;
    w.w[1] = w0;
    w.w[2] = w1;
    w.w[3] = w2;
  }
  return w;
}

Vec SpaceTimeVectorField::value_on_slab(int time_index, const Vec& x) const {
  int d = in_dimension();
  std::vector<AxisWeights> ws(d);
  for (int a = 0; a < d; ++a) ws[a] = axis_weights(a, x[a]);

  std::vector<std::int64_t> stride(d, 1);
  for (int a = d - 2; a >= 0; --a)
    stride[a] = stride[a + 1] * static_cast<std::int64_t>(axes_[a + 1].size());

  const Mat& m = values_[time_index];
  Vec out = Vec::Zero(out_dim_);
  std::vector<int> idx(d, 0);
  while (true) {
    double w = 1.0;
    std::int64_t flat = 0;
    for (int a = 0; a < d; ++a) {
      w *= ws[a].w[idx[a]];
      flat += stride[a] * (ws[a].base + idx[a]);
    }
    if (w != 0.0) out += w * m.row(flat).transpose();
    int a = d - 1;
    while (a >= 0 && ++idx[a] == ws[a].count) idx[a--] = 0;
    if (a < 0) break;
  }
  return out;
}

Vec SpaceTimeVectorField::value(double t, const Vec& x) const {
  if (num_times() == 1) return value_on_slab(0, x);
  t = std::clamp(t, times_.front(), times_.back());
  auto it = std::upper_bound(times_.begin(), times_.end(), t);
  int hi = std::clamp(static_cast<int>(it - times_.begin()), 1, num_times() - 1);
  int lo = hi - 1;
  double s = (t - times_[lo]) / (times_[hi] - times_[lo]);
  if (s <= 0.0) return value_on_slab(lo, x);
  if (s >= 1.0) return value_on_slab(hi, x);
  return (1.0 - s) * value_on_slab(lo, x) + s * value_on_slab(hi, x);
}

Mat SpaceTimeVectorField::jacobian(double t, const Vec& x) const {
  int d = in_dimension();
  Mat j(out_dim_, d);
  for (int a = 0; a < d; ++a) {
    double h = steps_[a];
    Vec xp = x, xm = x;
    xp[a] += h;
    xm[a] -= h;
    j.col(a) = (value(t, xp) - value(t, xm)) / (2.0 * h);
  }
  return j;
}

Vec SpaceTimeVectorField::time_derivative(double t, const Vec& x) const {
  if (num_times() == 1) return Vec::Zero(out_dim_);
  t = std::clamp(t, times_.front(), times_.back());
  auto it = std::upper_bound(times_.begin(), times_.end(), t);
  int hi = std::clamp(static_cast<int>(it - times_.begin()), 1, num_times() - 1);
  int lo = hi - 1;
  // exact derivative of the piecewise-linear-in-time interpolant
  return (value_on_slab(hi, x) - value_on_slab(lo, x)) / (times_[hi] - times_[lo]);
}

namespace {

constexpr char kFieldMagic[9] = "RSDEFLD1";

void write_i32(std::ofstream& out, std::int32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64s(std::ofstream& out, const double* p, std::int64_t n) {
  out.write(reinterpret_cast<const char*>(p), n * static_cast<std::int64_t>(sizeof(double)));
}

std::int32_t read_i32(std::ifstream& in) {
  std::int32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void read_f64s(std::ifstream& in, double* p, std::int64_t n) {
  in.read(reinterpret_cast<char*>(p), n * static_cast<std::int64_t>(sizeof(double)));
}

}  // namespace

void SpaceTimeVectorField::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kFieldMagic, 8);
  write_i32(out, static_cast<std::int32_t>(in_dimension()));
  write_i32(out, static_cast<std::int32_t>(out_dim_));
  write_i32(out, interp_ == Interp::cubic ? 1 : 0);
  write_i32(out, static_cast<std::int32_t>(times_.size()));
  write_f64s(out, times_.data(), static_cast<std::int64_t>(times_.size()));
  for (const auto& ax : axes_) {
    write_i32(out, static_cast<std::int32_t>(ax.size()));
    write_f64s(out, ax.data(), static_cast<std::int64_t>(ax.size()));
  }
  std::vector<double> row(static_cast<size_t>(out_dim_));
  for (const Mat& m : values_)
    for (std::int64_t r = 0; r < nodes_per_slab_; ++r) {
      for (int cidx = 0; cidx < out_dim_; ++cidx) row[static_cast<size_t>(cidx)] = m(r, cidx);
      write_f64s(out, row.data(), out_dim_);
    }
  if (!out) throw IoError("write failed for '" + path + "'");
  out.close();

  nlohmann::json meta;
  meta["format"] = "RSDEFLD1";
  meta["in_dim"] = in_dimension();
  meta["out_dim"] = out_dim_;
  meta["interp"] = interp_ == Interp::cubic ? "cubic" : "linear";
  meta["times"] = times_;
  meta["axes"] = axes_;
  std::ofstream side(path + ".json", std::ios::trunc);
  if (!side) throw IoError("cannot open sidecar for '" + path + "'");
  side << meta.dump(2) << "\n";
}

SpaceTimeVectorField SpaceTimeVectorField::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[9] = {0};
  in.read(magic, 8);
  if (std::string(magic) != kFieldMagic)
    throw IoError("bad field file magic in '" + path + "'");
  int d = read_i32(in);
  int od = read_i32(in);
  int interp = read_i32(in);
  int nt = read_i32(in);
  if (!in || d < 1 || od < 1 || nt < 1)
    throw IoError("corrupt field header in '" + path + "'");
  std::vector<double> times(static_cast<size_t>(nt));
  read_f64s(in, times.data(), nt);
  std::vector<std::vector<double>> axes(static_cast<size_t>(d));
  for (auto& ax : axes) {
    int n = read_i32(in);
    if (!in || n < 2) throw IoError("corrupt axis in '" + path + "'");
    ax.resize(static_cast<size_t>(n));
    read_f64s(in, ax.data(), n);
  }
  SpaceTimeVectorField f(std::move(times), std::move(axes), od,
                         interp ? Interp::cubic : Interp::linear);
  std::vector<double> row(static_cast<size_t>(od));
  for (int ti = 0; ti < f.num_times(); ++ti)
    for (std::int64_t r = 0; r < f.nodes_per_slab(); ++r) {
      read_f64s(in, row.data(), od);
      for (int cidx = 0; cidx < od; ++cidx) f.slab(ti)(r, cidx) = row[static_cast<size_t>(cidx)];
    }
  if (!in) throw IoError("truncated field payload in '" + path + "'");
  return f;
}

SpaceTimeRegion SpaceTimeRegion::cylinder(const DomainSpec& dom, double t0,
                                          double t1) {
  SpaceTimeRegion r;
  r.t0 = t0;
  r.t1 = t1;
  dom.bounding_box(r.lo, r.hi);
  DomainSpec d = dom;
  r.contains = [d](double, const Vec& x) { return d.inside_closed(x); };
  return r;
}

double norm_Lp_spacetime(const std::function<double(double, const Vec&)>& f,
                         double p, const SpaceTimeRegion& region,
                         int base_resolution, int max_resolution) {
  if (p < 1.0) throw ConfigError("norm_Lp_spacetime: p must be >= 1");
  if (region.lo.size() != region.hi.size() || region.lo.size() == 0)
    throw GridMismatch("norm_Lp_spacetime: bad region box");
  int d = static_cast<int>(region.lo.size());

  auto level = [&](int n) {
    double dt = (region.t1 - region.t0) / n;
    double cell = dt;
    std::vector<double> h(static_cast<size_t>(d));
    for (int a = 0; a < d; ++a) {
      h[static_cast<size_t>(a)] = (region.hi[a] - region.lo[a]) / n;
      cell *= h[static_cast<size_t>(a)];
    }
    std::int64_t nodes = 1;
    for (int a = 0; a < d; ++a) nodes *= n;
    double acc = 0.0;
    Vec x(d);
    for (int ti = 0; ti < n; ++ti) {
      double t = region.t0 + (ti + 0.5) * dt;
      for (std::int64_t flat = 0; flat < nodes; ++flat) {
        std::int64_t rest = flat;
        for (int a = d - 1; a >= 0; --a) {
          x[a] = region.lo[a] + (static_cast<double>(rest % n) + 0.5) * h[static_cast<size_t>(a)];
          rest /= n;
        }
        if (region.contains && !region.contains(t, x)) continue;
        acc += std::pow(std::abs(f(t, x)), p);
      }
    }
    return std::pow(acc * cell, 1.0 / p);
  };

  double prev = level(base_resolution);
  int n = base_resolution;
  while (n < max_resolution) {
    n = std::min(2 * n, max_resolution);
    double cur = level(n);
    if (std::abs(cur - prev) <= 5e-4 * std::max(std::abs(cur), 1e-300)) return cur;
    prev = cur;
  }
  return prev;
}

}  // namespace rsde
