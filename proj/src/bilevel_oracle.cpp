#include "endtask/bilevel_oracle.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "endtask/prng.hpp"

namespace endtask::bilevel {

double QuadraticForm::value(const Eigen::VectorXd& theta) const {
  return 0.5 * theta.dot(A * theta) - b.dot(theta) + c;
}

Eigen::VectorXd QuadraticForm::gradient(const Eigen::VectorXd& theta) const { return A * theta - b; }

void QuadraticTaskSet::validate() const {
  const auto d = static_cast<Eigen::Index>(dim());
  if (d == 0 || tasks.empty()) throw std::invalid_argument("quadratic task set is empty");
  if (w.size() != static_cast<Eigen::Index>(tasks.size())) throw std::invalid_argument("one weight per task required");
  auto check = [d](const QuadraticForm& f) {
    if (f.A.rows() != d || f.A.cols() != d || f.b.size() != d) throw std::invalid_argument("quadratic dims mismatch");
    if ((f.A - f.A.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw std::invalid_argument("A is not symmetric");
  };
  for (const auto& t : tasks) check(t);
  check(val);
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (!(w[i] > 0.0)) throw std::invalid_argument("task weights must be positive");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(total_hessian(*this, w), Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() <= 1e-9) throw IllConditionedError("A(w) is not positive definite");
}

Eigen::MatrixXd total_hessian(const QuadraticTaskSet& q, const Eigen::VectorXd& w) {
  if (w.size() != static_cast<Eigen::Index>(q.tasks.size())) throw std::invalid_argument("one weight per task required");
  const auto d = static_cast<Eigen::Index>(q.dim());
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t i = 0; i < q.tasks.size(); ++i) H += w[static_cast<Eigen::Index>(i)] * q.tasks[i].A;
  return H;
}

double condition_number(const Eigen::MatrixXd& symmetric) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetric, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  const double lo = ev.cwiseAbs().minCoeff();
  const double hi = ev.cwiseAbs().maxCoeff();
  return lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
}

namespace {

Eigen::VectorXd total_linear(const QuadraticTaskSet& q, const Eigen::VectorXd& w) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q.dim()));
  for (std::size_t i = 0; i < q.tasks.size(); ++i) b += w[static_cast<Eigen::Index>(i)] * q.tasks[i].b;
  return b;
}

// Factorization of A(w) after the conditioning checks.
Eigen::LLT<Eigen::MatrixXd> factor_hessian(const Eigen::MatrixXd& H) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo <= 1e-9) throw IllConditionedError("total Hessian is singular or indefinite (min eigenvalue " + std::to_string(lo) + ")");
  if (hi / lo > 1e12) throw IllConditionedError("total Hessian condition number exceeds 1e12");
  Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() != Eigen::Success) throw IllConditionedError("Cholesky factorization failed");
  return llt;
}

std::size_t check_index(const QuadraticTaskSet& q, std::size_t i) {
  if (i >= q.tasks.size()) throw std::out_of_range("task index out of range");
  return i;
}

}  // namespace

Eigen::VectorXd solve_inner(const QuadraticTaskSet& q, const Eigen::VectorXd& w) {
  const Eigen::MatrixXd H = total_hessian(q, w);
  const Eigen::VectorXd b = total_linear(q, w);
  const auto llt = factor_hessian(H);
  Eigen::VectorXd theta = llt.solve(b);
  if ((H * theta - b).norm() > 1e-10 * b.norm()) {
    // One step of iterative refinement before giving up.
    theta += llt.solve(b - H * theta);
    if ((H * theta - b).norm() > 1e-10 * b.norm()) throw IllConditionedError("inner solve residual too large");
  }
  return theta;
}

double exact_hypergradient(const QuadraticTaskSet& q, const Eigen::VectorXd& w, std::size_t i) {
  check_index(q, i);
  const Eigen::VectorXd theta = solve_inner(q, w);
  const auto llt = factor_hessian(total_hessian(q, w));
  const Eigen::VectorXd dtheta = llt.solve(q.tasks[i].gradient(theta));
  return -q.val.gradient(theta).dot(dtheta);
}

double finite_difference_hypergradient(const QuadraticTaskSet& q, const Eigen::VectorXd& w, std::size_t i, double h) {
  check_index(q, i);
  if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  Eigen::VectorXd up = w, down = w;
  up[static_cast<Eigen::Index>(i)] += h;
  down[static_cast<Eigen::Index>(i)] -= h;
  double f_up = 0.0, f_down = 0.0;
  try {
    f_up = q.val.value(solve_inner(q, up));
    f_down = q.val.value(solve_inner(q, down));
  } catch (const IllConditionedError& e) {
    throw IllConditionedError(std::string("perturbed weights break positive definiteness: ") + e.what());
  }
  return (f_up - f_down) / (2.0 * h);
}

Eigen::VectorXd proxy_point(const QuadraticTaskSet& q, const Eigen::VectorXd& w, const ProxyMode& mode) {
  if (mode.kind == ProxyKind::exact) return solve_inner(q, w);
  const Eigen::MatrixXd H = total_hessian(q, w);
  const Eigen::VectorXd b = total_linear(q, w);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H, Eigen::EigenvaluesOnly);
  const double step = 1.0 / es.eigenvalues().maxCoeff();
  Rng rng = Rng::substream(mode.seed, Stream::init, 0);
  Eigen::VectorXd theta(static_cast<Eigen::Index>(q.dim()));
  for (Eigen::Index k = 0; k < theta.size(); ++k) theta[k] = rng.normal();
  for (std::size_t s = 0; s < mode.inner_steps; ++s) theta -= step * (H * theta - b);
  return theta;
}

double identity_hessian_approx(const QuadraticTaskSet& q, const Eigen::VectorXd& w, std::size_t i,
                               const ProxyMode& mode) {
  check_index(q, i);
  const Eigen::VectorXd theta = proxy_point(q, w, mode);
  return -q.val.gradient(theta).dot(q.tasks[i].gradient(theta));
}

double one_step_approx(const QuadraticTaskSet& q, const Eigen::VectorXd& w, const Eigen::VectorXd& theta_t,
                       std::size_t i, double beta) {
  check_index(q, i);
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  if (theta_t.size() != static_cast<Eigen::Index>(q.dim()) || w.size() != static_cast<Eigen::Index>(q.tasks.size())) {
    throw std::invalid_argument("dimension mismatch");
  }
  return -beta * q.tasks[i].gradient(theta_t).dot(q.val.gradient(theta_t));
}

Eigen::MatrixXd neumann_inverse(const Eigen::MatrixXd& H, std::size_t k) {
  if (H.rows() != H.cols()) throw std::invalid_argument("neumann_inverse needs a square matrix");
  if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw std::invalid_argument("H must be symmetric");
  const auto d = H.rows();
  const Eigen::MatrixXd M = Eigen::MatrixXd::Identity(d, d) - H;
  Eigen::MatrixXd term = Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd acc = term;
  for (std::size_t j = 1; j <= k; ++j) {
    term = term * M;
    acc += term;
  }
  return acc;
}

double neumann_error(const Eigen::MatrixXd& H, std::size_t k) {
  const Eigen::MatrixXd diff = neumann_inverse(H, k) - H.inverse();
  const Eigen::MatrixXd sym = 0.5 * (diff + diff.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

Eigen::MatrixXd random_spd(const Eigen::VectorXd& eigenvalues, std::uint64_t seed) {
  const auto d = eigenvalues.size();
  Rng rng = Rng::substream(seed, Stream::init, 1);
  Eigen::MatrixXd g(d, d);
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index r = 0; r < d; ++r) g(r, c) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd A = Q * eigenvalues.asDiagonal() * Q.transpose();
  return 0.5 * (A + A.transpose());
}

QuadraticTaskSet random_instance(const InstanceSpec& spec, std::uint64_t seed) {
  if (spec.dim == 0 || !(spec.eig_lo > 0.0) || spec.eig_hi < spec.eig_lo) throw std::invalid_argument("bad instance spec");
  const auto d = static_cast<Eigen::Index>(spec.dim);
  Rng rng = Rng::substream(seed, Stream::init, 0);
  auto make_form = [&](std::uint64_t k) {
    Eigen::VectorXd ev(d);
    for (Eigen::Index j = 0; j < d; ++j) ev[j] = rng.uniform(spec.eig_lo, spec.eig_hi);
    QuadraticForm f;
    f.A = random_spd(ev, derive_seed(seed, k));
    f.b.resize(d);
    for (Eigen::Index j = 0; j < d; ++j) f.b[j] = rng.normal();
    return f;
  };
  QuadraticTaskSet q;
  for (std::size_t t = 0; t <= spec.n_aux; ++t) q.tasks.push_back(make_form(t));
  q.val = make_form(spec.n_aux + 1);
  q.w.resize(static_cast<Eigen::Index>(spec.n_aux + 1));
  for (Eigen::Index t = 0; t < q.w.size(); ++t) q.w[t] = rng.uniform(0.5, 1.5);
  q.w /= q.w.sum();
  q.validate();
  return q;
}

QuadraticTaskSet one_dimensional_instance(double a, double c, double v, double w_end, double w_aux) {
  // (theta - x)^2 = 1/2 * 2 theta^2 - 2x theta + x^2
  auto square = [](double x) {
    QuadraticForm f;
    f.A = Eigen::MatrixXd::Constant(1, 1, 2.0);
    f.b = Eigen::VectorXd::Constant(1, 2.0 * x);
    f.c = x * x;
    return f;
  };
  QuadraticTaskSet q;
  q.tasks = {square(a), square(c)};
  q.val = square(v);
  q.w = Eigen::Vector2d(w_end, w_aux);
  q.validate();
  return q;
}

}  // namespace endtask::bilevel
