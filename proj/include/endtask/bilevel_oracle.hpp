#pragma once

// Exact and approximate hypergradients on quadratic bilevel problems.
//
// Each task loss is L_i(theta) = 1/2 theta^T A_i theta - b_i^T theta + c_i.
// The inner problem minimizes L_total = sum_i w_i L_i, so theta*(w) solves
// A(w) theta = b(w). The outer objective is a separate quadratic L_val.
//
// Sign convention: every value here is a derivative of L_val(theta*(w)) with
// respect to w_i, using the implicit-function-theorem sign
//   dL_val/dw_i = -grad L_val(theta*)^T [A(w)]^-1 grad L_i(theta*),
// which agrees with central finite differences. The approximations are
// reported in the same convention so they can be compared directly.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace endtask::bilevel {

class IllConditionedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QuadraticForm {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  double c = 0.0;

  double value(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& theta) const;
};

struct QuadraticTaskSet {
  std::vector<QuadraticForm> tasks;  // tasks[0] is the end task
  QuadraticForm val;
  Eigen::VectorXd w;

  std::size_t dim() const { return static_cast<std::size_t>(val.b.size()); }
  // Symmetry within 1e-12 and A(w) positive definite for the stored w.
  void validate() const;
};

Eigen::MatrixXd total_hessian(const QuadraticTaskSet& q, const Eigen::VectorXd& w);
double condition_number(const Eigen::MatrixXd& symmetric);

// Throws IllConditionedError when the smallest eigenvalue of A(w) is <= 1e-9
// or the condition number exceeds 1e12.
Eigen::VectorXd solve_inner(const QuadraticTaskSet& q, const Eigen::VectorXd& w);

double exact_hypergradient(const QuadraticTaskSet& q, const Eigen::VectorXd& w, std::size_t i);

// (L_val(theta*(w + h e_i)) - L_val(theta*(w - h e_i))) / 2h
double finite_difference_hypergradient(const QuadraticTaskSet& q, const Eigen::VectorXd& w, std::size_t i, double h);

enum class ProxyKind { exact, meta_head };

struct ProxyMode {
  ProxyKind kind = ProxyKind::exact;
  // meta_head: gradient descent on L_total from a seeded N(0, I) start,
  // step 1 / lambda_max(A(w)).
  std::size_t inner_steps = 5;
  std::uint64_t seed = 0;
};

Eigen::VectorXd proxy_point(const QuadraticTaskSet& q, const Eigen::VectorXd& w, const ProxyMode& mode);

// -grad L_val(theta_p)^T grad L_i(theta_p): the inverse Hessian replaced by I.
double identity_hessian_approx(const QuadraticTaskSet& q, const Eigen::VectorXd& w, std::size_t i,
                               const ProxyMode& mode = {});

// -beta grad L_i(theta_t)^T grad L_val(theta_t) at the current iterate.
double one_step_approx(const QuadraticTaskSet& q, const Eigen::VectorXd& w, const Eigen::VectorXd& theta_t,
                       std::size_t i, double beta);

// sum_{j=0}^{k} (I - H)^j
Eigen::MatrixXd neumann_inverse(const Eigen::MatrixXd& H, std::size_t k);
// Spectral norm of neumann_inverse(H, k) - H^-1.
double neumann_error(const Eigen::MatrixXd& H, std::size_t k);

// Symmetric matrix Q diag(eigenvalues) Q^T with Q a seeded random rotation.
Eigen::MatrixXd random_spd(const Eigen::VectorXd& eigenvalues, std::uint64_t seed);

struct InstanceSpec {
  std::size_t dim = 5;
  std::size_t n_aux = 2;
  double eig_lo = 0.5;
  double eig_hi = 2.0;
};

// Every A_i (and A_val) has its spectrum drawn in [eig_lo, eig_hi] and w sums
// to 1, so A(w) has its spectrum in the same interval.
QuadraticTaskSet random_instance(const InstanceSpec& spec, std::uint64_t seed);

// 1-D: L_end = (theta - a)^2, L_1 = (theta - c)^2, L_val = (theta - v)^2.
QuadraticTaskSet one_dimensional_instance(double a, double c, double v, double w_end, double w_aux);

}  // namespace endtask::bilevel
