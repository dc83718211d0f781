#pragma once

#include <cstddef>
#include <memory>
#include <utility>
#include <vector>

namespace locpriv::lp {

// One inequality: sum of coeff * x[index] over terms  <=  rhs.
// Equalities are encoded by callers as a <= / >= pair.
struct Constraint {
    std::vector<std::pair<std::size_t, double>> terms;
    double rhs = 0.0;
};

enum class Status { Optimal, Infeasible, Unbounded };

struct Solution {
    Status status = Status::Infeasible;
    double objective = 0.0;  // c'x at the optimum (minimization)
    std::vector<double> x;   // empty unless status == Optimal
};

// Minimal solver interface: minimize c'x subject to Ax <= b and x >= 0.
// Kept abstract so mechanism synthesis can swap in another backend.
class Solver {
  public:
    virtual ~Solver() = default;
    virtual Solution minimize(const std::vector<double>& objective,
                              const std::vector<Constraint>& constraints) = 0;
};

// Two-phase dense-tableau simplex.  Pricing starts out Dantzig-style
// (most negative reduced cost, index tie-break) and falls back to
// Bland's rule after a pivot budget, so degenerate instances terminate.
class DenseSimplexSolver final : public Solver {
  public:
    explicit DenseSimplexSolver(double eps = 1e-9) : eps_(eps) {}
    Solution minimize(const std::vector<double>& objective,
                      const std::vector<Constraint>& constraints) override;

  private:
    double eps_;
};

std::unique_ptr<Solver> make_solver();

}  // namespace locpriv::lp
