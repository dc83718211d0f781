#include "locpriv/lp_solver.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <cmath>
#include <limits>

#include "locpriv/errors.hpp"

namespace locpriv::lp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Dense tableau simplex in the classic competitive-programming layout
// (KACTL): maximize c'x subject to Ax <= b, x >= 0.  Phase 2 drives an
// artificial variable out when some b_i < 0; ties in the entering and
// leaving rules are broken by variable index to guarantee termination.
struct Tableau {
    int m, n;
    double eps;
    std::vector<int> N, B;
    std::vector<std::vector<double>> D;

    Tableau(const std::vector<std::vector<double>>& A, const std::vector<double>& b,
            const std::vector<double>& c, double eps_)
        : m(static_cast<int>(b.size())),
          n(static_cast<int>(c.size())),
          eps(eps_),
          N(n + 1),
          B(m),
          D(m + 2, std::vector<double>(n + 2)) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) D[i][j] = A[i][j];
        for (int i = 0; i < m; ++i) {
            B[i] = n + i;
            D[i][n] = -1;
            D[i][n + 1] = b[i];
        }
        for (int j = 0; j < n; ++j) {
            N[j] = j;
            D[m][j] = -c[j];
        }
        N[n] = -1;
        D[m + 1][n] = 1;
    }

    void pivot(int r, int s) {
        double* a = D[r].data();
        double inv = 1.0 / a[s];
        for (int i = 0; i < m + 2; ++i) {
            if (i != r && std::fabs(D[i][s]) > eps) {
                double* bi = D[i].data();
                double inv2 = bi[s] * inv;
                for (int j = 0; j < n + 2; ++j) bi[j] -= a[j] * inv2;
                bi[s] = a[s] * inv2;
            }
        }
        for (int j = 0; j < n + 2; ++j)
            if (j != s) D[r][j] *= inv;
        for (int i = 0; i < m + 2; ++i)
            if (i != r) D[i][s] *= -inv;
        D[r][s] = inv;
        std::swap(B[r], N[s]);
    }

    bool simplex(int phase) {
        int x = m + phase - 1;
        // Dantzig pricing is fast but can cycle on degenerate bases
        // (Beale's example does).  After a pivot budget proportional to
        // the problem size we switch to Bland's rule, which terminates
        // unconditionally; a hard cap turns a solver bug into an error
        // instead of a hang.
        const long bland_after = 200 + 4L * (m + n);
        const long hard_cap = 2000000;
        for (long pivots = 0;; ++pivots) {
            if (pivots > hard_cap) throw locpriv::Error("simplex: pivot cap exceeded");
            const bool bland = pivots >= bland_after;
            int s = -1;
            for (int j = 0; j < n + 1; ++j) {
                if (N[j] == -phase) continue;
                if (bland) {
                    if (D[x][j] < -eps && (s == -1 || N[j] < N[s])) s = j;
                } else if (s == -1 ||
                           std::make_pair(D[x][j], N[j]) < std::make_pair(D[x][s], N[s])) {
                    s = j;
                }
            }
            if (s == -1 || D[x][s] >= -eps) return true;
            int r = -1;
            for (int i = 0; i < m; ++i) {
                if (D[i][s] <= eps) continue;
                if (r == -1 || std::make_pair(D[i][n + 1] / D[i][s], B[i]) <
                                   std::make_pair(D[r][n + 1] / D[r][s], B[r]))
                    r = i;
            }
            if (r == -1) return false;  // unbounded in direction s
            pivot(r, s);
        }
    }

    // Returns the maximum of c'x, -inf when infeasible, +inf when
    // unbounded; the optimal point lands in x.
    double solve(std::vector<double>& x) {
        int r = 0;
        for (int i = 1; i < m; ++i)
            if (D[i][n + 1] < D[r][n + 1]) r = i;
        if (m > 0 && D[r][n + 1] < -eps) {
            pivot(r, n);
            if (!simplex(2) || D[m + 1][n + 1] < -eps) return -kInf;
            for (int i = 0; i < m; ++i) {
                if (B[i] != -1) continue;
                int s = 0;
                for (int j = 1; j < n + 1; ++j)
                    if (std::make_pair(D[i][j], N[j]) < std::make_pair(D[i][s], N[s])) s = j;
                pivot(i, s);
            }
        }
        bool ok = simplex(1);
        x.assign(n, 0.0);
        for (int i = 0; i < m; ++i)
            if (B[i] < n) x[B[i]] = D[i][n + 1];
        return ok ? D[m][n + 1] : kInf;
    }
};

}  // namespace

namespace {

// Hundreds of pivots smear O(1e-8) error across the tableau, enough to
// break audits that expect 1e-9 feasibility.  The terminal basis itself
// is fine, so recompute the basic values from the *original* data: put
// slack columns next to A, pick the basic columns, solve B y = b.  The
// basis matrix is mostly unit slack columns, hence the sparse LU.
// Returns false when the basis is singular (leave the tableau answer).
bool refine_basic_solution(const std::vector<std::vector<double>>& A,
                           const std::vector<double>& b, const std::vector<int>& basis,
                           std::size_t n, std::vector<double>& x) {
    const std::size_t m = b.size();
    if (m == 0) return true;
    std::vector<Eigen::Triplet<double>> triplets;
    Eigen::VectorXd rhs(static_cast<Eigen::Index>(m));
    for (std::size_t i = 0; i < m; ++i) {
        rhs[static_cast<Eigen::Index>(i)] = b[i];
        int var = basis[i];
        if (var < 0) return false;  // artificial survived; basis unusable
        if (static_cast<std::size_t>(var) < n) {
            for (std::size_t r = 0; r < m; ++r) {
                double coeff = A[r][static_cast<std::size_t>(var)];
                if (coeff != 0.0)
                    triplets.emplace_back(static_cast<int>(r), static_cast<int>(i), coeff);
            }
        } else {
            triplets.emplace_back(static_cast<int>(var) - static_cast<int>(n),
                                  static_cast<int>(i), 1.0);
        }
    }
    Eigen::SparseMatrix<double> B(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    B.setFromTriplets(triplets.begin(), triplets.end());
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(B);
    if (lu.info() != Eigen::Success) return false;
    Eigen::VectorXd y = lu.solve(rhs);
    if ((B * y - rhs).lpNorm<Eigen::Infinity>() >
        1e-7 * std::max(1.0, rhs.lpNorm<Eigen::Infinity>()))
        return false;
    std::vector<double> refined(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        if (static_cast<std::size_t>(basis[i]) < n)
            refined[static_cast<std::size_t>(basis[i])] = y[static_cast<Eigen::Index>(i)];
    x = std::move(refined);
    return true;
}

}  // namespace

Solution DenseSimplexSolver::minimize(const std::vector<double>& objective,
                                      const std::vector<Constraint>& constraints) {
    const std::size_t n = objective.size();
    std::vector<std::vector<double>> A(constraints.size(), std::vector<double>(n, 0.0));
    std::vector<double> b(constraints.size());
    for (std::size_t i = 0; i < constraints.size(); ++i) {
        for (const auto& [idx, coeff] : constraints[i].terms) {
            if (idx >= n) throw DimensionMismatch("lp: constraint term index out of range");
            A[i][idx] += coeff;
        }
        b[i] = constraints[i].rhs;
    }
    // The tableau maximizes, so feed it -c and flip the sign back.
    std::vector<double> neg_c(n);
    for (std::size_t j = 0; j < n; ++j) neg_c[j] = -objective[j];

    Tableau t(A, b, neg_c, eps_);
    Solution sol;
    double value = t.solve(sol.x);
    if (value == -kInf) {
        sol.status = Status::Infeasible;
        sol.x.clear();
    } else if (value == kInf) {
        sol.status = Status::Unbounded;
        sol.x.clear();
    } else {
        sol.status = Status::Optimal;
        std::vector<double> refined = sol.x;
        bool dbg_solved = refine_basic_solution(A, b, t.B, n, refined);
        if (std::getenv("LP_DEBUG")) std::fprintf(stderr, "refine solved=%d\n", dbg_solved);
        if (dbg_solved) {
            // A degenerate basis can be numerically feasible in the
            // tableau yet exactly infeasible; only adopt the refined
            // vertex when it actually satisfies the original system.
            bool feasible = true;
            for (double xj : refined)
                if (xj < -1e-9) feasible = false;
            for (std::size_t i = 0; i < b.size() && feasible; ++i) {
                double lhs = 0.0;
                for (std::size_t j = 0; j < n; ++j) lhs += A[i][j] * refined[j];
                if (lhs > b[i] + 1e-9) feasible = false;
            }
            if (feasible) sol.x = std::move(refined);
        }
        double obj = 0.0;
        for (std::size_t j = 0; j < n; ++j) obj += objective[j] * sol.x[j];
        sol.objective = obj;
    }
    return sol;
}

std::unique_ptr<Solver> make_solver() { return std::make_unique<DenseSimplexSolver>(); }

}  // namespace locpriv::lp
