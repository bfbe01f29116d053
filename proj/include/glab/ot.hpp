#pragma once

#include "glab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace glab {

// Finitely supported distribution over images (scalars are [1] tensors).
struct DiscretePdf {
    std::vector<Tensor> support;
    std::vector<double> weights;

    void validate() const {
        if (support.empty() || support.size() != weights.size())
            throw std::invalid_argument("DiscretePdf: support/weight size mismatch");
        if (support.size() > 64) throw std::invalid_argument("DiscretePdf: support larger than 64 points");
        double s = 0.0;
        for (double w : weights) {
            if (w < 0.0) throw std::invalid_argument("DiscretePdf: negative weight");
            s += w;
        }
        if (std::fabs(s - 1.0) > 1e-12)
            throw std::invalid_argument("DiscretePdf: weights sum to " + std::to_string(s) + ", not 1");
        for (const Tensor& t : support)
            if (t.shape() != support[0].shape())
                throw std::invalid_argument("DiscretePdf: support extents differ");
    }
};

// Finitely supported joint over (X, Y): X marginal points with conditional
// pdfs over Y.
struct DiscreteJoint {
    std::vector<Tensor> x_points;
    std::vector<DiscretePdf> conditionals;
    std::vector<double> x_weights;

    void validate() const {
        if (x_points.empty() || x_points.size() != conditionals.size() || x_points.size() != x_weights.size())
            throw std::invalid_argument("DiscreteJoint: field size mismatch");
        double s = 0.0;
        for (double w : x_weights) s += w;
        if (std::fabs(s - 1.0) > 1e-12)
            throw std::invalid_argument("DiscreteJoint: marginal weights sum to " + std::to_string(s));
        for (const DiscretePdf& c : conditionals) c.validate();
    }
};

struct CouplingMatrix {
    int rows = 0, cols = 0;
    std::vector<double> pi; // row-major, rows x cols

    double at(int j, int k) const { return pi[static_cast<std::size_t>(j) * cols + k]; }
};

inline double lp_ground_norm(const Tensor& a, const Tensor& b, double p) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("ground norm: extents differ: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    double s = 0.0;
    for (int i = 0; i < a.numel(); ++i) s += std::pow(std::fabs(a[i] - b[i]), p);
    return std::pow(s, 1.0 / p);
}

namespace detail {

// Transportation problem min sum pi_jk c_jk over the Birkhoff-like polytope
// with row sums a and column sums b. Network simplex on the bipartite graph;
// exact at these sizes.
class TransportSimplex {
public:
    TransportSimplex(std::vector<double> a, std::vector<double> b, std::vector<double> cost)
        : n_(static_cast<int>(a.size())), m_(static_cast<int>(b.size())), a_(std::move(a)), b_(std::move(b)),
          c_(std::move(cost)), flow_(static_cast<std::size_t>(n_) * m_, 0.0),
          basic_(static_cast<std::size_t>(n_) * m_, false) {}

    void solve() {
        northwest_corner();
        double scale = 1e-12;
        for (double c : c_) scale = std::max(scale, std::fabs(c));
        const double tol = 1e-13 * scale;

        const long max_pivots = 50000;
        long pivots = 0;
        const long bland_after = 4L * n_ * m_ + 64;
        while (true) {
            compute_potentials();
            int ej = -1, ek = -1;
            double best = -tol;
            for (int j = 0; j < n_; ++j)
                for (int k = 0; k < m_; ++k) {
                    if (basic_[idx(j, k)]) continue;
                    const double r = c_[idx(j, k)] - u_[static_cast<std::size_t>(j)] - v_[static_cast<std::size_t>(k)];
                    if (pivots >= bland_after) {
                        if (r < -tol) { ej = j; ek = k; goto found; }
                    } else if (r < best) {
                        best = r;
                        ej = j;
                        ek = k;
                    }
                }
        found:
            if (ej < 0) break;
            pivot(ej, ek);
            if (++pivots > max_pivots)
                throw std::runtime_error("transport simplex: pivot limit exceeded");
        }
    }

    double objective() const {
        double s = 0.0;
        for (std::size_t i = 0; i < flow_.size(); ++i) s += flow_[i] * c_[i];
        return s;
    }
    const std::vector<double>& flow() const { return flow_; }
    const std::vector<double>& row_potentials() const { return u_; }
    const std::vector<double>& col_potentials() const { return v_; }

private:
    std::size_t idx(int j, int k) const { return static_cast<std::size_t>(j) * m_ + k; }

    void northwest_corner() {
        std::vector<double> ra = a_, rb = b_;
        int j = 0, k = 0;
        int placed = 0;
        while (j < n_ && k < m_) {
            const double f = std::min(ra[static_cast<std::size_t>(j)], rb[static_cast<std::size_t>(k)]);
            flow_[idx(j, k)] = f;
            basic_[idx(j, k)] = true;
            ++placed;
            ra[static_cast<std::size_t>(j)] -= f;
            rb[static_cast<std::size_t>(k)] -= f;
            if (j == n_ - 1 && k == m_ - 1) break;
            // advance along the smaller residual; on ties prefer the row so a
            // degenerate zero keeps the basis a spanning tree
            if (ra[static_cast<std::size_t>(j)] <= rb[static_cast<std::size_t>(k)] && j < n_ - 1)
                ++j;
            else
                ++k;
        }
        (void)placed; // n_ + m_ - 1 cells, possibly with zero flows
    }

    void compute_potentials() {
        u_.assign(static_cast<std::size_t>(n_), std::numeric_limits<double>::quiet_NaN());
        v_.assign(static_cast<std::size_t>(m_), std::numeric_limits<double>::quiet_NaN());
        u_[0] = 0.0;
        // propagate over the basis tree
        bool changed = true;
        while (changed) {
            changed = false;
            for (int j = 0; j < n_; ++j)
                for (int k = 0; k < m_; ++k) {
                    if (!basic_[idx(j, k)]) continue;
                    const bool ju = !std::isnan(u_[static_cast<std::size_t>(j)]);
                    const bool kv = !std::isnan(v_[static_cast<std::size_t>(k)]);
                    if (ju && !kv) {
                        v_[static_cast<std::size_t>(k)] = c_[idx(j, k)] - u_[static_cast<std::size_t>(j)];
                        changed = true;
                    } else if (!ju && kv) {
                        u_[static_cast<std::size_t>(j)] = c_[idx(j, k)] - v_[static_cast<std::size_t>(k)];
                        changed = true;
                    }
                }
        }
        // disconnected components can appear under degeneracy; anchor them
        for (int j = 0; j < n_; ++j)
            if (std::isnan(u_[static_cast<std::size_t>(j)])) u_[static_cast<std::size_t>(j)] = 0.0;
        for (int k = 0; k < m_; ++k)
            if (std::isnan(v_[static_cast<std::size_t>(k)])) {
                // attach via the cheapest arc to keep reduced costs sane
                double best = std::numeric_limits<double>::infinity();
                for (int j = 0; j < n_; ++j)
                    best = std::min(best, c_[idx(j, k)] - u_[static_cast<std::size_t>(j)]);
                v_[static_cast<std::size_t>(k)] = best;
            }
    }

    // entering arc (ej, ek): find the unique cycle in basis + entering arc,
    // alternate signs, move the max flow step.
    void pivot(int ej, int ek) {
        // bipartite cycle search: path from row ej to col ek through basic arcs
        // state: nodes 0..n-1 rows, n..n+m-1 cols
        const int N = n_ + m_;
        std::vector<int> parent(static_cast<std::size_t>(N), -1);
        std::vector<bool> seen(static_cast<std::size_t>(N), false);
        std::vector<int> stack{ej};
        seen[static_cast<std::size_t>(ej)] = true;
        while (!stack.empty()) {
            const int node = stack.back();
            stack.pop_back();
            if (node == n_ + ek) break;
            if (node < n_) {
                for (int k = 0; k < m_; ++k)
                    if (basic_[idx(node, k)] && !seen[static_cast<std::size_t>(n_ + k)]) {
                        seen[static_cast<std::size_t>(n_ + k)] = true;
                        parent[static_cast<std::size_t>(n_ + k)] = node;
                        stack.push_back(n_ + k);
                    }
            } else {
                const int k = node - n_;
                for (int j = 0; j < n_; ++j)
                    if (basic_[idx(j, k)] && !seen[static_cast<std::size_t>(j)]) {
                        seen[static_cast<std::size_t>(j)] = true;
                        parent[static_cast<std::size_t>(j)] = node;
                        stack.push_back(j);
                    }
            }
        }
        if (!seen[static_cast<std::size_t>(n_ + ek)])
            throw std::runtime_error("transport simplex: basis is not connected");

        // reconstruct path ej -> ... -> col ek; arcs alternate row->col (+) col->row (-)
        std::vector<int> path; // node sequence from ej to n_+ek
        for (int node = n_ + ek; node != -1; node = parent[static_cast<std::size_t>(node)]) path.push_back(node);
        std::reverse(path.begin(), path.end());
        // cycle: entering arc (ej, ek) gets +, then along path arcs alternate
        // starting with the path's first arc getting -
        // path[0] == ej; arcs path[i] -> path[i+1]
        double theta = std::numeric_limits<double>::infinity();
        int lj = -1, lk = -1;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            const bool minus = i % 2 == 0; // first path arc carries -
            if (!minus) continue;
            const int r = path[i] < n_ ? path[i] : path[i + 1];
            const int cidx = path[i] < n_ ? path[i + 1] - n_ : path[i] - n_;
            const double f = flow_[idx(r, cidx)];
            if (f < theta) {
                theta = f;
                lj = r;
                lk = cidx;
            }
        }
        // apply
        basic_[idx(ej, ek)] = true;
        flow_[idx(ej, ek)] += theta;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            const int r = path[i] < n_ ? path[i] : path[i + 1];
            const int cidx = path[i] < n_ ? path[i + 1] - n_ : path[i] - n_;
            if (i % 2 == 0)
                flow_[idx(r, cidx)] -= theta;
            else
                flow_[idx(r, cidx)] += theta;
        }
        basic_[idx(lj, lk)] = false;
        flow_[idx(lj, lk)] = 0.0;
    }

    int n_, m_;
    std::vector<double> a_, b_, c_;
    std::vector<double> flow_;
    std::vector<bool> basic_;
    std::vector<double> u_, v_;
};

} // namespace detail

struct WassersteinResult {
    double value = 0.0;          // W = (min cost)^{1/r}
    CouplingMatrix coupling;
    std::vector<double> dual_u;  // potentials of the r-th power problem
    std::vector<double> dual_v;
};

// Exact W_{L_p, r}(P, Q) by linear programming over couplings.
inline WassersteinResult wasserstein_exact(const DiscretePdf& P, const DiscretePdf& Q, double ground_p = 2.0,
                                           double order_r = 1.0) {
    P.validate();
    Q.validate();
    if (ground_p < 1.0 || order_r < 1.0)
        throw std::invalid_argument("wasserstein_exact: require ground p >= 1 and order r >= 1");
    const int n = static_cast<int>(P.support.size());
    const int m = static_cast<int>(Q.support.size());
    std::vector<double> cost(static_cast<std::size_t>(n) * m);
    for (int j = 0; j < n; ++j)
        for (int k = 0; k < m; ++k)
            cost[static_cast<std::size_t>(j) * m + k] =
                std::pow(lp_ground_norm(P.support[static_cast<std::size_t>(j)], Q.support[static_cast<std::size_t>(k)], ground_p), order_r);

    detail::TransportSimplex simplex(P.weights, Q.weights, cost);
    simplex.solve();

    WassersteinResult res;
    res.value = std::pow(simplex.objective(), 1.0 / order_r);
    res.coupling.rows = n;
    res.coupling.cols = m;
    res.coupling.pi = simplex.flow();
    res.dual_u = simplex.row_potentials();
    res.dual_v = simplex.col_potentials();
    return res;
}

// Brute-force cross-check for tiny instances: enumerate the basic feasible
// solutions (spanning trees of the bipartite transport graph) and take the
// cheapest feasible one.
inline double wasserstein_bruteforce(const DiscretePdf& P, const DiscretePdf& Q, double ground_p = 2.0,
                                     double order_r = 1.0) {
    P.validate();
    Q.validate();
    const int n = static_cast<int>(P.support.size());
    const int m = static_cast<int>(Q.support.size());
    if (n > 4 || m > 4) throw std::invalid_argument("wasserstein_bruteforce: supports must be <= 4 points");
    const int arcs = n * m;
    const int basis_size = n + m - 1;

    std::vector<double> cost(static_cast<std::size_t>(arcs));
    for (int j = 0; j < n; ++j)
        for (int k = 0; k < m; ++k)
            cost[static_cast<std::size_t>(j) * m + k] =
                std::pow(lp_ground_norm(P.support[static_cast<std::size_t>(j)], Q.support[static_cast<std::size_t>(k)], ground_p), order_r);

    double best = std::numeric_limits<double>::infinity();
    std::vector<int> chosen;
    std::function<void(int, int)> rec = [&](int start, int picked) {
        if (picked == basis_size) {
            // solve flows on the candidate tree; must be spanning and feasible
            std::vector<double> flow(static_cast<std::size_t>(arcs), 0.0);
            std::vector<int> deg_row(static_cast<std::size_t>(n), 0), deg_col(static_cast<std::size_t>(m), 0);
            for (int e : chosen) {
                deg_row[static_cast<std::size_t>(e / m)]++;
                deg_col[static_cast<std::size_t>(e % m)]++;
            }
            std::vector<double> ra = P.weights, rb = Q.weights;
            std::vector<int> active = chosen;
            bool ok = true;
            // peel leaves
            while (!active.empty() && ok) {
                bool progressed = false;
                for (std::size_t i = 0; i < active.size(); ++i) {
                    const int e = active[i];
                    const int j = e / m, k = e % m;
                    if (deg_row[static_cast<std::size_t>(j)] == 1) {
                        flow[static_cast<std::size_t>(e)] = ra[static_cast<std::size_t>(j)];
                        rb[static_cast<std::size_t>(k)] -= ra[static_cast<std::size_t>(j)];
                        ra[static_cast<std::size_t>(j)] = 0.0;
                    } else if (deg_col[static_cast<std::size_t>(k)] == 1) {
                        flow[static_cast<std::size_t>(e)] = rb[static_cast<std::size_t>(k)];
                        ra[static_cast<std::size_t>(j)] -= rb[static_cast<std::size_t>(k)];
                        rb[static_cast<std::size_t>(k)] = 0.0;
                    } else {
                        continue;
                    }
                    deg_row[static_cast<std::size_t>(j)]--;
                    deg_col[static_cast<std::size_t>(k)]--;
                    active.erase(active.begin() + static_cast<std::ptrdiff_t>(i));
                    progressed = true;
                    break;
                }
                if (!progressed) ok = false; // cycle: not a tree
            }
            if (ok) {
                for (double f : flow)
                    if (f < -1e-12) ok = false;
                for (double r : ra)
                    if (std::fabs(r) > 1e-9) ok = false;
                for (double r : rb)
                    if (std::fabs(r) > 1e-9) ok = false;
            }
            if (ok) {
                double c = 0.0;
                for (int e : chosen) c += flow[static_cast<std::size_t>(e)] * cost[static_cast<std::size_t>(e)];
                best = std::min(best, c);
            }
            return;
        }
        if (start >= arcs) return;
        chosen.push_back(start);
        rec(start + 1, picked + 1);
        chosen.pop_back();
        if (arcs - start - 1 >= basis_size - picked) rec(start + 1, picked);
    };
    rec(0, 0);
    return std::pow(best, 1.0 / order_r);
}

// 1-Lipschitz witness attaining the KR supremum, built from the LP duals by
// c-transform: D(z) = min_k [ c(z, y_k) - psi_k ].
inline std::function<double(const Tensor&)> kr_optimal_witness(const DiscretePdf& P, const DiscretePdf& Q,
                                                               double ground_p = 2.0) {
    WassersteinResult res = wasserstein_exact(P, Q, ground_p, 1.0);
    std::vector<Tensor> q_pts = Q.support;
    std::vector<double> psi = res.dual_v;
    const double p = ground_p;
    return [q_pts, psi, p](const Tensor& z) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < q_pts.size(); ++k)
            best = std::min(best, lp_ground_norm(z, q_pts[k], p) - psi[k]);
        return best;
    };
}

// W (exact) minus the KR functional E_P D - E_Q D of a given witness.
// The witness must be 1-Lipschitz across all support pairs; weak duality then
// makes the gap >= 0 up to float noise.
inline double kr_dual_gap(const DiscretePdf& P, const DiscretePdf& Q,
                          const std::function<double(const Tensor&)>& witness, double ground_p = 2.0) {
    P.validate();
    Q.validate();
    std::vector<const Tensor*> all;
    for (const Tensor& t : P.support) all.push_back(&t);
    for (const Tensor& t : Q.support) all.push_back(&t);
    std::vector<double> dv(all.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        dv[i] = witness(*all[i]);
        if (!std::isfinite(dv[i])) throw std::invalid_argument("kr_dual_gap: witness value not finite");
    }
    for (std::size_t i = 0; i < all.size(); ++i)
        for (std::size_t j = i + 1; j < all.size(); ++j) {
            const double dist = lp_ground_norm(*all[i], *all[j], ground_p);
            if (std::fabs(dv[i] - dv[j]) > dist * (1.0 + 1e-9) + 1e-12)
                throw std::invalid_argument("kr_dual_gap: witness violates the support-pair Lipschitz bound");
        }
    double kr = 0.0;
    for (std::size_t j = 0; j < P.support.size(); ++j) kr += P.weights[j] * dv[j];
    for (std::size_t k = 0; k < Q.support.size(); ++k) kr -= Q.weights[k] * dv[P.support.size() + k];
    return wasserstein_exact(P, Q, ground_p, 1.0).value - kr;
}

// JW(J1, J2) = E_X W(P^1_{Y|X}, P^2_{Y|X}); joints must share the X support
// and marginal.
inline double jw_exact(const DiscreteJoint& J1, const DiscreteJoint& J2, double ground_p = 2.0,
                       double order_r = 1.0) {
    J1.validate();
    J2.validate();
    if (J1.x_points.size() != J2.x_points.size())
        throw std::invalid_argument("jw_exact: joints have different X support sizes");
    for (std::size_t i = 0; i < J1.x_points.size(); ++i) {
        if (J1.x_points[i].values() != J2.x_points[i].values())
            throw std::invalid_argument("jw_exact: X support points differ at index " + std::to_string(i));
        if (std::fabs(J1.x_weights[i] - J2.x_weights[i]) > 1e-12)
            throw std::invalid_argument("jw_exact: marginal weights differ at index " + std::to_string(i));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < J1.x_points.size(); ++i)
        s += J1.x_weights[i] * wasserstein_exact(J1.conditionals[i], J2.conditionals[i], ground_p, order_r).value;
    return s;
}

// r=1 Wasserstein between the flattened joints with combined ground cost
// sqrt( ||dY||_p^2 + ||dX/sigma||_s^2 ). sigma -> 0 forces X-diagonal
// couplings and recovers jw_exact on same-marginal joints.
inline double jw2_exact(const DiscreteJoint& J1, const DiscreteJoint& J2, double sigma, double ground_p = 2.0,
                        double ground_s = 2.0) {
    J1.validate();
    J2.validate();
    if (sigma <= 0.0) throw std::invalid_argument("jw2_exact: sigma must be positive");

    struct Pt {
        const Tensor* x;
        const Tensor* y;
        double w;
    };
    auto flatten = [](const DiscreteJoint& J) {
        std::vector<Pt> pts;
        for (std::size_t i = 0; i < J.x_points.size(); ++i)
            for (std::size_t k = 0; k < J.conditionals[i].support.size(); ++k)
                pts.push_back(Pt{&J.x_points[i], &J.conditionals[i].support[k],
                                 J.x_weights[i] * J.conditionals[i].weights[k]});
        return pts;
    };
    const std::vector<Pt> p1 = flatten(J1);
    const std::vector<Pt> p2 = flatten(J2);

    std::vector<double> a, b;
    for (const Pt& p : p1) a.push_back(p.w);
    for (const Pt& p : p2) b.push_back(p.w);
    std::vector<double> cost(p1.size() * p2.size());
    for (std::size_t j = 0; j < p1.size(); ++j)
        for (std::size_t k = 0; k < p2.size(); ++k) {
            const double dy = lp_ground_norm(*p1[j].y, *p2[k].y, ground_p);
            const double dx = lp_ground_norm(*p1[j].x, *p2[k].x, ground_s) / sigma;
            cost[j * p2.size() + k] = std::sqrt(dy * dy + dx * dx);
        }
    detail::TransportSimplex simplex(a, b, cost);
    simplex.solve();
    return simplex.objective();
}

} // namespace glab
