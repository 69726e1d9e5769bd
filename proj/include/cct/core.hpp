#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cct {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteState : public Error {
public:
    NonFiniteState(double t, const std::string& what)
        : Error(what), time_(t) {}
    double time() const noexcept { return time_; }

private:
    double time_;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class DegenerateConstraint : public Error {
public:
    using Error::Error;
};

class Infeasible : public Error {
public:
    using Error::Error;
};

class NonFiniteLoss : public Error {
public:
    using Error::Error;
};

class InvalidAlpha : public Error {
public:
    using Error::Error;
};

class InsufficientCalibrationData : public Error {
public:
    using Error::Error;
};

class SingularBlock : public Error {
public:
    using Error::Error;
};

class InfeasiblePlan : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Axis-aligned boxes
// ---------------------------------------------------------------------------

struct Interval {
    double lo = -kInf;
    double hi = kInf;

    bool contains(double v, double tol = 0.0) const { return v >= lo - tol && v <= hi + tol; }
    bool empty() const { return !(lo <= hi); }
    double width() const { return hi - lo; }
};

struct Box {
    std::vector<Interval> axes;

    Box() = default;
    explicit Box(std::vector<Interval> a) : axes(std::move(a)) {}

    static Box uniform(std::size_t dim, double lo, double hi) {
        return Box(std::vector<Interval>(dim, Interval{lo, hi}));
    }
    static Box unbounded(std::size_t dim) { return Box(std::vector<Interval>(dim)); }

    std::size_t dim() const { return axes.size(); }

    bool contains(const Vector& x, double tol = 0.0) const {
        if (static_cast<std::size_t>(x.size()) != axes.size()) return false;
        for (std::size_t i = 0; i < axes.size(); ++i)
            if (!axes[i].contains(x[static_cast<Eigen::Index>(i)], tol)) return false;
        return true;
    }

    bool empty() const {
        for (const auto& a : axes)
            if (a.empty()) return true;
        return false;
    }

    // Signed distance to the nearest face; negative outside.
    double inner_margin(const Vector& x) const {
        double m = kInf;
        for (std::size_t i = 0; i < axes.size(); ++i) {
            const double v = x[static_cast<Eigen::Index>(i)];
            m = std::min({m, v - axes[i].lo, axes[i].hi - v});
        }
        return m;
    }

    Vector clamp(const Vector& x) const {
        Vector y = x;
        for (std::size_t i = 0; i < axes.size(); ++i) {
            auto k = static_cast<Eigen::Index>(i);
            y[k] = std::min(std::max(y[k], axes[i].lo), axes[i].hi);
        }
        return y;
    }

    bool is_subset_of(const Box& other, double tol = 0.0) const {
        if (dim() != other.dim()) return false;
        for (std::size_t i = 0; i < axes.size(); ++i)
            if (axes[i].lo < other.axes[i].lo - tol || axes[i].hi > other.axes[i].hi + tol) return false;
        return true;
    }
};

// ---------------------------------------------------------------------------
// Dense linear algebra helpers
// ---------------------------------------------------------------------------

inline bool all_finite(const Vector& v) { return v.allFinite(); }

/// Moore-Penrose pseudo-inverse via SVD, singular values below rel_tol * sigma_max dropped.
inline Matrix pseudo_inverse(const Matrix& a, double rel_tol = 1e-10) {
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    if (s.size() == 0) return Matrix::Zero(a.cols(), a.rows());
    const double cut = rel_tol * s[0];
    Vector inv = Vector::Zero(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s[i] > cut) inv[i] = 1.0 / s[i];
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Orthonormal basis of ker(a) from a full SVD; rank cut at rel_tol * sigma_max.
inline Matrix null_space(const Matrix& a, double rel_tol = 1e-8) {
    const Eigen::Index n = a.cols();
    if (a.rows() == 0) return Matrix::Identity(n, n);
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullV);
    const Vector& s = svd.singularValues();
    const double cut = s.size() > 0 ? rel_tol * s[0] : 0.0;
    Eigen::Index rank = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s[i] > cut) ++rank;
    return svd.matrixV().rightCols(n - rank);
}

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

inline Vector sym_eigenvalues(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a), Eigen::EigenvaluesOnly);
    return es.eigenvalues();
}

inline double max_eigenvalue(const Matrix& a) {
    if (a.rows() == 0) return -kInf;
    return sym_eigenvalues(a).maxCoeff();
}

inline double min_eigenvalue(const Matrix& a) {
    if (a.rows() == 0) return kInf;
    return sym_eigenvalues(a).minCoeff();
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_std(const std::vector<double>& v) {
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace cct

namespace cct {

/// Central finite-difference Jacobian; step per coordinate is rel_step * max(1, |x_i|).
template <class F>
Matrix jacobian_fd(F&& f, const Vector& x, double rel_step = 1e-5) {
    const Vector f0 = f(x);
    Matrix jac(f0.size(), x.size());
    Vector xp = x, xm = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = rel_step * std::max(1.0, std::abs(x[i]));
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        jac.col(i) = (f(xp) - f(xm)) / (2.0 * h);
        xp[i] = x[i];
        xm[i] = x[i];
    }
    return jac;
}

/// Tensor-product grid over a box; `counts[i]` points along axis i (1 means the midpoint).
inline std::vector<Vector> grid_over(const Box& box, const std::vector<int>& counts) {
    if (counts.size() != box.dim()) throw DimensionMismatch("grid_over: one count per axis required");
    std::vector<Vector> pts;
    const auto n = static_cast<Eigen::Index>(box.dim());
    std::vector<int> idx(box.dim(), 0);
    while (true) {
        Vector x(n);
        for (std::size_t i = 0; i < box.dim(); ++i) {
            const auto& a = box.axes[i];
            x[static_cast<Eigen::Index>(i)] =
                counts[i] <= 1 ? 0.5 * (a.lo + a.hi)
                               : a.lo + (a.hi - a.lo) * idx[i] / static_cast<double>(counts[i] - 1);
        }
        pts.push_back(std::move(x));
        std::size_t d = 0;
        while (d < idx.size() && ++idx[d] >= std::max(counts[d], 1)) idx[d++] = 0;
        if (d == idx.size()) break;
    }
    return pts;
}

inline std::vector<Vector> grid_over(const Box& box, int per_axis) {
    return grid_over(box, std::vector<int>(box.dim(), per_axis));
}

}  // namespace cct

#include <Eigen/Eigenvalues>

namespace cct {

/// Stabilizing solution X of A^T X + X A - X B R^{-1} B^T X + Q = 0 from the stable invariant
/// subspace of the Hamiltonian matrix. Intended for small dense problems.
inline Matrix solve_care(const Matrix& a, const Matrix& b, const Matrix& q, const Matrix& r) {
    const Eigen::Index n = a.rows();
    Matrix h(2 * n, 2 * n);
    h << a, -b * r.inverse() * b.transpose(), -q, -a.transpose();
    Eigen::ComplexEigenSolver<Matrix> es(h);
    if (es.info() != Eigen::Success) throw Error("solve_care: eigen decomposition failed");
    Eigen::MatrixXcd stable(2 * n, n);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < 2 * n && k < n; ++i)
        if (es.eigenvalues()[i].real() < 0.0) stable.col(k++) = es.eigenvectors().col(i);
    if (k != n) throw Error("solve_care: Hamiltonian has eigenvalues on the imaginary axis");
    const Eigen::MatrixXcd x = stable.bottomRows(n) * stable.topRows(n).inverse();
    return symmetrize(x.real());
}

}  // namespace cct
