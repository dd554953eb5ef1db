#include "r2vd/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace r2vd::linalg {

SymMatrix SymMatrix::identity(std::size_t dim) {
    SymMatrix m(dim);
    for (std::size_t i = 0; i < dim; ++i) m(i, i) = 1.0;
    return m;
}

double SymMatrix::trace() const {
    double t = 0.0;
    for (std::size_t i = 0; i < rows; ++i) t += (*this)(i, i);
    return t;
}

bool SymMatrix::is_symmetric(double tol) const {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = i + 1; j < cols; ++j)
            if (std::abs((*this)(i, j) - (*this)(j, i)) > tol) return false;
    return true;
}

MeanCovariance mean_covariance(const Matrix& pixels) {
    const std::size_t n = pixels.rows, c = pixels.cols;
    if (n < 2) throw std::invalid_argument("mean_covariance: need at least 2 pixels");
    if (c == 0) throw std::invalid_argument("mean_covariance: need at least 1 band");

    MeanCovariance out;
    out.mean.assign(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out.mean[j] += pixels(i, j);
    for (double& m : out.mean) m /= static_cast<double>(n);

    out.cov = SymMatrix(c);
    std::vector<double> d(c);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) d[j] = pixels(i, j) - out.mean[j];
        for (std::size_t a = 0; a < c; ++a)
            for (std::size_t b = a; b < c; ++b) out.cov(a, b) += d[a] * d[b];
    }
    for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = a; b < c; ++b) {
            out.cov(a, b) /= static_cast<double>(n);
            out.cov(b, a) = out.cov(a, b);
        }

    const double tr = out.cov.trace();
    out.ridge = tr > 0.0 ? 1e-6 * tr / static_cast<double>(c) : 1e-12;
    for (std::size_t a = 0; a < c; ++a) out.cov(a, a) += out.ridge;
    return out;
}

Cholesky::Cholesky(const SymMatrix& a) : n_(a.dim()), l_(a.dim() * a.dim(), 0.0) {
    for (std::size_t j = 0; j < n_; ++j) {
        double diag = a(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= l_[j * n_ + k] * l_[j * n_ + k];
        if (!(diag > 0.0)) throw NumericalError("cholesky: non-positive pivot at column " + std::to_string(j));
        const double ljj = std::sqrt(diag);
        l_[j * n_ + j] = ljj;
        for (std::size_t i = j + 1; i < n_; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l_[i * n_ + k] * l_[j * n_ + k];
            l_[i * n_ + j] = s / ljj;
        }
    }
}

std::vector<double> Cholesky::solve(std::span<const double> b) const {
    if (b.size() != n_) throw std::invalid_argument("cholesky solve: rhs length mismatch");
    std::vector<double> y(b.begin(), b.end());
    for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t k = 0; k < i; ++k) y[i] -= l_[i * n_ + k] * y[k];
        y[i] /= l_[i * n_ + i];
    }
    for (std::size_t i = n_; i-- > 0;) {
        for (std::size_t k = i + 1; k < n_; ++k) y[i] -= l_[k * n_ + i] * y[k];
        y[i] /= l_[i * n_ + i];
    }
    return y;
}

std::vector<double> cholesky_solve(const SymMatrix& a, std::span<const double> b) { return Cholesky(a).solve(b); }

Eigen sym_eig(const SymMatrix& input) {
    const std::size_t n = input.dim();
    SymMatrix a = input;
    Matrix v(n, n);
    for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
        return std::sqrt(s);
    };
    double scale = 0.0;
    for (double x : a.data) scale = std::max(scale, std::abs(x));

    bool converged = n < 2 || scale == 0.0;
    for (int sweep = 0; sweep < 100 && !converged; ++sweep) {
        if (off_norm() <= 1e-15 * scale) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged && off_norm() > 1e-15 * scale) throw NumericalError("sym_eig: Jacobi did not converge in 100 sweeps");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    Eigen out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
    }
    return out;
}

std::vector<double> empirical_rank(std::span<const double> scores) {
    const std::size_t n = scores.size();
    if (n == 0) throw std::invalid_argument("empirical_rank: empty input");
    for (double s : scores)
        if (!std::isfinite(s)) throw std::invalid_argument("empirical_rank: non-finite score");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return scores[i] < scores[j]; });

    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        // 1-based positions i+1..j+1 share their mean
        const double avg = 0.5 * static_cast<double>(i + j + 2);
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg / static_cast<double>(n);
        i = j + 1;
    }
    return rank;
}

double quantile(std::span<const double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile: empty input");
    std::vector<double> s(values.begin(), values.end());
    std::sort(s.begin(), s.end());
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return s[lo] + frac * (s[hi] - s[lo]);
}

}  // namespace r2vd::linalg
