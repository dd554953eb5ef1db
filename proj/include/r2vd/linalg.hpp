#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace r2vd::linalg {

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

// Square symmetric matrix; only the storage is shared with Matrix, symmetry is
// the caller's contract (checked by is_symmetric).
struct SymMatrix : Matrix {
    SymMatrix() = default;
    explicit SymMatrix(std::size_t dim, double fill = 0.0) : Matrix(dim, dim, fill) {}
    static SymMatrix identity(std::size_t dim);

    std::size_t dim() const { return rows; }
    double trace() const;
    bool is_symmetric(double tol = 1e-10) const;
};

struct MeanCovariance {
    std::vector<double> mean;
    SymMatrix cov;
    double ridge = 0.0;
};

/// Sample mean and 1/N covariance of an N x C pixel matrix, plus a ridge
/// delta * I with delta = 1e-6 * trace / C (1e-12 when the trace is zero).
MeanCovariance mean_covariance(const Matrix& pixels);

class Cholesky {
public:
    explicit Cholesky(const SymMatrix& a);
    std::vector<double> solve(std::span<const double> b) const;
    std::size_t dim() const { return n_; }

private:
    std::size_t n_;
    std::vector<double> l_;  // lower triangle, row-major
};

std::vector<double> cholesky_solve(const SymMatrix& a, std::span<const double> b);

struct Eigen {
    std::vector<double> values;  // descending
    Matrix vectors;              // column k is the eigenvector of values[k]
};

/// Cyclic Jacobi rotations; throws NumericalError after 100 sweeps.
Eigen sym_eig(const SymMatrix& a);

/// Ascending rank / N with ties averaged; values in (0, 1].
std::vector<double> empirical_rank(std::span<const double> scores);

/// Linear interpolation between order statistics at position q * (n - 1).
double quantile(std::span<const double> values, double q);

}  // namespace r2vd::linalg
