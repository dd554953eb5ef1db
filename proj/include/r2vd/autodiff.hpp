#pragma once

// Minimal reverse-mode differentiation over dense tensors. Only the primitives
// the autoencoder and the diffusion transformer need are provided; shapes are
// checked eagerly and mismatches throw std::invalid_argument.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace r2vd::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    T* grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad.data();
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor constant(Shape shape, std::vector<T> values);
    static Tensor parameter(Shape shape, std::vector<T> values);
    static Tensor zeros(Shape shape, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const T> values() const { return node_->value; }
    std::span<T> mutable_values() { return node_->value; }
    // Empty until a backward pass has reached this tensor.
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }
    T item() const;

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Seeds d(loss)/d(loss) = 1 and runs every reachable backward function in
/// reverse topological order. Gradients accumulate into existing buffers.
template <typename T>
void backward(const Tensor<T>& loss);

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

// ---- primitives ---------------------------------------------------------

/// x: [..., Din], weight: [Dout, Din], bias: [Dout] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> silu(const Tensor<T>& x);

/// Normalises over the last dimension; gamma/beta ([D]) may be undefined.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5);

/// x: [M, D]; shift/scale hold D values: x * (1 + scale) + shift.
template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale);

/// x + gate * y with gate holding D values broadcast over rows.
template <typename T>
Tensor<T> gated_add(const Tensor<T>& x, const Tensor<T>& gate, const Tensor<T>& y);

/// Columns [start, start + count) of a 2-D tensor.
template <typename T>
Tensor<T> columns(const Tensor<T>& x, std::size_t start, std::size_t count);

/// Row softmax of x + bias; bias is a constant of the same shape or empty.
template <typename T>
Tensor<T> softmax_last_dim(const Tensor<T>& x, std::span<const T> bias = {});

struct Conv2dSpec {
    std::size_t dilation = 1;
    std::size_t groups = 1;
};

/// x: [N, Cin, H, W], weight: [Cout, Cin / groups, kh, kw] with odd kh, kw.
/// Zero padding keeps H x W.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dSpec spec = {});

/// Concatenates [N, Ci, H, W] tensors along channels.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(std::size_t channels = 0) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalisation over (N, H, W). Train mode uses batch statistics
/// and updates the running estimates; eval mode uses the running estimates.
template <typename T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        BatchNormState<T>& state, bool train);

// Window attention with an optional additive logit penalty per window.
struct AttentionWindows {
    std::vector<std::vector<std::size_t>> windows;  // token indices per window
    std::vector<std::vector<double>> distance;      // L x L per window, or empty
    double lambda = 0.0;

    bool has_penalty() const { return !distance.empty(); }
};

/// q, k, v: [N, heads * head_dim]. Within each window and head:
///   softmax(Q K^T / sqrt(head_dim) - lambda * D) V
template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                           const AttentionWindows& windows);

/// Attention matrices (per window, per head; row-major L x L) of the same
/// forward computation, for inspection.
template <typename T>
std::vector<std::vector<T>> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads,
                                              const AttentionWindows& windows);

enum class PixelLayout { ChannelMajor, PixelMajor };

/// (1/P) * sum_p w_p * ||pred_p - target_p||^2. Pixels with w_p == 0 receive
/// an exact zero gradient.
template <typename T>
Tensor<T> weighted_pixel_loss(const Tensor<T>& pred, std::span<const T> target, std::span<const double> weights,
                              std::size_t pixels, std::size_t channels, PixelLayout layout);

/// sum_i coeffs_i * x_i; used to reduce tensors to scalars in checks.
template <typename T>
Tensor<T> dot_constant(const Tensor<T>& x, std::span<const T> coeffs);

/// [sin(t w_0) ... sin(t w_{h-1}), cos(t w_0) ... cos(t w_{h-1})],
/// w_i = 10000^(-i / h), h = dim / 2.
std::vector<double> sinusoidal_embedding(double t, std::size_t dim);

/// dim/2 channels encode the row, dim/2 the column.
std::vector<double> sinusoidal_embedding_2d(std::size_t row, std::size_t col, std::size_t dim);

// ---- finite-difference checking ------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

/// Compares analytic gradients of loss_fn() with central differences with
/// step h. Relative error is |a - n| / max(|a|, |n|, 1e-7). When
/// max_per_input > 0 only that many (seeded) elements per input are probed.
GradCheckReport gradient_check(const std::function<Tensor<double>()>& loss_fn,
                               const std::vector<Tensor<double>>& inputs, double h = 1e-4,
                               std::size_t max_per_input = 0, std::uint64_t seed = 0);

}  // namespace r2vd::ad
