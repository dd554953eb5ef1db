#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "r2vd/autodiff.hpp"
#include "r2vd/fields.hpp"
#include "r2vd/hsi.hpp"

namespace r2vd::rsm {

// Variance-exploding noise scales: sigma(t) = sigma_min * (sigma_max / sigma_min)^(t / (T - 1)).
struct DiffusionSchedule {
    std::size_t t_max = 1000;
    double sigma_min = 0.01;
    double sigma_max = 1.0;

    double sigma(std::size_t t) const;
    void validate() const;
};

/// Non-overlapping win x win tiles in row-major tile order; trailing tiles
/// are smaller. Pixel indices inside a tile are row-major.
std::vector<std::vector<std::size_t>> window_partition(std::size_t h, std::size_t w, std::size_t win = 8);

/// L x L distances between L2-normalised spectra (rows of an L x C row-major
/// block). Norms below xi are floored at xi.
std::vector<double> psf_matrix(std::span<const double> spectra, std::size_t len, std::size_t bands, double xi = 1e-8);

// Window tiling plus the fixed distance penalty, built once from the raw cube.
struct PsfContext {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t window = 8;
    ad::AttentionWindows attention;
};

PsfContext build_psf(const HsiCube& x, std::size_t window, double lambda);

template <typename T>
ad::Tensor<T> psf_attention(const ad::Tensor<T>& q, const ad::Tensor<T>& k, const ad::Tensor<T>& v, std::size_t heads,
                            const PsfContext& psf);

struct DitConfig {
    std::size_t bands = 0;
    std::size_t embed = 128;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t window = 8;

    void validate() const;
};

template <typename T>
struct DitBlock {
    ad::Tensor<T> ada_w, ada_b;  // 6D x D, zero-initialised
    ad::Tensor<T> qkv_w, qkv_b, proj_w, proj_b;
    ad::Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
struct DitModel {
    DitConfig cfg;
    ad::Tensor<T> embed_w, embed_b;
    ad::Tensor<T> t1_w, t1_b, t2_w, t2_b;
    std::vector<DitBlock<T>> blocks;
    ad::Tensor<T> head_w, head_b;  // zero-initialised
    bool frozen = false;

    static DitModel init(const DitConfig& cfg, std::uint64_t seed);
    std::vector<std::pair<std::string, ad::Tensor<T>>> named_parameters() const;
    std::vector<ad::Tensor<T>> parameters() const;
    /// Copy whose parameters are constants (no graph is recorded).
    DitModel detached() const;
};

/// tokens: [H*W, C] pixel-major. Returns the predicted noise, same layout.
template <typename T>
ad::Tensor<T> dit_forward(const DitModel<T>& model, const ad::Tensor<T>& tokens, std::size_t t, const PsfContext& psf);

/// Cube-level prediction with a detached copy of the model.
HsiCube dit_predict(const DitModel<float>& model, const HsiCube& r_t, std::size_t t, const PsfContext& psf);

std::vector<float> cube_to_tokens(const HsiCube& cube);
HsiCube tokens_to_cube(std::span<const float> tokens, std::size_t h, std::size_t w, std::size_t c);

/// (1/HW) sum_i w_i ||eps_hat_i - eps_i||^2 on pixel-major tokens.
template <typename T>
ad::Tensor<T> dsm_loss(const ad::Tensor<T>& eps_hat, std::span<const T> eps, const WeightMap& w);

double dsm_loss(const HsiCube& eps_hat, const HsiCube& eps, const WeightMap& w);

/// Divides by the global standard deviation; returns that std (1 if it is 0).
double standardize_in_place(HsiCube& cube);

struct RsmTrainConfig {
    std::size_t epochs = 1000;
    double lr = 2e-4;
    double weight_decay = 1e-5;
};

struct RsmResult {
    DitModel<float> model;
    std::vector<double> losses;
};

RsmResult train_rsm(const HsiCube& r, const WeightMap& w, const PsfContext& psf, const DiffusionSchedule& sched,
                    const DitConfig& arch, const RsmTrainConfig& train, std::uint64_t seed);

// "R2VDDIT1" followed by named blocks: u32 name length, name bytes, u32 ndim,
// ndim u32 dims, little-endian float32 values. The architecture is stored in
// a "__config__" block.
void save_checkpoint(const DitModel<float>& model, const std::filesystem::path& path);
DitModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace r2vd::rsm
