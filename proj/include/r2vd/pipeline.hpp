#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2vd/eval.hpp"
#include "r2vd/fields.hpp"
#include "r2vd/gmp.hpp"
#include "r2vd/hsi.hpp"
#include "r2vd/ppe.hpp"
#include "r2vd/rsm.hpp"
#include "r2vd/vdi.hpp"

namespace r2vd {

// Error raised inside a pipeline stage; what() starts with "[stage] ".
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& msg)
        : std::runtime_error("[" + stage + "] " + msg), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct PipelineConfig {
    bool use_ppe = true;
    bool use_gmp = true;
    bool use_psf = true;
    bool use_vdi = true;

    double eta = 0.02;
    double lambda = 5.0;
    std::size_t k = 50;
    std::size_t t_inf = 980;
    std::size_t bg_dim = 3;
    std::size_t oca_epochs = 100;
    std::size_t warm_epochs = 10;
    std::size_t update_every = 10;
    std::size_t dit_epochs = 1000;
    std::uint64_t seed = 0;

    ppe::WeightCurveParams coarse_curve = ppe::WeightCurveParams::lenient();
    ppe::WeightCurveParams strict_curve = ppe::WeightCurveParams::strict();
    gmp::OcaConfig oca_arch;
    rsm::DitConfig dit_arch;
    rsm::DiffusionSchedule schedule;
    double oca_lr = 1e-3;
    double dit_lr = 2e-4;
    double dit_weight_decay = 1e-5;

    std::filesystem::path input;
    std::filesystem::path gt;
    std::filesystem::path out_dir;  // empty: nothing is written

    // Resume: reuse artifacts from resume_dir and start at resume_stage
    // ("gmp", "rsm" or "vdi"; empty picks the latest stage with artifacts).
    std::filesystem::path resume_dir;
    std::string resume_stage;

    bool verbose = false;

    /// "M0", "M1", "M2", "M3" or "full"; throws for toggle sets off the ladder.
    std::string variant() const;
    void validate() const;
};

/// Independent sub-seed for one stage.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct PipelineResult {
    AnomalyMap map;
    ScoreMap raw_scores;  // ||v_cum||, or the mean reconstruction error without interference
    WeightMap w_coa;
    WeightMap weights;
    HsiCube residual;
    std::vector<gmp::TraceRow> gmp_trace;
    std::vector<double> dit_losses;
    std::optional<eval::MetricsReport> metrics;
    std::string start_stage = "ppe";
};

/// Runs the four stages on an in-memory cube (normalised first). When gt is
/// given, metrics are computed and, with an output directory, written.
PipelineResult run_pipeline(const PipelineConfig& cfg, const HsiCube& input, const GroundTruthMask* gt = nullptr);

/// Loads cfg.input (and cfg.gt when set) and runs the pipeline.
PipelineResult run_pipeline(const PipelineConfig& cfg);

/// Artifact names inside the output directory.
namespace artifacts {
inline constexpr const char* kCoarseWeights = "w_coa.hsc";
inline constexpr const char* kWeights = "weights.hsc";
inline constexpr const char* kResidual = "residual.hsc";
inline constexpr const char* kCheckpoint = "dit.ckpt";
inline constexpr const char* kTrace = "gmp_trace.csv";
inline constexpr const char* kMapCube = "anomaly_map.hsc";
inline constexpr const char* kMapImage = "anomaly_map.pgm";
inline constexpr const char* kScores = "scores.hsc";
inline constexpr const char* kMetrics = "metrics.json";
inline constexpr const char* kRoc = "roc.csv";
inline constexpr const char* kConfig = "config.json";
}  // namespace artifacts

/// Single-band cube holding a pixel field (rounded to float32).
template <class Tag>
HsiCube field_cube(const PixelField<Tag>& f);

template <class Tag>
PixelField<Tag> cube_field(const HsiCube& c);

}  // namespace r2vd
