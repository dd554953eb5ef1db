#include "r2vd/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <json.hpp>

namespace r2vd {

namespace fs = std::filesystem;

namespace {

enum Stage { kPpe = 0, kGmp = 1, kRsm = 2, kVdi = 3 };
const char* const kStageNames[] = {"ppe", "gmp", "rsm", "vdi"};

template <class Tag>
PixelField<Tag> quantize(PixelField<Tag> f) {
    for (double& v : f.values) v = static_cast<double>(static_cast<float>(v));
    return f;
}

template <class F>
auto run_stage(Stage s, bool verbose, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            if (verbose)
                std::cerr << "  " << kStageNames[s] << " done in "
                          << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
        } else {
            auto r = f();
            if (verbose)
                std::cerr << "  " << kStageNames[s] << " done in "
                          << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
            return r;
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(kStageNames[s], e.what());
    }
}

Stage resolve_start(const PipelineConfig& cfg) {
    if (cfg.resume_dir.empty()) {
        if (!cfg.resume_stage.empty()) throw std::invalid_argument("resume stage given without a resume directory");
        return kPpe;
    }
    auto has = [&](const char* name) { return fs::exists(cfg.resume_dir / name); };
    if (cfg.resume_stage.empty()) {
        if (has(artifacts::kCheckpoint) && has(artifacts::kResidual) && has(artifacts::kWeights)) return kVdi;
        if (has(artifacts::kResidual) && has(artifacts::kWeights)) return kRsm;
        if (has(artifacts::kCoarseWeights)) return kGmp;
        throw std::invalid_argument("no resumable artifacts in " + cfg.resume_dir.string());
    }
    for (int s = kGmp; s <= kVdi; ++s)
        if (cfg.resume_stage == kStageNames[s]) return static_cast<Stage>(s);
    throw std::invalid_argument("resume stage must be gmp, rsm or vdi, got '" + cfg.resume_stage + "'");
}

nlohmann::ordered_json config_json(const PipelineConfig& c) {
    nlohmann::ordered_json j;
    j["variant"] = c.variant();
    j["use_ppe"] = c.use_ppe;
    j["use_gmp"] = c.use_gmp;
    j["use_psf"] = c.use_psf;
    j["use_vdi"] = c.use_vdi;
    j["eta"] = c.eta;
    j["lambda"] = c.lambda;
    j["k"] = c.k;
    j["t_inf"] = c.t_inf;
    j["bg_dim"] = c.bg_dim;
    j["oca_epochs"] = c.oca_epochs;
    j["warm_epochs"] = c.warm_epochs;
    j["update_every"] = c.update_every;
    j["dit_epochs"] = c.dit_epochs;
    j["seed"] = c.seed;
    j["theta_gap"] = c.coarse_curve.theta_gap;
    j["k_coa"] = c.coarse_curve.steepness;
    j["epsilon"] = c.coarse_curve.floor;
    j["theta_gap_ae"] = c.strict_curve.theta_gap;
    j["k_ae"] = c.strict_curve.steepness;
    j["oca_hidden"] = c.oca_arch.hidden;
    j["oca_pairs"] = c.oca_arch.pairs;
    j["dit_embed"] = c.dit_arch.embed;
    j["dit_depth"] = c.dit_arch.depth;
    j["dit_heads"] = c.dit_arch.heads;
    j["window"] = c.dit_arch.window;
    j["sigma_min"] = c.schedule.sigma_min;
    j["sigma_max"] = c.schedule.sigma_max;
    j["t_max"] = c.schedule.t_max;
    j["oca_lr"] = c.oca_lr;
    j["dit_lr"] = c.dit_lr;
    j["dit_weight_decay"] = c.dit_weight_decay;
    j["input"] = c.input.string();
    j["gt"] = c.gt.string();
    return j;
}

}  // namespace

std::string PipelineConfig::variant() const {
    const int n = use_ppe + use_gmp + use_psf + use_vdi;
    const bool ladder = (n == 0) || (n == 1 && use_ppe) || (n == 2 && use_ppe && use_gmp) ||
                        (n == 3 && use_ppe && use_gmp && use_psf) || n == 4;
    if (!ladder)
        throw std::invalid_argument(
            "stage toggles must follow the ablation ladder: M0 (none), M1 (+ppe), M2 (+gmp), M3 (+psf), full (+vdi)");
    static const char* const names[] = {"M0", "M1", "M2", "M3", "full"};
    return names[n];
}

void PipelineConfig::validate() const {
    variant();
    if (!(eta > 0.0 && eta < 0.5)) throw std::invalid_argument("eta must be in (0, 0.5)");
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (bg_dim < 1) throw std::invalid_argument("bg_dim must be >= 1");
    schedule.validate();
    if (t_inf >= schedule.t_max) throw std::invalid_argument("t_inf must be below T");
    coarse_curve.validate();
    strict_curve.validate();
    if (use_gmp && (oca_epochs < 1 || warm_epochs >= oca_epochs))
        throw std::invalid_argument("oca_epochs must exceed warm_epochs");
    if (update_every < 1) throw std::invalid_argument("update_every must be >= 1");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

template <class Tag>
HsiCube field_cube(const PixelField<Tag>& f) {
    HsiCube c(f.height, f.width, 1);
    for (std::size_t i = 0; i < f.values.size(); ++i) c.data[i] = static_cast<float>(f.values[i]);
    return c;
}

template <class Tag>
PixelField<Tag> cube_field(const HsiCube& c) {
    if (c.bands != 1) throw FormatError("expected a single-band cube");
    PixelField<Tag> f(c.height, c.width);
    for (std::size_t i = 0; i < c.data.size(); ++i) f.values[i] = c.data[i];
    return f;
}

template HsiCube field_cube(const WeightMap&);
template HsiCube field_cube(const ScoreMap&);
template HsiCube field_cube(const AnomalyMap&);
template WeightMap cube_field(const HsiCube&);
template ScoreMap cube_field(const HsiCube&);
template AnomalyMap cube_field(const HsiCube&);

PipelineResult run_pipeline(const PipelineConfig& cfg, const HsiCube& input, const GroundTruthMask* gt) {
    cfg.validate();
    validate_cube(input);
    if (gt && (gt->height != input.height || gt->width != input.width))
        throw std::invalid_argument("ground truth mask does not match the cube");
    const Stage start = resolve_start(cfg);
    const bool write = !cfg.out_dir.empty();
    if (write) fs::create_directories(cfg.out_dir);
    auto out = [&](const char* name) { return cfg.out_dir / name; };
    auto in = [&](const char* name) { return cfg.resume_dir / name; };
    if (cfg.verbose) std::cerr << "variant " << cfg.variant() << ", starting at " << kStageNames[start] << '\n';

    const HsiCube x = normalize_cube(input);
    PipelineResult res;
    res.start_stage = kStageNames[start];

    // Stage 1: coarse prior.
    res.w_coa = run_stage(kPpe, cfg.verbose, [&] {
        WeightMap w;
        if (start > kPpe && fs::exists(in(artifacts::kCoarseWeights)))
            w = cube_field<WeightTag>(load_cube(in(artifacts::kCoarseWeights)));
        else if (start > kGmp)
            w = WeightMap(x.height, x.width, 1.0);
        else if (start > kPpe)
            throw std::runtime_error("missing " + in(artifacts::kCoarseWeights).string());
        else if (cfg.use_ppe)
            w = quantize(ppe::extract_priors(x, cfg.bg_dim, cfg.eta, cfg.coarse_curve).w_coa);
        else
            w = WeightMap(x.height, x.width, 1.0);
        if (w.height != x.height || w.width != x.width) throw std::runtime_error("coarse weight map does not match the cube");
        if (write) save_cube(field_cube(w), out(artifacts::kCoarseWeights));
        return w;
    });

    // Stage 2: purification.
    run_stage(kGmp, cfg.verbose, [&] {
        if (start > kGmp) {
            res.weights = cube_field<WeightTag>(load_cube(in(artifacts::kWeights)));
            res.residual = load_cube(in(artifacts::kResidual));
            if (!res.residual.same_shape(x) || res.weights.height != x.height || res.weights.width != x.width)
                throw std::runtime_error("resumed artifacts do not match the cube");
        } else if (cfg.use_gmp) {
            gmp::GmpSchedule sched{cfg.oca_epochs, cfg.warm_epochs, cfg.update_every, cfg.oca_lr, cfg.eta, cfg.strict_curve};
            auto g = gmp::train_gmp(x, res.w_coa, sched, derive_seed(cfg.seed, 1), cfg.oca_arch);
            res.weights = quantize(g.weights);
            res.residual = std::move(g.residual);
            res.gmp_trace = std::move(g.trace);
            if (write) gmp::write_trace_csv(res.gmp_trace, out(artifacts::kTrace));
        } else {
            res.weights = res.w_coa;
            res.residual = x;
        }
        if (write) {
            save_cube(field_cube(res.weights), out(artifacts::kWeights));
            save_cube(res.residual, out(artifacts::kResidual));
        }
    });

    HsiCube rs = res.residual;
    rsm::standardize_in_place(rs);
    const double lambda = cfg.use_psf ? cfg.lambda : 0.0;
    rsm::PsfContext psf;
    rsm::DitModel<float> model;

    // Stage 3: score model.
    run_stage(kRsm, cfg.verbose, [&] {
        psf = rsm::build_psf(x, cfg.dit_arch.window, lambda);
        if (start > kRsm) {
            model = rsm::load_checkpoint(in(artifacts::kCheckpoint));
            if (model.cfg.bands != x.bands || model.cfg.window != cfg.dit_arch.window)
                throw std::runtime_error("checkpoint architecture does not match the cube");
        } else {
            rsm::RsmTrainConfig train{cfg.dit_epochs, cfg.dit_lr, cfg.dit_weight_decay};
            auto r = rsm::train_rsm(rs, res.weights, psf, cfg.schedule, cfg.dit_arch, train, derive_seed(cfg.seed, 2));
            model = std::move(r.model);
            res.dit_losses = std::move(r.losses);
        }
        if (write) rsm::save_checkpoint(model, out(artifacts::kCheckpoint));
    });

    // Stage 4: inference.
    run_stage(kVdi, cfg.verbose, [&] {
        const vdi::DitPredictor predictor(model, psf);
        const vdi::VdiConfig vcfg{cfg.k, cfg.t_inf, 1e-8, derive_seed(cfg.seed, 3)};
        auto v = cfg.use_vdi ? vdi::vdi_infer(predictor, rs, cfg.schedule, vcfg)
                             : vdi::recon_error_infer(predictor, rs, cfg.schedule, vcfg);
        res.map = std::move(v.map);
        res.raw_scores = std::move(v.cum_norms);
        if (write) {
            save_cube(field_cube(res.map), out(artifacts::kMapCube));
            save_cube(field_cube(res.raw_scores), out(artifacts::kScores));
            save_pgm_image(res.map.values, res.map.height, res.map.width, out(artifacts::kMapImage));
        }
    });

    if (gt) {
        res.metrics = eval::auc_metrics(res.map, *gt);
        if (write) {
            eval::write_metrics_json(*res.metrics, out(artifacts::kMetrics));
            eval::write_roc_csv(eval::roc(res.map, *gt), out(artifacts::kRoc));
        }
    }
    if (write) {
        std::ofstream cf(out(artifacts::kConfig));
        cf << config_json(cfg).dump(2) << '\n';
    }
    return res;
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
    const HsiCube cube = load_cube(cfg.input);
    if (cfg.gt.empty()) return run_pipeline(cfg, cube, nullptr);
    const GroundTruthMask gt = load_mask(cfg.gt);
    return run_pipeline(cfg, cube, &gt);
}

}  // namespace r2vd
