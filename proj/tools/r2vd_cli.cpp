#include <CLI11.hpp>

#include <chrono>
#include <iomanip>
#include <iostream>

#include "r2vd/eval.hpp"
#include "r2vd/gradsuite.hpp"
#include "r2vd/hsi.hpp"
#include "r2vd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace r2vd;

namespace {

int cmd_synth(const SynthConfig& cfg, const fs::path& out_dir) {
    const SynthScene s = synth_scene(cfg);
    fs::create_directories(out_dir);
    save_cube(s.cube, out_dir / "cube.hsc");
    save_mask(s.mask, out_dir / "mask.pgm");
    save_mask(s.shadow_mask, out_dir / "shadow_mask.pgm");
    std::cout << "wrote " << (out_dir / "cube.hsc").string() << " (" << s.cube.height << "x" << s.cube.width << "x"
              << s.cube.bands << ", " << s.mask.anomaly_count() << " anomaly pixels)\n";
    return 0;
}

int cmd_detect(const PipelineConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineResult r = run_pipeline(cfg);
    std::cout << "variant " << cfg.variant() << " finished in " << std::fixed << std::setprecision(1)
              << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s; outputs in "
              << cfg.out_dir.string() << '\n';
    if (r.metrics) std::cout << eval::metrics_json(*r.metrics) << '\n';
    return 0;
}

int cmd_eval(const fs::path& map_path, const fs::path& gt_path, const fs::path& out_dir) {
    const AnomalyMap a = cube_field<AnomalyTag>(load_cube(map_path));
    const GroundTruthMask gt = load_mask(gt_path);
    const auto m = eval::auc_metrics(a, gt);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        eval::write_metrics_json(m, out_dir / artifacts::kMetrics);
        eval::write_roc_csv(eval::roc(a, gt), out_dir / artifacts::kRoc);
    }
    std::cout << eval::metrics_json(m) << '\n';
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    bool ok = true;
    for (const auto& c : run_gradient_suite(seed)) {
        std::cout << (c.passed() ? "PASS " : "FAIL ") << std::left << std::setw(42) << c.name << " max rel err "
                  << std::scientific << std::setprecision(2) << c.max_rel_error << " (tol " << c.tolerance << ", "
                  << c.checked << " entries)\n";
        ok = ok && c.passed();
    }
    return ok ? 0 : 1;
}

// Config files hold bare "key = value" lines for detect options.
struct DetectConfig : CLI::ConfigBase {
    std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
        auto items = CLI::ConfigBase::from_config(in);
        for (auto& item : items)
            if (item.parents.empty()) item.parents = {"detect"};
        return items;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hyperspectral anomaly detection with residual score diffusion"};
    app.require_subcommand(1);

    SynthConfig sc;
    fs::path synth_out;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic scene (cube.hsc, mask.pgm)");
    synth->add_option("--out-dir", synth_out, "Output directory")->required();
    synth->add_option("--height", sc.height)->capture_default_str();
    synth->add_option("--width", sc.width)->capture_default_str();
    synth->add_option("--bands", sc.bands)->capture_default_str();
    synth->add_option("--anomaly-ratio", sc.anomaly_ratio)->capture_default_str();
    synth->add_option("--min-sam", sc.min_sam_degrees, "Minimum anomaly spectral angle (degrees)")->capture_default_str();
    synth->add_option("--endmembers", sc.n_background_endmembers)->capture_default_str();
    synth->add_option("--shadow-fraction", sc.shadow_fraction)->capture_default_str();
    synth->add_option("--sub-pixel-fraction", sc.sub_pixel_fraction)->capture_default_str();
    synth->add_option("--seed", sc.seed)->capture_default_str();

    PipelineConfig pc;
    bool no_ppe = false, no_gmp = false, no_psf = false, no_vdi = false;
    app.config_formatter(std::make_shared<DetectConfig>());
    app.set_config("--config", "", "Config file of 'key = value' lines for detect; flags override it");
    app.allow_config_extras(CLI::config_extras_mode::error);
    auto* detect = app.add_subcommand("detect", "Run the detection pipeline");
    detect->fallthrough();
    detect->add_option("--input", pc.input, "Input cube (HSC1)")->required();
    detect->add_option("--gt", pc.gt, "Ground-truth mask (PGM) for metrics");
    detect->add_option("--out-dir", pc.out_dir, "Output directory")->required();
    detect->add_option("--seed", pc.seed)->capture_default_str();
    detect->add_option("--eta", pc.eta)->capture_default_str();
    detect->add_option("--lambda", pc.lambda)->capture_default_str();
    detect->add_option("--k", pc.k)->capture_default_str();
    detect->add_option("--t-inf", pc.t_inf)->capture_default_str();
    detect->add_option("--bg-dim", pc.bg_dim)->capture_default_str();
    detect->add_option("--oca-epochs", pc.oca_epochs)->capture_default_str();
    detect->add_option("--warm-epochs", pc.warm_epochs)->capture_default_str();
    detect->add_option("--update-every", pc.update_every)->capture_default_str();
    detect->add_option("--dit-epochs", pc.dit_epochs)->capture_default_str();
    detect->add_option("--window", pc.dit_arch.window)->capture_default_str();
    detect->add_flag("--no-ppe", no_ppe, "Disable prior extraction (W_coa = 1)");
    detect->add_flag("--no-gmp", no_gmp, "Disable purification (model the cube itself)");
    detect->add_flag("--no-psf", no_psf, "Disable the attention penalty (lambda = 0)");
    detect->add_flag("--no-vdi", no_vdi, "Score by scalar reconstruction error instead of interference");
    detect->add_option("--resume", pc.resume_dir, "Directory with artifacts of an earlier run");
    detect->add_option("--resume-stage", pc.resume_stage, "gmp, rsm or vdi (default: latest available)");
    detect->add_flag("-v,--verbose", pc.verbose);

    fs::path eval_map, eval_gt, eval_out;
    auto* ev = app.add_subcommand("eval", "Score an anomaly map against a mask");
    ev->add_option("--input", eval_map, "Anomaly map (single-band HSC1)")->required();
    ev->add_option("--gt", eval_gt, "Ground-truth mask (PGM)")->required();
    ev->add_option("--out-dir", eval_out, "Write metrics.json and roc.csv here");

    std::uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    gc->add_option("--seed", gc_seed)->capture_default_str();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*synth) return cmd_synth(sc, synth_out);
        if (*detect) {
            pc.use_ppe = !no_ppe;
            pc.use_gmp = !no_gmp;
            pc.use_psf = !no_psf;
            pc.use_vdi = !no_vdi;
            return cmd_detect(pc);
        }
        if (*ev) return cmd_eval(eval_map, eval_gt, eval_out);
        if (*gc) return cmd_gradcheck(gc_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
