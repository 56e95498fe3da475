// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

// occdistill: scene generation, rendering, distillation, evaluation,
// gradient checks and segment tooling.
//
// Exit codes (all subcommands): 0 success, 1 gradcheck failure,
// 2 I/O or config error, 3 validation error.

#include <occdistill/config.hpp>
#include <occdistill/distill.hpp>
#include <occdistill/error.hpp>
#include <occdistill/io.hpp>
#include <occdistill/segments.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace occdistill;

namespace {

constexpr int kExitGradcheck = 1;
constexpr int kExitIo = 2;
constexpr int kExitValidation = 3;

Interpolation parse_interpolation(const std::string& name) {
    if (name == "trilinear") {
        return Interpolation::Trilinear;
    }
    if (name == "nearest") {
        return Interpolation::Nearest;
    }
    throw ValidationError("unknown interpolation '" + name + "'");
}

struct Globals {
    int threads = 0;  // 0: OCCDISTILL_THREADS or hardware concurrency
};

struct GenSceneArgs {
    std::string config;
    std::string gt_out;
    std::string teacher_out;
};

int cmd_gen_scene(const GenSceneArgs& a) {
    const ExperimentConfig cfg = load_experiment(a.config);
    const SyntheticScene scene = make_synthetic_scene(cfg.scene);
    save_labels(a.gt_out, scene.gt);
    save_grid(a.teacher_out, scene.teacher);
    std::size_t occupied = 0;
    for (auto l : scene.gt.labels) {
        occupied += l != scene.gt.free_label() ? 1 : 0;
    }
    std::printf("occupied_voxels=%zu\n", occupied);
    return 0;
}

struct ExportArgs {
    std::string config_out;
    std::string cameras_out;
};

int cmd_reference(const ExportArgs& a) {
    const ExperimentConfig cfg = reference_experiment();
    save_experiment(a.config_out, cfg);
    if (!a.cameras_out.empty()) {
        write_cameras(a.cameras_out, cfg.scene.cameras);
    }
    return 0;
}

struct RenderArgs {
    std::string grid;
    std::string cameras;
    double step = 0.2;
    int max_samples = 192;
    double near = 0.0;
    std::string interpolation = "trilinear";
    std::string out_prefix = "render";
};

int cmd_render(const RenderArgs& a, const Globals& g) {
    const VoxelGrid grid = load_grid(a.grid);
    const std::vector<Camera> cams = read_cameras(a.cameras);
    SamplingConfig sampling;
    sampling.step_size = a.step;
    sampling.max_samples = a.max_samples;
    sampling.near = a.near;
    RenderOptions opts;
    opts.interpolation = parse_interpolation(a.interpolation);
    opts.threads = g.threads;
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const RenderResult r = render_view(grid, cams[i], sampling, std::nullopt, opts);
        const std::string stem = a.out_prefix + "_cam" + std::to_string(i);
        write_depth_pgm(stem + "_depth.pgm", r.view);
        write_semantic_ppm(stem + "_semantics.ppm", r.view);
        write_opacity_pgm(stem + "_opacity.pgm", r.view);
    }
    return 0;
}

struct DistillArgs {
    std::string config;
    std::string out_dir = "distill_out";
    std::optional<std::string> mode;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<double> gt_weight;
    std::optional<std::string> weights;
    bool snapshots = false;
};

DistillationWeights parse_weights(const std::string& text, DistillationWeights base) {
    double r = 0, s = 0, k = 0;
    char tail = 0;
    if (std::sscanf(text.c_str(), "%lf,%lf,%lf%c", &r, &s, &k, &tail) != 3) {
        throw ValidationError("--weights expects 'rdc,sad,kl', got '" + text + "'");
    }
    base.lambda_rdc = r;
    base.lambda_sad = s;
    base.lambda_kl = k;
    base.validate();
    return base;
}

int cmd_distill(const DistillArgs& a, const Globals& g) {
    ExperimentConfig cfg = load_experiment(a.config);
    if (a.mode) {
        cfg.train.mode = parse_mode(*a.mode);
    }
    if (a.seed) {
        cfg.train.seed = *a.seed;
    }
    if (a.steps) {
        cfg.train.steps = *a.steps;
    }
    if (a.gt_weight) {
        cfg.train.gt_weight = *a.gt_weight;
    }
    if (a.weights) {
        cfg.train.weights = parse_weights(*a.weights, cfg.train.weights);
    }
    cfg.train.render.threads = g.threads;
    cfg.train.validate();

    RunOutputs outputs;
    outputs.out_dir = fs::path(a.out_dir);
    outputs.snapshots = a.snapshots;
    const RunResult result = run_distillation(cfg.scene, cfg.train, outputs);
    save_experiment(fs::path(a.out_dir) / "config.json", cfg);
    std::printf("initial_miou=%.6f\n", result.initial_miou);
    std::printf("final_miou=%.6f\n", result.final_miou);
    return 0;
}

struct EvalArgs {
    std::string pred;
    std::string gt;
    bool mask = false;
    bool json = false;
    double threshold = 0.5;
};

int cmd_eval(const EvalArgs& a) {
    const SemanticLabelGrid pred = load_labels_or_argmax(a.pred, a.threshold);
    const SemanticLabelGrid gt = load_labels_or_argmax(a.gt, a.threshold);
    const IouReport rep = miou(pred, gt, a.mask);
    const std::size_t free_id = rep.per_class_iou.size() - 1;
    const auto name = [&](std::size_t c) {
        return c == free_id ? std::string("free") : std::to_string(c);
    };
    if (a.json) {
        nlohmann::json j;
        nlohmann::json per = nlohmann::json::object();
        for (std::size_t c = 0; c < rep.per_class_iou.size(); ++c) {
            const double v = rep.per_class_iou[c];
            per[name(c)] = std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
        }
        j["per_class_iou"] = per;
        j["miou"] = rep.miou;
        j["classes_counted"] = rep.classes_counted;
        std::cout << j.dump(2) << '\n';
        return 0;
    }
    std::printf("%-8s %s\n", "class", "iou");
    for (std::size_t c = 0; c < rep.per_class_iou.size(); ++c) {
        const double v = rep.per_class_iou[c];
        if (std::isnan(v)) {
            std::printf("%-8s %s\n", name(c).c_str(), "n/a");
        } else {
            std::printf("%-8s %.6f\n", name(c).c_str(), v);
        }
    }
    std::printf("%-8s %.6f\n", "miou", rep.miou);
    return 0;
}

struct GradcheckArgs {
    std::string loss = "all";
    double tolerance = 1e-4;
    double step = 1e-4;
    std::size_t coordinates = 256;
    std::uint64_t seed = 7;
    std::string config;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    const GradcheckTarget target = parse_gradcheck_target(a.loss);
    const SceneConfig scene = a.config.empty() ? gradcheck_scene() : load_experiment(a.config).scene;
    GradcheckOptions opt;
    opt.tolerance = a.tolerance;
    opt.step = a.step;
    opt.coordinates_per_block = a.coordinates;
    opt.seed = a.seed;

    std::vector<GradcheckTarget> targets;
    targets.push_back(target);
    if (target == GradcheckTarget::All) {
        targets = {GradcheckTarget::Render, GradcheckTarget::Rdc,
                   GradcheckTarget::Sad,    GradcheckTarget::Kl,
                   GradcheckTarget::Silog,  GradcheckTarget::Supervision,
                   GradcheckTarget::All};
    }
    bool ok = true;
    std::printf("%-12s %-16s %6s %14s %14s %s\n", "loss", "block", "coords", "max_rel_err",
                "max_abs_err", "status");
    for (GradcheckTarget t : targets) {
        const GradcheckReport rep = gradcheck(scene, t, opt);
        for (const GradcheckBlock& b : rep.blocks) {
            std::printf("%-12s %-16s %6zu %14.3e %14.3e %s\n", std::string(to_string(t)).c_str(),
                        b.name.c_str(), b.coordinates, b.max_rel_error, b.max_abs_error,
                        b.pass ? "pass" : "FAIL");
        }
        ok = ok && rep.pass();
    }
    return ok ? 0 : kExitGradcheck;
}

struct SegmentsArgs {
    std::string input;
    std::string out;
    std::string method = "slic";
    int k = 16;
    double compactness = 10.0;
    int iterations = 10;
    std::uint64_t seed = 0;
    int tile = 16;
    std::string cameras;
    std::size_t camera = 0;
    double step = 0.2;
};

FeatureImage features_from_input(const SegmentsArgs& a, const Globals& g) {
    FeatureImage img;
    if (fs::path(a.input).extension() == ".vxg") {
        if (a.cameras.empty()) {
            throw ValidationError("segmenting a grid needs --cameras");
        }
        const VoxelGrid grid = load_grid(a.input);
        const auto cams = read_cameras(a.cameras);
        if (a.camera >= cams.size()) {
            throw ValidationError("--camera index out of range");
        }
        SamplingConfig sampling;
        sampling.step_size = a.step;
        RenderOptions opts;
        opts.threads = g.threads;
        const RenderResult r = render_view(grid, cams[a.camera], sampling, std::nullopt, opts);
        img.height = r.view.height;
        img.width = r.view.width;
        img.channels = r.view.num_classes;
        img.values = r.view.semantics;
        return img;
    }
    const PnmImage pnm = read_pnm(a.input);
    img.height = pnm.height;
    img.width = pnm.width;
    img.channels = pnm.channels;
    img.values.assign(pnm.data.begin(), pnm.data.end());
    return img;
}

int cmd_segments(const SegmentsArgs& a, const Globals& g) {
    SegmentMap seg;
    if (a.method == "file") {
        seg = load_segments(a.input);
    } else if (a.method == "tiles") {
        int h = 0, w = 0;
        if (fs::path(a.input).extension() == ".vxg") {
            const FeatureImage img = features_from_input(a, g);
            h = img.height;
            w = img.width;
        } else {
            const PnmImage pnm = read_pnm(a.input);
            h = pnm.height;
            w = pnm.width;
        }
        seg = grid_tiles(h, w, a.tile);
    } else if (a.method == "slic") {
        const FeatureImage img = features_from_input(a, g);
        seg = slic(img, SlicParams{a.k, a.compactness, a.iterations, a.seed});
    } else {
        throw ValidationError("unknown segment method '" + a.method + "'");
    }
    save_segments(seg, a.out);
    std::printf("segments=%d\n", seg.num_segments);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"occdistill: rendering-space occupancy distillation toolkit"};
    app.require_subcommand(1);
    app.allow_extras(false);
    Globals globals;
    app.add_option("--threads", globals.threads,
                   "Worker threads (overrides OCCDISTILL_THREADS; 0 = default)")
        ->check(CLI::NonNegativeNumber);

    GenSceneArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-scene", "Voxelize a config's scene into gt and teacher grids");
    gen_cmd->add_option("config", gen.config, "Experiment config JSON")->required();
    gen_cmd->add_option("--gt", gen.gt_out, "Output gt label grid (.vxg)")->required();
    gen_cmd->add_option("--teacher", gen.teacher_out, "Output teacher grid (.vxg)")->required();

    ExportArgs ref;
    auto* ref_cmd = app.add_subcommand("reference-config", "Write the reference experiment config");
    ref_cmd->add_option("out", ref.config_out, "Output config JSON")->required();
    ref_cmd->add_option("--cameras", ref.cameras_out, "Also write its cameras as camera JSON");

    RenderArgs ren;
    auto* ren_cmd = app.add_subcommand("render", "Render depth, semantics and opacity images");
    ren_cmd->add_option("grid", ren.grid, "Density/semantics grid (.vxg)")->required();
    ren_cmd->add_option("cameras", ren.cameras, "Camera JSON")->required();
    ren_cmd->add_option("--step", ren.step, "Sample spacing in meters");
    ren_cmd->add_option("--max-samples", ren.max_samples, "Samples per ray cap");
    ren_cmd->add_option("--near", ren.near, "Near clip distance");
    ren_cmd->add_option("--interpolation", ren.interpolation, "trilinear or nearest");
    ren_cmd->add_option("--out-prefix", ren.out_prefix, "Output path prefix");

    DistillArgs dis;
    auto* dis_cmd = app.add_subcommand("distill", "Run teacher-to-student distillation");
    dis_cmd->add_option("config", dis.config, "Experiment config JSON")->required();
    dis_cmd->add_option("--out", dis.out_dir, "Output directory");
    dis_cmd->add_option("--mode", dis.mode, "none, rdc-minus, rdc, sad, rsc or rdc+rsc");
    dis_cmd->add_option("--seed", dis.seed, "Training seed");
    dis_cmd->add_option("--steps", dis.steps, "Number of steps");
    dis_cmd->add_option("--gt-weight", dis.gt_weight, "Ground-truth supervision weight");
    dis_cmd->add_option("--weights", dis.weights, "Loss weights as rdc,sad,kl");
    dis_cmd->add_flag("--snapshots", dis.snapshots, "Write depth/semantic images at each eval");

    EvalArgs ev;
    auto* ev_cmd = app.add_subcommand("eval", "Per-class IoU and mIoU of a prediction");
    ev_cmd->add_option("pred", ev.pred, "Predicted labels or grid (.vxg)")->required();
    ev_cmd->add_option("gt", ev.gt, "Ground-truth labels (.vxg)")->required();
    ev_cmd->add_flag("--mask", ev.mask, "Only count voxels inside the gt mask");
    ev_cmd->add_flag("--json", ev.json, "Machine-readable output");
    ev_cmd->add_option("--threshold", ev.threshold, "Occupancy threshold for density grids");

    GradcheckArgs gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
    gc_cmd->add_option("--loss", gc.loss, "render, rdc, sad, kl, silog, supervision or all");
    gc_cmd->add_option("--tolerance", gc.tolerance, "Max relative error");
    gc_cmd->add_option("--fd-step", gc.step, "Central difference step");
    gc_cmd->add_option("--coordinates", gc.coordinates, "Coordinates sampled per block");
    gc_cmd->add_option("--seed", gc.seed, "Sampling seed");
    gc_cmd->add_option("--config", gc.config, "Use this config's scene instead of the built-in one");

    SegmentsArgs sg;
    auto* sg_cmd = app.add_subcommand("segments", "Over-segment an image or a rendered grid");
    sg_cmd->add_option("input", sg.input, "PGM/PPM image, .vxg grid, or segment PGM (--method file)")
        ->required();
    sg_cmd->add_option("--out", sg.out, "Output segment PGM")->required();
    sg_cmd->add_option("--method", sg.method, "slic, tiles or file");
    sg_cmd->add_option("--k", sg.k, "SLIC target segment count");
    sg_cmd->add_option("--compactness", sg.compactness, "SLIC compactness");
    sg_cmd->add_option("--iterations", sg.iterations, "SLIC iterations");
    sg_cmd->add_option("--seed", sg.seed, "SLIC seed jitter (0 = none)");
    sg_cmd->add_option("--tile", sg.tile, "Tile size for --method tiles");
    sg_cmd->add_option("--cameras", sg.cameras, "Camera JSON when input is a grid");
    sg_cmd->add_option("--camera", sg.camera, "Camera index when input is a grid");
    sg_cmd->add_option("--step", sg.step, "Render step when input is a grid");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitIo;
    }

    try {
        if (*gen_cmd) {
            return cmd_gen_scene(gen);
        }
        if (*ref_cmd) {
            return cmd_reference(ref);
        }
        if (*ren_cmd) {
            return cmd_render(ren, globals);
        }
        if (*dis_cmd) {
            return cmd_distill(dis, globals);
        }
        if (*ev_cmd) {
            return cmd_eval(ev);
        }
        if (*gc_cmd) {
            return cmd_gradcheck(gc);
        }
        if (*sg_cmd) {
            return cmd_segments(sg, globals);
        }
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const ValidationError& e) {
        std::cerr << "invalid: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    }
    return 0;
}
