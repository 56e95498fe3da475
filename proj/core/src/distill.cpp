// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "occdistill/distill.hpp"
#include "occdistill/error.hpp"
#include "occdistill/io.hpp"
#include "occdistill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace occdistill {

bool Primitive::contains(const Vec3& p) const {
    if (shape == PrimitiveShape::Box) {
        return ((p - center).cwiseAbs().array() <= half_extent.array()).all();
    }
    return (p - center).norm() <= radius;
}

namespace {

bool intersects_box(const Primitive& prim, const Aabb& box) {
    if (prim.shape == PrimitiveShape::Box) {
        const Vec3 lo = prim.center - prim.half_extent;
        const Vec3 hi = prim.center + prim.half_extent;
        return (lo.array() <= box.max.array()).all() && (hi.array() >= box.min.array()).all();
    }
    const Vec3 closest = prim.center.cwiseMax(box.min).cwiseMin(box.max);
    return (closest - prim.center).norm() <= prim.radius;
}

} // namespace

void SceneConfig::validate() const {
    grid.validate();
    if (num_classes < 1) {
        throw ValidationError("scene num_classes must be >= 1");
    }
    if (primitives.empty()) {
        throw ValidationError("scene has no primitives");
    }
    const Aabb box{grid.aabb_min(), grid.aabb_max()};
    for (std::size_t i = 0; i < primitives.size(); ++i) {
        const Primitive& prim = primitives[i];
        if (prim.class_id < 0 || prim.class_id >= num_classes) {
            throw ValidationError("primitive " + std::to_string(i) + " has class id " +
                                  std::to_string(prim.class_id) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
        }
        if ((prim.shape == PrimitiveShape::Box && !(prim.half_extent.array() > 0.0).all()) ||
            (prim.shape == PrimitiveShape::Sphere && !(prim.radius > 0.0))) {
            throw ValidationError("primitive " + std::to_string(i) + " has a non-positive size");
        }
        if (!intersects_box(prim, box)) {
            throw ValidationError("primitive " + std::to_string(i) +
                                  " does not intersect the grid");
        }
    }
    for (const Camera& cam : cameras) {
        cam.validate();
    }
    if (!(teacher_density > 0.0) || !(logit_scale > 0.0)) {
        throw ValidationError("teacher_density and logit_scale must be positive");
    }
    if (!(label_noise >= 0.0 && label_noise <= 1.0)) {
        throw ValidationError("label_noise must lie in [0, 1]");
    }
}

SceneConfig reference_scene() {
    SceneConfig cfg;
    cfg.grid.dims = {32, 32, 8};
    cfg.grid.origin = Vec3(-6.4, -6.4, 0.0);
    cfg.grid.voxel_size = 0.4;
    cfg.num_classes = 3;

    Primitive box;
    box.shape = PrimitiveShape::Box;
    box.center = Vec3(-1.8, 1.2, 0.8);
    box.half_extent = Vec3(1.0, 0.8, 0.8);
    box.class_id = 0;

    Primitive sphere;
    sphere.shape = PrimitiveShape::Sphere;
    sphere.center = Vec3(2.0, -1.2, 1.2);
    sphere.radius = 1.1;
    sphere.class_id = 1;

    cfg.primitives = {box, sphere};
    const Vec3 target(0.0, 0.0, 0.8);
    const Vec3 up(0.0, 0.0, 1.0);
    cfg.cameras = {Camera::look_at(Vec3(-4.5, -4.0, 4.0), target, up, 64.0, 64.0, 64, 64),
                   Camera::look_at(Vec3(4.5, 4.0, 4.0), target, up, 64.0, 64.0, 64, 64)};
    return cfg;
}

SyntheticScene make_synthetic_scene(const SceneConfig& cfg) {
    cfg.validate();
    SyntheticScene scene;
    SemanticLabelGrid& gt = scene.gt;
    gt.spec = cfg.grid;
    gt.num_classes = cfg.num_classes;
    gt.labels.assign(cfg.grid.num_voxels(), cfg.num_classes);

    for (std::size_t v = 0; v < gt.labels.size(); ++v) {
        const auto [x, y, z] = cfg.grid.coords(v);
        const Vec3 c = cfg.grid.voxel_center(x, y, z);
        for (const Primitive& prim : cfg.primitives) {
            if (prim.contains(c)) {
                gt.labels[v] = prim.class_id;
            }
        }
    }

    std::vector<std::int32_t> teacher_labels = gt.labels;
    if (cfg.label_noise > 0.0) {
        CounterRng rng(cfg.seed);
        for (auto& l : teacher_labels) {
            if (l == cfg.num_classes) {
                continue;
            }
            if (rng.uniform01() < cfg.label_noise) {
                l = static_cast<std::int32_t>(rng.uniform(static_cast<std::uint64_t>(cfg.num_classes)));
            }
        }
    }

    scene.teacher = VoxelGrid(cfg.grid, cfg.num_classes);
    for (std::size_t v = 0; v < teacher_labels.size(); ++v) {
        const auto l = teacher_labels[v];
        if (l == cfg.num_classes) {
            continue;
        }
        scene.teacher.density()[v] = cfg.teacher_density;
        scene.teacher.semantics_at(v)[static_cast<std::size_t>(l)] = cfg.logit_scale;
    }
    return scene;
}

void StudentParams::validate() const {
    spec.validate();
    if (num_classes < 1 || density_logits.size() != spec.num_voxels() ||
        semantic_logits.size() != spec.num_voxels() * static_cast<std::size_t>(num_classes)) {
        throw ValidationError("student parameters do not match their grid spec");
    }
    for (double v : density_logits) {
        if (!std::isfinite(v)) {
            throw ValidationError("student density logits must be finite");
        }
    }
    for (double v : semantic_logits) {
        if (!std::isfinite(v)) {
            throw ValidationError("student semantic logits must be finite");
        }
    }
}

VoxelGrid StudentParams::to_grid() const {
    std::vector<double> density(density_logits.size());
    std::transform(density_logits.begin(), density_logits.end(), density.begin(),
                   [](double x) { return softplus(x); });
    return VoxelGrid(spec, num_classes, std::move(density), semantic_logits);
}

StudentParams StudentParams::from_grid(const VoxelGrid& grid, double min_density) {
    StudentParams p;
    p.spec = grid.spec();
    p.num_classes = grid.num_classes();
    p.density_logits.resize(grid.num_voxels());
    for (std::size_t v = 0; v < grid.num_voxels(); ++v) {
        p.density_logits[v] = inverse_softplus(std::max(grid.density_at(v), min_density));
    }
    p.semantic_logits.assign(grid.semantics().begin(), grid.semantics().end());
    return p;
}

StudentParams StudentParams::random(const GridSpec& spec, int num_classes, std::uint64_t seed,
                                    double density_mean, double density_std,
                                    double semantic_std) {
    spec.validate();
    StudentParams p;
    p.spec = spec;
    p.num_classes = num_classes;
    CounterRng rng(seed);
    p.density_logits.resize(spec.num_voxels());
    for (double& v : p.density_logits) {
        v = density_mean + density_std * rng.normal();
    }
    p.semantic_logits.resize(spec.num_voxels() * static_cast<std::size_t>(num_classes));
    for (double& v : p.semantic_logits) {
        v = semantic_std * rng.normal();
    }
    return p;
}

SupervisionLoss voxel_supervision_loss(const StudentParams& params, const SemanticLabelGrid& gt) {
    if (!(params.spec == gt.spec) || params.num_classes != gt.num_classes) {
        throw ValidationError("voxel_supervision_loss: student and ground truth specs differ");
    }
    const std::size_t n = gt.labels.size();
    const auto c = static_cast<std::size_t>(gt.num_classes);
    SupervisionLoss out;
    out.grad.d_density_logits.assign(n, 0.0);
    out.grad.d_semantic_logits.assign(n * c, 0.0);

    std::size_t occupied = 0;
    for (auto l : gt.labels) {
        occupied += l != gt.free_label() ? 1 : 0;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    const double inv_occ = occupied > 0 ? 1.0 / static_cast<double>(occupied) : 0.0;

    std::vector<double> probs(c);
    for (std::size_t v = 0; v < n; ++v) {
        const double x = params.density_logits[v];
        const bool occ = gt.labels[v] != gt.free_label();
        const double y = occ ? 1.0 : 0.0;
        out.bce += (softplus(x) - y * x) * inv_n;
        out.grad.d_density_logits[v] = (sigmoid(x) - y) * inv_n;
        if (!occ) {
            continue;
        }
        const double* s = &params.semantic_logits[v * c];
        const double mx = *std::max_element(s, s + c);
        double sum = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            probs[k] = std::exp(s[k] - mx);
            sum += probs[k];
        }
        const auto label = static_cast<std::size_t>(gt.labels[v]);
        out.ce += (mx + std::log(sum) - s[label]) * inv_occ;
        for (std::size_t k = 0; k < c; ++k) {
            out.grad.d_semantic_logits[v * c + k] =
                (probs[k] / sum - (k == label ? 1.0 : 0.0)) * inv_occ;
        }
    }
    out.value = out.bce + out.ce;
    return out;
}

void TrainConfig::validate() const {
    if (steps < 0) {
        throw ValidationError("steps must be >= 0");
    }
    if (!(learning_rate > 0.0)) {
        throw ValidationError("learning_rate must be positive");
    }
    if (ray_budget < 1) {
        throw ValidationError("ray_budget must be >= 1");
    }
    if (!(gt_weight >= 0.0)) {
        throw ValidationError("gt_weight must be >= 0");
    }
    if (!(occupancy_threshold >= 0.0)) {
        throw ValidationError("occupancy_threshold must be >= 0");
    }
    weights.validate();
    sampling.validate();
}

DistillContext::DistillContext(VoxelGrid teacher, SemanticLabelGrid gt, std::vector<Camera> cameras,
                               const TrainConfig& cfg)
    : teacher_(std::move(teacher)), gt_(std::move(gt)), cameras_(std::move(cameras)),
      sampling_(cfg.sampling), render_(cfg.render), cache_(cfg.cache_teacher) {
    teacher_.validate();
    gt_.validate();
    if (!(teacher_.spec() == gt_.spec) || teacher_.num_classes() != gt_.num_classes) {
        throw ValidationError("teacher grid and ground truth differ in spec");
    }
    if (cameras_.empty()) {
        throw ValidationError("distillation needs at least one camera");
    }
    if (cfg.segments.method == SegmentMethod::File &&
        cfg.segments.files.size() != cameras_.size()) {
        throw ValidationError("segment method 'file' needs one segment file per camera");
    }

    for (std::size_t i = 0; i < cameras_.size(); ++i) {
        const Camera& cam = cameras_[i];
        RenderResult full = render_view(teacher_, cam, sampling_, std::nullopt, render_);
        switch (cfg.segments.method) {
        case SegmentMethod::Slic: {
            FeatureImage img;
            img.height = cam.height;
            img.width = cam.width;
            img.channels = teacher_.num_classes();
            img.values = full.view.semantics;
            SlicParams sp = cfg.segments.slic;
            sp.k = std::min<int>(sp.k, static_cast<int>(cam.num_pixels()));
            segments_.push_back(slic(img, sp));
            break;
        }
        case SegmentMethod::Tiles:
            segments_.push_back(grid_tiles(cam.height, cam.width, cfg.segments.tile));
            break;
        case SegmentMethod::File: {
            SegmentMap seg = load_segments(cfg.segments.files[i]);
            if (seg.height != cam.height || seg.width != cam.width) {
                throw ValidationError("segment file " + cfg.segments.files[i].string() +
                                      " does not match camera " + std::to_string(i) + " size");
            }
            segments_.push_back(std::move(seg));
            break;
        }
        }
        if (cache_) {
            full_renders_.push_back(std::move(full));
        }
    }
}

std::size_t DistillContext::total_pixels() const {
    std::size_t n = 0;
    for (const Camera& cam : cameras_) {
        n += cam.num_pixels();
    }
    return n;
}

RenderResult DistillContext::teacher_render(std::size_t camera,
                                            std::span<const std::size_t> pixels) const {
    if (cache_) {
        return select_pixels(full_renders_.at(camera), pixels);
    }
    return render_view(teacher_, cameras_.at(camera), sampling_, pixels, render_);
}

RenderResult select_pixels(const RenderResult& full, std::span<const std::size_t> pixels) {
    const RenderedView& src = full.view;
    if (full.pixels.size() != src.num_pixels()) {
        throw ValidationError("select_pixels needs a render of every pixel");
    }
    const auto c = static_cast<std::size_t>(src.num_classes);
    RenderResult out;
    RenderedView& dst = out.view;
    dst.height = src.height;
    dst.width = src.width;
    dst.num_classes = src.num_classes;
    dst.depth.assign(src.num_pixels(), 0.0);
    dst.opacity.assign(src.num_pixels(), 0.0);
    dst.semantics.assign(src.num_pixels() * c, 0.0);
    dst.miss.assign(src.num_pixels(), 1);
    out.pixels.assign(pixels.begin(), pixels.end());
    out.rays.reserve(pixels.size());
    for (std::size_t p : pixels) {
        if (p >= src.num_pixels()) {
            throw ValidationError("select_pixels: pixel index out of range");
        }
        dst.depth[p] = src.depth[p];
        dst.opacity[p] = src.opacity[p];
        dst.miss[p] = src.miss[p];
        std::copy_n(src.semantics.begin() + static_cast<std::ptrdiff_t>(p * c), c,
                    dst.semantics.begin() + static_cast<std::ptrdiff_t>(p * c));
        out.rays.push_back(full.rays[p]);
    }
    return out;
}

std::vector<std::vector<std::size_t>> sample_step_rays(const DistillContext& ctx,
                                                       const TrainConfig& cfg,
                                                       std::size_t step_index) {
    const auto idx = sample_ray_subset(ctx.total_pixels(), cfg.ray_budget,
                                       cfg.seed + static_cast<std::uint64_t>(step_index));
    std::vector<std::vector<std::size_t>> out(ctx.cameras().size());
    std::size_t cam = 0, offset = 0;
    for (std::size_t i : idx) {
        while (i >= offset + ctx.cameras()[cam].num_pixels()) {
            offset += ctx.cameras()[cam].num_pixels();
            ++cam;
        }
        out[cam].push_back(i - offset);
    }
    return out;
}

Objective evaluate_objective(const StudentParams& params, const DistillContext& ctx,
                             const TrainConfig& cfg,
                             const std::vector<std::vector<std::size_t>>& selection,
                             bool with_gradient) {
    if (selection.size() != ctx.cameras().size()) {
        throw ValidationError("evaluate_objective: one pixel list per camera expected");
    }
    const VoxelGrid grid = params.to_grid();
    if (!(grid.spec() == ctx.teacher().spec()) || grid.num_classes() != ctx.teacher().num_classes()) {
        throw ValidationError("student and teacher grids differ in spec");
    }
    const std::size_t n_cams = ctx.cameras().size();
    std::vector<RenderResult> teacher(n_cams), student(n_cams);
    std::vector<ViewLossInput> views(n_cams);
    for (std::size_t i = 0; i < n_cams; ++i) {
        const std::span<const std::size_t> sel(selection[i]);
        teacher[i] = ctx.teacher_render(i, sel);
        student[i] = render_view(grid, ctx.cameras()[i], cfg.sampling, sel, cfg.render);
        views[i] = {&teacher[i], &student[i], &ctx.segments()[i]};
    }
    const TotalLoss tl = total_loss(views, cfg.weights, cfg.mode);

    Objective obj;
    obj.report = tl.report;
    SupervisionLoss sup;
    if (cfg.gt_weight > 0.0) {
        sup = voxel_supervision_loss(params, ctx.gt());
        obj.supervision = sup.value;
    }
    obj.value = obj.report.total + cfg.gt_weight * obj.supervision;
    if (!with_gradient) {
        return obj;
    }

    RenderGradients grads = RenderGradients::zeros(grid);
    for (std::size_t i = 0; i < n_cams; ++i) {
        const RenderUpstream& up = tl.upstream[i];
        if (up.d_depth.empty() && up.d_semantics.empty() && up.d_weights.empty()) {
            continue;
        }
        render_backward_into(grid, ctx.cameras()[i], cfg.sampling,
                             std::span<const std::size_t>(selection[i]), up, grads, cfg.render);
    }
    obj.grad.d_density_logits.resize(grid.num_voxels());
    for (std::size_t v = 0; v < grid.num_voxels(); ++v) {
        obj.grad.d_density_logits[v] = grads.d_density[v] * sigmoid(params.density_logits[v]);
    }
    obj.grad.d_semantic_logits = std::move(grads.d_semantics);
    if (cfg.gt_weight > 0.0) {
        for (std::size_t v = 0; v < obj.grad.d_density_logits.size(); ++v) {
            obj.grad.d_density_logits[v] += cfg.gt_weight * sup.grad.d_density_logits[v];
        }
        for (std::size_t i = 0; i < obj.grad.d_semantic_logits.size(); ++i) {
            obj.grad.d_semantic_logits[i] += cfg.gt_weight * sup.grad.d_semantic_logits[i];
        }
    }
    return obj;
}

StepResult distill_step(StudentParams& params, const DistillContext& ctx, const TrainConfig& cfg,
                        std::size_t step_index) {
    const auto selection = sample_step_rays(ctx, cfg, step_index);
    StepResult out;
    out.objective = evaluate_objective(params, ctx, cfg, selection, true);
    out.report = out.objective.report;
    for (std::size_t v = 0; v < params.density_logits.size(); ++v) {
        params.density_logits[v] -= cfg.learning_rate * out.objective.grad.d_density_logits[v];
    }
    for (std::size_t i = 0; i < params.semantic_logits.size(); ++i) {
        params.semantic_logits[i] -= cfg.learning_rate * out.objective.grad.d_semantic_logits[i];
    }
    return out;
}

namespace {

double student_miou(const StudentParams& params, const SemanticLabelGrid& gt, double threshold) {
    return miou(argmax_labels(params.to_grid(), threshold), gt).miou;
}

void write_snapshots(const std::filesystem::path& dir, std::size_t step,
                     const StudentParams& params, const DistillContext& ctx,
                     const TrainConfig& cfg) {
    std::filesystem::create_directories(dir);
    const VoxelGrid grid = params.to_grid();
    for (std::size_t i = 0; i < ctx.cameras().size(); ++i) {
        const RenderResult r = render_view(grid, ctx.cameras()[i], cfg.sampling, std::nullopt, cfg.render);
        char stem[64];
        std::snprintf(stem, sizeof(stem), "step%06zu_cam%zu", step, i);
        write_depth_pgm(dir / (std::string(stem) + "_depth.pgm"), r.view);
        write_semantic_ppm(dir / (std::string(stem) + "_semantics.ppm"), r.view);
    }
}

} // namespace

RunResult run_distillation(const SceneConfig& scene_cfg, const TrainConfig& cfg,
                           const RunOutputs& outputs) {
    cfg.validate();
    SyntheticScene scene = make_synthetic_scene(scene_cfg);
    if (scene_cfg.cameras.empty()) {
        throw ValidationError("scene has no cameras");
    }
    const DistillContext ctx(std::move(scene.teacher), std::move(scene.gt), scene_cfg.cameras, cfg);

    RunResult result;
    result.params = StudentParams::random(scene_cfg.grid, scene_cfg.num_classes, cfg.seed,
                                          cfg.init.density_mean, cfg.init.density_std,
                                          cfg.init.semantic_std);
    result.initial_miou = student_miou(result.params, ctx.gt(), cfg.occupancy_threshold);
    const auto snapshot_dir =
        outputs.out_dir ? std::optional(*outputs.out_dir / "snapshots") : std::nullopt;

    result.history.reserve(static_cast<std::size_t>(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        const auto s = static_cast<std::size_t>(step);
        result.history.push_back(distill_step(result.params, ctx, cfg, s).report);
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            result.evals.push_back(
                {s + 1, student_miou(result.params, ctx.gt(), cfg.occupancy_threshold)});
            if (outputs.snapshots && snapshot_dir) {
                write_snapshots(*snapshot_dir, s + 1, result.params, ctx, cfg);
            }
        }
    }
    result.final_miou = student_miou(result.params, ctx.gt(), cfg.occupancy_threshold);

    if (outputs.out_dir) {
        std::filesystem::create_directories(*outputs.out_dir);
        std::ofstream csv(*outputs.out_dir / "metrics.csv");
        if (!csv) {
            throw IoError("cannot write " + (*outputs.out_dir / "metrics.csv").string());
        }
        csv << loss_csv_header() << '\n';
        for (std::size_t s = 0; s < result.history.size(); ++s) {
            csv << loss_csv_row(s, result.history[s]) << '\n';
        }
        std::ofstream evals(*outputs.out_dir / "evals.csv");
        evals << "step,miou\n";
        char line[64];
        std::snprintf(line, sizeof(line), "0,%.17g\n", result.initial_miou);
        evals << line;
        for (const EvalPoint& e : result.evals) {
            std::snprintf(line, sizeof(line), "%zu,%.17g\n", e.step, e.miou);
            evals << line;
        }
        save_grid(*outputs.out_dir / "student.vxg", result.params.to_grid());
    }
    return result;
}

std::string_view to_string(GradcheckTarget target) {
    switch (target) {
    case GradcheckTarget::Render:
        return "render";
    case GradcheckTarget::Rdc:
        return "rdc";
    case GradcheckTarget::Sad:
        return "sad";
    case GradcheckTarget::Kl:
        return "kl";
    case GradcheckTarget::Silog:
        return "silog";
    case GradcheckTarget::Supervision:
        return "supervision";
    case GradcheckTarget::All:
        return "all";
    }
    return "all";
}

GradcheckTarget parse_gradcheck_target(std::string_view name) {
    for (auto t : {GradcheckTarget::Render, GradcheckTarget::Rdc, GradcheckTarget::Sad,
                   GradcheckTarget::Kl, GradcheckTarget::Silog, GradcheckTarget::Supervision,
                   GradcheckTarget::All}) {
        if (to_string(t) == name) {
            return t;
        }
    }
    throw ValidationError("unknown gradcheck loss '" + std::string(name) +
                          "' (expected render, rdc, sad, kl, silog, supervision or all)");
}

bool GradcheckReport::pass() const {
    return !blocks.empty() &&
           std::all_of(blocks.begin(), blocks.end(), [](const GradcheckBlock& b) { return b.pass; });
}

SceneConfig gradcheck_scene() {
    SceneConfig cfg;
    cfg.grid.dims = {4, 4, 4};
    cfg.grid.origin = Vec3::Zero();
    cfg.grid.voxel_size = 0.5;
    cfg.num_classes = 3;

    Primitive box;
    box.center = Vec3(0.75, 1.0, 0.5);
    box.half_extent = Vec3(0.5, 0.75, 0.5);
    box.class_id = 0;
    Primitive sphere;
    sphere.shape = PrimitiveShape::Sphere;
    sphere.center = Vec3(1.5, 1.25, 1.5);
    sphere.radius = 0.45;
    sphere.class_id = 2;
    cfg.primitives = {box, sphere};
    cfg.cameras = {Camera::look_at(Vec3(-1.5, -1.0, 3.0), Vec3(1.0, 1.0, 0.8), Vec3(0, 0, 1), 4.0,
                                   4.0, 4, 4)};
    return cfg;
}

namespace {

struct GradcheckSetup {
    TrainConfig cfg;
    bool render_functional = false;
};

GradcheckSetup gradcheck_setup(GradcheckTarget target) {
    GradcheckSetup s;
    TrainConfig& cfg = s.cfg;
    cfg.steps = 1;
    cfg.sampling.step_size = 0.2;
    cfg.sampling.max_samples = 64;
    cfg.segments.method = SegmentMethod::Tiles;
    cfg.segments.tile = 2;
    cfg.weights = {0.0, 0.0, 0.0, 0.5};
    switch (target) {
    case GradcheckTarget::Render:
        s.render_functional = true;
        cfg.mode = DistillMode::None;
        break;
    case GradcheckTarget::Rdc:
        cfg.mode = DistillMode::Rdc;
        cfg.weights.lambda_rdc = 1.0;
        break;
    case GradcheckTarget::Sad:
        cfg.mode = DistillMode::Sad;
        cfg.weights.lambda_sad = 1.0;
        break;
    case GradcheckTarget::Kl:
        cfg.mode = DistillMode::Rsc;
        cfg.weights.lambda_kl = 1.0;
        break;
    case GradcheckTarget::Silog:
        cfg.mode = DistillMode::RdcMinus;
        cfg.weights.lambda_rdc = 1.0;
        break;
    case GradcheckTarget::Supervision:
        cfg.mode = DistillMode::None;
        cfg.gt_weight = 1.0;
        break;
    case GradcheckTarget::All:
        cfg.mode = DistillMode::RdcRsc;
        cfg.weights = DistillationWeights{};
        cfg.gt_weight = 1.0;
        break;
    }
    return s;
}

// Linear functional of every rendered depth and logit with fixed random coefficients.
struct RenderFunctional {
    std::vector<RenderUpstream> coeffs;

    double value(const StudentParams& params, const DistillContext& ctx, const TrainConfig& cfg,
                 const std::vector<std::vector<std::size_t>>& sel) const {
        const VoxelGrid grid = params.to_grid();
        double acc = 0.0;
        for (std::size_t i = 0; i < ctx.cameras().size(); ++i) {
            const RenderResult r = render_view(grid, ctx.cameras()[i], cfg.sampling,
                                               std::span<const std::size_t>(sel[i]), cfg.render);
            const auto c = static_cast<std::size_t>(grid.num_classes());
            for (std::size_t k = 0; k < r.pixels.size(); ++k) {
                const std::size_t px = r.pixels[k];
                acc += coeffs[i].d_depth[k] * r.view.depth[px];
                for (std::size_t ch = 0; ch < c; ++ch) {
                    acc += coeffs[i].d_semantics[k * c + ch] * r.view.semantics[px * c + ch];
                }
            }
        }
        return acc;
    }

    ParamGradients gradient(const StudentParams& params, const DistillContext& ctx,
                            const TrainConfig& cfg,
                            const std::vector<std::vector<std::size_t>>& sel) const {
        const VoxelGrid grid = params.to_grid();
        RenderGradients g = RenderGradients::zeros(grid);
        for (std::size_t i = 0; i < ctx.cameras().size(); ++i) {
            render_backward_into(grid, ctx.cameras()[i], cfg.sampling,
                                 std::span<const std::size_t>(sel[i]), coeffs[i], g, cfg.render);
        }
        ParamGradients out;
        out.d_density_logits.resize(g.d_density.size());
        for (std::size_t v = 0; v < g.d_density.size(); ++v) {
            out.d_density_logits[v] = g.d_density[v] * sigmoid(params.density_logits[v]);
        }
        out.d_semantic_logits = std::move(g.d_semantics);
        return out;
    }
};

} // namespace

GradcheckReport gradcheck(const SceneConfig& scene_cfg, GradcheckTarget target,
                          const GradcheckOptions& options) {
    for (int a = 0; a < 3; ++a) {
        if (scene_cfg.grid.dims[a] > 8) {
            throw ValidationError("gradcheck scene grid exceeds 8^3 voxels");
        }
    }
    for (const Camera& cam : scene_cfg.cameras) {
        if (cam.width > 8 || cam.height > 8) {
            throw ValidationError("gradcheck scene images exceed 8x8 pixels");
        }
    }
    if (scene_cfg.cameras.empty()) {
        throw ValidationError("gradcheck scene has no cameras");
    }
    GradcheckSetup setup = gradcheck_setup(target);
    const TrainConfig& cfg = setup.cfg;
    SyntheticScene scene = make_synthetic_scene(scene_cfg);
    const DistillContext ctx(std::move(scene.teacher), std::move(scene.gt), scene_cfg.cameras, cfg);

    std::vector<std::vector<std::size_t>> sel(ctx.cameras().size());
    for (std::size_t i = 0; i < sel.size(); ++i) {
        sel[i].resize(ctx.cameras()[i].num_pixels());
        std::iota(sel[i].begin(), sel[i].end(), std::size_t{0});
    }

    StudentParams params = StudentParams::random(scene_cfg.grid, scene_cfg.num_classes,
                                                 options.seed, 0.5, 0.75, 1.0);
    CounterRng rng(options.seed ^ 0x5bd1e995ULL);

    RenderFunctional functional;
    if (setup.render_functional) {
        const auto c = static_cast<std::size_t>(scene_cfg.num_classes);
        for (const auto& s : sel) {
            RenderUpstream up;
            up.d_depth.resize(s.size());
            up.d_semantics.resize(s.size() * c);
            for (double& v : up.d_depth) {
                v = rng.normal();
            }
            for (double& v : up.d_semantics) {
                v = rng.normal();
            }
            functional.coeffs.push_back(std::move(up));
        }
    }

    const auto value_of = [&](const StudentParams& p) {
        return setup.render_functional ? functional.value(p, ctx, cfg, sel)
                                       : evaluate_objective(p, ctx, cfg, sel, false).value;
    };
    const ParamGradients analytic = setup.render_functional
                                        ? functional.gradient(params, ctx, cfg, sel)
                                        : evaluate_objective(params, ctx, cfg, sel, true).grad;

    GradcheckReport report;
    report.target = target;
    report.tolerance = options.tolerance;

    const auto check_block = [&](const std::string& name, std::vector<double>& values,
                                 const std::vector<double>& grad) {
        std::vector<std::size_t> coords(values.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > options.coordinates_per_block) {
            for (std::size_t i = 0; i < options.coordinates_per_block; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng.uniform(coords.size() - i));
                std::swap(coords[i], coords[j]);
            }
            coords.resize(options.coordinates_per_block);
            std::sort(coords.begin(), coords.end());
        }
        GradcheckBlock block;
        block.name = name;
        block.coordinates = coords.size();
        for (std::size_t idx : coords) {
            const double saved = values[idx];
            values[idx] = saved + options.step;
            const double up = value_of(params);
            values[idx] = saved - options.step;
            const double down = value_of(params);
            values[idx] = saved;
            const double numeric = (up - down) / (2.0 * options.step);
            const double abs_err = std::abs(grad[idx] - numeric);
            const double denom = std::max({std::abs(grad[idx]), std::abs(numeric), options.abs_floor});
            block.max_abs_error = std::max(block.max_abs_error, abs_err);
            block.max_rel_error = std::max(block.max_rel_error, abs_err / denom);
        }
        block.pass = std::isfinite(block.max_rel_error) && block.max_rel_error < options.tolerance;
        report.blocks.push_back(block);
    };
    check_block("density_logits", params.density_logits, analytic.d_density_logits);
    check_block("semantic_logits", params.semantic_logits, analytic.d_semantic_logits);
    return report;
}

} // namespace occdistill
