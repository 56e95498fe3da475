// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <occdistill/config.hpp>
#include <occdistill/distill.hpp>
#include <occdistill/error.hpp>
#include <occdistill/io.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

using namespace occdistill;

namespace {

/// 16^3 grid with a box and a sphere seen by two small cameras.
SceneConfig small_scene() {
    SceneConfig s;
    s.grid.dims = {16, 16, 16};
    s.grid.origin = Vec3::Zero();
    s.grid.voxel_size = 0.25;
    s.num_classes = 2;
    Primitive box;
    box.center = Vec3(2.0, 1.5, 1.0);
    box.half_extent = Vec3(1.0, 0.75, 0.75);
    box.class_id = 1;
    Primitive ball;
    ball.shape = PrimitiveShape::Sphere;
    ball.center = Vec3(1.5, 3.0, 2.5);
    ball.radius = 0.7;
    ball.class_id = 0;
    s.primitives = {box, ball};
    s.cameras = {
        Camera::look_at(Vec3(-3, -3, 5), Vec3(2, 2, 1.5), Vec3::UnitZ(), 16, 16, 16, 16),
        Camera::look_at(Vec3(7, 7, 5), Vec3(2, 2, 1.5), Vec3::UnitZ(), 16, 16, 16, 16)};
    return s;
}

TrainConfig small_train() {
    TrainConfig t;
    t.steps = 10;
    t.ray_budget = 128;
    t.sampling.step_size = 0.1;
    t.sampling.max_samples = 96;
    t.render.interpolation = Interpolation::Nearest;
    t.segments.method = SegmentMethod::Tiles;
    t.segments.tile = 4;
    t.eval_every = 5;
    return t;
}

DistillContext make_context(const SceneConfig& scene, const TrainConfig& cfg) {
    SyntheticScene s = make_synthetic_scene(scene);
    return DistillContext(std::move(s.teacher), std::move(s.gt), scene.cameras, cfg);
}

} // namespace

TEST(SyntheticScene, UnitBoxMatchesTeacherArgmax) {
    SceneConfig s = small_scene();
    s.primitives.resize(1);
    s.primitives[0].center = Vec3(2, 2, 2);
    s.primitives[0].half_extent = Vec3(0.5, 0.5, 0.5);
    const SyntheticScene scene = make_synthetic_scene(s);
    std::size_t occupied = 0;
    for (auto l : scene.gt.labels) {
        occupied += l == 1 ? 1 : 0;
    }
    EXPECT_EQ(occupied, 64u);  // 4 x 4 x 4 voxel centres inside a unit box
    EXPECT_EQ(argmax_labels(scene.teacher), scene.gt);
}

TEST(SyntheticScene, CubeVoxelCountAndOverlapPrecedence) {
    SceneConfig s = small_scene();
    s.grid.voxel_size = 0.4;
    s.grid.dims = {12, 12, 12};
    s.primitives.resize(1);
    s.primitives[0].center = Vec3(2.4, 2.4, 2.4);
    s.primitives[0].half_extent = Vec3(1.0, 1.0, 1.0);
    s.primitives[0].class_id = 0;
    const auto one = make_synthetic_scene(s);
    EXPECT_EQ(std::count(one.gt.labels.begin(), one.gt.labels.end(), 0), 125);

    Primitive later = s.primitives[0];
    later.class_id = 1;
    s.primitives.push_back(later);
    const auto two = make_synthetic_scene(s);
    EXPECT_EQ(std::count(two.gt.labels.begin(), two.gt.labels.end(), 1), 125);
    EXPECT_EQ(std::count(two.gt.labels.begin(), two.gt.labels.end(), 0), 0);
}

TEST(SyntheticScene, ReferenceScene) {
    const SceneConfig ref = reference_scene();
    const SyntheticScene scene = make_synthetic_scene(ref);
    EXPECT_EQ(scene.gt.spec.dims, (std::array<int, 3>{32, 32, 8}));
    const auto free = scene.gt.free_label();
    EXPECT_EQ(std::count_if(scene.gt.labels.begin(), scene.gt.labels.end(),
                            [&](auto l) { return l != free; }),
              168);
    EXPECT_EQ(argmax_labels(scene.teacher), scene.gt);
}

TEST(SyntheticScene, LabelNoiseOnlyTouchesTeacher) {
    SceneConfig s = small_scene();
    s.label_noise = 0.5;
    const SyntheticScene noisy = make_synthetic_scene(s);
    s.label_noise = 0.0;
    const SyntheticScene clean = make_synthetic_scene(s);
    EXPECT_EQ(noisy.gt, clean.gt);
    const IouReport r = miou(argmax_labels(noisy.teacher), noisy.gt);
    EXPECT_LT(r.miou, 1.0);
    EXPECT_EQ(r.per_class_iou.back(), 1.0);  // geometry is untouched
}

TEST(SyntheticScene, RejectsInvalidScenes) {
    SceneConfig s = small_scene();
    s.primitives[0].class_id = 2;
    EXPECT_THROW(s.validate(), ValidationError);
    s = small_scene();
    s.primitives[1].center = Vec3(100, 100, 100);
    EXPECT_THROW(s.validate(), ValidationError);
    s = small_scene();
    s.label_noise = 1.5;
    EXPECT_THROW(s.validate(), ValidationError);
}

TEST(StudentParams, GridRoundTrip) {
    const StudentParams p = StudentParams::random(small_scene().grid, 2, 3, -1.0, 2.0, 1.0);
    const StudentParams q = StudentParams::from_grid(p.to_grid());
    for (std::size_t i = 0; i < p.density_logits.size(); ++i) {
        EXPECT_NEAR(q.density_logits[i], p.density_logits[i], 1e-9);
    }
    EXPECT_EQ(q.semantic_logits, p.semantic_logits);
    EXPECT_EQ(StudentParams::random(small_scene().grid, 2, 3, -1.0, 2.0, 1.0), p);
    EXPECT_NE(StudentParams::random(small_scene().grid, 2, 4, -1.0, 2.0, 1.0), p);
}

TEST(Supervision, Examples) {
    GridSpec s;
    s.dims = {2, 1, 1};
    s.voxel_size = 1.0;
    s.origin = Vec3::Zero();
    SemanticLabelGrid gt;
    gt.spec = s;
    gt.num_classes = 2;
    gt.labels = {1, 2};
    StudentParams p;
    p.spec = s;
    p.num_classes = 2;
    p.density_logits = {0.0, 0.0};
    p.semantic_logits = {0.0, 0.0, 0.0, 0.0};
    const SupervisionLoss half = voxel_supervision_loss(p, gt);
    EXPECT_NEAR(half.bce, std::log(2.0), 1e-15);
    EXPECT_NEAR(half.ce, std::log(2.0), 1e-15);

    p.density_logits = {40.0, -40.0};
    p.semantic_logits = {-40.0, 40.0, 0.0, 0.0};
    EXPECT_LT(voxel_supervision_loss(p, gt).value, 1e-6);
}

TEST(Supervision, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(61);
    const SceneConfig sc = small_scene();
    const SyntheticScene scene = make_synthetic_scene(sc);
    StudentParams p = StudentParams::random(sc.grid, 2, 5, 0.0, 2.0, 1.0);
    const SupervisionLoss loss = voxel_supervision_loss(p, scene.gt);
    std::uniform_int_distribution<std::size_t> pick(0, p.density_logits.size() - 1);
    const double h = 1e-5;
    for (int k = 0; k < 40; ++k) {
        const std::size_t v = pick(rng);
        for (auto* block : {&p.density_logits, &p.semantic_logits}) {
            const std::size_t i = block == &p.density_logits ? v : v * 2 + (k & 1);
            const double analytic = block == &p.density_logits ? loss.grad.d_density_logits[i]
                                                               : loss.grad.d_semantic_logits[i];
            const double saved = (*block)[i];
            (*block)[i] = saved + h;
            const double fp = voxel_supervision_loss(p, scene.gt).value;
            (*block)[i] = saved - h;
            const double fm = voxel_supervision_loss(p, scene.gt).value;
            (*block)[i] = saved;
            const double numeric = (fp - fm) / (2 * h);
            EXPECT_LT(std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6}), 1e-5);
        }
    }
}

TEST(DistillContext, CachedAndFreshTeacherRendersAgree) {
    const SceneConfig sc = small_scene();
    TrainConfig cached = small_train();
    TrainConfig fresh = cached;
    fresh.cache_teacher = false;
    const DistillContext a = make_context(sc, cached);
    const DistillContext b = make_context(sc, fresh);
    EXPECT_EQ(a.segments(), b.segments());
    const auto sel = sample_step_rays(a, cached, 3);
    for (std::size_t c = 0; c < sel.size(); ++c) {
        const RenderResult ra = a.teacher_render(c, sel[c]);
        const RenderResult rb = b.teacher_render(c, sel[c]);
        EXPECT_EQ(ra.pixels, rb.pixels);
        EXPECT_EQ(ra.view.depth, rb.view.depth);
        EXPECT_EQ(ra.view.semantics, rb.view.semantics);
    }
}

TEST(DistillContext, SelectPixelsEqualsSubsetRender) {
    const SceneConfig sc = small_scene();
    const TrainConfig cfg = small_train();
    const SyntheticScene scene = make_synthetic_scene(sc);
    const Camera& cam = sc.cameras[0];
    const RenderResult full = render_view(scene.teacher, cam, cfg.sampling, std::nullopt, cfg.render);
    const std::vector<std::size_t> pixels{200, 3, 77, 255, 0};
    const RenderResult sub = render_view(scene.teacher, cam, cfg.sampling, pixels, cfg.render);
    const RenderResult sel = select_pixels(full, pixels);
    EXPECT_EQ(sel.pixels, sub.pixels);
    EXPECT_EQ(sel.view.depth, sub.view.depth);
    EXPECT_EQ(sel.view.miss, sub.view.miss);
    ASSERT_EQ(sel.rays.size(), sub.rays.size());
    for (std::size_t k = 0; k < sel.rays.size(); ++k) {
        EXPECT_EQ(sel.rays[k].weights, sub.rays[k].weights);
    }
}

TEST(DistillContext, StepRaysRespectBudget) {
    const SceneConfig sc = small_scene();
    const TrainConfig cfg = small_train();
    const DistillContext ctx = make_context(sc, cfg);
    const auto sel = sample_step_rays(ctx, cfg, 0);
    std::size_t total = 0;
    for (const auto& s : sel) {
        total += s.size();
        for (auto p : s) {
            EXPECT_LT(p, 256u);
        }
    }
    EXPECT_EQ(total, cfg.ray_budget);
    EXPECT_EQ(sample_step_rays(ctx, cfg, 0), sel);
    EXPECT_NE(sample_step_rays(ctx, cfg, 1), sel);
}

TEST(Objective, TeacherCopyIsAFixedPoint) {
    const SceneConfig sc = small_scene();
    TrainConfig cfg = small_train();
    cfg.segments.method = SegmentMethod::Slic;
    cfg.segments.slic.k = 8;
    const DistillContext ctx = make_context(sc, cfg);
    StudentParams p = StudentParams::from_grid(ctx.teacher());
    const StudentParams before = p;
    const StepResult r = distill_step(p, ctx, cfg, 0);
    EXPECT_LT(r.objective.value, 1e-9);
    double change = 0.0;
    for (std::size_t i = 0; i < p.density_logits.size(); ++i) {
        change = std::max(change, std::abs(p.density_logits[i] - before.density_logits[i]));
    }
    for (std::size_t i = 0; i < p.semantic_logits.size(); ++i) {
        change = std::max(change, std::abs(p.semantic_logits[i] - before.semantic_logits[i]));
    }
    EXPECT_LT(change, 1e-8);
}

TEST(Objective, SmallStepDecreasesObjective) {
    const SceneConfig sc = small_scene();
    for (DistillMode mode : all_modes()) {
        TrainConfig cfg = small_train();
        cfg.mode = mode;
        cfg.learning_rate = 1e-3;
        cfg.gt_weight = mode == DistillMode::None ? 1.0 : 0.0;
        const DistillContext ctx = make_context(sc, cfg);
        StudentParams p = StudentParams::random(sc.grid, 2, 1, 0.0, 1.0, 1.0);
        const auto sel = sample_step_rays(ctx, cfg, 0);
        const double before = evaluate_objective(p, ctx, cfg, sel, false).value;
        distill_step(p, ctx, cfg, 0);
        const double after = evaluate_objective(p, ctx, cfg, sel, false).value;
        EXPECT_LT(after, before) << to_string(mode);
    }
}

TEST(Objective, EmptyStudentStaysFinite) {
    const SceneConfig sc = small_scene();
    const TrainConfig cfg = small_train();
    const DistillContext ctx = make_context(sc, cfg);
    StudentParams p = StudentParams::random(sc.grid, 2, 1, -60.0, 0.0, 0.0);
    const StepResult r = distill_step(p, ctx, cfg, 0);
    EXPECT_TRUE(std::isfinite(r.objective.value));
    for (double g : r.objective.grad.d_density_logits) {
        ASSERT_TRUE(std::isfinite(g));
    }
}

TEST(Objective, ModeGatesTheTotal) {
    const SceneConfig sc = small_scene();
    TrainConfig cfg = small_train();
    const DistillContext ctx = make_context(sc, cfg);
    const StudentParams p = StudentParams::random(sc.grid, 2, 1, 0.0, 1.0, 1.0);
    const auto sel = sample_step_rays(ctx, cfg, 0);
    const DistillationWeights& w = cfg.weights;
    auto total = [&](DistillMode m) {
        cfg.mode = m;
        return evaluate_objective(p, ctx, cfg, sel, false).report;
    };
    const LossReport full = total(DistillMode::RdcRsc);
    EXPECT_NEAR(full.total, w.lambda_rdc * full.rdc + w.lambda_sad * full.sad + w.lambda_kl * full.kl, 1e-12);
    EXPECT_EQ(total(DistillMode::None).total, 0.0);
    EXPECT_NEAR(total(DistillMode::Rdc).total, w.lambda_rdc * full.rdc, 1e-12);
    EXPECT_NEAR(total(DistillMode::Sad).total, w.lambda_sad * full.sad, 1e-12);
    EXPECT_NEAR(total(DistillMode::Rsc).total, w.lambda_sad * full.sad + w.lambda_kl * full.kl, 1e-12);
    const LossReport minus = total(DistillMode::RdcMinus);
    EXPECT_NEAR(minus.total, w.lambda_rdc * minus.silog, 1e-12);
    EXPECT_EQ(minus.rdc, full.rdc);
}

TEST(Distillation, StepIsThreadCountInvariant) {
    const SceneConfig sc = small_scene();
    std::vector<StudentParams> results;
    for (int threads : {1, 2, 8}) {
        TrainConfig cfg = small_train();
        cfg.render.threads = threads;
        const DistillContext ctx = make_context(sc, cfg);
        StudentParams p = StudentParams::random(sc.grid, 2, 1, -1.0, 1.0, 0.5);
        for (std::size_t s = 0; s < 3; ++s) {
            distill_step(p, ctx, cfg, s);
        }
        results.push_back(p);
    }
    EXPECT_EQ(results[0], results[1]);
    EXPECT_EQ(results[0], results[2]);
}

TEST(Distillation, RunIsDeterministicAndWritesOutputs) {
    const auto dir = occtest::scratch_dir("distill_run");
    const SceneConfig sc = small_scene();
    const TrainConfig cfg = small_train();
    const RunResult a = run_distillation(sc, cfg, RunOutputs{dir / "a", true});
    const RunResult b = run_distillation(sc, cfg, RunOutputs{dir / "b", false});
    EXPECT_EQ(a.history, b.history);
    EXPECT_EQ(a.params, b.params);
    ASSERT_EQ(a.evals.size(), 2u);
    EXPECT_EQ(a.evals[1].step, 10u);
    EXPECT_EQ(a.evals[1].miou, a.final_miou);

    std::ifstream csv(dir / "a" / "metrics.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, loss_csv_header());
    int rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
    }
    EXPECT_EQ(rows, 10);
    EXPECT_TRUE(std::filesystem::exists(dir / "a" / "snapshots" / "step000005_cam1_depth.pgm"));
    EXPECT_FALSE(std::filesystem::exists(dir / "b" / "snapshots"));
    EXPECT_EQ(load_grid(dir / "a" / "student.vxg").spec(), sc.grid);
}

TEST(Distillation, ZeroStepsReturnsInitialStudent) {
    const SceneConfig sc = small_scene();
    TrainConfig cfg = small_train();
    cfg.steps = 0;
    const RunResult r = run_distillation(sc, cfg);
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(r.initial_miou, r.final_miou);
    EXPECT_EQ(r.params, StudentParams::random(sc.grid, 2, cfg.seed, cfg.init.density_mean,
                                              cfg.init.density_std, cfg.init.semantic_std));
}

TEST(Distillation, GroundTruthOnlyRunRecoversScene) {
    const SceneConfig sc = small_scene();
    TrainConfig cfg = small_train();
    cfg.mode = DistillMode::None;
    cfg.gt_weight = 1000.0;
    cfg.steps = 300;
    cfg.eval_every = 0;
    const RunResult r = run_distillation(sc, cfg);
    EXPECT_EQ(r.final_miou, 1.0);
}

TEST(Gradcheck, EveryTargetPasses) {
    for (auto t : {GradcheckTarget::Render, GradcheckTarget::Rdc, GradcheckTarget::Sad,
                   GradcheckTarget::Kl, GradcheckTarget::Silog, GradcheckTarget::Supervision,
                   GradcheckTarget::All}) {
        const GradcheckReport r = gradcheck(gradcheck_scene(), t);
        EXPECT_TRUE(r.pass()) << to_string(t);
        ASSERT_EQ(r.blocks.size(), 2u);
        for (const auto& b : r.blocks) {
            EXPECT_LT(b.max_rel_error, 1e-4) << to_string(t) << " " << b.name;
            EXPECT_GT(b.coordinates, 0u);
        }
    }
    GradcheckOptions strict;
    strict.tolerance = 1e-14;
    EXPECT_FALSE(gradcheck(gradcheck_scene(), GradcheckTarget::Rdc, strict).pass());
}

TEST(Gradcheck, TargetNamesAndSizeLimit) {
    for (auto t : {GradcheckTarget::Render, GradcheckTarget::Rdc, GradcheckTarget::Sad,
                   GradcheckTarget::Kl, GradcheckTarget::Silog, GradcheckTarget::Supervision,
                   GradcheckTarget::All}) {
        EXPECT_EQ(parse_gradcheck_target(to_string(t)), t);
    }
    EXPECT_THROW(parse_gradcheck_target("bogus"), ValidationError);
    EXPECT_THROW(gradcheck(reference_scene(), GradcheckTarget::Rdc), ValidationError);
}

TEST(Distillation, ReferenceLossIsSmoothed) {
    // Means over consecutive 50-step blocks should not rise by more than 1%.
    ExperimentConfig ref = reference_experiment();
    const RunResult r = run_distillation(ref.scene, ref.train);
    ASSERT_EQ(r.history.size(), 2000u);
    std::vector<double> blocks;
    for (std::size_t b = 0; b < 40; ++b) {
        double sum = 0.0;
        for (std::size_t s = b * 50; s < (b + 1) * 50; ++s) {
            sum += r.history[s].total;
        }
        blocks.push_back(sum / 50.0);
    }
    for (std::size_t b = 1; b < blocks.size(); ++b) {
        EXPECT_LE(blocks[b], blocks[b - 1] * 1.01) << "block " << b;
    }
    EXPECT_GE(r.final_miou - r.initial_miou, 0.3);
}
