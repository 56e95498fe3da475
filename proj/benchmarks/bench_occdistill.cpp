// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include <occdistill/config.hpp>
#include <occdistill/distill.hpp>
#include <occdistill/render.hpp>
#include <occdistill/segments.hpp>

#include <benchmark/benchmark.h>

using namespace occdistill;

namespace {

const ExperimentConfig& reference() {
    static const ExperimentConfig cfg = reference_experiment();
    return cfg;
}

const SyntheticScene& reference_grids() {
    static const SyntheticScene scene = make_synthetic_scene(reference().scene);
    return scene;
}

void BM_RenderForward(benchmark::State& state) {
    const auto& cfg = reference();
    RenderOptions opt = cfg.train.render;
    opt.threads = static_cast<int>(state.range(0));
    const Camera& cam = cfg.scene.cameras[0];
    for (auto _ : state) {
        benchmark::DoNotOptimize(render_view(reference_grids().teacher, cam, cfg.train.sampling, std::nullopt, opt));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(cam.num_pixels()));
}
BENCHMARK(BM_RenderForward)->Arg(1)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond);

void BM_RenderBackward(benchmark::State& state) {
    const auto& cfg = reference();
    const Camera& cam = cfg.scene.cameras[0];
    const VoxelGrid& grid = reference_grids().teacher;
    RenderOptions opt = cfg.train.render;
    opt.threads = 1;
    const RenderResult r = render_view(grid, cam, cfg.train.sampling, std::nullopt, opt);
    RenderUpstream up;
    up.d_depth.assign(r.pixels.size(), 1.0);
    up.d_semantics.assign(r.pixels.size() * static_cast<std::size_t>(grid.num_classes()), 0.5);
    for (auto _ : state) {
        benchmark::DoNotOptimize(render_backward(grid, cam, cfg.train.sampling, std::nullopt, up, opt));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(cam.num_pixels()));
}
BENCHMARK(BM_RenderBackward)->Unit(benchmark::kMillisecond);

void BM_Slic(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    FeatureImage img;
    img.height = n;
    img.width = n;
    img.channels = 3;
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            img.values.push_back(r < n / 2 ? 1.0 : 0.0);
            img.values.push_back(c < n / 3 ? 1.0 : 0.0);
            img.values.push_back(0.5);
        }
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(slic(img, SlicParams{32, 10.0, 10, 0}));
    }
}
BENCHMARK(BM_Slic)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_DistillStep(benchmark::State& state) {
    const auto& cfg = reference();
    TrainConfig train = cfg.train;
    train.ray_budget = static_cast<std::size_t>(state.range(0));
    train.render.threads = 1;
    const auto& scene = reference_grids();
    const DistillContext ctx(scene.teacher, scene.gt, cfg.scene.cameras, train);
    StudentParams p = StudentParams::random(cfg.scene.grid, cfg.scene.num_classes, 0, train.init.density_mean,
                                            train.init.density_std, train.init.semantic_std);
    std::size_t step = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(distill_step(p, ctx, train, step++));
    }
}
BENCHMARK(BM_DistillStep)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
