// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <occdistill/error.hpp>
#include <occdistill/render.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace occdistill;

namespace {

GridSpec cube_spec(int n, double voxel, const Vec3& origin = Vec3::Zero()) {
    GridSpec s;
    s.dims = {n, n, n};
    s.origin = origin;
    s.voxel_size = voxel;
    return s;
}

Camera viewer(const GridSpec& s, int size, double f) {
    const Vec3 centre = 0.5 * (s.aabb_min() + s.aabb_max());
    const Vec3 eye = centre + Vec3(-1.7, -1.3, 1.1) * (s.aabb_max() - s.aabb_min()).norm();
    return Camera::look_at(eye, centre, Vec3(0, 0, 1), f, f, size, size);
}

/// Grid with an opaque slab filling every voxel whose centre lies beyond z = face.
VoxelGrid slab_grid(double face, double voxel, double sigma) {
    GridSpec s;
    s.dims = {20, 20, static_cast<int>(std::lround(2.0 / voxel))};
    // Whole voxels in front of the face so the face lies on a voxel boundary.
    s.origin = Vec3(-10 * voxel, -10 * voxel, face - voxel * std::round(1.0 / voxel));
    s.voxel_size = voxel;
    VoxelGrid g(s, 2);
    for (std::size_t v = 0; v < s.num_voxels(); ++v) {
        const auto [x, y, z] = s.coords(v);
        if (s.voxel_center(x, y, z).z() > face) {
            g.density()[v] = sigma;
            g.semantics_at(v)[1] = 1.0;
        }
    }
    return g;
}

double functional(const RenderResult& r, const RenderUpstream& up, int c) {
    double acc = 0.0;
    for (std::size_t k = 0; k < r.pixels.size(); ++k) {
        const std::size_t px = r.pixels[k];
        acc += up.d_depth[k] * r.view.depth[px];
        for (int ch = 0; ch < c; ++ch) {
            acc += up.d_semantics[k * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)] *
                   r.view.semantics[px * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)];
        }
        for (std::size_t i = 0; i < up.d_weights[k].size(); ++i) {
            acc += up.d_weights[k][i] * r.rays[k].weights[i];
        }
    }
    return acc;
}

} // namespace

TEST(TransmittanceWeights, Examples) {
    const double ones[] = {1.0, 1.0, 1.0};
    const double zeros[] = {0.0, 0.0, 0.0};
    auto d = transmittance_weights(zeros, ones);
    EXPECT_EQ(d.weights, (std::vector<double>{0, 0, 0}));
    EXPECT_EQ(d.residual_transmittance, 1.0);

    const double ln2[] = {std::numbers::ln2};
    d = transmittance_weights(ln2, std::span<const double>(ones, 1));
    EXPECT_NEAR(d.weights[0], 0.5, 1e-15);
    EXPECT_NEAR(d.residual_transmittance, 0.5, 1e-15);

    d = transmittance_weights(std::span<const double>(ones, 2), std::span<const double>(ones, 2));
    EXPECT_NEAR(d.weights[0], 1 - std::exp(-1.0), 1e-15);
    EXPECT_NEAR(d.weights[1], std::exp(-1.0) * (1 - std::exp(-1.0)), 1e-15);
    EXPECT_NEAR(d.weights[0], 0.63212, 1e-5);
    EXPECT_NEAR(d.weights[1], 0.23254, 1e-5);
    EXPECT_NEAR(d.residual_transmittance, 0.13534, 1e-5);
    EXPECT_NEAR(d.weights[0] + d.weights[1] + d.residual_transmittance, 1.0, 1e-15);
}

TEST(TransmittanceWeights, RejectsBadInput) {
    const double neg[] = {-0.1};
    const double one[] = {1.0};
    const double zero[] = {0.0};
    EXPECT_THROW(transmittance_weights(neg, one), ValidationError);
    EXPECT_THROW(transmittance_weights(one, zero), ValidationError);
    EXPECT_THROW(transmittance_weights(one, std::span<const double>()), ValidationError);
}

TEST(TransmittanceWeights, NormalizedMonotoneAndOccluding) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + static_cast<std::size_t>(u(rng) * 20);
        std::vector<double> sigma(n), delta(n);
        for (std::size_t i = 0; i < n; ++i) {
            sigma[i] = u(rng) < 0.5 ? 0.0 : u(rng);
            delta[i] = 0.05 + u(rng) / 10;
        }
        const auto d = transmittance_weights(sigma, delta);
        double sum = d.residual_transmittance;
        double t = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            ASSERT_GE(d.weights[i], 0.0);
            sum += d.weights[i];
            const double t_next = t * std::exp(-sigma[i] * delta[i]);
            ASSERT_LE(t_next, t);
            t = t_next;
        }
        ASSERT_NEAR(sum, 1.0, 1e-12);

        const std::size_t j = static_cast<std::size_t>(u(rng) / 3.0 * static_cast<double>(n)) % n;
        auto denser = sigma;
        denser[j] += 1.0;
        const auto e = transmittance_weights(denser, delta);
        for (std::size_t i = j + 1; i < n; ++i) {
            ASSERT_LE(e.weights[i], d.weights[i] + 1e-15);
        }
    }
}

TEST(RenderDepth, Examples) {
    RayDistribution empty;
    empty.weights = {0, 0};
    empty.distances = {1, 2};
    EXPECT_EQ(render_depth(empty), 0.0);

    const double one[] = {1.0};
    const double big[] = {40.0};
    auto opaque = transmittance_weights(big, one);
    opaque.distances = {3.0};
    const double eps = 1 - opaque.weights[0];
    EXPECT_GE(render_depth(opaque), 3.0 * (1 - eps));
    EXPECT_LE(render_depth(opaque), 3.0);

    const double ones[] = {1.0, 1.0};
    auto two = transmittance_weights(ones, ones);
    two.distances = {1.0, 2.0};
    EXPECT_NEAR(render_depth(two), 1.0972, 1e-4);
}

TEST(RenderSemantics, Examples) {
    RayDistribution d;
    d.weights = {0.6, 0.2};
    d.distances = {1, 2};
    d.deltas = {1, 1};
    const double onehot[] = {1, 0, 0, 1};
    EXPECT_EQ(render_semantics(d, onehot, 2), (std::vector<double>{0.6, 0.2}));
    const double same[] = {2, -1, 2, -1};
    const auto r = render_semantics(d, same, 2);
    EXPECT_NEAR(r[0], 0.8 * 2, 1e-15);
    EXPECT_NEAR(r[1], -0.8, 1e-15);
    RayDistribution single;
    single.weights = {0.0, 0.7, 0.0};
    const double sems[] = {5, 5, 0, 1, 9, 9};
    EXPECT_EQ(render_semantics(single, sems, 2), (std::vector<double>{0.0, 0.7}));
    EXPECT_THROW(render_semantics(d, std::span<const double>(same, 3), 2), ValidationError);
}

TEST(RenderView, EmptyGridMissesEverywhere) {
    const GridSpec s = cube_spec(6, 0.5);
    const VoxelGrid g(s, 3);
    const RenderResult r = render_view(g, viewer(s, 8, 8.0), SamplingConfig{});
    for (std::size_t p = 0; p < r.view.num_pixels(); ++p) {
        EXPECT_EQ(r.view.miss[p], 1);
        EXPECT_EQ(r.view.opacity[p], 0.0);
        EXPECT_EQ(r.view.depth[p], 0.0);
    }
}

TEST(RenderView, SlabDepthNearestIsWithinOneStep) {
    for (double face : {2.0, 3.0, 5.0}) {
        const VoxelGrid g = slab_grid(face, 0.4, 50.0);
        const Camera cam = occtest::axis_camera(Vec3::Zero(), 20.0, 5);
        SamplingConfig cfg;
        cfg.step_size = 0.05;
        RenderOptions opt;
        opt.interpolation = Interpolation::Nearest;
        const RenderResult r = render_view(g, cam, cfg, std::nullopt, opt);
        const double depth = r.view.depth[2 * 5 + 2];
        EXPECT_GE(depth, face);
        EXPECT_LE(depth, face + cfg.step_size);
    }
}

TEST(RenderView, SlabDepthTrilinearFineGrid) {
    const VoxelGrid g = slab_grid(3.0, 0.1, 50.0);
    SamplingConfig cfg;
    cfg.step_size = 0.05;
    const RenderResult r = render_view(g, occtest::axis_camera(Vec3::Zero(), 20.0, 5), cfg);
    // The interpolated density ramps up between the last free and first occupied centres.
    EXPECT_NEAR(r.view.depth[12], 3.0, 0.1);
}

TEST(RenderView, MatchesBruteForceOracle) {
    std::mt19937_64 rng(22);
    const GridSpec s = cube_spec(8, 0.25, Vec3(-1, -1, -1));
    SamplingConfig cfg;
    cfg.step_size = 0.1;
    for (int trial = 0; trial < 3; ++trial) {
        const VoxelGrid g = occtest::random_grid(s, 3, rng);
        const Camera cam = viewer(s, 8, 6.0);
        const RenderResult r = render_view(g, cam, cfg);
        for (int row = 0; row < 8; ++row) {
            for (int col = 0; col < 8; ++col) {
                const auto o = occtest::oracle_render_pixel(g, cam, cfg.step_size, cfg.max_samples, row, col);
                const std::size_t p = static_cast<std::size_t>(row * 8 + col);
                ASSERT_NEAR(r.view.depth[p], o.depth, 1e-9);
                ASSERT_NEAR(r.view.opacity[p], o.opacity, 1e-9);
                for (std::size_t c = 0; c < 3; ++c) {
                    ASSERT_NEAR(r.view.semantics[p * 3 + c], o.sem[c], 1e-9);
                }
            }
        }
    }
}

TEST(RenderView, PixelsComposeFromRayDistributions) {
    std::mt19937_64 rng(23);
    const GridSpec s = cube_spec(8, 0.25);
    const VoxelGrid g = occtest::random_grid(s, 2, rng);
    SamplingConfig cfg;
    cfg.step_size = 0.1;
    const RenderResult r = render_view(g, viewer(s, 6, 5.0), cfg);
    for (std::size_t k = 0; k < r.pixels.size(); ++k) {
        const RayDistribution& d = r.rays[k];
        double sum = d.residual_transmittance;
        for (double w : d.weights) {
            sum += w;
        }
        ASSERT_NEAR(sum, 1.0, 1e-12);
        ASSERT_DOUBLE_EQ(r.view.depth[r.pixels[k]], render_depth(d));
    }
}

TEST(RenderView, SubsetMatchesFullRender) {
    std::mt19937_64 rng(24);
    const GridSpec s = cube_spec(6, 0.3);
    const VoxelGrid g = occtest::random_grid(s, 2, rng);
    const Camera cam = viewer(s, 7, 6.0);
    SamplingConfig cfg;
    cfg.step_size = 0.1;
    const RenderResult full = render_view(g, cam, cfg);
    const std::vector<std::size_t> sel{0, 5, 17, 48};
    const RenderResult sub = render_view(g, cam, cfg, std::span<const std::size_t>(sel));
    ASSERT_EQ(sub.pixels, sel);
    for (std::size_t p = 0; p < full.view.num_pixels(); ++p) {
        const bool chosen = std::find(sel.begin(), sel.end(), p) != sel.end();
        EXPECT_EQ(sub.view.depth[p], chosen ? full.view.depth[p] : 0.0);
        EXPECT_EQ(sub.view.miss[p], chosen ? full.view.miss[p] : 1);
    }
}

TEST(RenderView, LogitShiftAddsOpacityTimesConstant) {
    std::mt19937_64 rng(25);
    const GridSpec s = cube_spec(6, 0.3);
    VoxelGrid g = occtest::random_grid(s, 3, rng);
    const Camera cam = viewer(s, 6, 6.0);
    SamplingConfig cfg;
    cfg.step_size = 0.1;
    RenderOptions opt;
    opt.interpolation = Interpolation::Nearest;  // the trilinear support edge makes the shift non-uniform
    const RenderResult a = render_view(g, cam, cfg, std::nullopt, opt);
    for (double& x : g.semantics()) {
        x += 2.5;
    }
    const RenderResult b = render_view(g, cam, cfg, std::nullopt, opt);
    for (std::size_t p = 0; p < a.view.num_pixels(); ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
            ASSERT_NEAR(b.view.semantics[p * 3 + c] - a.view.semantics[p * 3 + c],
                        2.5 * a.view.opacity[p], 1e-12);
        }
    }
}

TEST(RenderView, BitIdenticalAcrossThreadCounts) {
    std::mt19937_64 rng(26);
    const GridSpec s = cube_spec(8, 0.25);
    const VoxelGrid g = occtest::random_grid(s, 3, rng);
    const Camera cam = viewer(s, 16, 12.0);
    SamplingConfig cfg;
    cfg.step_size = 0.05;
    RenderOptions one;
    one.threads = 1;
    const RenderResult base = render_view(g, cam, cfg, std::nullopt, one);
    for (int t : {2, 3, 8}) {
        RenderOptions opt;
        opt.threads = t;
        const RenderResult r = render_view(g, cam, cfg, std::nullopt, opt);
        EXPECT_EQ(r.view.depth, base.view.depth);
        EXPECT_EQ(r.view.semantics, base.view.semantics);
        EXPECT_EQ(r.view.opacity, base.view.opacity);
    }
}

TEST(RenderBackward, SingleSampleDerivatives) {
    // One voxel, one sample of length delta: dw/dsigma = delta * exp(-sigma * delta).
    GridSpec s;
    s.dims = {1, 1, 1};
    s.origin = Vec3(-0.5, -0.5, 1.0);
    s.voxel_size = 1.0;
    const Camera cam = occtest::axis_camera(Vec3::Zero(), 10.0, 1);
    SamplingConfig cfg;
    cfg.step_size = 1.0;
    RenderOptions opt;
    opt.interpolation = Interpolation::Nearest;
    RenderUpstream up;
    up.d_weights = {{1.0}};
    for (double sigma : {0.0, std::numbers::ln2}) {
        const VoxelGrid g(s, 1, {sigma}, {0.0});
        const RenderResult r = render_view(g, cam, cfg, std::nullopt, opt);
        ASSERT_EQ(r.rays[0].size(), 1u);
        const RenderGradients grad = render_backward(g, cam, cfg, std::nullopt, up, opt);
        EXPECT_NEAR(grad.d_density[0], std::exp(-sigma), 1e-15);
        if (sigma > 0) {
            EXPECT_NEAR(r.rays[0].weights[0], 0.5, 1e-15);
            EXPECT_NEAR(grad.d_density[0], 0.5, 1e-15);
        }
    }
}

TEST(RenderBackward, MatchesFiniteDifferences) {
    std::mt19937_64 rng(27);
    std::normal_distribution<double> n(0.0, 1.0);
    for (Interpolation mode : {Interpolation::Trilinear, Interpolation::Nearest}) {
        const GridSpec s = cube_spec(4, 0.5);
        VoxelGrid g = occtest::random_grid(s, 2, rng, 2.0, 0.0);
        for (double& d : g.density()) {
            d += 0.2;
        }
        const Camera cam = viewer(s, 3, 2.5);
        SamplingConfig cfg;
        cfg.step_size = 0.15;
        RenderOptions opt;
        opt.interpolation = mode;
        const RenderResult r = render_view(g, cam, cfg, std::nullopt, opt);
        RenderUpstream up;
        for (std::size_t k = 0; k < r.pixels.size(); ++k) {
            up.d_depth.push_back(n(rng));
            up.d_semantics.push_back(n(rng));
            up.d_semantics.push_back(n(rng));
            std::vector<double> dw(r.rays[k].size());
            for (double& x : dw) {
                x = n(rng);
            }
            up.d_weights.push_back(dw);
        }
        const RenderGradients grad = render_backward(g, cam, cfg, std::nullopt, up, opt);
        const double h = 1e-4;
        const auto check = [&](std::span<double> field, const std::vector<double>& analytic) {
            for (std::size_t i = 0; i < field.size(); ++i) {
                const double saved = field[i];
                field[i] = saved + h;
                const double fp = functional(render_view(g, cam, cfg, std::nullopt, opt), up, 2);
                field[i] = saved - h;
                const double fm = functional(render_view(g, cam, cfg, std::nullopt, opt), up, 2);
                field[i] = saved;
                const double numeric = (fp - fm) / (2 * h);
                const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
                ASSERT_LT(std::abs(numeric - analytic[i]) / denom, 1e-4) << "index " << i;
            }
        };
        check(g.density(), grad.d_density);
        check(g.semantics(), grad.d_semantics);
    }
}

TEST(RenderBackward, BitIdenticalAcrossThreadCounts) {
    std::mt19937_64 rng(28);
    const GridSpec s = cube_spec(8, 0.25);
    const VoxelGrid g = occtest::random_grid(s, 3, rng);
    const Camera cam = viewer(s, 12, 9.0);
    SamplingConfig cfg;
    cfg.step_size = 0.05;
    const RenderResult r = render_view(g, cam, cfg);
    RenderUpstream up;
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t k = 0; k < r.pixels.size(); ++k) {
        up.d_depth.push_back(n(rng));
        for (int c = 0; c < 3; ++c) {
            up.d_semantics.push_back(n(rng));
        }
    }
    RenderOptions one;
    one.threads = 1;
    const RenderGradients base = render_backward(g, cam, cfg, std::nullopt, up, one);
    for (int t : {2, 8}) {
        RenderOptions opt;
        opt.threads = t;
        const RenderGradients other = render_backward(g, cam, cfg, std::nullopt, up, opt);
        EXPECT_EQ(other.d_density, base.d_density);
        EXPECT_EQ(other.d_semantics, base.d_semantics);
    }
}
