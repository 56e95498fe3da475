// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "occdistill/camera.hpp"
#include "occdistill/volume.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace occdistill {

/// Discrete ray termination distribution along one ray.
///
/// weights[i] = T_i * (1 - exp(-sigma_i * delta_i)) with
/// T_i = exp(-sum_{j<i} sigma_j * delta_j); residual_transmittance is the
/// probability of leaving the sampled interval unabsorbed, so
/// sum(weights) + residual_transmittance == 1 up to rounding.
struct RayDistribution {
    std::vector<double> distances;
    std::vector<double> deltas;
    std::vector<double> weights;
    double residual_transmittance = 1.0;

    std::size_t size() const { return weights.size(); }
    double opacity() const;
};

/// Throws ValidationError on negative sigma, non-positive delta or length mismatch.
RayDistribution transmittance_weights(std::span<const double> sigmas,
                                      std::span<const double> deltas);

/// Expected termination distance sum_i w_i d_i (0 for an empty ray).
double render_depth(const RayDistribution& dist);

/// sum_i w_i s_i per channel. `sample_semantics` holds one row of
/// `num_classes` logits per sample.
std::vector<double> render_semantics(const RayDistribution& dist,
                                     std::span<const double> sample_semantics, int num_classes);

struct RenderOptions {
    Interpolation interpolation = Interpolation::Trilinear;
    /// Pixels with opacity below this are flagged as misses.
    double opacity_floor = 0.01;
    /// 0 picks default_thread_count().
    int threads = 0;
};

/// Per-pixel render outputs, row-major. Semantics are H x W x C.
struct RenderedView {
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<double> depth;
    std::vector<double> semantics;
    std::vector<double> opacity;
    std::vector<std::uint8_t> miss;

    std::size_t num_pixels() const {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }
    std::span<const double> semantics_at(std::size_t pixel) const {
        return std::span<const double>(semantics).subspan(
            pixel * static_cast<std::size_t>(num_classes), static_cast<std::size_t>(num_classes));
    }
};

struct RenderResult {
    RenderedView view;
    /// Row-major pixel index of each rendered ray, in rendering order.
    std::vector<std::size_t> pixels;
    /// One distribution per rendered ray, aligned with `pixels`.
    std::vector<RayDistribution> rays;
};

/// Renders the selected pixels (all pixels when `ray_indices` is empty).
/// Unselected pixels are misses with zero depth, opacity and semantics.
/// Output is independent of the worker count.
RenderResult render_view(const VoxelGrid& grid, const Camera& cam, const SamplingConfig& cfg,
                         std::optional<std::span<const std::size_t>> ray_indices = std::nullopt,
                         const RenderOptions& options = {});

/// Gradients of a scalar objective with respect to the rendered quantities of
/// each ray, aligned with RenderResult::pixels. Any member may be left empty,
/// which stands for an all-zero gradient.
struct RenderUpstream {
    std::vector<double> d_depth;                 // one per ray
    std::vector<double> d_semantics;             // rays x C
    std::vector<std::vector<double>> d_weights;  // per ray, one per sample
};

struct RenderGradients {
    std::vector<double> d_density;    // per voxel
    std::vector<double> d_semantics;  // per voxel x C

    static RenderGradients zeros(const VoxelGrid& grid);
    RenderGradients& operator+=(const RenderGradients& other);
};

/// Adjoint of render_view: pulls the upstream ray gradients back to the voxel
/// density and logit fields through the closed-form weight derivatives
///   dw_i/dsigma_i = delta_i T_i exp(-sigma_i delta_i),
///   dw_i/dsigma_j = -delta_j w_i for j < i,
/// and the interpolation stencil of every sample. Sample distances are
/// constants. Accumulation runs in (ray, sample) order, so the result does not
/// depend on the worker count.
RenderGradients render_backward(const VoxelGrid& grid, const Camera& cam,
                                const SamplingConfig& cfg,
                                std::optional<std::span<const std::size_t>> ray_indices,
                                const RenderUpstream& upstream, const RenderOptions& options = {});

/// Same as render_backward but adds into `grads` (sized for `grid`).
void render_backward_into(const VoxelGrid& grid, const Camera& cam, const SamplingConfig& cfg,
                          std::optional<std::span<const std::size_t>> ray_indices,
                          const RenderUpstream& upstream, RenderGradients& grads,
                          const RenderOptions& options = {});

} // namespace occdistill
