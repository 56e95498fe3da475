// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "occdistill/render.hpp"
#include "occdistill/error.hpp"
#include "occdistill/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace occdistill {

double RayDistribution::opacity() const {
    return std::accumulate(weights.begin(), weights.end(), 0.0);
}

RayDistribution transmittance_weights(std::span<const double> sigmas,
                                      std::span<const double> deltas) {
    if (sigmas.size() != deltas.size()) {
        throw ValidationError("transmittance_weights: sigma and delta lengths differ");
    }
    RayDistribution out;
    out.deltas.assign(deltas.begin(), deltas.end());
    out.weights.resize(sigmas.size());
    double transmittance = 1.0;
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
        if (!(sigmas[i] >= 0.0)) {
            throw ValidationError("transmittance_weights: negative density");
        }
        if (!(deltas[i] > 0.0)) {
            throw ValidationError("transmittance_weights: interval must be positive");
        }
        const double tau = sigmas[i] * deltas[i];
        out.weights[i] = transmittance * -std::expm1(-tau);
        transmittance *= std::exp(-tau);
    }
    out.residual_transmittance = transmittance;
    return out;
}

double render_depth(const RayDistribution& dist) {
    double depth = 0.0;
    for (std::size_t i = 0; i < dist.weights.size(); ++i) {
        depth += dist.weights[i] * dist.distances[i];
    }
    return depth;
}

std::vector<double> render_semantics(const RayDistribution& dist,
                                     std::span<const double> sample_semantics, int num_classes) {
    const auto c = static_cast<std::size_t>(num_classes);
    if (sample_semantics.size() != dist.weights.size() * c) {
        throw ValidationError("render_semantics: " + std::to_string(sample_semantics.size()) +
                              " logits for " + std::to_string(dist.weights.size()) +
                              " samples of " + std::to_string(num_classes) + " classes");
    }
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < dist.weights.size(); ++i) {
        const double w = dist.weights[i];
        for (std::size_t k = 0; k < c; ++k) {
            out[k] += w * sample_semantics[i * c + k];
        }
    }
    return out;
}

RenderGradients RenderGradients::zeros(const VoxelGrid& grid) {
    RenderGradients g;
    g.d_density.assign(grid.num_voxels(), 0.0);
    g.d_semantics.assign(grid.semantics().size(), 0.0);
    return g;
}

RenderGradients& RenderGradients::operator+=(const RenderGradients& other) {
    if (other.d_density.size() != d_density.size() ||
        other.d_semantics.size() != d_semantics.size()) {
        throw ValidationError("RenderGradients: size mismatch");
    }
    for (std::size_t i = 0; i < d_density.size(); ++i) {
        d_density[i] += other.d_density[i];
    }
    for (std::size_t i = 0; i < d_semantics.size(); ++i) {
        d_semantics[i] += other.d_semantics[i];
    }
    return *this;
}

namespace {

// Everything the forward pass knows about one ray; the backward pass rebuilds it.
struct RayTrace {
    std::vector<double> distances;
    std::vector<SampleStencil> stencils;
    std::vector<double> sigmas;
    std::vector<double> semantics;  // samples x C
    RayDistribution dist;
};

void trace_ray(const VoxelGrid& grid, const Ray& ray, const SamplingConfig& cfg, const Aabb& box,
               Interpolation mode, RayTrace& out) {
    const auto c = static_cast<std::size_t>(grid.num_classes());
    RaySamples samples = get_points(ray, cfg, box);
    const std::size_t k = samples.distances.size();
    out.distances = std::move(samples.distances);
    out.stencils.resize(k);
    out.sigmas.resize(k);
    out.semantics.assign(k * c, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        out.stencils[i] = make_stencil(grid.spec(), samples.points[i], mode);
        out.sigmas[i] = stencil_density(grid, out.stencils[i]);
        stencil_semantics(grid, out.stencils[i],
                          std::span<double>(out.semantics).subspan(i * c, c));
    }
    const std::vector<double> deltas(k, cfg.step_size);
    out.dist = transmittance_weights(out.sigmas, deltas);
    out.dist.distances = out.distances;
}

std::vector<std::size_t> resolve_selection(const Camera& cam,
                                           std::optional<std::span<const std::size_t>> sel) {
    const std::size_t n = cam.num_pixels();
    if (!sel) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        return all;
    }
    for (std::size_t p : *sel) {
        if (p >= n) {
            throw ValidationError("ray index " + std::to_string(p) + " outside image of " +
                                  std::to_string(n) + " pixels");
        }
    }
    return {sel->begin(), sel->end()};
}

Aabb grid_box(const VoxelGrid& grid) {
    return Aabb{grid.spec().aabb_min(), grid.spec().aabb_max()};
}

int worker_count(const RenderOptions& options) {
    return options.threads > 0 ? options.threads : default_thread_count();
}

} // namespace

RenderResult render_view(const VoxelGrid& grid, const Camera& cam, const SamplingConfig& cfg,
                         std::optional<std::span<const std::size_t>> ray_indices,
                         const RenderOptions& options) {
    cam.validate();
    cfg.validate();
    const auto c = static_cast<std::size_t>(grid.num_classes());

    RenderResult result;
    result.pixels = resolve_selection(cam, ray_indices);
    result.rays.resize(result.pixels.size());

    RenderedView& view = result.view;
    view.height = cam.height;
    view.width = cam.width;
    view.num_classes = grid.num_classes();
    view.depth.assign(cam.num_pixels(), 0.0);
    view.opacity.assign(cam.num_pixels(), 0.0);
    view.semantics.assign(cam.num_pixels() * c, 0.0);
    view.miss.assign(cam.num_pixels(), 1);

    const Aabb box = grid_box(grid);
    parallel_for(result.pixels.size(), worker_count(options),
                 [&](std::size_t begin, std::size_t end) {
                     RayTrace trace;
                     for (std::size_t r = begin; r < end; ++r) {
                         const std::size_t pixel = result.pixels[r];
                         const int row = static_cast<int>(pixel / static_cast<std::size_t>(cam.width));
                         const int col = static_cast<int>(pixel % static_cast<std::size_t>(cam.width));
                         trace_ray(grid, pixel_ray(cam, row, col), cfg, box, options.interpolation,
                                   trace);
                         const double opacity = trace.dist.opacity();
                         view.depth[pixel] = render_depth(trace.dist);
                         view.opacity[pixel] = opacity;
                         view.miss[pixel] = opacity < options.opacity_floor ? 1 : 0;
                         const auto sem = render_semantics(trace.dist, trace.semantics,
                                                           grid.num_classes());
                         std::copy(sem.begin(), sem.end(), view.semantics.begin() + pixel * c);
                         result.rays[r] = std::move(trace.dist);
                     }
                 });
    return result;
}

void render_backward_into(const VoxelGrid& grid, const Camera& cam, const SamplingConfig& cfg,
                          std::optional<std::span<const std::size_t>> ray_indices,
                          const RenderUpstream& upstream, RenderGradients& grads,
                          const RenderOptions& options) {
    cam.validate();
    cfg.validate();
    const auto c = static_cast<std::size_t>(grid.num_classes());
    const std::vector<std::size_t> pixels = resolve_selection(cam, ray_indices);
    const std::size_t n_rays = pixels.size();

    if (!upstream.d_depth.empty() && upstream.d_depth.size() != n_rays) {
        throw ValidationError("render_backward: d_depth has " +
                              std::to_string(upstream.d_depth.size()) + " entries for " +
                              std::to_string(n_rays) + " rays");
    }
    if (!upstream.d_semantics.empty() && upstream.d_semantics.size() != n_rays * c) {
        throw ValidationError("render_backward: d_semantics shape does not match rays x classes");
    }
    if (!upstream.d_weights.empty() && upstream.d_weights.size() != n_rays) {
        throw ValidationError("render_backward: d_weights must have one entry per ray");
    }
    if (grads.d_density.size() != grid.num_voxels() ||
        grads.d_semantics.size() != grid.semantics().size()) {
        throw ValidationError("render_backward: gradient buffers do not match the grid");
    }

    const Aabb box = grid_box(grid);
    const int workers = worker_count(options);

    // Rays are processed in blocks: per-sample gradients are computed in
    // parallel, then scattered to voxels sequentially in (ray, sample) order.
    constexpr std::size_t kBlock = 2048;
    struct SampleGrad {
        std::vector<SampleStencil> stencils;
        std::vector<double> d_sigma;
        std::vector<double> d_sem;  // samples x C
    };
    std::vector<SampleGrad> block(std::min(kBlock, n_rays));

    for (std::size_t block_begin = 0; block_begin < n_rays; block_begin += kBlock) {
        const std::size_t block_size = std::min(kBlock, n_rays - block_begin);
        parallel_for(block_size, workers, [&](std::size_t begin, std::size_t end) {
            RayTrace trace;
            std::vector<double> g;
            std::vector<double> tail;
            for (std::size_t b = begin; b < end; ++b) {
                const std::size_t r = block_begin + b;
                const std::size_t pixel = pixels[r];
                const int row = static_cast<int>(pixel / static_cast<std::size_t>(cam.width));
                const int col = static_cast<int>(pixel % static_cast<std::size_t>(cam.width));
                trace_ray(grid, pixel_ray(cam, row, col), cfg, box, options.interpolation, trace);
                const std::size_t k = trace.sigmas.size();

                const double d_depth = upstream.d_depth.empty() ? 0.0 : upstream.d_depth[r];
                const double* d_sem =
                    upstream.d_semantics.empty() ? nullptr : &upstream.d_semantics[r * c];
                const std::vector<double>* d_w =
                    upstream.d_weights.empty() ? nullptr : &upstream.d_weights[r];
                if (d_w && !d_w->empty() && d_w->size() != k) {
                    throw ValidationError("render_backward: d_weights for ray " +
                                          std::to_string(r) + " has " +
                                          std::to_string(d_w->size()) + " entries, ray has " +
                                          std::to_string(k) + " samples");
                }

                // Upstream gradient of each weight.
                g.assign(k, 0.0);
                for (std::size_t i = 0; i < k; ++i) {
                    double gi = d_depth * trace.distances[i];
                    if (d_sem) {
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            gi += d_sem[ch] * trace.semantics[i * c + ch];
                        }
                    }
                    if (d_w && !d_w->empty()) {
                        gi += (*d_w)[i];
                    }
                    g[i] = gi;
                }

                SampleGrad& out = block[b];
                out.stencils = std::move(trace.stencils);
                out.d_sigma.assign(k, 0.0);
                out.d_sem.assign(k * c, 0.0);

                const auto& w = trace.dist.weights;
                // tail[i] = sum_{m > i} g_m w_m
                tail.assign(k, 0.0);
                for (std::size_t i = k; i-- > 1;) {
                    tail[i - 1] = tail[i] + g[i] * w[i];
                }
                double transmittance = 1.0;
                for (std::size_t i = 0; i < k; ++i) {
                    const double delta = cfg.step_size;
                    const double survive = std::exp(-trace.sigmas[i] * delta);
                    out.d_sigma[i] = g[i] * delta * transmittance * survive - delta * tail[i];
                    transmittance *= survive;
                    if (d_sem) {
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            out.d_sem[i * c + ch] = d_sem[ch] * w[i];
                        }
                    }
                }
            }
        });

        for (std::size_t b = 0; b < block_size; ++b) {
            const SampleGrad& sg = block[b];
            for (std::size_t i = 0; i < sg.d_sigma.size(); ++i) {
                const SampleStencil& st = sg.stencils[i];
                for (int corner = 0; corner < st.count; ++corner) {
                    const double wt = st.weight[corner];
                    if (wt == 0.0) {
                        continue;
                    }
                    const std::size_t v = st.voxel[corner];
                    grads.d_density[v] += wt * sg.d_sigma[i];
                    double* dst = &grads.d_semantics[v * c];
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        dst[ch] += wt * sg.d_sem[i * c + ch];
                    }
                }
            }
        }
    }
}

RenderGradients render_backward(const VoxelGrid& grid, const Camera& cam,
                                const SamplingConfig& cfg,
                                std::optional<std::span<const std::size_t>> ray_indices,
                                const RenderUpstream& upstream, const RenderOptions& options) {
    RenderGradients grads = RenderGradients::zeros(grid);
    render_backward_into(grid, cam, cfg, ray_indices, upstream, grads, options);
    return grads;
}

} // namespace occdistill
