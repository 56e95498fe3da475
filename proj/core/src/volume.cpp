// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "occdistill/volume.hpp"
#include "occdistill/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace occdistill {

void GridSpec::validate() const {
    for (int axis = 0; axis < 3; ++axis) {
        if (dims[axis] < 1) {
            throw ValidationError("grid dims must be >= 1 on every axis");
        }
    }
    if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) {
        throw ValidationError("voxel_size must be positive and finite");
    }
    if (!origin.allFinite()) {
        throw ValidationError("grid origin must be finite");
    }
}

std::array<int, 3> GridSpec::coords(std::size_t linear) const {
    const auto nz = static_cast<std::size_t>(dims[2]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    const int z = static_cast<int>(linear % nz);
    linear /= nz;
    const int y = static_cast<int>(linear % ny);
    const int x = static_cast<int>(linear / ny);
    return {x, y, z};
}

Vec3 world_to_grid(const Vec3& p, const GridSpec& spec) {
    return (p - spec.origin) / spec.voxel_size;
}

namespace {

// Slack on the closed support so that voxel centres computed in world units
// (x + 0.5) * s do not fall a rounding error outside it.
constexpr double kSupportSlack = 1e-9;

// Lower lattice index and fractional offset along one axis of the center lattice.
bool axis_lerp(double g, int n, int& i0, int& i1, double& f) {
    if (!(g >= -kSupportSlack) || g > static_cast<double>(n - 1) + kSupportSlack) {
        return false;
    }
    g = std::clamp(g, 0.0, static_cast<double>(n - 1));
    if (n == 1) {
        i0 = i1 = 0;
        f = 0.0;
        return true;
    }
    i0 = std::min(static_cast<int>(std::floor(g)), n - 2);
    i1 = i0 + 1;
    f = g - static_cast<double>(i0);
    return true;
}

} // namespace

SampleStencil make_stencil(const GridSpec& spec, const Vec3& p, Interpolation mode) {
    SampleStencil st;
    const Vec3 g = world_to_grid(p, spec);
    if (mode == Interpolation::Nearest) {
        std::array<int, 3> idx{};
        for (int a = 0; a < 3; ++a) {
            const double c = std::floor(g[a]);
            if (c < 0.0 || c >= static_cast<double>(spec.dims[a])) {
                return st;
            }
            idx[a] = static_cast<int>(c);
        }
        st.voxel[0] = spec.index(idx[0], idx[1], idx[2]);
        st.weight[0] = 1.0;
        st.count = 1;
        return st;
    }

    std::array<int, 3> lo{}, hi{};
    std::array<double, 3> f{};
    for (int a = 0; a < 3; ++a) {
        if (!axis_lerp(g[a] - 0.5, spec.dims[a], lo[a], hi[a], f[a])) {
            return st;
        }
    }
    int k = 0;
    for (int cx = 0; cx < 2; ++cx) {
        const double wx = cx ? f[0] : 1.0 - f[0];
        const int x = cx ? hi[0] : lo[0];
        for (int cy = 0; cy < 2; ++cy) {
            const double wy = cy ? f[1] : 1.0 - f[1];
            const int y = cy ? hi[1] : lo[1];
            for (int cz = 0; cz < 2; ++cz) {
                const double wz = cz ? f[2] : 1.0 - f[2];
                const int z = cz ? hi[2] : lo[2];
                st.voxel[k] = spec.index(x, y, z);
                st.weight[k] = wx * wy * wz;
                ++k;
            }
        }
    }
    st.count = 8;
    return st;
}

VoxelGrid::VoxelGrid(const GridSpec& spec, int num_classes)
    : spec_(spec), num_classes_(num_classes) {
    spec_.validate();
    if (num_classes < 1) {
        throw ValidationError("num_classes must be >= 1");
    }
    density_.assign(spec_.num_voxels(), 0.0);
    semantics_.assign(spec_.num_voxels() * static_cast<std::size_t>(num_classes), 0.0);
}

VoxelGrid::VoxelGrid(const GridSpec& spec, int num_classes, std::vector<double> density,
                     std::vector<double> semantics)
    : spec_(spec), num_classes_(num_classes), density_(std::move(density)),
      semantics_(std::move(semantics)) {
    validate();
}

void VoxelGrid::validate() const {
    spec_.validate();
    if (num_classes_ < 1) {
        throw ValidationError("num_classes must be >= 1");
    }
    if (density_.size() != spec_.num_voxels()) {
        throw ValidationError("density field has " + std::to_string(density_.size()) +
                              " entries, expected " + std::to_string(spec_.num_voxels()));
    }
    if (semantics_.size() != spec_.num_voxels() * static_cast<std::size_t>(num_classes_)) {
        throw ValidationError("semantic field length does not match dims * num_classes");
    }
    for (double d : density_) {
        if (!std::isfinite(d) || d < 0.0) {
            throw ValidationError("density values must be finite and >= 0");
        }
    }
    for (double s : semantics_) {
        if (!std::isfinite(s)) {
            throw ValidationError("semantic logits must be finite");
        }
    }
}

void stencil_semantics(const VoxelGrid& grid, const SampleStencil& st, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (int k = 0; k < st.count; ++k) {
        const auto s = grid.semantics_at(st.voxel[k]);
        const double w = st.weight[k];
        for (std::size_t c = 0; c < out.size(); ++c) {
            out[c] += w * s[c];
        }
    }
}

PointSample sample_field(const VoxelGrid& grid, const Vec3& p, Interpolation mode) {
    if (!p.allFinite()) {
        throw ValidationError("sample point must be finite");
    }
    const SampleStencil st = make_stencil(grid.spec(), p, mode);
    PointSample out;
    out.semantics.assign(static_cast<std::size_t>(grid.num_classes()), 0.0);
    out.density = stencil_density(grid, st);
    stencil_semantics(grid, st, out.semantics);
    return out;
}

void SemanticLabelGrid::validate() const {
    spec.validate();
    if (num_classes < 1) {
        throw ValidationError("num_classes must be >= 1");
    }
    if (labels.size() != spec.num_voxels()) {
        throw ValidationError("label grid length does not match dims");
    }
    for (auto l : labels) {
        if (l < 0 || l > num_classes) {
            throw ValidationError("label " + std::to_string(l) + " outside [0, " +
                                  std::to_string(num_classes) + "]");
        }
    }
    if (mask && mask->size() != labels.size()) {
        throw ValidationError("visibility mask shape does not match labels");
    }
}

SemanticLabelGrid argmax_labels(const VoxelGrid& grid, double occupancy_threshold) {
    if (!(occupancy_threshold >= 0.0)) {
        throw ValidationError("occupancy_threshold must be >= 0");
    }
    SemanticLabelGrid out;
    out.spec = grid.spec();
    out.num_classes = grid.num_classes();
    out.labels.resize(grid.num_voxels());
    for (std::size_t v = 0; v < grid.num_voxels(); ++v) {
        if (grid.density_at(v) < occupancy_threshold) {
            out.labels[v] = out.free_label();
            continue;
        }
        const auto s = grid.semantics_at(v);
        out.labels[v] = static_cast<std::int32_t>(std::max_element(s.begin(), s.end()) - s.begin());
    }
    return out;
}

IouReport miou(const SemanticLabelGrid& pred, const SemanticLabelGrid& gt, bool use_mask) {
    if (!(pred.spec == gt.spec) || pred.num_classes != gt.num_classes) {
        throw ValidationError("prediction and ground truth grids have different specs");
    }
    pred.validate();
    gt.validate();
    if (use_mask && !gt.mask) {
        throw ValidationError("use_mask requested but ground truth has no mask");
    }

    const auto n_labels = static_cast<std::size_t>(gt.num_classes) + 1;
    std::vector<std::size_t> inter(n_labels, 0), uni(n_labels, 0);
    for (std::size_t v = 0; v < gt.labels.size(); ++v) {
        if (use_mask && (*gt.mask)[v] == 0) {
            continue;
        }
        const auto p = static_cast<std::size_t>(pred.labels[v]);
        const auto g = static_cast<std::size_t>(gt.labels[v]);
        if (p == g) {
            ++inter[p];
            ++uni[p];
        } else {
            ++uni[p];
            ++uni[g];
        }
    }

    IouReport report;
    report.per_class_iou.assign(n_labels, std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    for (std::size_t c = 0; c < n_labels; ++c) {
        if (uni[c] == 0) {
            continue;
        }
        report.per_class_iou[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
        sum += report.per_class_iou[c];
        ++report.classes_counted;
    }
    report.miou = report.classes_counted > 0 ? sum / report.classes_counted : 0.0;
    return report;
}

} // namespace occdistill
