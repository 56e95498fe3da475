// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "occdistill/common.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace occdistill {

/// Axis-aligned voxel lattice. Defaults describe the Occ3D occupancy volume:
/// 200x200x16 voxels of 0.4 m starting at (-40, -40, -1).
struct GridSpec {
    std::array<int, 3> dims{200, 200, 16};
    Vec3 origin{-40.0, -40.0, -1.0};
    double voxel_size = 0.4;

    /// Throws ValidationError on non-positive dims/voxel size or non-finite origin.
    void validate() const;

    std::size_t num_voxels() const {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
               static_cast<std::size_t>(dims[2]);
    }

    Vec3 aabb_min() const { return origin; }
    Vec3 aabb_max() const {
        return origin + voxel_size * Vec3(dims[0], dims[1], dims[2]);
    }

    /// Linear index, x-major: x varies slowest, z fastest.
    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(x) * static_cast<std::size_t>(dims[1]) +
                static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(dims[2]) +
               static_cast<std::size_t>(z);
    }

    std::array<int, 3> coords(std::size_t linear) const;

    Vec3 voxel_center(int x, int y, int z) const {
        return origin + voxel_size * Vec3(x + 0.5, y + 0.5, z + 0.5);
    }

    bool operator==(const GridSpec& other) const {
        return dims == other.dims && origin == other.origin && voxel_size == other.voxel_size;
    }
};

/// Continuous voxel coordinates: (p - origin) / voxel_size, no clamping.
Vec3 world_to_grid(const Vec3& p, const GridSpec& spec);

enum class Interpolation { Trilinear, Nearest };

/// Voxels and weights that reconstruct a field value at one point.
/// count == 0 means the point lies outside the sampling support (empty space).
struct SampleStencil {
    std::array<std::size_t, 8> voxel{};
    std::array<double, 8> weight{};
    int count = 0;
};

/// Trilinear: values sit at voxel centers, support is the closed box spanned by
/// the first and last centers on each axis. Nearest: the voxel containing p,
/// support is the half-open grid AABB.
SampleStencil make_stencil(const GridSpec& spec, const Vec3& p, Interpolation mode);

class VoxelGrid {
  public:
    VoxelGrid() = default;
    /// Zero density and zero logits.
    VoxelGrid(const GridSpec& spec, int num_classes);
    /// Takes ownership of the fields and validates them.
    VoxelGrid(const GridSpec& spec, int num_classes, std::vector<double> density,
              std::vector<double> semantics);

    const GridSpec& spec() const { return spec_; }
    int num_classes() const { return num_classes_; }
    std::size_t num_voxels() const { return spec_.num_voxels(); }

    std::span<const double> density() const { return density_; }
    std::span<double> density() { return density_; }
    std::span<const double> semantics() const { return semantics_; }
    std::span<double> semantics() { return semantics_; }

    double density_at(std::size_t voxel) const { return density_[voxel]; }
    std::span<const double> semantics_at(std::size_t voxel) const {
        return std::span<const double>(semantics_).subspan(
            voxel * static_cast<std::size_t>(num_classes_), static_cast<std::size_t>(num_classes_));
    }
    std::span<double> semantics_at(std::size_t voxel) {
        return std::span<double>(semantics_).subspan(voxel * static_cast<std::size_t>(num_classes_),
                                                     static_cast<std::size_t>(num_classes_));
    }

    /// Field lengths, finiteness and density >= 0.
    void validate() const;

    bool operator==(const VoxelGrid& other) const = default;

  private:
    GridSpec spec_;
    int num_classes_ = 0;
    std::vector<double> density_;
    std::vector<double> semantics_;
};

struct PointSample {
    double density = 0.0;
    std::vector<double> semantics;
};

/// Interpolated density and logits at a world point; zero outside the support.
/// Throws ValidationError for a non-finite point.
PointSample sample_field(const VoxelGrid& grid, const Vec3& p,
                         Interpolation mode = Interpolation::Trilinear);

inline PointSample sample_trilinear(const VoxelGrid& grid, const Vec3& p) {
    return sample_field(grid, p, Interpolation::Trilinear);
}

inline double stencil_density(const VoxelGrid& grid, const SampleStencil& st) {
    double acc = 0.0;
    for (int k = 0; k < st.count; ++k) {
        acc += st.weight[k] * grid.density_at(st.voxel[k]);
    }
    return acc;
}

/// Writes the interpolated logits into out (length num_classes).
void stencil_semantics(const VoxelGrid& grid, const SampleStencil& st, std::span<double> out);

/// Per-voxel class ids in [0, C]; id C marks free space.
struct SemanticLabelGrid {
    GridSpec spec;
    int num_classes = 0;
    std::vector<std::int32_t> labels;
    std::optional<std::vector<std::uint8_t>> mask;

    int free_label() const { return num_classes; }
    void validate() const;
    bool operator==(const SemanticLabelGrid& other) const = default;
};

/// Free where density < threshold, else the argmax logit (lowest id on ties).
SemanticLabelGrid argmax_labels(const VoxelGrid& grid, double occupancy_threshold = 0.5);

struct IouReport {
    /// C + 1 entries, the last one is the free class. NaN for classes absent
    /// from both prediction and ground truth.
    std::vector<double> per_class_iou;
    double miou = 0.0;
    int classes_counted = 0;
};

/// Per-class IoU and their mean over the classes present in pred or gt.
/// With use_mask, voxels whose gt mask is zero are ignored.
IouReport miou(const SemanticLabelGrid& pred, const SemanticLabelGrid& gt, bool use_mask = false);

} // namespace occdistill
