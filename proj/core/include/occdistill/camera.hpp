// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "occdistill/common.hpp"

#include <Eigen/Geometry>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace occdistill {

/// Pinhole camera. The upper-left 3x3 of `intrinsic` is K (fx, fy, cx, cy in
/// pixels, skew ignored). `extrinsic` maps camera coordinates to world
/// coordinates; camera frame is x right (columns), y down (rows), z forward.
/// A world-to-camera matrix M converts with `extrinsic = M.inverse()`.
struct Camera {
    Mat4 intrinsic = Mat4::Identity();
    Mat4 extrinsic = Mat4::Identity();
    int width = 704;
    int height = 384;

    double fx() const { return intrinsic(0, 0); }
    double fy() const { return intrinsic(1, 1); }
    double cx() const { return intrinsic(0, 2); }
    double cy() const { return intrinsic(1, 2); }
    Mat3 rotation() const { return extrinsic.topLeftCorner<3, 3>(); }
    Vec3 position() const { return extrinsic.topRightCorner<3, 1>(); }
    std::size_t num_pixels() const {
        return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    }

    /// Throws ValidationError unless fx, fy > 0, size >= 1 and the extrinsic
    /// rotation is orthonormal with det +1 (1e-6).
    void validate() const;

    static Camera pinhole(double fx, double fy, double cx, double cy, int width, int height,
                          const Mat4& cam_to_world = Mat4::Identity());

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image rows run against it).
    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx,
                          double fy, int width, int height);

    bool operator==(const Camera& other) const {
        return intrinsic == other.intrinsic && extrinsic == other.extrinsic &&
               width == other.width && height == other.height;
    }
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();
    int row = 0;
    int col = 0;
};

struct SamplingConfig {
    double step_size = 0.4;
    int max_samples = 192;
    double near = 0.0;

    void validate() const;
};

struct Aabb {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Ones();
};

/// Ray through the center of pixel (row, col).
Ray pixel_ray(const Camera& cam, int row, int col);

/// All H*W rays in row-major pixel order.
std::vector<Ray> get_rays(const Camera& cam);

/// Slab-method parameter interval [t_near, t_far] of the ray inside the box,
/// with t_near clamped to max(t_near, near, 0). Empty on a miss.
std::optional<std::pair<double, double>> ray_aabb(const Ray& ray, const Aabb& box,
                                                  double near = 0.0);

struct RaySamples {
    std::vector<double> distances;
    std::vector<Vec3> points;
};

/// Mid-bin samples d_k = t_near + (k + 0.5) * step over the clipped interval,
/// K = min(floor((t_far - t_near) / step), max_samples).
RaySamples get_points(const Ray& ray, const SamplingConfig& cfg, const Aabb& box);

/// Fractional (row, col) pixel index of a world point; empty behind the camera.
/// Inverse of pixel_ray: the point on pixel (u, v)'s ray projects to (u, v).
std::optional<Eigen::Vector2d> project(const Camera& cam, const Vec3& world);

/// min(count, num_rays) distinct ray indices drawn uniformly without replacement,
/// returned sorted. Partial Fisher-Yates driven by CounterRng(seed).
/// Throws ValidationError if num_rays == 0 or count == 0.
std::vector<std::size_t> sample_ray_subset(std::size_t num_rays, std::size_t count,
                                           std::uint64_t seed);

} // namespace occdistill
