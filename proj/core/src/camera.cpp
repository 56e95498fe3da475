// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "occdistill/camera.hpp"
#include "occdistill/error.hpp"
#include "occdistill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace occdistill {

void Camera::validate() const {
    if (width < 1 || height < 1) {
        throw ValidationError("camera width and height must be >= 1");
    }
    if (!intrinsic.allFinite() || !extrinsic.allFinite()) {
        throw ValidationError("camera matrices must be finite");
    }
    if (!(fx() > 0.0) || !(fy() > 0.0)) {
        throw ValidationError("camera focal lengths must be positive");
    }
    const Mat3 r = rotation();
    if (((r.transpose() * r) - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
        throw ValidationError("extrinsic rotation is not orthonormal");
    }
    if (std::abs(r.determinant() - 1.0) > 1e-6) {
        throw ValidationError("extrinsic rotation must have determinant +1");
    }
}

Camera Camera::pinhole(double fx, double fy, double cx, double cy, int width, int height,
                       const Mat4& cam_to_world) {
    Camera cam;
    cam.intrinsic = Mat4::Identity();
    cam.intrinsic(0, 0) = fx;
    cam.intrinsic(1, 1) = fy;
    cam.intrinsic(0, 2) = cx;
    cam.intrinsic(1, 2) = cy;
    cam.extrinsic = cam_to_world;
    cam.width = width;
    cam.height = height;
    return cam;
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy,
                       int width, int height) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-12) {
        throw ValidationError("look_at: up vector is parallel to the viewing direction");
    }
    right.normalize();
    const Vec3 down = forward.cross(right);
    Mat4 pose = Mat4::Identity();
    pose.block<3, 1>(0, 0) = right;
    pose.block<3, 1>(0, 1) = down;
    pose.block<3, 1>(0, 2) = forward;
    pose.block<3, 1>(0, 3) = eye;
    return pinhole(fx, fy, 0.5 * width, 0.5 * height, width, height, pose);
}

void SamplingConfig::validate() const {
    if (!(step_size > 0.0) || !std::isfinite(step_size)) {
        throw ValidationError("step_size must be positive");
    }
    if (max_samples < 1) {
        throw ValidationError("max_samples must be >= 1");
    }
    if (!(near >= 0.0)) {
        throw ValidationError("near must be >= 0");
    }
}

Ray pixel_ray(const Camera& cam, int row, int col) {
    const Vec3 dir_cam((col + 0.5 - cam.cx()) / cam.fx(), (row + 0.5 - cam.cy()) / cam.fy(), 1.0);
    Ray ray;
    ray.origin = cam.position();
    ray.direction = (cam.rotation() * dir_cam).normalized();
    ray.row = row;
    ray.col = col;
    return ray;
}

std::vector<Ray> get_rays(const Camera& cam) {
    cam.validate();
    std::vector<Ray> rays;
    rays.reserve(cam.num_pixels());
    for (int u = 0; u < cam.height; ++u) {
        for (int v = 0; v < cam.width; ++v) {
            rays.push_back(pixel_ray(cam, u, v));
        }
    }
    return rays;
}

std::optional<std::pair<double, double>> ray_aabb(const Ray& ray, const Aabb& box, double near) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        const double o = ray.origin[a];
        const double d = ray.direction[a];
        if (d == 0.0) {
            if (o < box.min[a] || o > box.max[a]) {
                return std::nullopt;
            }
            continue;
        }
        double ta = (box.min[a] - o) / d;
        double tb = (box.max[a] - o) / d;
        if (ta > tb) {
            std::swap(ta, tb);
        }
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    t0 = std::max({t0, near, 0.0});
    if (t1 < t0) {
        return std::nullopt;
    }
    return std::make_pair(t0, t1);
}

RaySamples get_points(const Ray& ray, const SamplingConfig& cfg, const Aabb& box) {
    RaySamples out;
    const auto hit = ray_aabb(ray, box, cfg.near);
    if (!hit) {
        return out;
    }
    const auto [t_near, t_far] = *hit;
    const double bins = std::floor((t_far - t_near) / cfg.step_size);
    const auto k = static_cast<std::size_t>(
        std::min(bins, static_cast<double>(cfg.max_samples)));
    out.distances.reserve(k);
    out.points.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double d = t_near + (static_cast<double>(i) + 0.5) * cfg.step_size;
        out.distances.push_back(d);
        out.points.push_back(ray.origin + d * ray.direction);
    }
    return out;
}

std::optional<Eigen::Vector2d> project(const Camera& cam, const Vec3& world) {
    const Vec3 p = cam.rotation().transpose() * (world - cam.position());
    if (!(p.z() > 0.0)) {
        return std::nullopt;
    }
    const double col = cam.fx() * p.x() / p.z() + cam.cx() - 0.5;
    const double row = cam.fy() * p.y() / p.z() + cam.cy() - 0.5;
    return Eigen::Vector2d(row, col);
}

std::vector<std::size_t> sample_ray_subset(std::size_t num_rays, std::size_t count,
                                           std::uint64_t seed) {
    if (num_rays == 0) {
        throw ValidationError("sample_ray_subset: no rays to sample from");
    }
    if (count == 0) {
        throw ValidationError("sample_ray_subset: count must be positive");
    }
    std::vector<std::size_t> idx(num_rays);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (count >= num_rays) {
        return idx;
    }
    CounterRng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform(num_rays - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace occdistill
