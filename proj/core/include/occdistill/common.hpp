// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>

namespace occdistill {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// log(1 + exp(x)) without overflow for large x.
inline double softplus(double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Inverse of softplus for y > 0.
inline double inverse_softplus(double y) {
    return y > 30.0 ? y : std::log(std::expm1(y));
}

} // namespace occdistill
