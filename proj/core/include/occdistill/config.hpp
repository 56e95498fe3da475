// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "occdistill/distill.hpp"

#include <filesystem>
#include <string>

namespace occdistill {

/// One experiment record: the scene and the training setup.
///
/// JSON layout (every key optional unless noted, unknown keys rejected):
///   {"scene": {"grid": {"dims", "origin", "voxel_size"}, "num_classes", "seed",
///              "teacher_density", "logit_scale", "label_noise",
///              "primitives": [{"shape": "box"|"sphere", "center", "half_extent"|"radius",
///                              "class"}],                                  (required)
///              "cameras": [{"eye", "target", "up", "fx", "fy", "width", "height"}
///                          | {"intrinsic", "extrinsic", "width", "height"}]},
///    "train": {"steps", "learning_rate", "ray_budget", "mode", "gt_weight", "seed",
///              "eval_every", "weights": {"rdc", "sad", "kl", "silog"},
///              "sampling": {"step_size", "max_samples", "near"},
///              "render": {"interpolation", "opacity_floor", "threads"},
///              "segments": {"method", "k", "compactness", "iterations", "seed", "tile", "files"},
///              "init": {"density_mean", "density_std", "semantic_std"},
///              "occupancy_threshold", "cache_teacher"}}
struct ExperimentConfig {
    SceneConfig scene;
    TrainConfig train;
};

/// Parse errors and unknown keys raise IoError; value checks raise ValidationError.
ExperimentConfig parse_experiment(const std::string& json_text);
ExperimentConfig load_experiment(const std::filesystem::path& path);
std::string dump_experiment(const ExperimentConfig& cfg);
void save_experiment(const std::filesystem::path& path, const ExperimentConfig& cfg);

/// The reference scene with the CI-sized training setup: 2000 steps, 1024 rays,
/// 0.2 m steps, rdc+rsc, nearest sampling. With trilinear sampling an opaque
/// teacher terminates rays on the ramp in front of each occupied voxel centre,
/// and the student learns to fill the free voxel in front instead.
ExperimentConfig reference_experiment();

} // namespace occdistill
