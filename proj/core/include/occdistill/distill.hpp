// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "occdistill/camera.hpp"
#include "occdistill/losses.hpp"
#include "occdistill/render.hpp"
#include "occdistill/segments.hpp"
#include "occdistill/volume.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace occdistill {

enum class PrimitiveShape { Box, Sphere };

struct Primitive {
    PrimitiveShape shape = PrimitiveShape::Box;
    Vec3 center = Vec3::Zero();
    Vec3 half_extent = Vec3::Ones();  // box
    double radius = 1.0;              // sphere
    int class_id = 0;

    /// Voxel-center containment test.
    bool contains(const Vec3& p) const;
};

struct SceneConfig {
    GridSpec grid;
    int num_classes = 3;
    std::vector<Primitive> primitives;
    std::vector<Camera> cameras;
    std::uint64_t seed = 0;
    /// Teacher density inside occupied voxels.
    double teacher_density = 20.0;
    /// Teacher logits are one-hot times this scale.
    double logit_scale = 10.0;
    /// Fraction of occupied gt voxels whose class is resampled (teacher is built from
    /// the noisy labels, ground truth keeps the clean ones).
    double label_noise = 0.0;

    void validate() const;
};

/// 32x32x8 grid of 0.4 m voxels, 3 classes, one box and one sphere, two 64x64
/// cameras looking down at the objects from opposite corners.
SceneConfig reference_scene();

struct SyntheticScene {
    SemanticLabelGrid gt;
    VoxelGrid teacher;
};

/// Voxelizes the primitives in order (later ones overwrite earlier ones).
SyntheticScene make_synthetic_scene(const SceneConfig& cfg);

/// Trainable student field: density = softplus(density_logits), semantics = logits.
struct StudentParams {
    GridSpec spec;
    int num_classes = 0;
    std::vector<double> density_logits;
    std::vector<double> semantic_logits;

    void validate() const;
    VoxelGrid to_grid() const;
    /// Inverse-softplus of the densities, clamped from below at `min_density`.
    static StudentParams from_grid(const VoxelGrid& grid, double min_density = 1e-12);
    /// density_logits ~ N(density_mean, density_std), semantic_logits ~ N(0, semantic_std).
    static StudentParams random(const GridSpec& spec, int num_classes, std::uint64_t seed,
                                double density_mean, double density_std, double semantic_std);
    bool operator==(const StudentParams& other) const = default;
};

struct ParamGradients {
    std::vector<double> d_density_logits;
    std::vector<double> d_semantic_logits;
};

struct SupervisionLoss {
    double value = 0.0;  // bce + ce
    double bce = 0.0;
    double ce = 0.0;
    ParamGradients grad;
};

/// Mean binary cross-entropy of sigmoid(density_logits) against occupancy over
/// all voxels, plus mean softmax cross-entropy of the logits over occupied voxels.
SupervisionLoss voxel_supervision_loss(const StudentParams& params, const SemanticLabelGrid& gt);

enum class SegmentMethod { Slic, Tiles, File };

struct SegmentConfig {
    SegmentMethod method = SegmentMethod::Slic;
    SlicParams slic{32, 10.0, 10, 0};
    int tile = 8;
    /// One PGM per camera for SegmentMethod::File.
    std::vector<std::filesystem::path> files;
};

/// Density logits start low (free space). Semantic logits start at exactly 0 so
/// the first affinity signs come from the teacher via KL; noisy semantic logits
/// let the sign-blind affinity term lock segments onto a wrong class.
struct StudentInit {
    double density_mean = -3.0;
    double density_std = 0.5;
    double semantic_std = 0.0;
};

struct TrainConfig {
    int steps = 2000;
    double learning_rate = 0.1;
    std::size_t ray_budget = 80000;
    DistillationWeights weights;
    DistillMode mode = DistillMode::RdcRsc;
    double gt_weight = 0.0;
    std::uint64_t seed = 0;
    int eval_every = 100;
    SamplingConfig sampling;
    RenderOptions render;
    SegmentConfig segments;
    StudentInit init;
    double occupancy_threshold = 0.5;
    bool cache_teacher = true;

    void validate() const;
};

/// Frozen teacher, ground truth, cameras and the per-camera segment maps.
/// Teacher renders are computed once per camera when caching is enabled.
class DistillContext {
  public:
    DistillContext(VoxelGrid teacher, SemanticLabelGrid gt, std::vector<Camera> cameras,
                   const TrainConfig& cfg);

    const VoxelGrid& teacher() const { return teacher_; }
    const SemanticLabelGrid& gt() const { return gt_; }
    const std::vector<Camera>& cameras() const { return cameras_; }
    const std::vector<SegmentMap>& segments() const { return segments_; }
    std::size_t total_pixels() const;

    /// Teacher render of one camera restricted to `pixels`.
    RenderResult teacher_render(std::size_t camera, std::span<const std::size_t> pixels) const;

  private:
    VoxelGrid teacher_;
    SemanticLabelGrid gt_;
    std::vector<Camera> cameras_;
    SamplingConfig sampling_;
    RenderOptions render_;
    bool cache_;
    std::vector<RenderResult> full_renders_;
    std::vector<SegmentMap> segments_;
};

/// Keeps only the listed pixels of a full render; equals render_view on that selection.
RenderResult select_pixels(const RenderResult& full, std::span<const std::size_t> pixels);

/// Per-camera pixel lists for one step: a sample of the concatenated pixel
/// index space of all cameras, seeded by cfg.seed + step_index.
std::vector<std::vector<std::size_t>> sample_step_rays(const DistillContext& ctx,
                                                       const TrainConfig& cfg,
                                                       std::size_t step_index);

struct Objective {
    LossReport report;
    /// Unweighted voxel supervision loss.
    double supervision = 0.0;
    /// report.total + gt_weight * supervision.
    double value = 0.0;
    ParamGradients grad;
};

/// Distillation objective of `params` on the given per-camera ray selection.
Objective evaluate_objective(const StudentParams& params, const DistillContext& ctx,
                             const TrainConfig& cfg,
                             const std::vector<std::vector<std::size_t>>& selection,
                             bool with_gradient = true);

struct StepResult {
    LossReport report;
    Objective objective;
};

/// One plain gradient-descent step on a freshly sampled ray subset.
/// Returns the pre-update losses and updates `params` in place.
StepResult distill_step(StudentParams& params, const DistillContext& ctx, const TrainConfig& cfg,
                        std::size_t step_index);

struct EvalPoint {
    std::size_t step = 0;
    double miou = 0.0;
};

struct RunResult {
    std::vector<LossReport> history;
    std::vector<EvalPoint> evals;
    double initial_miou = 0.0;
    double final_miou = 0.0;
    StudentParams params;
};

struct RunOutputs {
    /// Written when set: metrics.csv, evals.csv, student.vxg, and snapshots if enabled.
    std::optional<std::filesystem::path> out_dir;
    bool snapshots = false;
};

RunResult run_distillation(const SceneConfig& scene, const TrainConfig& cfg,
                           const RunOutputs& outputs = {});

/// Which objective gradcheck differentiates.
enum class GradcheckTarget { Render, Rdc, Sad, Kl, Silog, Supervision, All };
std::string_view to_string(GradcheckTarget target);
GradcheckTarget parse_gradcheck_target(std::string_view name);

struct GradcheckBlock {
    std::string name;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool pass = false;
};

struct GradcheckReport {
    GradcheckTarget target = GradcheckTarget::All;
    double tolerance = 1e-4;
    std::vector<GradcheckBlock> blocks;
    bool pass() const;
};

struct GradcheckOptions {
    double tolerance = 1e-4;
    double step = 1e-4;
    /// Coordinates checked per parameter block (all of them when the block is smaller).
    std::size_t coordinates_per_block = 256;
    std::uint64_t seed = 7;
    /// Relative error is |a - n| / max(|a|, |n|, abs_floor).
    double abs_floor = 1e-6;
};

/// 4x4x4 grid, 3 classes, one 4x4 camera; small enough for gradcheck.
SceneConfig gradcheck_scene();

/// Analytic vs central-difference gradient per parameter block
/// (density_logits, semantic_logits) for a random student on `scene`.
/// Throws ValidationError for grids above 8^3 voxels or images above 8x8.
GradcheckReport gradcheck(const SceneConfig& scene, GradcheckTarget target,
                          const GradcheckOptions& options = {});

} // namespace occdistill
