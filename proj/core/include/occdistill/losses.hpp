// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "occdistill/render.hpp"
#include "occdistill/segments.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace occdistill {

/// Which distillation terms enter the total. Mirrors the ablation rows:
/// none (baseline), rdc-minus (SILog on depth), rdc, sad, rsc (sad + kl), rdc+rsc.
enum class DistillMode { None, RdcMinus, Rdc, Sad, Rsc, RdcRsc };

std::string_view to_string(DistillMode mode);
/// Throws ValidationError for unknown names.
DistillMode parse_mode(std::string_view name);
std::span<const DistillMode> all_modes();

struct DistillationWeights {
    double lambda_rdc = 100.0;
    double lambda_sad = 10.0;
    double lambda_kl = 10.0;
    double silog_lambda = 0.5;

    void validate() const;
    bool operator==(const DistillationWeights&) const = default;
};

/// The (lambda_rdc, lambda_sad, lambda_kl) grid of the loss-weight ablation;
/// (100, 10, 10) is the default.
std::span<const DistillationWeights> ablation_weight_presets();

struct LossReport {
    double rdc = 0.0;
    double sad = 0.0;
    double kl = 0.0;
    double silog = 0.0;
    double total = 0.0;
    std::size_t rays_used = 0;
    std::size_t segments_used = 0;
    std::size_t pixels_used = 0;

    bool operator==(const LossReport&) const = default;
};

/// "step,rdc,sad,kl,silog,total,rays_used,segments_used"
std::string loss_csv_header();
/// One CSV row; doubles printed with 17 significant digits.
std::string loss_csv_row(std::size_t step, const LossReport& report);

struct LossWithGrad {
    double value = 0.0;
    std::vector<double> grad;
    std::size_t count = 0;
};

/// KL(p || q) after adding eps to every entry and renormalizing both sides.
/// Terms with p_i = 0 contribute 0. Throws on length mismatch, negative entries
/// or a zero-mass side.
double kl_divergence(std::span<const double> p, std::span<const double> q, double eps = 1e-8);

struct RdcResult {
    double value = 0.0;
    /// d value / d student weight, per ray and sample.
    std::vector<std::vector<double>> d_student_weights;
};

/// Mean over rays of KL(teacher || student) between termination
/// distributions, each normalized as w / (sum(w) + eps). The teacher side is
/// constant. Rays must have matching sample counts.
RdcResult rdc_loss(std::span<const RayDistribution> teacher,
                   std::span<const RayDistribution> student, double eps = 1e-8);

/// M x M x C tensor, index (i * M + j) * C + r.
struct AffinityTensor {
    int segments = 0;
    int channels = 0;
    std::vector<double> values;

    double operator()(int i, int j, int r) const {
        return values[(static_cast<std::size_t>(i) * static_cast<std::size_t>(segments) +
                       static_cast<std::size_t>(j)) *
                          static_cast<std::size_t>(channels) +
                      static_cast<std::size_t>(r)];
    }
};

/// C(i, j, r) = E(i, r) E(j, r) / (|E(i)| |E(j)|). Throws ValidationError on a
/// row with norm < 1e-12.
AffinityTensor affinity(const SegmentEmbeddings& e);

/// sum (Ct - Cs)^2 / (C * M^2). Throws on shape mismatch.
double sad_loss(const AffinityTensor& teacher, const AffinityTensor& student);

/// sad_loss of the two affinity tensors with its gradient w.r.t. the student
/// embedding rows (M x C).
LossWithGrad sad_loss(const SegmentEmbeddings& teacher, const SegmentEmbeddings& student);

/// Mean over valid pixels of KL(softmax(teacher) || softmax(student)). Inputs are
/// pixels x C; an empty `valid` means every pixel. Gradient is w.r.t. student
/// logits (pixels x C). Throws if no pixel is valid.
LossWithGrad semantic_kl(std::span<const double> teacher, std::span<const double> student,
                         int num_classes, std::span<const std::uint8_t> valid = {});

/// Segment-guided affinity term of one view: pools both semantic maps over
/// `seg` and compares their affinity tensors. Segments whose teacher or student
/// embedding has (near) zero norm carry no direction and are left out;
/// `segments_used` counts the rest.
struct SadTerm {
    double value = 0.0;
    std::vector<double> grad;  // pixels x C, w.r.t. student semantics
    std::size_t segments_used = 0;
};
SadTerm segment_affinity_term(std::span<const double> teacher, std::span<const double> student,
                              int num_classes, const SegmentMap& seg);

struct RscResult {
    double sad = 0.0;
    double kl = 0.0;
    double value = 0.0;
    std::vector<double> grad;  // pixels x C, w.r.t. student semantics
    std::size_t segments_used = 0;
};

/// sad + omega * kl with omega = lambda_kl / lambda_sad.
RscResult rsc_loss(std::span<const double> teacher, std::span<const double> student,
                   int num_classes, const SegmentMap& seg, const DistillationWeights& weights,
                   std::span<const std::uint8_t> valid = {});

/// Scale-invariant log depth error over valid pixels:
/// (1/n) sum g^2 - (lambda/n^2) (sum g)^2 with g = ln(student) - ln(teacher).
/// Gradient is w.r.t. student depth. Throws if no pixel is valid or a valid
/// depth is not positive.
LossWithGrad silog_loss(std::span<const double> teacher_depth,
                        std::span<const double> student_depth,
                        std::span<const std::uint8_t> valid, double silog_lambda = 0.5);

/// Teacher and student renders of one view over the same pixel selection, plus
/// the view's segment map (full image).
struct ViewLossInput {
    const RenderResult* teacher = nullptr;
    const RenderResult* student = nullptr;
    const SegmentMap* segments = nullptr;
};

struct TotalLoss {
    LossReport report;
    /// Gradient of report.total w.r.t. each view's student render outputs.
    std::vector<RenderUpstream> upstream;
};

/// All components over every view: rdc is the mean over all rays, kl the mean
/// over all rendered pixels, silog pools the non-miss pixels of every view, and
/// sad is the mean over views of the per-view affinity term. Every component
/// is reported; only the terms of `mode` enter the total and the gradients.
TotalLoss total_loss(std::span<const ViewLossInput> views, const DistillationWeights& weights,
                     DistillMode mode);

} // namespace occdistill
