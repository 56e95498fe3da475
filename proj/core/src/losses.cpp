// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "occdistill/losses.hpp"
#include "occdistill/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>

namespace occdistill {

namespace {

// Floor inside log(q) so an empty student bin yields a large but finite loss.
constexpr double kLogFloor = 1e-30;
constexpr double kZeroNorm = 1e-12;

constexpr std::array<DistillMode, 6> kModes{DistillMode::None, DistillMode::RdcMinus,
                                            DistillMode::Rdc,  DistillMode::Sad,
                                            DistillMode::Rsc,  DistillMode::RdcRsc};

constexpr std::array<DistillationWeights, 6> kAblationWeights{{
    {1.0, 1.0, 1.0, 0.5},
    {10.0, 1.0, 1.0, 0.5},
    {100.0, 1.0, 1.0, 0.5},
    {100.0, 10.0, 1.0, 0.5},
    {100.0, 10.0, 10.0, 0.5},
    {1000.0, 10.0, 10.0, 0.5},
}};

// log-softmax of one logit row.
void log_softmax(std::span<const double> logits, std::span<double> out) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) {
        sum += std::exp(v - mx);
    }
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
}

} // namespace

std::string_view to_string(DistillMode mode) {
    switch (mode) {
    case DistillMode::None:
        return "none";
    case DistillMode::RdcMinus:
        return "rdc-minus";
    case DistillMode::Rdc:
        return "rdc";
    case DistillMode::Sad:
        return "sad";
    case DistillMode::Rsc:
        return "rsc";
    case DistillMode::RdcRsc:
        return "rdc+rsc";
    }
    return "none";
}

DistillMode parse_mode(std::string_view name) {
    for (DistillMode m : kModes) {
        if (to_string(m) == name) {
            return m;
        }
    }
    throw ValidationError("unknown distillation mode '" + std::string(name) +
                          "' (expected none, rdc-minus, rdc, sad, rsc or rdc+rsc)");
}

std::span<const DistillMode> all_modes() { return kModes; }

void DistillationWeights::validate() const {
    for (double v : {lambda_rdc, lambda_sad, lambda_kl}) {
        if (!std::isfinite(v) || v < 0.0) {
            throw ValidationError("distillation weights must be finite and >= 0");
        }
    }
    if (!(silog_lambda >= 0.0 && silog_lambda <= 1.0)) {
        throw ValidationError("silog_lambda must lie in [0, 1]");
    }
}

std::span<const DistillationWeights> ablation_weight_presets() { return kAblationWeights; }

std::string loss_csv_header() { return "step,rdc,sad,kl,silog,total,rays_used,segments_used"; }

std::string loss_csv_row(std::size_t step, const LossReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%zu", step, r.rdc, r.sad,
                  r.kl, r.silog, r.total, r.rays_used, r.segments_used);
    return buf;
}

double kl_divergence(std::span<const double> p, std::span<const double> q, double eps) {
    if (p.size() != q.size()) {
        throw ValidationError("kl_divergence: length mismatch");
    }
    if (!(eps >= 0.0)) {
        throw ValidationError("kl_divergence: eps must be >= 0");
    }
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(p[i] >= 0.0) || !(q[i] >= 0.0)) {
            throw ValidationError("kl_divergence: entries must be non-negative");
        }
        sp += p[i] + eps;
        sq += q[i] + eps;
    }
    if (!(sp > 0.0) || !(sq > 0.0)) {
        throw ValidationError("kl_divergence: a distribution has zero mass");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = (p[i] + eps) / sp;
        if (pi == 0.0) {
            continue;
        }
        const double qi = (q[i] + eps) / sq;
        kl += pi * (std::log(pi) - std::log(qi));
    }
    return kl;
}

RdcResult rdc_loss(std::span<const RayDistribution> teacher,
                   std::span<const RayDistribution> student, double eps) {
    if (teacher.size() != student.size()) {
        throw ValidationError("rdc_loss: teacher and student ray counts differ");
    }
    RdcResult out;
    out.d_student_weights.resize(student.size());
    if (teacher.empty()) {
        return out;
    }
    const double inv_rays = 1.0 / static_cast<double>(teacher.size());
    std::vector<double> p, q, dq;
    for (std::size_t r = 0; r < teacher.size(); ++r) {
        const auto& wt = teacher[r].weights;
        const auto& ws = student[r].weights;
        if (wt.size() != ws.size()) {
            throw ValidationError("rdc_loss: ray " + std::to_string(r) + " has " +
                                  std::to_string(wt.size()) + " teacher and " +
                                  std::to_string(ws.size()) + " student samples");
        }
        const std::size_t k = wt.size();
        auto& grad = out.d_student_weights[r];
        grad.assign(k, 0.0);
        if (k == 0) {
            continue;
        }
        const double st = std::accumulate(wt.begin(), wt.end(), 0.0) + eps;
        const double ss = std::accumulate(ws.begin(), ws.end(), 0.0) + eps;
        p.resize(k);
        q.resize(k);
        dq.resize(k);
        double loss = 0.0;
        double dot = 0.0;  // sum_i dL/dq_i * q_i
        for (std::size_t i = 0; i < k; ++i) {
            p[i] = wt[i] / st;
            q[i] = ws[i] / ss;
            if (p[i] > 0.0) {
                loss += p[i] * (std::log(p[i]) - std::log(q[i] + kLogFloor));
                dq[i] = -p[i] / (q[i] + kLogFloor);
            } else {
                dq[i] = 0.0;
            }
            dot += dq[i] * q[i];
        }
        out.value += loss * inv_rays;
        for (std::size_t i = 0; i < k; ++i) {
            grad[i] = (dq[i] - dot) / ss * inv_rays;
        }
    }
    return out;
}

AffinityTensor affinity(const SegmentEmbeddings& e) {
    const auto m = static_cast<std::size_t>(e.rows);
    const auto c = static_cast<std::size_t>(e.cols);
    if (e.values.size() != m * c) {
        throw ValidationError("affinity: embedding matrix has inconsistent shape");
    }
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t r = 0; r < c; ++r) {
            s += e.values[i * c + r] * e.values[i * c + r];
        }
        norms[i] = std::sqrt(s);
        if (norms[i] < kZeroNorm) {
            throw ValidationError("affinity: embedding row " + std::to_string(i) +
                                  " has zero norm");
        }
    }
    AffinityTensor out;
    out.segments = e.rows;
    out.channels = e.cols;
    out.values.resize(m * m * c);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double denom = norms[i] * norms[j];
            for (std::size_t r = 0; r < c; ++r) {
                out.values[(i * m + j) * c + r] = e.values[i * c + r] * e.values[j * c + r] / denom;
            }
        }
    }
    return out;
}

double sad_loss(const AffinityTensor& teacher, const AffinityTensor& student) {
    if (teacher.segments != student.segments || teacher.channels != student.channels ||
        teacher.values.size() != student.values.size()) {
        throw ValidationError("sad_loss: affinity tensors differ in shape");
    }
    if (teacher.values.empty()) {
        return 0.0;
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < teacher.values.size(); ++i) {
        const double d = teacher.values[i] - student.values[i];
        acc += d * d;
    }
    const double m = teacher.segments;
    return acc / (teacher.channels * m * m);
}

LossWithGrad sad_loss(const SegmentEmbeddings& teacher, const SegmentEmbeddings& student) {
    if (teacher.rows != student.rows || teacher.cols != student.cols) {
        throw ValidationError("sad_loss: embedding shapes differ");
    }
    const AffinityTensor ct = affinity(teacher);
    const AffinityTensor cs = affinity(student);
    LossWithGrad out;
    out.value = sad_loss(ct, cs);
    out.count = static_cast<std::size_t>(student.rows);

    const auto m = static_cast<std::size_t>(student.rows);
    const auto c = static_cast<std::size_t>(student.cols);
    const double scale = 1.0 / (static_cast<double>(c) * static_cast<double>(m * m));

    // Unit rows u_i = E_i / |E_i|; C_ijr = u_ir u_jr.
    std::vector<double> u(m * c), norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t r = 0; r < c; ++r) {
            s += student.values[i * c + r] * student.values[i * c + r];
        }
        norms[i] = std::sqrt(s);
        for (std::size_t r = 0; r < c; ++r) {
            u[i * c + r] = student.values[i * c + r] / norms[i];
        }
    }
    // dL/du_kr = 2 sum_j G_kjr u_jr with G = dL/dCs = -2 (Ct - Cs) * scale (symmetric in i, j).
    out.grad.assign(m * c, 0.0);
    std::vector<double> du(c);
    for (std::size_t k = 0; k < m; ++k) {
        std::fill(du.begin(), du.end(), 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t r = 0; r < c; ++r) {
                const std::size_t idx = (k * m + j) * c + r;
                const double g = -2.0 * (ct.values[idx] - cs.values[idx]) * scale;
                du[r] += 2.0 * g * u[j * c + r];
            }
        }
        double proj = 0.0;
        for (std::size_t r = 0; r < c; ++r) {
            proj += u[k * c + r] * du[r];
        }
        for (std::size_t r = 0; r < c; ++r) {
            out.grad[k * c + r] = (du[r] - u[k * c + r] * proj) / norms[k];
        }
    }
    return out;
}

LossWithGrad semantic_kl(std::span<const double> teacher, std::span<const double> student,
                         int num_classes, std::span<const std::uint8_t> valid) {
    const auto c = static_cast<std::size_t>(num_classes);
    if (num_classes < 1 || teacher.size() != student.size() || teacher.size() % c != 0) {
        throw ValidationError("semantic_kl: logit maps differ in shape");
    }
    const std::size_t n = teacher.size() / c;
    if (!valid.empty() && valid.size() != n) {
        throw ValidationError("semantic_kl: valid mask does not match pixel count");
    }
    std::size_t count = 0;
    for (std::size_t p = 0; p < n; ++p) {
        count += valid.empty() || valid[p] ? 1 : 0;
    }
    if (count == 0) {
        throw ValidationError("semantic_kl: no valid pixels");
    }
    LossWithGrad out;
    out.grad.assign(teacher.size(), 0.0);
    out.count = count;
    const double inv = 1.0 / static_cast<double>(count);
    std::vector<double> lt(c), ls(c);
    for (std::size_t p = 0; p < n; ++p) {
        if (!valid.empty() && !valid[p]) {
            continue;
        }
        log_softmax(teacher.subspan(p * c, c), lt);
        log_softmax(student.subspan(p * c, c), ls);
        double kl = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            kl += std::exp(lt[k]) * (lt[k] - ls[k]);
        }
        out.value += kl * inv;
        for (std::size_t k = 0; k < c; ++k) {
            out.grad[p * c + k] = (std::exp(ls[k]) - std::exp(lt[k])) * inv;
        }
    }
    return out;
}

SadTerm segment_affinity_term(std::span<const double> teacher, std::span<const double> student,
                              int num_classes, const SegmentMap& seg) {
    const auto c = static_cast<std::size_t>(num_classes);
    const SegmentEmbeddings et = pool_segments(teacher, num_classes, seg);
    const SegmentEmbeddings es = pool_segments(student, num_classes, seg);

    const auto row_norm = [c](const SegmentEmbeddings& e, std::size_t i) {
        double s = 0.0;
        for (std::size_t r = 0; r < c; ++r) {
            s += e.values[i * c + r] * e.values[i * c + r];
        }
        return std::sqrt(s);
    };
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < static_cast<std::size_t>(et.rows); ++i) {
        if (row_norm(et, i) >= kZeroNorm && row_norm(es, i) >= kZeroNorm) {
            keep.push_back(i);
        }
    }

    SadTerm out;
    out.grad.assign(student.size(), 0.0);
    out.segments_used = keep.size();
    if (keep.empty()) {
        return out;
    }
    SegmentEmbeddings kt, ks;
    kt.rows = ks.rows = static_cast<int>(keep.size());
    kt.cols = ks.cols = num_classes;
    for (std::size_t i : keep) {
        kt.values.insert(kt.values.end(), et.values.begin() + static_cast<std::ptrdiff_t>(i * c),
                         et.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
        ks.values.insert(ks.values.end(), es.values.begin() + static_cast<std::ptrdiff_t>(i * c),
                         es.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
    }
    const LossWithGrad sad = sad_loss(kt, ks);
    out.value = sad.value;

    std::vector<double> d_rows(static_cast<std::size_t>(es.rows) * c, 0.0);
    for (std::size_t k = 0; k < keep.size(); ++k) {
        std::copy_n(sad.grad.begin() + static_cast<std::ptrdiff_t>(k * c), c,
                    d_rows.begin() + static_cast<std::ptrdiff_t>(keep[k] * c));
    }
    out.grad = pool_segments_backward(d_rows, num_classes, seg);
    return out;
}

RscResult rsc_loss(std::span<const double> teacher, std::span<const double> student,
                   int num_classes, const SegmentMap& seg, const DistillationWeights& weights,
                   std::span<const std::uint8_t> valid) {
    weights.validate();
    if (!(weights.lambda_sad > 0.0)) {
        throw ValidationError("rsc_loss: lambda_sad must be positive to define omega");
    }
    const double omega = weights.lambda_kl / weights.lambda_sad;
    const SadTerm sad = segment_affinity_term(teacher, student, num_classes, seg);
    const LossWithGrad kl = semantic_kl(teacher, student, num_classes, valid);
    RscResult out;
    out.sad = sad.value;
    out.kl = kl.value;
    out.value = sad.value + omega * kl.value;
    out.segments_used = sad.segments_used;
    out.grad.resize(sad.grad.size());
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
        out.grad[i] = sad.grad[i] + omega * kl.grad[i];
    }
    return out;
}

LossWithGrad silog_loss(std::span<const double> teacher_depth,
                        std::span<const double> student_depth,
                        std::span<const std::uint8_t> valid, double silog_lambda) {
    if (teacher_depth.size() != student_depth.size() ||
        (!valid.empty() && valid.size() != teacher_depth.size())) {
        throw ValidationError("silog_loss: depth maps differ in shape");
    }
    const std::size_t n_pix = teacher_depth.size();
    std::vector<double> g(n_pix, 0.0);
    double sum = 0.0, sum_sq = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < n_pix; ++p) {
        if (!valid.empty() && !valid[p]) {
            continue;
        }
        if (!(teacher_depth[p] > 0.0) || !(student_depth[p] > 0.0)) {
            throw ValidationError("silog_loss: valid depths must be positive");
        }
        g[p] = std::log(student_depth[p]) - std::log(teacher_depth[p]);
        sum += g[p];
        sum_sq += g[p] * g[p];
        ++n;
    }
    if (n == 0) {
        throw ValidationError("silog_loss: no valid pixels");
    }
    const double nn = static_cast<double>(n);
    LossWithGrad out;
    out.count = n;
    out.value = sum_sq / nn - silog_lambda * sum * sum / (nn * nn);
    out.grad.assign(n_pix, 0.0);
    for (std::size_t p = 0; p < n_pix; ++p) {
        if (!valid.empty() && !valid[p]) {
            continue;
        }
        out.grad[p] = (2.0 * g[p] / nn - 2.0 * silog_lambda * sum / (nn * nn)) / student_depth[p];
    }
    return out;
}

TotalLoss total_loss(std::span<const ViewLossInput> views, const DistillationWeights& weights,
                     DistillMode mode) {
    weights.validate();
    const bool use_rdc = mode == DistillMode::Rdc || mode == DistillMode::RdcRsc;
    const bool use_silog = mode == DistillMode::RdcMinus;
    const bool use_sad =
        mode == DistillMode::Sad || mode == DistillMode::Rsc || mode == DistillMode::RdcRsc;
    const bool use_kl = mode == DistillMode::Rsc || mode == DistillMode::RdcRsc;

    TotalLoss out;
    out.upstream.resize(views.size());
    if (views.empty()) {
        return out;
    }
    const int c_int = views.front().student->view.num_classes;
    const auto c = static_cast<std::size_t>(c_int);

    // Gather per-ray quantities of every view in selection order.
    std::vector<RayDistribution> t_rays, s_rays;
    std::vector<double> t_sem, s_sem, t_depth, s_depth;
    std::vector<std::uint8_t> depth_valid;
    std::vector<std::size_t> offsets;
    for (const auto& v : views) {
        if (!v.teacher || !v.student) {
            throw ValidationError("total_loss: missing render");
        }
        const RenderResult& t = *v.teacher;
        const RenderResult& s = *v.student;
        if (t.pixels != s.pixels || t.view.num_classes != c_int || s.view.num_classes != c_int) {
            throw ValidationError("total_loss: teacher and student renders are not paired");
        }
        offsets.push_back(t_rays.size());
        for (std::size_t r = 0; r < s.pixels.size(); ++r) {
            const std::size_t px = s.pixels[r];
            t_rays.push_back(t.rays[r]);
            s_rays.push_back(s.rays[r]);
            const auto ts = t.view.semantics_at(px);
            const auto ss = s.view.semantics_at(px);
            t_sem.insert(t_sem.end(), ts.begin(), ts.end());
            s_sem.insert(s_sem.end(), ss.begin(), ss.end());
            t_depth.push_back(t.view.depth[px]);
            s_depth.push_back(s.view.depth[px]);
            depth_valid.push_back(!t.view.miss[px] && !s.view.miss[px] && t.view.depth[px] > 0.0 &&
                                          s.view.depth[px] > 0.0
                                      ? 1
                                      : 0);
        }
    }
    offsets.push_back(t_rays.size());
    const std::size_t n_rays = t_rays.size();

    LossReport& rep = out.report;
    rep.rays_used = n_rays;

    const RdcResult rdc = rdc_loss(t_rays, s_rays);
    rep.rdc = rdc.value;

    LossWithGrad kl;
    if (n_rays > 0) {
        kl = semantic_kl(t_sem, s_sem, c_int);
        rep.kl = kl.value;
        rep.pixels_used = kl.count;
    }

    LossWithGrad silog;
    if (std::find(depth_valid.begin(), depth_valid.end(), 1) != depth_valid.end()) {
        silog = silog_loss(t_depth, s_depth, depth_valid, weights.silog_lambda);
        rep.silog = silog.value;
    }

    std::vector<double> sad_grad(s_sem.size(), 0.0);
    std::size_t sad_views = 0;
    double sad_sum = 0.0;
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
        const auto& v = views[vi];
        const std::size_t begin = offsets[vi], end = offsets[vi + 1];
        if (!v.segments || begin == end) {
            continue;
        }
        if (v.segments->height != v.student->view.height ||
            v.segments->width != v.student->view.width) {
            throw ValidationError("total_loss: segment map size does not match the view");
        }
        const SegmentMap local = restrict_segments(*v.segments, v.student->pixels);
        const std::span<const double> ts(t_sem.data() + begin * c, (end - begin) * c);
        const std::span<const double> ss(s_sem.data() + begin * c, (end - begin) * c);
        SadTerm term = segment_affinity_term(ts, ss, c_int, local);
        rep.segments_used += term.segments_used;
        if (term.segments_used == 0) {
            continue;
        }
        ++sad_views;
        sad_sum += term.value;
        std::copy(term.grad.begin(), term.grad.end(),
                  sad_grad.begin() + static_cast<std::ptrdiff_t>(begin * c));
    }
    const double inv_sad_views = sad_views > 0 ? 1.0 / static_cast<double>(sad_views) : 0.0;
    rep.sad = sad_sum * inv_sad_views;

    rep.total = 0.0;
    if (use_rdc) {
        rep.total += weights.lambda_rdc * rep.rdc;
    }
    if (use_silog) {
        rep.total += weights.lambda_rdc * rep.silog;
    }
    if (use_sad) {
        rep.total += weights.lambda_sad * rep.sad;
    }
    if (use_kl) {
        rep.total += weights.lambda_kl * rep.kl;
    }

    for (std::size_t vi = 0; vi < views.size(); ++vi) {
        const std::size_t begin = offsets[vi], end = offsets[vi + 1];
        const std::size_t n = end - begin;
        RenderUpstream& up = out.upstream[vi];
        if (use_rdc) {
            up.d_weights.resize(n);
            for (std::size_t r = 0; r < n; ++r) {
                up.d_weights[r] = rdc.d_student_weights[begin + r];
                for (double& g : up.d_weights[r]) {
                    g *= weights.lambda_rdc;
                }
            }
        }
        if (use_silog && !silog.grad.empty()) {
            up.d_depth.resize(n);
            for (std::size_t r = 0; r < n; ++r) {
                up.d_depth[r] = weights.lambda_rdc * silog.grad[begin + r];
            }
        }
        if ((use_sad || use_kl) && n > 0) {
            up.d_semantics.assign(n * c, 0.0);
            for (std::size_t i = 0; i < n * c; ++i) {
                double g = 0.0;
                if (use_sad) {
                    g += weights.lambda_sad * inv_sad_views * sad_grad[begin * c + i];
                }
                if (use_kl) {
                    g += weights.lambda_kl * kl.grad[begin * c + i];
                }
                up.d_semantics[i] = g;
            }
        }
    }
    return out;
}

} // namespace occdistill
