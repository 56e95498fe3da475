// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "occdistill/segments.hpp"
#include "occdistill/error.hpp"
#include "occdistill/io.hpp"
#include "occdistill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>

namespace occdistill {

void SegmentMap::validate() const {
    if (height < 1 || width < 1) {
        throw ValidationError("segment map must be at least 1x1");
    }
    if (ids.size() != num_pixels()) {
        throw ValidationError("segment map has " + std::to_string(ids.size()) + " ids for " +
                              std::to_string(num_pixels()) + " pixels");
    }
    if (num_segments < 1) {
        throw ValidationError("segment map must have at least one segment");
    }
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(num_segments), 0);
    for (auto id : ids) {
        if (id < 0 || id >= num_segments) {
            throw ValidationError("segment id " + std::to_string(id) + " outside [0, " +
                                  std::to_string(num_segments) + ")");
        }
        seen[static_cast<std::size_t>(id)] = 1;
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
        throw ValidationError("segment map has an id with no pixels");
    }
}

std::vector<std::size_t> SegmentMap::sizes() const {
    std::vector<std::size_t> out(static_cast<std::size_t>(num_segments), 0);
    for (auto id : ids) {
        ++out[static_cast<std::size_t>(id)];
    }
    return out;
}

SegmentEmbeddings pool_segments(std::span<const double> features, int channels,
                                const SegmentMap& seg) {
    seg.validate();
    const auto c = static_cast<std::size_t>(channels);
    if (channels < 1 || features.size() != seg.num_pixels() * c) {
        throw ValidationError("pool_segments: feature map shape does not match segment map");
    }
    SegmentEmbeddings e;
    e.rows = seg.num_segments;
    e.cols = channels;
    e.values.assign(static_cast<std::size_t>(e.rows) * c, 0.0);
    const auto counts = seg.sizes();
    for (std::size_t p = 0; p < seg.num_pixels(); ++p) {
        double* dst = &e.values[static_cast<std::size_t>(seg.ids[p]) * c];
        for (std::size_t k = 0; k < c; ++k) {
            dst[k] += features[p * c + k];
        }
    }
    for (std::size_t m = 0; m < counts.size(); ++m) {
        const double inv = 1.0 / static_cast<double>(counts[m]);
        for (std::size_t k = 0; k < c; ++k) {
            e.values[m * c + k] *= inv;
        }
    }
    return e;
}

std::vector<double> pool_segments_backward(std::span<const double> d_embeddings, int channels,
                                           const SegmentMap& seg) {
    seg.validate();
    const auto c = static_cast<std::size_t>(channels);
    if (d_embeddings.size() != static_cast<std::size_t>(seg.num_segments) * c) {
        throw ValidationError("pool_segments_backward: gradient shape does not match M x C");
    }
    const auto counts = seg.sizes();
    std::vector<double> out(seg.num_pixels() * c);
    for (std::size_t p = 0; p < seg.num_pixels(); ++p) {
        const auto m = static_cast<std::size_t>(seg.ids[p]);
        const double inv = 1.0 / static_cast<double>(counts[m]);
        for (std::size_t k = 0; k < c; ++k) {
            out[p * c + k] = d_embeddings[m * c + k] * inv;
        }
    }
    return out;
}

SegmentMap compact_segments(int height, int width, std::span<const std::int64_t> raw_ids) {
    SegmentMap seg;
    seg.height = height;
    seg.width = width;
    seg.ids.resize(raw_ids.size());
    std::unordered_map<std::int64_t, std::int32_t> remap;
    for (std::size_t p = 0; p < raw_ids.size(); ++p) {
        auto [it, inserted] = remap.try_emplace(raw_ids[p], static_cast<std::int32_t>(remap.size()));
        seg.ids[p] = it->second;
    }
    seg.num_segments = static_cast<int>(remap.size());
    seg.validate();
    return seg;
}

SegmentMap restrict_segments(const SegmentMap& seg, std::span<const std::size_t> pixels) {
    std::vector<std::int64_t> raw;
    raw.reserve(pixels.size());
    for (std::size_t p : pixels) {
        if (p >= seg.num_pixels()) {
            throw ValidationError("restrict_segments: pixel index out of range");
        }
        raw.push_back(seg.ids[p]);
    }
    return compact_segments(1, static_cast<int>(pixels.size()), raw);
}

SegmentMap grid_tiles(int height, int width, int tile) {
    if (tile < 1) {
        throw ValidationError("grid_tiles: tile must be >= 1");
    }
    if (height < 1 || width < 1) {
        throw ValidationError("grid_tiles: image must be at least 1x1");
    }
    const int tiles_x = (width + tile - 1) / tile;
    const int tiles_y = (height + tile - 1) / tile;
    SegmentMap seg;
    seg.height = height;
    seg.width = width;
    seg.num_segments = tiles_x * tiles_y;
    seg.ids.resize(seg.num_pixels());
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            seg.ids[static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
                    static_cast<std::size_t>(c)] = (r / tile) * tiles_x + c / tile;
        }
    }
    return seg;
}

namespace {

struct Center {
    double x = 0.0;  // column coordinate, pixel centers at col + 0.5
    double y = 0.0;
    std::vector<double> feat;
};

// 4-connected components of a label image. Returns the component id per pixel.
std::vector<int> label_components(int h, int w, const std::vector<std::int32_t>& labels,
                                  std::vector<std::int32_t>& comp_label,
                                  std::vector<std::size_t>& comp_size) {
    const std::size_t n = labels.size();
    std::vector<int> comp(n, -1);
    comp_label.clear();
    comp_size.clear();
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < n; ++start) {
        if (comp[start] >= 0) {
            continue;
        }
        const int id = static_cast<int>(comp_label.size());
        comp_label.push_back(labels[start]);
        comp_size.push_back(0);
        comp[start] = id;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++comp_size.back();
            const int r = static_cast<int>(p / static_cast<std::size_t>(w));
            const int c = static_cast<int>(p % static_cast<std::size_t>(w));
            const int nr[4] = {r - 1, r + 1, r, r};
            const int nc[4] = {c, c, c - 1, c + 1};
            for (int k = 0; k < 4; ++k) {
                if (nr[k] < 0 || nr[k] >= h || nc[k] < 0 || nc[k] >= w) {
                    continue;
                }
                const std::size_t q = static_cast<std::size_t>(nr[k]) * static_cast<std::size_t>(w) +
                                      static_cast<std::size_t>(nc[k]);
                if (comp[q] < 0 && labels[q] == labels[p]) {
                    comp[q] = id;
                    stack.push_back(q);
                }
            }
        }
    }
    return comp;
}

// Merges every non-principal component of a label into its largest neighbouring label.
void enforce_connectivity(int h, int w, std::vector<std::int32_t>& labels) {
    const std::size_t n = labels.size();
    for (;;) {
        std::vector<std::int32_t> comp_label;
        std::vector<std::size_t> comp_size;
        const std::vector<int> comp = label_components(h, w, labels, comp_label, comp_size);

        std::unordered_map<std::int32_t, int> principal;
        for (int id = 0; id < static_cast<int>(comp_label.size()); ++id) {
            auto [it, inserted] = principal.try_emplace(comp_label[static_cast<std::size_t>(id)], id);
            if (!inserted && comp_size[static_cast<std::size_t>(id)] >
                                 comp_size[static_cast<std::size_t>(it->second)]) {
                it->second = id;
            }
        }
        if (principal.size() == comp_label.size()) {
            return;
        }

        std::unordered_map<std::int32_t, std::size_t> label_size;
        for (auto l : labels) {
            ++label_size[l];
        }
        std::vector<std::vector<std::size_t>> members(comp_label.size());
        for (std::size_t p = 0; p < n; ++p) {
            members[static_cast<std::size_t>(comp[p])].push_back(p);
        }
        for (int id = 0; id < static_cast<int>(comp_label.size()); ++id) {
            const std::int32_t own = comp_label[static_cast<std::size_t>(id)];
            if (principal.at(own) == id) {
                continue;
            }
            std::int32_t best = own;
            std::size_t best_size = 0;
            for (std::size_t p : members[static_cast<std::size_t>(id)]) {
                const int r = static_cast<int>(p / static_cast<std::size_t>(w));
                const int c = static_cast<int>(p % static_cast<std::size_t>(w));
                const int nr[4] = {r - 1, r + 1, r, r};
                const int nc[4] = {c, c, c - 1, c + 1};
                for (int k = 0; k < 4; ++k) {
                    if (nr[k] < 0 || nr[k] >= h || nc[k] < 0 || nc[k] >= w) {
                        continue;
                    }
                    const std::int32_t l = labels[static_cast<std::size_t>(nr[k]) *
                                                      static_cast<std::size_t>(w) +
                                                  static_cast<std::size_t>(nc[k])];
                    if (l == own) {
                        continue;
                    }
                    const std::size_t size = label_size[l];
                    if (best == own || size > best_size || (size == best_size && l < best)) {
                        best = l;
                        best_size = size;
                    }
                }
            }
            const std::size_t moved = members[static_cast<std::size_t>(id)].size();
            for (std::size_t p : members[static_cast<std::size_t>(id)]) {
                labels[p] = best;
            }
            label_size[own] -= moved;
            label_size[best] += moved;
        }
    }
}

double gradient_energy(const FeatureImage& img, int r, int c) {
    const auto at = [&](int rr, int cc, int k) {
        rr = std::clamp(rr, 0, img.height - 1);
        cc = std::clamp(cc, 0, img.width - 1);
        return img.values[(static_cast<std::size_t>(rr) * static_cast<std::size_t>(img.width) +
                           static_cast<std::size_t>(cc)) *
                              static_cast<std::size_t>(img.channels) +
                          static_cast<std::size_t>(k)];
    };
    double e = 0.0;
    for (int k = 0; k < img.channels; ++k) {
        const double gx = at(r, c + 1, k) - at(r, c - 1, k);
        const double gy = at(r + 1, c, k) - at(r - 1, c, k);
        e += gx * gx + gy * gy;
    }
    return e;
}

} // namespace

SegmentMap slic(const FeatureImage& image, const SlicParams& params) {
    const int h = image.height;
    const int w = image.width;
    const auto ch = static_cast<std::size_t>(image.channels);
    if (h < 1 || w < 1 || image.channels < 1 ||
        image.values.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * ch) {
        throw ValidationError("slic: malformed feature image");
    }
    if (params.k < 1 || params.iters < 1) {
        throw ValidationError("slic: k and iters must be >= 1");
    }
    const std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    if (static_cast<std::size_t>(params.k) > n) {
        throw ValidationError("slic: k = " + std::to_string(params.k) + " exceeds pixel count " +
                              std::to_string(n));
    }
    SegmentMap seg;
    seg.height = h;
    seg.width = w;
    if (params.k == 1) {
        seg.num_segments = 1;
        seg.ids.assign(n, 0);
        return seg;
    }

    // Seed lattice with at most 2k cells.
    const double interval = std::sqrt(static_cast<double>(n) / params.k);
    int nx = std::max(1, static_cast<int>(std::lround(w / interval)));
    int ny = std::max(1, static_cast<int>(std::lround(h / interval)));
    nx = std::min(nx, w);
    ny = std::min(ny, h);
    while (nx * ny > 2 * params.k) {
        (nx >= ny ? nx : ny) -= 1;
    }
    const double step_x = static_cast<double>(w) / nx;
    const double step_y = static_cast<double>(h) / ny;

    const auto feature_at = [&](std::size_t p) { return &image.values[p * ch]; };

    CounterRng rng(params.seed);
    std::vector<Center> centers;
    centers.reserve(static_cast<std::size_t>(nx * ny));
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            Center ctr;
            ctr.x = (i + 0.5) * step_x;
            ctr.y = (j + 0.5) * step_y;
            if (params.seed != 0) {
                ctr.x = std::clamp(ctr.x + 2.0 * rng.uniform01() - 1.0, 0.0, w - 1e-9);
                ctr.y = std::clamp(ctr.y + 2.0 * rng.uniform01() - 1.0, 0.0, h - 1e-9);
            }
            // Move onto the lowest-gradient pixel of the 3x3 neighbourhood if it is strictly lower.
            const int pr = std::clamp(static_cast<int>(ctr.y), 0, h - 1);
            const int pc = std::clamp(static_cast<int>(ctr.x), 0, w - 1);
            double best = gradient_energy(image, pr, pc);
            int br = pr, bc = pc;
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = pr + dr, cc = pc + dc;
                    if (rr < 0 || rr >= h || cc < 0 || cc >= w) {
                        continue;
                    }
                    const double e = gradient_energy(image, rr, cc);
                    if (e < best) {
                        best = e;
                        br = rr;
                        bc = cc;
                    }
                }
            }
            if (br != pr || bc != pc) {
                ctr.x = bc + 0.5;
                ctr.y = br + 0.5;
            }
            const std::size_t p = static_cast<std::size_t>(br) * static_cast<std::size_t>(w) +
                                  static_cast<std::size_t>(bc);
            ctr.feat.assign(feature_at(p), feature_at(p) + ch);
            centers.push_back(std::move(ctr));
        }
    }

    const double spatial_scale = params.compactness / std::sqrt(step_x * step_y);
    const double spatial_scale2 = spatial_scale * spatial_scale;
    std::vector<std::int32_t> labels(n, -1);
    std::vector<double> dist(n);

    const auto distance2 = [&](const Center& ctr, std::size_t p, int r, int c) {
        const double* f = feature_at(p);
        double dc = 0.0;
        for (std::size_t k = 0; k < ch; ++k) {
            const double d = f[k] - ctr.feat[k];
            dc += d * d;
        }
        const double dx = c + 0.5 - ctr.x;
        const double dy = r + 0.5 - ctr.y;
        return dc + (dx * dx + dy * dy) * spatial_scale2;
    };

    for (int iter = 0; iter < params.iters; ++iter) {
        std::fill(labels.begin(), labels.end(), -1);
        std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
        for (std::size_t ci = 0; ci < centers.size(); ++ci) {
            const Center& ctr = centers[ci];
            const int r0 = std::max(0, static_cast<int>(std::floor(ctr.y - step_y)));
            const int r1 = std::min(h - 1, static_cast<int>(std::ceil(ctr.y + step_y)));
            const int c0 = std::max(0, static_cast<int>(std::floor(ctr.x - step_x)));
            const int c1 = std::min(w - 1, static_cast<int>(std::ceil(ctr.x + step_x)));
            for (int r = r0; r <= r1; ++r) {
                for (int c = c0; c <= c1; ++c) {
                    const std::size_t p = static_cast<std::size_t>(r) * static_cast<std::size_t>(w) +
                                          static_cast<std::size_t>(c);
                    const double d = distance2(ctr, p, r, c);
                    if (d < dist[p]) {
                        dist[p] = d;
                        labels[p] = static_cast<std::int32_t>(ci);
                    }
                }
            }
        }
        // Pixels outside every search window go to the globally nearest center.
        for (std::size_t p = 0; p < n; ++p) {
            if (labels[p] >= 0) {
                continue;
            }
            const int r = static_cast<int>(p / static_cast<std::size_t>(w));
            const int c = static_cast<int>(p % static_cast<std::size_t>(w));
            for (std::size_t ci = 0; ci < centers.size(); ++ci) {
                const double d = distance2(centers[ci], p, r, c);
                if (d < dist[p]) {
                    dist[p] = d;
                    labels[p] = static_cast<std::int32_t>(ci);
                }
            }
        }

        std::vector<Center> sums(centers.size());
        std::vector<std::size_t> counts(centers.size(), 0);
        for (auto& s : sums) {
            s.feat.assign(ch, 0.0);
        }
        for (std::size_t p = 0; p < n; ++p) {
            const auto ci = static_cast<std::size_t>(labels[p]);
            const double* f = feature_at(p);
            for (std::size_t k = 0; k < ch; ++k) {
                sums[ci].feat[k] += f[k];
            }
            sums[ci].x += static_cast<double>(p % static_cast<std::size_t>(w)) + 0.5;
            sums[ci].y += static_cast<double>(p / static_cast<std::size_t>(w)) + 0.5;
            ++counts[ci];
        }
        for (std::size_t ci = 0; ci < centers.size(); ++ci) {
            if (counts[ci] == 0) {
                continue;
            }
            const double inv = 1.0 / static_cast<double>(counts[ci]);
            centers[ci].x = sums[ci].x * inv;
            centers[ci].y = sums[ci].y * inv;
            for (std::size_t k = 0; k < ch; ++k) {
                centers[ci].feat[k] = sums[ci].feat[k] * inv;
            }
        }
    }

    enforce_connectivity(h, w, labels);
    std::vector<std::int64_t> raw(labels.begin(), labels.end());
    return compact_segments(h, w, raw);
}

SegmentMap load_segments(const std::filesystem::path& path) {
    const PnmImage img = read_pnm(path);
    if (img.channels != 1) {
        throw IoError("segment file " + path.string() + " is not a greyscale PGM");
    }
    if (img.width < 1 || img.height < 1) {
        throw IoError("segment file " + path.string() + " is empty");
    }
    std::vector<std::int64_t> raw(img.data.begin(), img.data.end());
    return compact_segments(img.height, img.width, raw);
}

void save_segments(const SegmentMap& seg, const std::filesystem::path& path) {
    seg.validate();
    if (seg.num_segments > 65536) {
        throw ValidationError("save_segments: more than 65536 segments do not fit a 16-bit PGM");
    }
    PnmImage img;
    img.width = seg.width;
    img.height = seg.height;
    img.channels = 1;
    img.maxval = std::max(seg.num_segments - 1, 1);
    img.data.assign(seg.ids.begin(), seg.ids.end());
    write_pnm(path, img);
}

} // namespace occdistill
