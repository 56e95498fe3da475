// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace occdistill {

/// Partition of an H x W image into M segments, ids row-major in [0, M).
struct SegmentMap {
    int height = 0;
    int width = 0;
    int num_segments = 0;
    std::vector<std::int32_t> ids;

    std::size_t num_pixels() const {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }
    /// Every pixel has an id < M and every id owns at least one pixel.
    void validate() const;
    std::vector<std::size_t> sizes() const;
    bool operator==(const SegmentMap& other) const = default;
};

/// M x C matrix of pooled per-segment features, row-major.
struct SegmentEmbeddings {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    std::span<const double> row(int i) const {
        return std::span<const double>(values).subspan(
            static_cast<std::size_t>(i) * static_cast<std::size_t>(cols),
            static_cast<std::size_t>(cols));
    }
    double operator()(int i, int r) const {
        return values[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) +
                      static_cast<std::size_t>(r)];
    }
};

/// Mean feature vector of each segment. `features` is H x W x C, row-major.
SegmentEmbeddings pool_segments(std::span<const double> features, int channels,
                                const SegmentMap& seg);

/// Adjoint of pool_segments: spreads d_embeddings (M x C) back to pixels (H x W x C).
std::vector<double> pool_segments_backward(std::span<const double> d_embeddings, int channels,
                                           const SegmentMap& seg);

/// Relabels raw ids to [0, M) in order of first appearance (row-major scan).
SegmentMap compact_segments(int height, int width, std::span<const std::int64_t> raw_ids);

/// Segment map of the listed pixels only, laid out as a 1 x n image and compacted.
SegmentMap restrict_segments(const SegmentMap& seg, std::span<const std::size_t> pixels);

struct FeatureImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> values;  // H x W x C
};

struct SlicParams {
    int k = 16;
    double compactness = 10.0;
    int iters = 10;
    /// 0 keeps the regular seed lattice; other values jitter seeds by up to one pixel.
    std::uint64_t seed = 0;
};

/// SLIC superpixels: k-means in (feature, position) space with the spatial term
/// scaled by compactness / grid_interval, seeded on a regular lattice, followed by
/// a connectivity pass that merges every non-principal component of a label into
/// the neighbouring label with the most pixels. Result is compacted, 4-connected
/// and has M <= 2k. Throws ValidationError if k > H*W or k, iters < 1.
SegmentMap slic(const FeatureImage& image, const SlicParams& params);

/// Square tiles: id = floor(row/tile) * ceil(w/tile) + floor(col/tile).
SegmentMap grid_tiles(int height, int width, int tile);

/// Reads a binary PGM of raw ids and compacts them. Throws IoError.
SegmentMap load_segments(const std::filesystem::path& path);

/// Writes ids as a binary PGM with maxval max(M - 1, 1).
void save_segments(const SegmentMap& seg, const std::filesystem::path& path);

} // namespace occdistill
