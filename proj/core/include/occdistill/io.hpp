// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "occdistill/camera.hpp"
#include "occdistill/render.hpp"
#include "occdistill/volume.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace occdistill {

/// Binary Netpbm image (P5 greyscale or P6 RGB). Samples are one byte when
/// maxval < 256 and two bytes big-endian otherwise, per the Netpbm rule.
struct PnmImage {
    int width = 0;
    int height = 0;
    int channels = 1;
    int maxval = 255;
    std::vector<std::uint16_t> data;  // H x W x channels
};

PnmImage read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const PnmImage& img);

// .vxg container: one line of compact JSON
//   {"dims":[nx,ny,nz],"fields":[...],"num_classes":C,"origin":[...],"voxel_size":s}
// followed by '\n' and, for each declared field in order, the voxel values as
// little-endian float32 in x-major order. Per-voxel widths: density 1,
// semantics C, labels 1, mask 1.
struct VxgFile {
    GridSpec spec;
    int num_classes = 0;
    std::vector<std::string> fields;
    std::map<std::string, std::vector<float>> data;
};

VxgFile read_vxg(const std::filesystem::path& path);
void write_vxg(const std::filesystem::path& path, const VxgFile& file);

void save_grid(const std::filesystem::path& path, const VoxelGrid& grid);
VoxelGrid load_grid(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const SemanticLabelGrid& labels);
SemanticLabelGrid load_labels(const std::filesystem::path& path);

/// Labels from either a label file or a density/semantics grid (argmax at threshold).
SemanticLabelGrid load_labels_or_argmax(const std::filesystem::path& path,
                                        double occupancy_threshold = 0.5);

/// Camera JSON: {"intrinsic":[16 row-major], "extrinsic":[16 row-major,
/// camera-to-world], "width":W, "height":H}, or an array of such objects.
std::vector<Camera> read_cameras(const std::filesystem::path& path);
void write_cameras(const std::filesystem::path& path, const std::vector<Camera>& cams);

/// Fixed RGB palette indexed by class id (cycles after 18 entries).
std::array<std::uint8_t, 3> class_color(int class_id);

/// Depth in millimetres, 16-bit, saturating at 65535.
void write_depth_pgm(const std::filesystem::path& path, const RenderedView& view);
/// Argmax class colour per pixel; misses are black.
void write_semantic_ppm(const std::filesystem::path& path, const RenderedView& view);
/// Opacity scaled to 0..255.
void write_opacity_pgm(const std::filesystem::path& path, const RenderedView& view);

} // namespace occdistill
