// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <occdistill/error.hpp>
#include <occdistill/io.hpp>

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <random>

using namespace occdistill;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream(p, std::ios::binary) << bytes;
}

GridSpec spec_3x2x2() {
    GridSpec s;
    s.dims = {3, 2, 2};
    s.origin = Vec3(-1.5, 0.25, 2.0);
    s.voxel_size = 0.5;
    return s;
}

} // namespace

TEST(Vxg, GridRoundTripIsExactInFloat32) {
    std::mt19937_64 rng(51);
    const auto dir = occtest::scratch_dir("vxg_grid");
    const VoxelGrid g = occtest::random_grid(spec_3x2x2(), 4, rng);
    save_grid(dir / "g.vxg", g);
    const VoxelGrid back = load_grid(dir / "g.vxg");
    EXPECT_EQ(back.spec(), g.spec());
    ASSERT_EQ(back.num_classes(), 4);
    for (std::size_t i = 0; i < g.num_voxels(); ++i) {
        EXPECT_EQ(back.density_at(i), static_cast<double>(static_cast<float>(g.density_at(i))));
    }
    // A second save of the loaded grid is byte-identical.
    save_grid(dir / "h.vxg", back);
    EXPECT_EQ(slurp(dir / "g.vxg"), slurp(dir / "h.vxg"));
}

TEST(Vxg, HeaderIsOneJsonLine) {
    const auto dir = occtest::scratch_dir("vxg_header");
    save_grid(dir / "g.vxg", VoxelGrid(spec_3x2x2(), 2));
    const std::string bytes = slurp(dir / "g.vxg");
    const auto nl = bytes.find('\n');
    ASSERT_NE(nl, std::string::npos);
    const std::string header = bytes.substr(0, nl);
    EXPECT_NE(header.find("\"dims\":[3,2,2]"), std::string::npos);
    EXPECT_NE(header.find("\"num_classes\":2"), std::string::npos);
    EXPECT_EQ(bytes.size() - nl - 1, 12u * (1 + 2) * sizeof(float));
}

TEST(Vxg, LabelsAndMaskRoundTrip) {
    const auto dir = occtest::scratch_dir("vxg_labels");
    SemanticLabelGrid l;
    l.spec = spec_3x2x2();
    l.num_classes = 3;
    l.labels = {0, 1, 2, 3, 3, 3, 0, 0, 1, 3, 2, 3};
    l.mask = std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0};
    save_labels(dir / "l.vxg", l);
    EXPECT_EQ(load_labels(dir / "l.vxg"), l);
    EXPECT_EQ(load_labels_or_argmax(dir / "l.vxg"), l);
}

TEST(Vxg, ArgmaxFallbackForDensityFiles) {
    const auto dir = occtest::scratch_dir("vxg_argmax");
    VoxelGrid g(spec_3x2x2(), 2);
    g.density()[4] = 3.0;
    g.semantics_at(4)[1] = 2.0;
    save_grid(dir / "g.vxg", g);
    const SemanticLabelGrid l = load_labels_or_argmax(dir / "g.vxg");
    EXPECT_EQ(l.labels[4], 1);
    EXPECT_EQ(l.labels[0], 2);
    EXPECT_THROW(load_labels(dir / "g.vxg"), IoError);
}

TEST(Vxg, RejectsCorruptFiles) {
    const auto dir = occtest::scratch_dir("vxg_bad");
    save_grid(dir / "g.vxg", VoxelGrid(spec_3x2x2(), 2));
    const std::string good = slurp(dir / "g.vxg");
    spit(dir / "trailing.vxg", good + "x");
    spit(dir / "short.vxg", good.substr(0, good.size() - 3));
    spit(dir / "noheader.vxg", "garbage");
    EXPECT_THROW(load_grid(dir / "trailing.vxg"), IoError);
    EXPECT_THROW(load_grid(dir / "short.vxg"), IoError);
    EXPECT_THROW(load_grid(dir / "noheader.vxg"), IoError);
    EXPECT_THROW(load_grid(dir / "missing.vxg"), IoError);
}

TEST(Pnm, EightAndSixteenBitRoundTrip) {
    const auto dir = occtest::scratch_dir("pnm");
    PnmImage a;
    a.width = 3;
    a.height = 2;
    a.channels = 3;
    a.maxval = 255;
    for (int i = 0; i < 18; ++i) {
        a.data.push_back(static_cast<std::uint16_t>(i * 13));
    }
    write_pnm(dir / "a.ppm", a);
    const PnmImage ra = read_pnm(dir / "a.ppm");
    EXPECT_EQ(ra.data, a.data);
    EXPECT_EQ(ra.channels, 3);
    EXPECT_EQ(slurp(dir / "a.ppm").size(), std::string("P6\n3 2\n255\n").size() + 18);

    PnmImage b;
    b.width = 2;
    b.height = 1;
    b.maxval = 65535;
    b.data = {0x0102, 0xfffe};
    write_pnm(dir / "b.pgm", b);
    const std::string bytes = slurp(dir / "b.pgm");
    EXPECT_EQ(bytes.substr(bytes.size() - 4), std::string("\x01\x02\xff\xfe", 4));
    EXPECT_EQ(read_pnm(dir / "b.pgm").data, b.data);

    b.data[0] = 70000 % 65536;
    b.maxval = 300;
    EXPECT_THROW(write_pnm(dir / "c.pgm", b), ValidationError);
    spit(dir / "bad.pgm", "P2\n1 1\n255\n0\n");
    EXPECT_THROW(read_pnm(dir / "bad.pgm"), IoError);
}

TEST(Cameras, JsonRoundTrip) {
    const auto dir = occtest::scratch_dir("cameras");
    const std::vector<Camera> cams{
        Camera::look_at(Vec3(1, 2, 3), Vec3(0, 0, 0.5), Vec3::UnitZ(), 50.0, 55.0, 32, 24),
        Camera::pinhole(10.0, 10.0, 4.0, 3.0, 8, 6)};
    write_cameras(dir / "c.json", cams);
    EXPECT_EQ(read_cameras(dir / "c.json"), cams);
    spit(dir / "bad.json", R"({"intrinsic":[1,2,3],"extrinsic":[],"width":1,"height":1})");
    EXPECT_THROW(read_cameras(dir / "bad.json"), IoError);
    spit(dir / "empty.json", "[]");
    EXPECT_THROW(read_cameras(dir / "empty.json"), IoError);
}

TEST(ViewImages, DepthInMillimetresSaturates) {
    const auto dir = occtest::scratch_dir("views");
    RenderedView v;
    v.height = 1;
    v.width = 3;
    v.num_classes = 2;
    v.depth = {1.2345, 0.0, 100.0};
    v.opacity = {1.0, 0.0, 0.5};
    v.semantics = {0.1, 0.9, 0, 0, 2, 1};
    v.miss = {0, 1, 0};
    write_depth_pgm(dir / "d.pgm", v);
    EXPECT_EQ(read_pnm(dir / "d.pgm").data, (std::vector<std::uint16_t>{1235, 0, 65535}));
    write_opacity_pgm(dir / "o.pgm", v);
    EXPECT_EQ(read_pnm(dir / "o.pgm").data, (std::vector<std::uint16_t>{255, 0, 128}));
    write_semantic_ppm(dir / "s.ppm", v);
    const PnmImage s = read_pnm(dir / "s.ppm");
    const auto c1 = class_color(1), c0 = class_color(0);
    EXPECT_EQ(s.data[0], c1[0]);
    EXPECT_EQ(s.data[3], 0);
    EXPECT_EQ(s.data[6], c0[0]);
    EXPECT_EQ(class_color(18), class_color(0));
}
