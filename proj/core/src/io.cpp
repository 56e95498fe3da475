// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "occdistill/io.hpp"
#include "occdistill/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace occdistill {

using nlohmann::json;

namespace {

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string() + " for reading");
    }
    return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    return out;
}

// Next whitespace-separated header token, skipping '#' comments.
std::string pnm_token(std::istream& in, const std::filesystem::path& path) {
    std::string tok;
    int ch = in.get();
    for (;;) {
        while (ch != EOF && std::isspace(ch)) {
            ch = in.get();
        }
        if (ch == '#') {
            while (ch != EOF && ch != '\n') {
                ch = in.get();
            }
            continue;
        }
        break;
    }
    while (ch != EOF && !std::isspace(ch) && ch != '#') {
        tok.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    if (tok.empty()) {
        throw IoError("truncated PNM header in " + path.string());
    }
    // The single whitespace after maxval separates header from raster; consumed above.
    return tok;
}

int parse_int(const std::string& tok, const std::filesystem::path& path) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size()) {
            throw std::invalid_argument(tok);
        }
        return v;
    } catch (const std::exception&) {
        throw IoError("malformed PNM header value '" + tok + "' in " + path.string());
    }
}

std::size_t field_width(const std::string& name, int num_classes) {
    if (name == "density" || name == "labels" || name == "mask") {
        return 1;
    }
    if (name == "semantics") {
        return static_cast<std::size_t>(num_classes);
    }
    throw IoError("unknown .vxg field '" + name + "'");
}

void write_f32_le(std::ostream& out, const std::vector<float>& values) {
    std::vector<char> buf(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) {
            buf[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xffu);
        }
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::vector<float> read_f32_le(std::istream& in, std::size_t count,
                               const std::filesystem::path& path) {
    std::vector<char> buf(count * 4);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) {
        throw IoError("truncated payload in " + path.string());
    }
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i * 4 + static_cast<std::size_t>(b)]))
                    << (8 * b);
        }
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

Mat4 mat4_from_json(const json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != 16) {
        throw IoError(std::string("camera field '") + key + "' must be an array of 16 numbers");
    }
    Mat4 m;
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            m(r, c) = j.at(key).at(static_cast<std::size_t>(r * 4 + c)).get<double>();
        }
    }
    return m;
}

json mat4_to_json(const Mat4& m) {
    json arr = json::array();
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            arr.push_back(m(r, c));
        }
    }
    return arr;
}

} // namespace

PnmImage read_pnm(const std::filesystem::path& path) {
    std::ifstream in = open_in(path);
    PnmImage img;
    const std::string magic = pnm_token(in, path);
    if (magic == "P5") {
        img.channels = 1;
    } else if (magic == "P6") {
        img.channels = 3;
    } else {
        throw IoError(path.string() + " is not a binary PGM/PPM (magic '" + magic + "')");
    }
    img.width = parse_int(pnm_token(in, path), path);
    img.height = parse_int(pnm_token(in, path), path);
    img.maxval = parse_int(pnm_token(in, path), path);
    if (img.width < 0 || img.height < 0 || img.maxval < 1 || img.maxval > 65535) {
        throw IoError("invalid PNM dimensions or maxval in " + path.string());
    }
    const std::size_t samples = static_cast<std::size_t>(img.width) *
                                static_cast<std::size_t>(img.height) *
                                static_cast<std::size_t>(img.channels);
    const std::size_t bytes_per = img.maxval < 256 ? 1 : 2;
    std::vector<unsigned char> raw(samples * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw IoError("truncated raster in " + path.string());
    }
    img.data.resize(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        img.data[i] = bytes_per == 1
                          ? raw[i]
                          : static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
        if (img.data[i] > img.maxval) {
            throw IoError("sample exceeds maxval in " + path.string());
        }
    }
    return img;
}

void write_pnm(const std::filesystem::path& path, const PnmImage& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw ValidationError("write_pnm: channels must be 1 or 3");
    }
    if (img.maxval < 1 || img.maxval > 65535) {
        throw ValidationError("write_pnm: maxval must be in [1, 65535]");
    }
    const std::size_t samples = static_cast<std::size_t>(img.width) *
                                static_cast<std::size_t>(img.height) *
                                static_cast<std::size_t>(img.channels);
    if (img.data.size() != samples) {
        throw ValidationError("write_pnm: raster size does not match dimensions");
    }
    std::ofstream out = open_out(path);
    out << (img.channels == 1 ? "P5" : "P6") << '\n'
        << img.width << ' ' << img.height << '\n'
        << img.maxval << '\n';
    const bool wide = img.maxval >= 256;
    std::vector<char> raw;
    raw.reserve(samples * (wide ? 2 : 1));
    for (auto v : img.data) {
        if (v > img.maxval) {
            throw ValidationError("write_pnm: sample exceeds maxval");
        }
        if (wide) {
            raw.push_back(static_cast<char>(v >> 8));
        }
        raw.push_back(static_cast<char>(v & 0xff));
    }
    out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

VxgFile read_vxg(const std::filesystem::path& path) {
    std::ifstream in = open_in(path);
    std::string header;
    if (!std::getline(in, header)) {
        throw IoError("missing .vxg header in " + path.string());
    }
    VxgFile file;
    try {
        const json j = json::parse(header);
        const auto dims = j.at("dims").get<std::vector<int>>();
        const auto origin = j.at("origin").get<std::vector<double>>();
        if (dims.size() != 3 || origin.size() != 3) {
            throw IoError("dims and origin must have three entries");
        }
        file.spec.dims = {dims[0], dims[1], dims[2]};
        file.spec.origin = Vec3(origin[0], origin[1], origin[2]);
        file.spec.voxel_size = j.at("voxel_size").get<double>();
        file.num_classes = j.at("num_classes").get<int>();
        file.fields = j.at("fields").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw IoError("malformed .vxg header in " + path.string() + ": " + e.what());
    }
    try {
        file.spec.validate();
    } catch (const ValidationError& e) {
        throw IoError("invalid grid in " + path.string() + ": " + e.what());
    }
    if (file.num_classes < 1) {
        throw IoError("num_classes must be >= 1 in " + path.string());
    }
    for (const auto& name : file.fields) {
        const std::size_t count = file.spec.num_voxels() * field_width(name, file.num_classes);
        file.data[name] = read_f32_le(in, count, path);
    }
    if (in.peek() != EOF) {
        throw IoError("trailing bytes after payload in " + path.string());
    }
    return file;
}

void write_vxg(const std::filesystem::path& path, const VxgFile& file) {
    json header;
    header["dims"] = file.spec.dims;
    header["origin"] = {file.spec.origin.x(), file.spec.origin.y(), file.spec.origin.z()};
    header["voxel_size"] = file.spec.voxel_size;
    header["num_classes"] = file.num_classes;
    header["fields"] = file.fields;
    std::ofstream out = open_out(path);
    out << header.dump() << '\n';
    for (const auto& name : file.fields) {
        const auto it = file.data.find(name);
        const std::size_t count = file.spec.num_voxels() * field_width(name, file.num_classes);
        if (it == file.data.end() || it->second.size() != count) {
            throw ValidationError("write_vxg: field '" + name + "' missing or wrong length");
        }
        write_f32_le(out, it->second);
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

void save_grid(const std::filesystem::path& path, const VoxelGrid& grid) {
    VxgFile file;
    file.spec = grid.spec();
    file.num_classes = grid.num_classes();
    file.fields = {"density", "semantics"};
    file.data["density"].assign(grid.density().begin(), grid.density().end());
    file.data["semantics"].assign(grid.semantics().begin(), grid.semantics().end());
    write_vxg(path, file);
}

VoxelGrid load_grid(const std::filesystem::path& path) {
    VxgFile file = read_vxg(path);
    if (!file.data.contains("density") || !file.data.contains("semantics")) {
        throw IoError(path.string() + " does not hold density and semantics fields");
    }
    const auto& d = file.data["density"];
    const auto& s = file.data["semantics"];
    try {
        return VoxelGrid(file.spec, file.num_classes, std::vector<double>(d.begin(), d.end()),
                         std::vector<double>(s.begin(), s.end()));
    } catch (const ValidationError& e) {
        throw IoError("invalid grid payload in " + path.string() + ": " + e.what());
    }
}

void save_labels(const std::filesystem::path& path, const SemanticLabelGrid& labels) {
    labels.validate();
    VxgFile file;
    file.spec = labels.spec;
    file.num_classes = labels.num_classes;
    file.fields = {"labels"};
    file.data["labels"].assign(labels.labels.begin(), labels.labels.end());
    if (labels.mask) {
        file.fields.push_back("mask");
        file.data["mask"].assign(labels.mask->begin(), labels.mask->end());
    }
    write_vxg(path, file);
}

SemanticLabelGrid load_labels(const std::filesystem::path& path) {
    VxgFile file = read_vxg(path);
    if (!file.data.contains("labels")) {
        throw IoError(path.string() + " does not hold a labels field");
    }
    SemanticLabelGrid out;
    out.spec = file.spec;
    out.num_classes = file.num_classes;
    out.labels.reserve(file.data["labels"].size());
    for (float v : file.data["labels"]) {
        if (v != std::floor(v)) {
            throw IoError("non-integer label in " + path.string());
        }
        out.labels.push_back(static_cast<std::int32_t>(v));
    }
    if (file.data.contains("mask")) {
        std::vector<std::uint8_t> mask;
        mask.reserve(file.data["mask"].size());
        for (float v : file.data["mask"]) {
            mask.push_back(v != 0.0f ? 1 : 0);
        }
        out.mask = std::move(mask);
    }
    try {
        out.validate();
    } catch (const ValidationError& e) {
        throw IoError("invalid labels in " + path.string() + ": " + e.what());
    }
    return out;
}

SemanticLabelGrid load_labels_or_argmax(const std::filesystem::path& path,
                                        double occupancy_threshold) {
    const VxgFile file = read_vxg(path);
    if (file.data.contains("labels")) {
        return load_labels(path);
    }
    return argmax_labels(load_grid(path), occupancy_threshold);
}

std::vector<Camera> read_cameras(const std::filesystem::path& path) {
    std::ifstream in = open_in(path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed camera JSON in " + path.string() + ": " + e.what());
    }
    const json list = j.is_array() ? j : json::array({j});
    std::vector<Camera> cams;
    for (const auto& item : list) {
        try {
            Camera cam;
            cam.intrinsic = mat4_from_json(item, "intrinsic");
            cam.extrinsic = mat4_from_json(item, "extrinsic");
            cam.width = item.at("width").get<int>();
            cam.height = item.at("height").get<int>();
            cams.push_back(cam);
        } catch (const json::exception& e) {
            throw IoError("malformed camera entry in " + path.string() + ": " + e.what());
        } catch (const IoError& e) {
            throw IoError(path.string() + ": " + e.what());
        }
    }
    if (cams.empty()) {
        throw IoError("no cameras in " + path.string());
    }
    return cams;
}

void write_cameras(const std::filesystem::path& path, const std::vector<Camera>& cams) {
    json arr = json::array();
    for (const auto& cam : cams) {
        arr.push_back({{"intrinsic", mat4_to_json(cam.intrinsic)},
                       {"extrinsic", mat4_to_json(cam.extrinsic)},
                       {"width", cam.width},
                       {"height", cam.height}});
    }
    std::ofstream out = open_out(path);
    out << arr.dump(2) << '\n';
}

std::array<std::uint8_t, 3> class_color(int class_id) {
    static constexpr std::array<std::array<std::uint8_t, 3>, 18> kPalette{{
        {255, 120, 50},  {255, 192, 203}, {255, 255, 0},   {0, 150, 245},   {0, 255, 255},
        {255, 127, 0},   {255, 0, 0},     {255, 240, 150}, {135, 60, 0},    {160, 32, 240},
        {255, 0, 255},   {139, 137, 137}, {75, 0, 75},     {150, 240, 80},  {230, 230, 250},
        {0, 175, 0},     {0, 0, 128},     {255, 255, 255},
    }};
    const auto n = static_cast<int>(kPalette.size());
    return kPalette[static_cast<std::size_t>(((class_id % n) + n) % n)];
}

void write_depth_pgm(const std::filesystem::path& path, const RenderedView& view) {
    PnmImage img;
    img.width = view.width;
    img.height = view.height;
    img.channels = 1;
    img.maxval = 65535;
    img.data.resize(view.num_pixels());
    for (std::size_t p = 0; p < view.num_pixels(); ++p) {
        const double mm = std::round(view.depth[p] * 1000.0);
        img.data[p] = static_cast<std::uint16_t>(std::clamp(mm, 0.0, 65535.0));
    }
    write_pnm(path, img);
}

void write_semantic_ppm(const std::filesystem::path& path, const RenderedView& view) {
    PnmImage img;
    img.width = view.width;
    img.height = view.height;
    img.channels = 3;
    img.maxval = 255;
    img.data.assign(view.num_pixels() * 3, 0);
    for (std::size_t p = 0; p < view.num_pixels(); ++p) {
        if (view.miss[p]) {
            continue;
        }
        const auto s = view.semantics_at(p);
        const int cls = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
        const auto rgb = class_color(cls);
        for (int k = 0; k < 3; ++k) {
            img.data[p * 3 + static_cast<std::size_t>(k)] = rgb[static_cast<std::size_t>(k)];
        }
    }
    write_pnm(path, img);
}

void write_opacity_pgm(const std::filesystem::path& path, const RenderedView& view) {
    PnmImage img;
    img.width = view.width;
    img.height = view.height;
    img.channels = 1;
    img.maxval = 255;
    img.data.resize(view.num_pixels());
    for (std::size_t p = 0; p < view.num_pixels(); ++p) {
        img.data[p] =
            static_cast<std::uint16_t>(std::clamp(std::round(view.opacity[p] * 255.0), 0.0, 255.0));
    }
    write_pnm(path, img);
}

} // namespace occdistill
