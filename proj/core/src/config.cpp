// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#include "occdistill/config.hpp"
#include "occdistill/error.hpp"

#include <json.hpp>

#include <fstream>
#include <initializer_list>
#include <sstream>

namespace occdistill {

using nlohmann::json;

namespace {

void allow_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> keys) {
    if (!j.is_object()) {
        throw IoError(std::string(where) + " must be a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        bool known = false;
        for (auto k : keys) {
            known = known || key == k;
        }
        if (!known) {
            throw IoError("unknown config key '" + std::string(where) + "." + key + "'");
        }
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

Vec3 vec3(const json& j) {
    if (!j.is_array() || j.size() != 3) {
        throw IoError("expected an array of 3 numbers");
    }
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Mat4 mat4(const json& j) {
    if (!j.is_array() || j.size() != 16) {
        throw IoError("expected an array of 16 numbers");
    }
    Mat4 m;
    for (int i = 0; i < 16; ++i) {
        m(i / 4, i % 4) = j[static_cast<std::size_t>(i)].get<double>();
    }
    return m;
}

json mat4_json(const Mat4& m) {
    json arr = json::array();
    for (int i = 0; i < 16; ++i) {
        arr.push_back(m(i / 4, i % 4));
    }
    return arr;
}

Camera parse_camera(const json& j) {
    if (j.contains("intrinsic") || j.contains("extrinsic")) {
        allow_keys(j, "scene.cameras[]", {"intrinsic", "extrinsic", "width", "height"});
        Camera cam;
        cam.intrinsic = mat4(j.at("intrinsic"));
        cam.extrinsic = mat4(j.at("extrinsic"));
        cam.width = j.at("width").get<int>();
        cam.height = j.at("height").get<int>();
        return cam;
    }
    allow_keys(j, "scene.cameras[]", {"eye", "target", "up", "fx", "fy", "width", "height"});
    const Vec3 up = j.contains("up") ? vec3(j.at("up")) : Vec3(0, 0, 1);
    const double fx = j.at("fx").get<double>();
    const double fy = j.contains("fy") ? j.at("fy").get<double>() : fx;
    return Camera::look_at(vec3(j.at("eye")), vec3(j.at("target")), up, fx, fy,
                           j.at("width").get<int>(), j.at("height").get<int>());
}

SceneConfig parse_scene(const json& j) {
    allow_keys(j, "scene", {"grid", "num_classes", "seed", "teacher_density", "logit_scale",
                            "label_noise", "primitives", "cameras"});
    SceneConfig s;
    if (j.contains("grid")) {
        const json& g = j.at("grid");
        allow_keys(g, "scene.grid", {"dims", "origin", "voxel_size"});
        read_if(g, "dims", s.grid.dims);
        if (g.contains("origin")) {
            s.grid.origin = vec3(g.at("origin"));
        }
        read_if(g, "voxel_size", s.grid.voxel_size);
    }
    read_if(j, "num_classes", s.num_classes);
    read_if(j, "seed", s.seed);
    read_if(j, "teacher_density", s.teacher_density);
    read_if(j, "logit_scale", s.logit_scale);
    read_if(j, "label_noise", s.label_noise);
    if (!j.contains("primitives")) {
        throw IoError("config is missing scene.primitives");
    }
    for (const json& p : j.at("primitives")) {
        allow_keys(p, "scene.primitives[]", {"shape", "center", "half_extent", "radius", "class"});
        Primitive prim;
        const std::string shape = p.value("shape", "box");
        if (shape == "box") {
            prim.shape = PrimitiveShape::Box;
            prim.half_extent = vec3(p.at("half_extent"));
        } else if (shape == "sphere") {
            prim.shape = PrimitiveShape::Sphere;
            prim.radius = p.at("radius").get<double>();
        } else {
            throw IoError("unknown primitive shape '" + shape + "'");
        }
        prim.center = vec3(p.at("center"));
        prim.class_id = p.at("class").get<int>();
        s.primitives.push_back(prim);
    }
    if (j.contains("cameras")) {
        for (const json& c : j.at("cameras")) {
            s.cameras.push_back(parse_camera(c));
        }
    }
    return s;
}

TrainConfig parse_train(const json& j) {
    allow_keys(j, "train", {"steps", "learning_rate", "ray_budget", "mode", "gt_weight", "seed",
                            "eval_every", "weights", "sampling", "render", "segments", "init",
                            "occupancy_threshold", "cache_teacher"});
    TrainConfig t;
    read_if(j, "steps", t.steps);
    read_if(j, "learning_rate", t.learning_rate);
    read_if(j, "ray_budget", t.ray_budget);
    if (j.contains("mode")) {
        t.mode = parse_mode(j.at("mode").get<std::string>());
    }
    read_if(j, "gt_weight", t.gt_weight);
    read_if(j, "seed", t.seed);
    read_if(j, "eval_every", t.eval_every);
    if (j.contains("weights")) {
        const json& w = j.at("weights");
        allow_keys(w, "train.weights", {"rdc", "sad", "kl", "silog"});
        read_if(w, "rdc", t.weights.lambda_rdc);
        read_if(w, "sad", t.weights.lambda_sad);
        read_if(w, "kl", t.weights.lambda_kl);
        read_if(w, "silog", t.weights.silog_lambda);
    }
    if (j.contains("sampling")) {
        const json& s = j.at("sampling");
        allow_keys(s, "train.sampling", {"step_size", "max_samples", "near"});
        read_if(s, "step_size", t.sampling.step_size);
        read_if(s, "max_samples", t.sampling.max_samples);
        read_if(s, "near", t.sampling.near);
    }
    if (j.contains("render")) {
        const json& r = j.at("render");
        allow_keys(r, "train.render", {"interpolation", "opacity_floor", "threads"});
        if (r.contains("interpolation")) {
            const auto name = r.at("interpolation").get<std::string>();
            if (name == "trilinear") {
                t.render.interpolation = Interpolation::Trilinear;
            } else if (name == "nearest") {
                t.render.interpolation = Interpolation::Nearest;
            } else {
                throw IoError("unknown interpolation '" + name + "'");
            }
        }
        read_if(r, "opacity_floor", t.render.opacity_floor);
        read_if(r, "threads", t.render.threads);
    }
    if (j.contains("segments")) {
        const json& s = j.at("segments");
        allow_keys(s, "train.segments",
                   {"method", "k", "compactness", "iterations", "seed", "tile", "files"});
        if (s.contains("method")) {
            const auto name = s.at("method").get<std::string>();
            if (name == "slic") {
                t.segments.method = SegmentMethod::Slic;
            } else if (name == "tiles") {
                t.segments.method = SegmentMethod::Tiles;
            } else if (name == "file") {
                t.segments.method = SegmentMethod::File;
            } else {
                throw IoError("unknown segment method '" + name + "'");
            }
        }
        read_if(s, "k", t.segments.slic.k);
        read_if(s, "compactness", t.segments.slic.compactness);
        read_if(s, "iterations", t.segments.slic.iters);
        read_if(s, "seed", t.segments.slic.seed);
        read_if(s, "tile", t.segments.tile);
        if (s.contains("files")) {
            for (const json& f : s.at("files")) {
                t.segments.files.emplace_back(f.get<std::string>());
            }
        }
    }
    if (j.contains("init")) {
        const json& i = j.at("init");
        allow_keys(i, "train.init", {"density_mean", "density_std", "semantic_std"});
        read_if(i, "density_mean", t.init.density_mean);
        read_if(i, "density_std", t.init.density_std);
        read_if(i, "semantic_std", t.init.semantic_std);
    }
    read_if(j, "occupancy_threshold", t.occupancy_threshold);
    read_if(j, "cache_teacher", t.cache_teacher);
    return t;
}

std::string_view segment_method_name(SegmentMethod m) {
    switch (m) {
    case SegmentMethod::Slic:
        return "slic";
    case SegmentMethod::Tiles:
        return "tiles";
    case SegmentMethod::File:
        return "file";
    }
    return "slic";
}

} // namespace

ExperimentConfig parse_experiment(const std::string& json_text) {
    ExperimentConfig cfg;
    try {
        const json j = json::parse(json_text);
        allow_keys(j, "config", {"scene", "train"});
        if (!j.contains("scene")) {
            throw IoError("config is missing the 'scene' section");
        }
        cfg.scene = parse_scene(j.at("scene"));
        if (j.contains("train")) {
            cfg.train = parse_train(j.at("train"));
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed config: ") + e.what());
    }
    cfg.scene.validate();
    cfg.train.validate();
    return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_experiment(buf.str());
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

std::string dump_experiment(const ExperimentConfig& cfg) {
    const SceneConfig& s = cfg.scene;
    const TrainConfig& t = cfg.train;
    json prims = json::array();
    for (const Primitive& p : s.primitives) {
        json jp = {{"center", vec3_json(p.center)}, {"class", p.class_id}};
        if (p.shape == PrimitiveShape::Box) {
            jp["shape"] = "box";
            jp["half_extent"] = vec3_json(p.half_extent);
        } else {
            jp["shape"] = "sphere";
            jp["radius"] = p.radius;
        }
        prims.push_back(jp);
    }
    json cams = json::array();
    for (const Camera& c : s.cameras) {
        cams.push_back({{"intrinsic", mat4_json(c.intrinsic)},
                        {"extrinsic", mat4_json(c.extrinsic)},
                        {"width", c.width},
                        {"height", c.height}});
    }
    json files = json::array();
    for (const auto& f : t.segments.files) {
        files.push_back(f.string());
    }
    const json j = {
        {"scene",
         {{"grid",
           {{"dims", s.grid.dims}, {"origin", vec3_json(s.grid.origin)}, {"voxel_size", s.grid.voxel_size}}},
          {"num_classes", s.num_classes},
          {"seed", s.seed},
          {"teacher_density", s.teacher_density},
          {"logit_scale", s.logit_scale},
          {"label_noise", s.label_noise},
          {"primitives", prims},
          {"cameras", cams}}},
        {"train",
         {{"steps", t.steps},
          {"learning_rate", t.learning_rate},
          {"ray_budget", t.ray_budget},
          {"mode", std::string(to_string(t.mode))},
          {"gt_weight", t.gt_weight},
          {"seed", t.seed},
          {"eval_every", t.eval_every},
          {"weights",
           {{"rdc", t.weights.lambda_rdc},
            {"sad", t.weights.lambda_sad},
            {"kl", t.weights.lambda_kl},
            {"silog", t.weights.silog_lambda}}},
          {"sampling",
           {{"step_size", t.sampling.step_size},
            {"max_samples", t.sampling.max_samples},
            {"near", t.sampling.near}}},
          {"render",
           {{"interpolation",
             t.render.interpolation == Interpolation::Trilinear ? "trilinear" : "nearest"},
            {"opacity_floor", t.render.opacity_floor},
            {"threads", t.render.threads}}},
          {"segments",
           {{"method", std::string(segment_method_name(t.segments.method))},
            {"k", t.segments.slic.k},
            {"compactness", t.segments.slic.compactness},
            {"iterations", t.segments.slic.iters},
            {"seed", t.segments.slic.seed},
            {"tile", t.segments.tile},
            {"files", files}}},
          {"init",
           {{"density_mean", t.init.density_mean},
            {"density_std", t.init.density_std},
            {"semantic_std", t.init.semantic_std}}},
          {"occupancy_threshold", t.occupancy_threshold},
          {"cache_teacher", t.cache_teacher}}}};
    return j.dump(2);
}

void save_experiment(const std::filesystem::path& path, const ExperimentConfig& cfg) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << dump_experiment(cfg) << '\n';
}

ExperimentConfig reference_experiment() {
    ExperimentConfig cfg;
    cfg.scene = reference_scene();
    cfg.train.steps = 2000;
    cfg.train.ray_budget = 1024;
    cfg.train.sampling.step_size = 0.2;
    cfg.train.render.interpolation = Interpolation::Nearest;
    cfg.train.mode = DistillMode::RdcRsc;
    cfg.train.eval_every = 100;
    return cfg;
}

} // namespace occdistill
