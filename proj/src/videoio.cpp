#include "gaitflow/videoio.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace gaitflow {

const char* scenario_name(Scenario s) {
    switch (s) {
        case Scenario::N: return "N";
        case Scenario::B: return "B";
        case Scenario::S: return "S";
        case Scenario::TN: return "TN";
        case Scenario::TB: return "TB";
        case Scenario::TS: return "TS";
    }
    throw DataError("bad scenario code");
}

Scenario scenario_from_name(const std::string& name) {
    for (uint8_t i = 0; i < 6; ++i)
        if (name == scenario_name(Scenario(i))) return Scenario(i);
    throw DataError("unknown scenario: " + name);
}

Scenario scenario_elapsed(Scenario s) {
    switch (s) {
        case Scenario::N: return Scenario::TN;
        case Scenario::B: return Scenario::TB;
        case Scenario::S: return Scenario::TS;
        default: return s;
    }
}

const DatasetLayout::Subject& DatasetLayout::subject(const std::string& id) const {
    for (const auto& s : subjects)
        if (s.id == id) return s;
    throw DataError("subject not in layout: " + id);
}

std::string DatasetLayout::sequence_path(const std::string& subject_id,
                                         const std::string& seq) const {
    fs::path p = fs::path(root) / subject_id / seq;
    if (format == "gfsq") p += ".gfsq";
    return p.string();
}

DatasetLayout load_layout(const std::string& json_path) {
    std::ifstream is(json_path);
    if (!is) throw DataError("cannot open layout: " + json_path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed layout " + json_path + ": " + e.what());
    }
    DatasetLayout layout;
    layout.root = j.value("root", fs::path(json_path).parent_path().string());
    layout.format = j.value("format", "gfsq");
    layout.fps = j.value("fps", 30.0);
    if (layout.format != "gfsq" && layout.format != "png")
        throw DataError("layout format must be gfsq or png");
    for (const auto& js : j.at("subjects")) {
        DatasetLayout::Subject s;
        s.id = js.at("id").get<std::string>();
        std::string g = js.value("gender", "m");
        s.gender = g.empty() ? 'm' : char(std::tolower(g[0]));
        for (const auto& [code, list] : js.at("sequences").items()) {
            Scenario sc = scenario_from_name(code);
            for (const auto& name : list) s.sequences[sc].push_back(name.get<std::string>());
        }
        layout.subjects.push_back(std::move(s));
    }
    if (layout.subjects.empty()) throw DataError("layout has no subjects");
    return layout;
}

void save_layout(const DatasetLayout& layout, const std::string& json_path) {
    json j;
    j["root"] = layout.root;
    j["format"] = layout.format;
    j["fps"] = layout.fps;
    j["subjects"] = json::array();
    for (const auto& s : layout.subjects) {
        json js;
        js["id"] = s.id;
        js["gender"] = std::string(1, s.gender);
        json seqs = json::object();
        for (const auto& [sc, names] : s.sequences) seqs[scenario_name(sc)] = names;
        js["sequences"] = std::move(seqs);
        j["subjects"].push_back(std::move(js));
    }
    std::ofstream os(json_path);
    if (!os) throw DataError("cannot write layout: " + json_path);
    os << j.dump(2) << "\n";
}

// ------------------------------------------------------------- sequence io

static FrameSequence load_gfsq(const std::string& path, double fps) {
    auto is = open_in(path);
    expect_magic(is, "GFSQ", path);
    const uint32_t w = read_pod<uint32_t>(is, "width");
    const uint32_t h = read_pod<uint32_t>(is, "height");
    const uint32_t count = read_pod<uint32_t>(is, "frame count");
    if (w == 0 || h == 0 || count == 0) throw DataError("empty GFSQ blob: " + path);
    if (w > 16384 || h > 16384) throw DataError("implausible GFSQ dimensions in " + path);

    FrameSequence seq;
    seq.fps = fps;
    seq.source_id = path;
    seq.frames.reserve(count);
    std::vector<uint8_t> plane(size_t(w) * h);
    for (uint32_t i = 0; i < count; ++i) {
        read_bytes(is, plane.data(), plane.size(), "frame plane");
        Image img(static_cast<int>(w), static_cast<int>(h));
        for (size_t k = 0; k < plane.size(); ++k) img.px[k] = plane[k] / 255.f;
        seq.frames.push_back(std::move(img));
    }
    return seq;
}

void save_sequence_gfsq(const FrameSequence& seq, const std::string& path) {
    if (seq.frames.empty()) throw DataError("refusing to write empty sequence");
    auto os = open_out(path);
    write_magic(os, "GFSQ");
    write_pod<uint32_t>(os, uint32_t(seq.width()));
    write_pod<uint32_t>(os, uint32_t(seq.height()));
    write_pod<uint32_t>(os, uint32_t(seq.frames.size()));
    std::vector<uint8_t> plane(seq.frames[0].size());
    for (const auto& f : seq.frames) {
        for (size_t k = 0; k < f.px.size(); ++k) {
            float v = std::clamp(f.px[k], 0.f, 1.f);
            plane[k] = uint8_t(std::lround(v * 255.f));
        }
        write_bytes(os, plane.data(), plane.size());
    }
}

void save_sequence_png(const FrameSequence& seq, const std::string& dir) {
    fs::create_directories(dir);
    char name[32];
    for (size_t i = 0; i < seq.frames.size(); ++i) {
        std::snprintf(name, sizeof(name), "frame_%06zu.png", i + 1);
        save_png_gray(seq.frames[i], (fs::path(dir) / name).string());
    }
}

static FrameSequence load_png_dir(const std::string& dir, double fps) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto& p = e.path();
        if (p.extension() == ".png" && p.filename().string().rfind("frame_", 0) == 0)
            files.push_back(p);
    }
    if (files.empty()) throw DataError("no frame_*.png files in " + dir);
    std::sort(files.begin(), files.end());

    FrameSequence seq;
    seq.fps = fps;
    seq.source_id = dir;
    seq.frames.reserve(files.size());
    for (const auto& p : files) {
        Image img = load_png_gray(p.string());
        if (!seq.frames.empty() &&
            (img.width != seq.width() || img.height != seq.height()))
            throw DataError("inconsistent frame dimensions at " + p.string());
        seq.frames.push_back(std::move(img));
    }
    return seq;
}

FrameSequence load_sequence(const std::string& path, double fps) {
    if (fs::is_directory(path)) return load_png_dir(path, fps);
    if (!fs::exists(path)) throw DataError("sequence path does not exist: " + path);
    return load_gfsq(path, fps);
}

// ----------------------------------------------------------------- resize

Image resize_image(const Image& img, int width, int height) {
    if (width <= 0 || height <= 0) throw DataError("resize target must be positive");
    // Scale to cover, then center-crop the overhanging dimension.
    const double scale = std::max(double(width) / img.width, double(height) / img.height);
    const double off_x = (img.width * scale - width) / 2.0;
    const double off_y = (img.height * scale - height) / 2.0;

    Image out(width, height);
    for (int y = 0; y < height; ++y) {
        const double sy = (y + 0.5 + off_y) / scale - 0.5;
        int y0 = int(std::floor(sy));
        float fy = float(sy - y0);
        y0 = std::clamp(y0, 0, img.height - 1);
        const int y1 = std::min(y0 + 1, img.height - 1);
        for (int x = 0; x < width; ++x) {
            const double sx = (x + 0.5 + off_x) / scale - 0.5;
            int x0 = int(std::floor(sx));
            float fx = float(sx - x0);
            x0 = std::clamp(x0, 0, img.width - 1);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const float top = img.at(x0, y0) + fx * (img.at(x1, y0) - img.at(x0, y0));
            const float bot = img.at(x0, y1) + fx * (img.at(x1, y1) - img.at(x0, y1));
            out.at(x, y) = top + fy * (bot - top);
        }
    }
    return out;
}

FrameSequence resize_sequence(const FrameSequence& seq, int width, int height) {
    if (seq.frames.empty()) throw DataError("cannot resize an empty sequence");
    FrameSequence out;
    out.source_id = seq.source_id;
    out.fps = seq.fps;
    out.frames.reserve(seq.frames.size());
    for (const auto& f : seq.frames) out.frames.push_back(resize_image(f, width, height));
    return out;
}

// ------------------------------------------------------------ localization

TrackEstimate localize_subject(const FrameSequence& seq, const BackgroundParams& params) {
    const int T = int(seq.frames.size());
    if (T < 5) throw DataError("localize_subject needs at least 5 frames");
    const int W = seq.width(), H = seq.height();
    const int half = params.median_window / 2;

    TrackEstimate track;
    track.x_center.assign(size_t(T), 0.f);
    track.valid.assign(size_t(T), 0);

    std::vector<float> window;
    window.reserve(size_t(params.median_window));
    // Per-pixel median over a centered window, clamped at sequence ends.
    std::vector<float> background(size_t(W) * H);
    for (int t = 0; t < T; ++t) {
        const int lo = std::max(0, t - half);
        const int hi = std::min(T - 1, t + half);
        for (size_t k = 0; k < background.size(); ++k) {
            window.clear();
            for (int u = lo; u <= hi; ++u) window.push_back(seq.frames[size_t(u)].px[k]);
            auto mid = window.begin() + window.size() / 2;
            std::nth_element(window.begin(), mid, window.end());
            background[k] = *mid;
        }
        double wsum = 0.0, xsum = 0.0;
        int area = 0;
        const Image& f = seq.frames[size_t(t)];
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const float d = std::fabs(f.at(x, y) - background[size_t(y) * W + x]);
                if (d > params.threshold) {
                    ++area;
                    wsum += d;
                    xsum += double(d) * x;
                }
            }
        if (area >= params.min_area && wsum > 0.0) {
            track.x_center[size_t(t)] = float(xsum / wsum);
            track.valid[size_t(t)] = 1;
        }
    }
    return track;
}

}  // namespace gaitflow
