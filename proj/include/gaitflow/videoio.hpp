#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gaitflow/common.hpp"

namespace gaitflow {

/// Single-channel intensity grid, row-major, values in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> px;

    Image() = default;
    Image(int w, int h, float fill = 0.f) : width(w), height(h), px(size_t(w) * h, fill) {}

    float& at(int x, int y) { return px[size_t(y) * width + x]; }
    float at(int x, int y) const { return px[size_t(y) * width + x]; }
    size_t size() const { return px.size(); }
};

struct FrameSequence {
    std::vector<Image> frames;
    std::string source_id;
    double fps = 30.0;

    int width() const { return frames.empty() ? 0 : frames.front().width; }
    int height() const { return frames.empty() ? 0 : frames.front().height; }
};

/// Rough per-frame horizontal localization of the walking subject.
struct TrackEstimate {
    std::vector<float> x_center;
    std::vector<uint8_t> valid;
};

enum class Scenario : uint8_t { N = 0, B = 1, S = 2, TN = 3, TB = 4, TS = 5 };

const char* scenario_name(Scenario s);
Scenario scenario_from_name(const std::string& name);
/// Elapsed-time counterpart (N -> TN etc); identity on TN/TB/TS.
Scenario scenario_elapsed(Scenario s);

/// Dataset layout: subject / scenario / sequence -> frames on disk.
/// A sequence entry resolves to either `<root>/<subject>/<seq>.gfsq` (raw
/// blob, magic GFSQ, u32 LE width/height/count, then 8-bit planar frames) or
/// `<root>/<subject>/<seq>/frame_000001.png`... when format == "png".
struct DatasetLayout {
    struct Subject {
        std::string id;
        char gender = 'm';  // 'm' or 'f'
        std::map<Scenario, std::vector<std::string>> sequences;
    };
    std::string root;
    std::string format = "gfsq";  // "gfsq" | "png"
    double fps = 30.0;
    std::vector<Subject> subjects;

    const Subject& subject(const std::string& id) const;
    std::string sequence_path(const std::string& subject_id, const std::string& seq) const;
};

DatasetLayout load_layout(const std::string& json_path);
void save_layout(const DatasetLayout& layout, const std::string& json_path);

// --------------------------------------------------------------- operations

/// Reads a sequence from `path`: a .gfsq blob or a directory of numbered
/// frame_%06d.png files. Frames are converted to [0,1] grayscale.
FrameSequence load_sequence(const std::string& path, double fps = 30.0);

void save_sequence_gfsq(const FrameSequence& seq, const std::string& path);
void save_sequence_png(const FrameSequence& seq, const std::string& dir);

/// Bilinear resample to width x height. Sources whose aspect ratio differs
/// from the target are scaled to cover and center-cropped.
FrameSequence resize_sequence(const FrameSequence& seq, int width, int height);
Image resize_image(const Image& img, int width, int height);

struct BackgroundParams {
    int median_window = 25;   // frames in the running-median model
    float threshold = 0.1f;   // |frame - background| foreground cutoff
    int min_area = 20;        // px; below this the frame is marked invalid
};

/// Foreground = |frame - running median background| > threshold. x_center is
/// the difference-weighted column centroid of the foreground mask.
TrackEstimate localize_subject(const FrameSequence& seq, const BackgroundParams& params = {});

// png_io.cpp
Image load_png_gray(const std::string& path);
void save_png_gray(const Image& img, const std::string& path);

}  // namespace gaitflow
