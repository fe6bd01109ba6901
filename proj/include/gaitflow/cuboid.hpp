#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gaitflow/optflow.hpp"

namespace gaitflow {

/// CNN input sample: L=25 stacked flow maps cropped to 60x60. Stored
/// plane-major; 0-based channel 2k-2 holds u and 2k-1 holds v of flow step k.
struct FlowCuboid {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;  // [c][h][w]

    int label = -1;  // subject index; -1 when unknown
    Scenario scenario = Scenario::N;
    float center_frame_x = 0.f;  // subject x at the central frame (source coords)
    bool normalized = false;

    // provenance, carried into archive manifests
    std::string subject;
    std::string sequence;
    int window_start = 0;  // 0-based first flow step of the window
    int aug_dx = 0, aug_dy = 0;
    bool aug_mirror = false;

    FlowCuboid() = default;
    FlowCuboid(int h, int w, int c)
        : height(h), width(w), channels(c), data(size_t(h) * w * c, 0.f) {}

    float& at(int c, int y, int x) { return data[(size_t(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(size_t(c) * height + y) * width + x]; }
};

/// Uncropped flow window kept alongside a cuboid so shifted crops can be
/// re-cut during augmentation.
struct FlowWindow {
    int height = 0, width = 0, channels = 0;
    std::vector<float> data;  // plane-major like FlowCuboid
    int crop_x0 = 0;          // column of the base crop

    float at(int c, int y, int x) const { return data[(size_t(c) * height + y) * width + x]; }
};

struct CuboidWindow {
    FlowCuboid cuboid;
    FlowWindow source;
};

struct CuboidBuildParams {
    int length = 25;        // L, flow steps per window
    double overlap = 0.8;   // O, fraction of L shared between windows
    int crop_width = 60;
};

struct CuboidSetStats {
    double mean = 0.0;
    uint64_t count = 0;  // samples (cuboids) accumulated
};

/// Windows start every L*(1-overlap) flow steps; each is cropped to
/// crop_width columns centered on the track position at the window's central
/// frame (1-based #13 for L=25), clamped to the frame. Windows whose central
/// frame has no valid track are dropped.
std::vector<CuboidWindow> build_subsequence_windows(const std::vector<OpticalFlowMap>& flows,
                                                    const TrackEstimate& track,
                                                    const CuboidBuildParams& params = {});

std::vector<FlowCuboid> build_subsequences(const std::vector<OpticalFlowMap>& flows,
                                           const TrackEstimate& track,
                                           const CuboidBuildParams& params = {});

/// 18 variants: crops at offsets {-5,0,+5}^2 re-cut from the source window
/// (out-of-bounds cells zero-filled), base offset first, then the mirrored
/// copy of each. Element 0 is the input cuboid itself.
std::vector<FlowCuboid> augment(const FlowCuboid& c, const FlowWindow& source,
                                int shift = 5);

/// Streaming global scalar mean over every element of the given cuboids.
class MeanAccumulator {
public:
    void add(const FlowCuboid& c);
    CuboidSetStats stats() const;

private:
    double sum_ = 0.0;
    uint64_t elements_ = 0;
    uint64_t samples_ = 0;
};

CuboidSetStats compute_mean(const std::vector<FlowCuboid>& train);

/// Subtracts stats.mean from every element; metadata preserved.
FlowCuboid normalize(const FlowCuboid& c, const CuboidSetStats& stats);
void normalize_inplace(FlowCuboid& c, const CuboidSetStats& stats);

void save_stats(const CuboidSetStats& stats, const std::string& path);
CuboidSetStats load_stats(const std::string& path);

// ------------------------------------------------------------- archive io
// GFCB: magic, u32 count/h/w/c, then per sample u32 label, u8 scenario code,
// f32 data plane-major. A JSON manifest sits next to the archive.

class CuboidArchiveWriter {
public:
    CuboidArchiveWriter(const std::string& path, int h, int w, int c);
    ~CuboidArchiveWriter();
    void append(const FlowCuboid& cuboid);
    void close();  // patches the count and writes the manifest

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Random-access reader; read(i) is safe to call concurrently.
class CuboidArchiveReader {
public:
    explicit CuboidArchiveReader(const std::string& path);
    ~CuboidArchiveReader();

    size_t size() const;
    int height() const;
    int width() const;
    int channels() const;
    FlowCuboid read(size_t index) const;  // includes manifest metadata if present
    int label(size_t index) const;
    Scenario scenario(size_t index) const;
    const std::vector<std::string>& label_names() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace gaitflow
