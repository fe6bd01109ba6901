#pragma once

#include <vector>

#include "gaitflow/videoio.hpp"

namespace gaitflow {

/// Two-channel dense displacement field for one frame pair, in px/frame.
struct OpticalFlowMap {
    int width = 0;
    int height = 0;
    std::vector<float> u;  // horizontal, row-major
    std::vector<float> v;  // vertical, row-major

    OpticalFlowMap() = default;
    OpticalFlowMap(int w, int h)
        : width(w), height(h), u(size_t(w) * h, 0.f), v(size_t(w) * h, 0.f) {}

    size_t size() const { return u.size(); }
};

struct FlowParams {
    int pyramid_levels = 3;
    double pyramid_scale = 0.5;
    int window = 9;        // Gaussian weighting support for the LS solve
    int iterations = 3;    // displacement refinements per level
    int poly_n = 5;        // odd neighborhood size for polynomial expansion
    double poly_sigma = 1.1;

    void validate() const;
};

/// Farneback two-frame dense flow: per level, each pixel neighborhood is fit
/// with a quadratic polynomial; the displacement solving A d = Δb is averaged
/// over `window` with Gaussian weights, warped and iterated, then upsampled
/// to the next pyramid level.
OpticalFlowMap dense_flow(const Image& prev, const Image& next, const FlowParams& params = {});

/// Flow between consecutive frames; output length = frame count - 1.
std::vector<OpticalFlowMap> flow_sequence(const FrameSequence& seq,
                                          const FlowParams& params = {},
                                          unsigned threads = 1);

/// Horizontal spatial flip with negated horizontal component:
/// u'(x,y) = -u(W-1-x,y), v'(x,y) = v(W-1-x,y).
OpticalFlowMap mirror_flow(const OpticalFlowMap& f);

/// Raw little-endian f32 container: magic GFOF, u32 width/height/count, then
/// count x (u plane, v plane).
void save_flows(const std::vector<OpticalFlowMap>& flows, const std::string& path);
std::vector<OpticalFlowMap> load_flows(const std::string& path);

}  // namespace gaitflow
