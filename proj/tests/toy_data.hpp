#pragma once

// Synthetic separable cuboid sets shared by the gaitnet tests and the
// acceptance suite: each class is a fixed smooth flow template plus noise.

#include <vector>

#include "gaitflow/cuboid.hpp"
#include "gaitflow/nnet.hpp"

namespace gaitflow::testing {

inline FlowCuboid toy_template(int cls, uint64_t seed) {
    FlowCuboid t(60, 60, 50);
    Rng rng(derive_seed(seed, 0x7465u, uint64_t(cls)));
    // Low-frequency class pattern: per-channel sinusoid with class-specific
    // frequency and orientation, flow-like amplitudes.
    const double fx = 1.0 + 0.7 * cls;
    const double fy = 0.5 + 0.9 * cls;
    const double ft = 1.0 + 0.5 * cls;
    const double phase = rng.uniform() * 6.28318;
    for (int c = 0; c < 50; ++c)
        for (int y = 0; y < 60; ++y)
            for (int x = 0; x < 60; ++x) {
                const double arg = 6.28318 * (fx * x / 60.0 + fy * y / 60.0 + ft * c / 50.0);
                t.at(c, y, x) = float(1.2 * std::sin(arg + phase));
            }
    return t;
}

inline std::vector<FlowCuboid> toy_cuboids(int classes, int per_class, uint64_t seed,
                                           double noise = 0.4) {
    std::vector<FlowCuboid> tmpl;
    for (int k = 0; k < classes; ++k) tmpl.push_back(toy_template(k, seed));
    std::vector<FlowCuboid> out;
    Rng rng(derive_seed(seed, 0x746f79u));
    for (int k = 0; k < classes; ++k)
        for (int i = 0; i < per_class; ++i) {
            FlowCuboid c = tmpl[size_t(k)];
            for (auto& v : c.data) v += float(noise * rng.normal());
            c.label = k;
            c.scenario = Scenario::N;
            c.subject = "toy" + std::to_string(k);
            c.sequence = "N" + std::to_string(i + 1);
            out.push_back(std::move(c));
        }
    return out;
}

}  // namespace gaitflow::testing
