#include <doctest.h>

#include <cmath>
#include <random>

#include "gaitflow/optflow.hpp"

using namespace gaitflow;

namespace {

// Band-limited random texture: white noise smoothed by a small box filter,
// applied a few times. Values stay in [0,1].
Image smooth_texture(int w, int h, uint64_t seed, int passes = 3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> uni(0.f, 1.f);
    Image img(w, h);
    for (auto& v : img.px) v = uni(rng);
    for (int pass = 0; pass < passes; ++pass) {
        Image tmp = img;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float s = 0.f;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                        s += tmp.at((x + dx + w) % w, (y + dy + h) % h);
                img.at(x, y) = s / 9.f;
            }
    }
    return img;
}

// Integer translation with periodic wrap.
Image translate_wrap(const Image& img, int dx, int dy) {
    Image out(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const int sx = ((x - dx) % img.width + img.width) % img.width;
            const int sy = ((y - dy) % img.height + img.height) % img.height;
            out.at(x, y) = img.at(sx, sy);
        }
    return out;
}

struct FlowStats {
    double mean_u, mean_v;
};

// Central-region mean over a 60x40 window of an 80x60 map.
FlowStats central_mean(const OpticalFlowMap& f) {
    const int x0 = (f.width - 60) / 2, x1 = x0 + 60;
    const int y0 = (f.height - 40) / 2, y1 = y0 + 40;
    double su = 0.0, sv = 0.0;
    int n = 0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            su += f.u[size_t(y) * f.width + x];
            sv += f.v[size_t(y) * f.width + x];
            ++n;
        }
    return {su / n, sv / n};
}

}  // namespace

TEST_CASE("identical frames give zero flow") {
    Image img = smooth_texture(80, 60, 7);
    OpticalFlowMap f = dense_flow(img, img);
    for (size_t k = 0; k < f.size(); ++k) {
        CHECK(std::fabs(f.u[k]) < 1e-6);
        CHECK(std::fabs(f.v[k]) < 1e-6);
    }
}

TEST_CASE("horizontal translation is recovered") {
    Image img = smooth_texture(80, 60, 42);
    for (int d : {-3, -2, -1, 1, 2, 3}) {
        Image next = translate_wrap(img, d, 0);
        auto s = central_mean(dense_flow(img, next));
        CAPTURE(d);
        CHECK(std::fabs(s.mean_u - d) < 0.25);
        CHECK(std::fabs(s.mean_v) < 0.25);
    }
}

TEST_CASE("vertical translation is recovered") {
    Image img = smooth_texture(80, 60, 11);
    for (int d : {-2, -1, 1, 2}) {
        Image next = translate_wrap(img, 0, d);
        auto s = central_mean(dense_flow(img, next));
        CAPTURE(d);
        CHECK(std::fabs(s.mean_v - d) < 0.25);
        CHECK(std::fabs(s.mean_u) < 0.25);
    }
}

TEST_CASE("spec translation examples") {
    // (3,0): mean u in [2.75,3.25], mean v in [-0.25,0.25]; (0,-2) analog.
    Image img = smooth_texture(80, 60, 123);
    auto s1 = central_mean(dense_flow(img, translate_wrap(img, 3, 0)));
    CHECK(s1.mean_u > 2.75);
    CHECK(s1.mean_u < 3.25);
    CHECK(std::fabs(s1.mean_v) < 0.25);
    auto s2 = central_mean(dense_flow(img, translate_wrap(img, 0, -2)));
    CHECK(s2.mean_v > -2.25);
    CHECK(s2.mean_v < -1.75);
}

TEST_CASE("flow_sequence length and static input") {
    FrameSequence seq;
    Image img = smooth_texture(40, 30, 5);
    for (int i = 0; i < 26; ++i) seq.frames.push_back(img);
    auto flows = flow_sequence(seq);
    CHECK(flows.size() == 25);
    for (const auto& f : flows)
        for (size_t k = 0; k < f.size(); ++k) {
            CHECK(std::fabs(f.u[k]) < 1e-6);
            CHECK(std::fabs(f.v[k]) < 1e-6);
        }

    FrameSequence tiny;
    tiny.frames.push_back(img);
    CHECK_THROWS_AS(flow_sequence(tiny), DataError);
}

TEST_CASE("mirror_flow involution and sign rule") {
    OpticalFlowMap f(8, 4);
    std::mt19937_64 rng(3);
    std::normal_distribution<float> nd(0.f, 1.f);
    for (size_t k = 0; k < f.size(); ++k) {
        f.u[k] = nd(rng);
        f.v[k] = nd(rng);
    }
    OpticalFlowMap ff = mirror_flow(mirror_flow(f));
    for (size_t k = 0; k < f.size(); ++k) {
        CHECK(ff.u[k] == f.u[k]);
        CHECK(ff.v[k] == f.v[k]);
    }

    OpticalFlowMap uni(6, 3);
    for (auto& u : uni.u) u = 1.f;
    OpticalFlowMap m = mirror_flow(uni);
    for (size_t k = 0; k < m.size(); ++k) {
        CHECK(m.u[k] == -1.f);
        CHECK(m.v[k] == 0.f);
    }
}

TEST_CASE("mirror_flow commutes with frame mirroring") {
    Image a = smooth_texture(80, 60, 9);
    Image b = translate_wrap(a, 2, 1);
    auto flip = [](const Image& img) {
        Image out(img.width, img.height);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) out.at(x, y) = img.at(img.width - 1 - x, y);
        return out;
    };
    OpticalFlowMap direct = dense_flow(flip(a), flip(b));
    OpticalFlowMap mirrored = mirror_flow(dense_flow(a, b));
    double mad_u = 0.0, mad_v = 0.0;
    for (size_t k = 0; k < direct.size(); ++k) {
        mad_u += std::fabs(direct.u[k] - mirrored.u[k]);
        mad_v += std::fabs(direct.v[k] - mirrored.v[k]);
    }
    mad_u /= double(direct.size());
    mad_v /= double(direct.size());
    CHECK(mad_u < 0.1);
    CHECK(mad_v < 0.1);
}

TEST_CASE("flow archive round-trip") {
    Image a = smooth_texture(16, 12, 21);
    Image b = translate_wrap(a, 1, 0);
    std::vector<OpticalFlowMap> flows = {dense_flow(a, b), dense_flow(b, a)};
    const std::string path = "flows_test.gfof";
    save_flows(flows, path);
    auto back = load_flows(path);
    REQUIRE(back.size() == flows.size());
    for (size_t i = 0; i < flows.size(); ++i)
        for (size_t k = 0; k < flows[i].size(); ++k) {
            CHECK(back[i].u[k] == flows[i].u[k]);
            CHECK(back[i].v[k] == flows[i].v[k]);
        }
    std::remove(path.c_str());
}

TEST_CASE("dense_flow input validation") {
    Image a(10, 10, 0.5f), b(12, 10, 0.5f);
    CHECK_THROWS_AS(dense_flow(a, b), DataError);
    Image tiny(3, 3, 0.2f);
    CHECK_THROWS_AS(dense_flow(tiny, tiny), DataError);
    FlowParams bad;
    bad.pyramid_scale = 1.5;
    CHECK_THROWS_AS(dense_flow(a, a, bad), DataError);
}
