#include <doctest.h>

#include <cstdio>
#include <random>

#include "gaitflow/cuboid.hpp"

using namespace gaitflow;

namespace {

std::vector<OpticalFlowMap> random_flows(int n, uint64_t seed, int w = 80, int h = 60) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.f, 1.f);
    std::vector<OpticalFlowMap> flows;
    for (int i = 0; i < n; ++i) {
        OpticalFlowMap f(w, h);
        for (size_t k = 0; k < f.size(); ++k) {
            f.u[k] = nd(rng);
            f.v[k] = nd(rng);
        }
        flows.push_back(std::move(f));
    }
    return flows;
}

TrackEstimate centered_track(size_t n, float x = 40.f) {
    TrackEstimate t;
    t.x_center.assign(n, x);
    t.valid.assign(n, 1);
    return t;
}

}  // namespace

TEST_CASE("window counts follow the overlap arithmetic") {
    auto track = centered_track(100);
    CHECK(build_subsequences(random_flows(25, 1), track).size() == 1);
    auto five = build_subsequences(random_flows(45, 2), track);
    CHECK(five.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(five[size_t(i)].window_start == 5 * i);
    // generic oracle: floor((N-25)/5)+1
    for (int n : {25, 26, 29, 30, 31, 60, 99}) {
        auto got = build_subsequences(random_flows(n, uint64_t(n)), track).size();
        CHECK(got == size_t((n - 25) / 5 + 1));
    }
    CHECK_THROWS_AS(build_subsequences(random_flows(24, 3), track), DataError);
}

TEST_CASE("crop is centered on the track at the central frame") {
    auto flows = random_flows(25, 7);
    auto track = centered_track(25, 40.f);
    auto wins = build_subsequence_windows(flows, track);
    REQUIRE(wins.size() == 1);
    CHECK(wins[0].source.crop_x0 == 10);  // 40 - 30
    // channel pairs reconstruct the source flow maps exactly
    const FlowCuboid& c = wins[0].cuboid;
    REQUIRE(c.channels == 50);
    for (int k = 0; k < 25; ++k)
        for (int y = 0; y < 60; ++y)
            for (int x = 0; x < 60; ++x) {
                CHECK(c.at(2 * k, y, x) == flows[size_t(k)].u[size_t(y) * 80 + 10 + x]);
                CHECK(c.at(2 * k + 1, y, x) == flows[size_t(k)].v[size_t(y) * 80 + 10 + x]);
            }
}

TEST_CASE("crop clamps at the frame border") {
    auto flows = random_flows(25, 8);
    auto left = build_subsequence_windows(flows, centered_track(25, 3.f));
    CHECK(left[0].source.crop_x0 == 0);
    auto right = build_subsequence_windows(flows, centered_track(25, 78.f));
    CHECK(right[0].source.crop_x0 == 20);
}

TEST_CASE("windows with invalid central frames are dropped") {
    auto flows = random_flows(45, 9);
    auto track = centered_track(45);
    track.valid[12] = 0;  // kills the window starting at 0
    auto wins = build_subsequences(flows, track);
    CHECK(wins.size() == 4);
    CHECK(wins[0].window_start == 5);
}

TEST_CASE("augment produces the 18-element family") {
    auto flows = random_flows(25, 10);
    auto wins = build_subsequence_windows(flows, centered_track(25));
    REQUIRE(wins.size() == 1);
    wins[0].cuboid.label = 3;
    auto fam = augment(wins[0].cuboid, wins[0].source);
    REQUIRE(fam.size() == 18);
    for (const auto& c : fam) CHECK(c.label == 3);

    // element 0 is the base crop, bit-identical
    for (size_t k = 0; k < fam[0].data.size(); ++k)
        CHECK(fam[0].data[k] == wins[0].cuboid.data[k]);

    // offset (0,+5): bottom 5 rows zero
    const FlowCuboid* down = nullptr;
    for (const auto& c : fam)
        if (c.aug_dx == 0 && c.aug_dy == 5 && !c.aug_mirror) down = &c;
    REQUIRE(down != nullptr);
    for (int ch = 0; ch < down->channels; ++ch)
        for (int y = 55; y < 60; ++y)
            for (int x = 0; x < 60; ++x) CHECK(down->at(ch, y, x) == 0.f);
    // and the in-bounds region matches the shifted source
    for (int ch = 0; ch < down->channels; ++ch)
        for (int y = 0; y < 55; ++y)
            for (int x = 0; x < 60; ++x)
                CHECK(down->at(ch, y, x) == wins[0].source.at(ch, y + 5, 10 + x));

    // mirrored halves pair up with the unmirrored ones
    for (size_t i = 0; i < 9; ++i) {
        CHECK(!fam[i].aug_mirror);
        CHECK(fam[i + 9].aug_mirror);
        CHECK(fam[i + 9].aug_dx == fam[i].aug_dx);
        for (int k = 0; k < 25; ++k)
            for (int y = 0; y < 60; ++y)
                for (int x = 0; x < 60; ++x) {
                    CHECK(fam[i + 9].at(2 * k, y, x) == -fam[i].at(2 * k, y, 59 - x));
                    CHECK(fam[i + 9].at(2 * k + 1, y, x) == fam[i].at(2 * k + 1, y, 59 - x));
                }
    }
}

TEST_CASE("mean and normalization") {
    FlowCuboid a(4, 4, 2);
    std::fill(a.data.begin(), a.data.end(), 2.f);
    CHECK(compute_mean({a}).mean == doctest::Approx(2.0));

    FlowCuboid b = a;
    std::fill(b.data.begin(), b.data.end(), 1.f);
    FlowCuboid c = a;
    std::fill(c.data.begin(), c.data.end(), 3.f);
    CHECK(compute_mean({b, c}).mean == doctest::Approx(2.0));

    CHECK_THROWS_AS(compute_mean({}), DataError);

    // two-pass oracle on a random set
    std::mt19937_64 rng(11);
    std::normal_distribution<float> nd(0.5f, 2.f);
    std::vector<FlowCuboid> set;
    double sum = 0.0;
    uint64_t n = 0;
    for (int i = 0; i < 7; ++i) {
        FlowCuboid x(6, 5, 4);
        for (auto& v : x.data) {
            v = nd(rng);
            sum += v;
            ++n;
        }
        set.push_back(std::move(x));
    }
    const double oracle = sum / double(n);
    CHECK(compute_mean(set).mean == doctest::Approx(oracle).epsilon(1e-9));

    // normalize: subtract, restore
    CuboidSetStats st{2.0, 1};
    FlowCuboid z = normalize(a, st);
    CHECK(z.normalized);
    for (float v : z.data) CHECK(v == 0.f);
    CuboidSetStats zero{0.0, 1};
    FlowCuboid same = normalize(a, zero);
    for (size_t k = 0; k < a.data.size(); ++k) CHECK(same.data[k] == a.data[k]);
    FlowCuboid restored = z;
    for (auto& v : restored.data) v += float(st.mean);
    for (size_t k = 0; k < a.data.size(); ++k)
        CHECK(restored.data[k] == doctest::Approx(a.data[k]).epsilon(1e-7));
}

TEST_CASE("archive round-trip with manifest") {
    const std::string path = "cuboids_test.gfcb";
    auto flows = random_flows(30, 12);
    auto wins = build_subsequence_windows(flows, centered_track(30));
    REQUIRE(wins.size() == 2);
    {
        CuboidArchiveWriter wr(path, 60, 60, 50);
        int lab = 0;
        for (auto& w : wins) {
            w.cuboid.label = lab++;
            w.cuboid.scenario = Scenario::B;
            w.cuboid.subject = "p00" + std::to_string(w.cuboid.label);
            w.cuboid.sequence = "B1";
            wr.append(w.cuboid);
        }
        wr.close();
    }
    CuboidArchiveReader rd(path);
    REQUIRE(rd.size() == 2);
    CHECK(rd.height() == 60);
    CHECK(rd.channels() == 50);
    CHECK(rd.label(1) == 1);
    CHECK(rd.scenario(0) == Scenario::B);
    CHECK(rd.label_names().at(1) == "p001");
    FlowCuboid back = rd.read(1);
    CHECK(back.subject == "p001");
    CHECK(back.sequence == "B1");
    CHECK(back.window_start == 5);
    for (size_t k = 0; k < back.data.size(); ++k)
        CHECK(back.data[k] == wins[1].cuboid.data[k]);
    CHECK_THROWS_AS(rd.read(2), DataError);
    std::remove(path.c_str());
    std::remove((path + ".manifest.json").c_str());
}
