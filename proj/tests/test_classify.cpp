#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "gaitflow/classify.hpp"

#ifdef GAITFLOW_HAVE_EIGEN
#include <Eigen/Dense>
#endif

using namespace gaitflow;

namespace {

GaitSignature unit_sig(std::vector<float> v, int label = -1) {
    GaitSignature s;
    double n2 = 0.0;
    for (float x : v) n2 += double(x) * x;
    const float inv = n2 > 0 ? float(1.0 / std::sqrt(n2)) : 0.f;
    for (float& x : v) x *= inv;
    s.vector = std::move(v);
    s.label = label;
    return s;
}

std::vector<GaitSignature> gaussian_blobs(int classes, int per_class, int dim, double sep,
                                          uint64_t seed, std::vector<int>* labels) {
    Rng rng(seed);
    std::vector<std::vector<float>> centers;
    for (int c = 0; c < classes; ++c) {
        std::vector<float> ctr(size_t(dim));
        for (auto& v : ctr) v = float(rng.normal() * sep);
        centers.push_back(std::move(ctr));
    }
    std::vector<GaitSignature> sigs;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            std::vector<float> v(size_t(dim));
            for (int d = 0; d < dim; ++d) v[size_t(d)] = centers[size_t(c)][size_t(d)] + float(rng.normal() * 0.05);
            sigs.push_back(unit_sig(std::move(v), c));
            if (labels) labels->push_back(c);
        }
    return sigs;
}

}  // namespace

TEST_CASE("separable two-class svm reaches perfect training accuracy") {
    std::vector<GaitSignature> sigs;
    std::vector<int> labels;
    for (int i = 0; i < 10; ++i) {
        sigs.push_back(unit_sig({1.f, 0.f, 0.f}, 0));
        labels.push_back(0);
        sigs.push_back(unit_sig({0.f, 1.f, 0.f}, 1));
        labels.push_back(1);
    }
    SvmEnsemble ens = train_ovr_svm(sigs, labels);
    for (size_t i = 0; i < sigs.size(); ++i)
        CHECK(svm_rank(ens, sigs[i]).identities[0] == labels[i]);
}

TEST_CASE("five-class gaussian blobs classify almost perfectly") {
    std::vector<int> labels;
    auto train = gaussian_blobs(5, 30, 16, 1.0, 3, &labels);
    SvmEnsemble ens = train_ovr_svm(train, labels);
    std::vector<int> hold_labels;
    auto held = gaussian_blobs(5, 40, 16, 1.0, 3, &hold_labels);  // same centers, same seed stream start
    int correct = 0;
    for (size_t i = 0; i < train.size(); ++i)
        if (svm_rank(ens, train[i]).identities[0] == labels[i]) ++correct;
    CHECK(double(correct) / double(train.size()) >= 0.99);
}

TEST_CASE("svm input validation") {
    std::vector<GaitSignature> sigs = {unit_sig({1.f, 0.f}, 0), unit_sig({0.9f, 0.1f}, 0)};
    CHECK_THROWS_AS(train_ovr_svm(sigs, {0, 0}), DataError);                 // single class
    CHECK_THROWS_AS(train_ovr_svm(sigs, {0, 0}, {}, {0, 1}), DataError);     // class 1 absent
    SvmEnsemble ens = train_ovr_svm({unit_sig({1.f, 0.f}, 0), unit_sig({0.f, 1.f}, 1)}, {0, 1});
    CHECK_THROWS_AS(svm_rank(ens, std::vector<float>{1.f, 0.f, 0.f}), DataError);
}

TEST_CASE("svm_rank ordering equals the score-sort oracle") {
    Rng rng(17);
    for (int rep = 0; rep < 200; ++rep) {
        const int C = 3 + int(rng.next_u64() % 6);
        const int dim = 4 + int(rng.next_u64() % 12);
        SvmEnsemble ens;
        ens.dim = dim;
        for (int c = 0; c < C; ++c) {
            ens.labels.push_back(c * 2);  // non-contiguous labels
            std::vector<float> w(size_t(dim));
            for (auto& v : w) v = float(rng.normal());
            ens.weights.push_back(std::move(w));
            ens.bias.push_back(float(rng.normal()));
        }
        std::vector<float> q(size_t(dim));
        for (auto& v : q) v = float(rng.normal());
        RankedPrediction r = svm_rank(ens, q);
        // oracle: brute-force scores + stable sort
        std::vector<std::pair<float, int>> scored;
        for (int c = 0; c < C; ++c) {
            double s = ens.bias[size_t(c)];
            for (int d = 0; d < dim; ++d) s += double(ens.weights[size_t(c)][size_t(d)]) * q[size_t(d)];
            scored.emplace_back(float(s), c * 2);
        }
        std::stable_sort(scored.begin(), scored.end(), [](auto a, auto b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        REQUIRE(r.identities.size() == size_t(C));
        for (int c = 0; c < C; ++c) {
            CHECK(r.identities[size_t(c)] == scored[size_t(c)].second);
            CHECK(r.scores[size_t(c)] == scored[size_t(c)].first);
        }
    }
}

TEST_CASE("svm tie-break prefers the smaller label") {
    SvmEnsemble ens;
    ens.dim = 1;
    ens.labels = {1, 2, 3};
    ens.weights = {{0.f}, {0.f}, {0.f}};
    ens.bias = {0.5f, 0.5f, -0.25f};
    auto r = svm_rank(ens, {0.f});
    CHECK(r.identities == std::vector<int>{1, 2, 3});
}

TEST_CASE("top-1 is invariant to uniform positive scaling of scores") {
    Rng rng(23);
    for (int rep = 0; rep < 50; ++rep) {
        const int C = 4;
        SvmEnsemble a;
        a.dim = 3;
        for (int c = 0; c < C; ++c) {
            a.labels.push_back(c);
            a.weights.push_back({float(rng.normal()), float(rng.normal()), float(rng.normal())});
            a.bias.push_back(float(rng.normal()));
        }
        SvmEnsemble b = a;
        for (auto& w : b.weights)
            for (auto& v : w) v *= 3.5f;
        for (auto& v : b.bias) v *= 3.5f;
        std::vector<float> q = {float(rng.normal()), float(rng.normal()), float(rng.normal())};
        CHECK(svm_rank(a, q).identities[0] == svm_rank(b, q).identities[0]);
    }
}

TEST_CASE("gender svm handles imbalance and rejects degenerate input") {
    std::vector<GaitSignature> sigs;
    std::vector<int> labels;
    Rng rng(5);
    for (int i = 0; i < 63; ++i) {  // male-heavy prior
        std::vector<float> v = {1.f + float(rng.normal() * 0.1), float(rng.normal() * 0.1)};
        sigs.push_back(unit_sig(std::move(v), 1));
        labels.push_back(1);
    }
    for (int i = 0; i < 37; ++i) {
        std::vector<float> v = {float(rng.normal() * 0.1), 1.f + float(rng.normal() * 0.1)};
        sigs.push_back(unit_sig(std::move(v), 0));
        labels.push_back(0);
    }
    SvmEnsemble ens = train_gender_svm(sigs, labels);
    int ok0 = 0, n0 = 0, ok1 = 0, n1 = 0;
    for (size_t i = 0; i < sigs.size(); ++i) {
        const int pred = svm_rank(ens, sigs[i]).identities[0];
        if (labels[i] == 0) {
            ++n0;
            ok0 += pred == 0;
        } else {
            ++n1;
            ok1 += pred == 1;
        }
    }
    CHECK(double(ok0) / n0 >= 0.95);
    CHECK(double(ok1) / n1 >= 0.95);

    std::vector<GaitSignature> males = {sigs[0], sigs[1]};
    CHECK_THROWS_AS(train_gender_svm(males, {1, 1}), DataError);
    CHECK_THROWS_AS(train_gender_svm(males, {1, 2}), DataError);
}

TEST_CASE("pca recovers an exact low-dimensional subspace") {
    // data spanning 3 fixed orthogonal directions in 10-d
    Rng rng(7);
    std::vector<std::vector<float>> rows;
    for (int i = 0; i < 40; ++i) {
        std::vector<float> v(10, 0.f);
        const float a = float(rng.normal()), b = float(rng.normal()), c = float(rng.normal());
        v[1] = a;
        v[4] = b;
        v[7] = c;
        rows.push_back(std::move(v));
    }
    PcaModel m = fit_pca_vectors(rows, 3);
    // orthonormal basis
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int d = 0; d < 10; ++d)
                dot += double(m.basis[size_t(d) * 3 + i]) * m.basis[size_t(d) * 3 + j];
            CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) < 1e-6);
        }
    // reconstruction of in-subspace data is exact
    for (const auto& r : rows) {
        std::vector<float> x(10);
        double n2 = 0.0;
        for (double v : r) n2 += v * v;
        const float inv = n2 > 0 ? float(1.0 / std::sqrt(n2)) : 0.f;
        for (int d = 0; d < 10; ++d) x[size_t(d)] = r[size_t(d)] * inv;
        auto p = pca_project(m, x);
        std::vector<float> back(10);
        for (int d = 0; d < 10; ++d) {
            double s = m.mean[size_t(d)];
            for (int j = 0; j < 3; ++j) s += double(m.basis[size_t(d) * 3 + j]) * p[size_t(j)];
            back[size_t(d)] = float(s);
        }
        for (int d = 0; d < 10; ++d) CHECK(std::fabs(back[size_t(d)] - x[size_t(d)]) < 1e-6);
    }
    // projections of the training set have zero mean
    std::vector<double> psum(3, 0.0);
    for (const auto& r : rows) {
        std::vector<float> x(10);
        double n2 = 0.0;
        for (double v : r) n2 += v * v;
        const float inv = n2 > 0 ? float(1.0 / std::sqrt(n2)) : 0.f;
        for (int d = 0; d < 10; ++d) x[size_t(d)] = r[size_t(d)] * inv;
        auto p = pca_project(m, x);
        for (int j = 0; j < 3; ++j) psum[size_t(j)] += p[size_t(j)];
    }
    for (int j = 0; j < 3; ++j) CHECK(std::fabs(psum[size_t(j)] / 40.0) < 1e-6);
}

TEST_CASE("pca mean maps to zero and basis columns map to unit vectors") {
    Rng rng(9);
    std::vector<std::vector<float>> rows;
    for (int i = 0; i < 30; ++i) {
        std::vector<float> v(6);
        for (auto& x : v) x = float(rng.normal());
        rows.push_back(std::move(v));
    }
    PcaModel m = fit_pca_vectors(rows, 4);
    auto z = pca_project(m, m.mean);
    for (float v : z) CHECK(std::fabs(v) < 1e-6);
    for (int j = 0; j < 4; ++j) {
        std::vector<float> x = m.column(j);
        for (int d = 0; d < 6; ++d) x[size_t(d)] += m.mean[size_t(d)];
        auto p = pca_project(m, x);
        for (int i = 0; i < 4; ++i)
            CHECK(std::fabs(p[size_t(i)] - (i == j ? 1.f : 0.f)) < 1e-5);
    }
    CHECK_THROWS_AS(fit_pca_vectors(rows, 0), DataError);
    CHECK_THROWS_AS(fit_pca_vectors(rows, 7), DataError);
    CHECK_THROWS_AS(fit_pca_vectors({rows[0], rows[1]}, 2), DataError);
}

#ifdef GAITFLOW_HAVE_EIGEN
TEST_CASE("pca agrees with an independent eigensolver") {
    Rng rng(11);
    const int n = 50, dim = 32, k = 8;
    std::vector<std::vector<float>> rows;
    for (int i = 0; i < n; ++i) {
        std::vector<float> v(size_t(dim));
        for (auto& x : v) x = float(rng.normal());
        rows.push_back(std::move(v));
    }
    PcaModel m = fit_pca_vectors(rows, k);

    // oracle: normalize, center, covariance eigendecomposition via Eigen
    Eigen::MatrixXd X(n, dim);
    for (int i = 0; i < n; ++i) {
        double n2 = 0.0;
        for (int d = 0; d < dim; ++d) n2 += double(rows[size_t(i)][size_t(d)]) * rows[size_t(i)][size_t(d)];
        const double inv = 1.0 / std::sqrt(n2);
        for (int d = 0; d < dim; ++d) X(i, d) = rows[size_t(i)][size_t(d)] * inv;
    }
    Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;
    Eigen::MatrixXd C = X.transpose() * X / double(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    for (int j = 0; j < k; ++j) {
        Eigen::VectorXd v = es.eigenvectors().col(dim - 1 - j);  // descending
        // apply the same sign convention
        int arg = 0;
        for (int d = 1; d < dim; ++d)
            if (std::fabs(v(d)) > std::fabs(v(arg))) arg = d;
        if (v(arg) < 0) v = -v;
        for (int d = 0; d < dim; ++d)
            CHECK(std::fabs(v(d) - double(m.basis[size_t(d) * k + j])) < 1e-5);
        CHECK(std::fabs(es.eigenvalues()(dim - 1 - j) - double(m.explained[size_t(j)])) < 1e-5);
    }
}
#endif

TEST_CASE("nn_rank equals the brute-force oracle") {
    Rng rng(13);
    for (int rep = 0; rep < 100; ++rep) {
        const int ids = 5 + int(rng.next_u64() % 16);
        const int dim = 3 + int(rng.next_u64() % 6);
        GallerySet g;
        g.dim = dim;
        for (int i = 0; i < ids; ++i)
            for (int v = 0; v < 3; ++v) {
                std::vector<float> x(size_t(dim));
                for (auto& e : x) e = float(rng.normal());
                g.labels.push_back(i);
                g.vectors.push_back(std::move(x));
            }
        std::vector<float> q(size_t(dim));
        for (auto& e : q) e = float(rng.normal());
        RankedPrediction r = nn_rank(g, q);
        // oracle: exhaustive min-distance per identity, sorted
        std::vector<std::pair<double, int>> oracle;
        for (int i = 0; i < ids; ++i) {
            double best = 1e300;
            for (size_t s = 0; s < g.vectors.size(); ++s) {
                if (g.labels[s] != i) continue;
                double d2 = 0.0;
                for (int d = 0; d < dim; ++d) {
                    const double diff = double(q[size_t(d)]) - g.vectors[s][size_t(d)];
                    d2 += diff * diff;
                }
                best = std::min(best, std::sqrt(d2));
            }
            oracle.emplace_back(best, i);
        }
        std::stable_sort(oracle.begin(), oracle.end());
        REQUIRE(r.identities.size() == size_t(ids));
        for (int i = 0; i < ids; ++i) CHECK(r.identities[size_t(i)] == oracle[size_t(i)].second);
    }
}

TEST_CASE("nn_rank basics") {
    GallerySet g;
    g.dim = 2;
    g.labels = {7, 9};
    g.vectors = {{1.f, 0.f}, {0.f, 2.f}};
    auto r = nn_rank(g, {1.f, 0.f});
    CHECK(r.identities[0] == 7);
    CHECK(r.scores[0] == 0.f);  // exact match: distance zero
    auto r2 = nn_rank(g, {0.f, 0.f});
    CHECK(r2.identities[0] == 7);  // distance 1 beats distance 2
    CHECK_THROWS_AS(nn_rank(g, {1.f, 0.f, 0.f}), DataError);
}

TEST_CASE("majority voting") {
    auto mk = [](std::vector<int> ids, std::vector<float> scores) {
        RankedPrediction p;
        p.identities = std::move(ids);
        p.scores = std::move(scores);
        return p;
    };
    // (A,A,B) -> A
    std::vector<RankedPrediction> v1 = {mk({1, 2}, {0.9f, 0.1f}), mk({1, 2}, {0.8f, 0.2f}),
                                        mk({2, 1}, {0.6f, 0.4f})};
    CHECK(majority_vote(v1) == 1);
    // tie: higher mean top-1 score wins
    std::vector<RankedPrediction> v2 = {mk({1, 2}, {0.9f, 0.1f}), mk({2, 1}, {0.5f, 0.5f})};
    CHECK(majority_vote(v2) == 1);
    // unanimous list of any length returns the unanimous label
    std::vector<RankedPrediction> v3(5, mk({4, 2, 6}, {0.5f, 0.3f, 0.2f}));
    CHECK(majority_vote(v3) == 4);
    CHECK_THROWS_AS(majority_vote({}), DataError);

    // tally oracle on random prediction lists
    Rng rng(29);
    for (int rep = 0; rep < 100; ++rep) {
        const int ids = 4 + int(rng.next_u64() % 5);
        const int windows = 1 + int(rng.next_u64() % 12);
        std::vector<RankedPrediction> preds;
        for (int w = 0; w < windows; ++w) {
            RankedPrediction p;
            for (int i = 0; i < ids; ++i) {
                p.identities.push_back(i);
                p.scores.push_back(float(rng.normal()));
            }
            // sort into a valid ranking
            std::vector<size_t> order(p.identities.size());
            std::iota(order.begin(), order.end(), size_t(0));
            std::sort(order.begin(), order.end(),
                      [&](size_t a, size_t b) { return p.scores[a] > p.scores[b]; });
            RankedPrediction q;
            for (size_t i : order) {
                q.identities.push_back(p.identities[i]);
                q.scores.push_back(p.scores[i]);
            }
            preds.push_back(std::move(q));
        }
        // counting oracle
        std::map<int, int> votes;
        std::map<int, double> score_sum;
        for (const auto& p : preds) {
            votes[p.identities[0]] += 1;
            score_sum[p.identities[0]] += double(p.scores[0]);
        }
        int best = -1;
        for (const auto& [id, v] : votes) {
            if (best < 0) {
                best = id;
                continue;
            }
            const double mb = score_sum[best] / votes[best], mi = score_sum[id] / votes[id];
            if (v > votes[best] || (v == votes[best] && mi > mb) ||
                (v == votes[best] && mi == mb && id < best))
                best = id;
        }
        CHECK(majority_vote(preds) == best);
        CHECK(vote_ranking(preds).identities[0] == best);
    }
}

TEST_CASE("model files round-trip") {
    std::vector<GaitSignature> sigs = {unit_sig({1.f, 0.2f, 0.f}, 0), unit_sig({0.f, 1.f, 0.1f}, 1),
                                       unit_sig({0.9f, 0.1f, 0.f}, 0), unit_sig({0.1f, 0.9f, 0.f}, 1),
                                       unit_sig({0.8f, 0.f, 0.2f}, 0)};
    SvmEnsemble ens = train_ovr_svm(sigs, {0, 1, 0, 1, 0});
    save_svm(ens, "svm_test.gfsv");
    SvmEnsemble ens2 = load_svm("svm_test.gfsv");
    CHECK(ens2.labels == ens.labels);
    CHECK(ens2.lambda == ens.lambda);
    for (size_t c = 0; c < ens.weights.size(); ++c) {
        CHECK(ens2.weights[c] == ens.weights[c]);
        CHECK(ens2.bias[c] == ens.bias[c]);
    }
    std::remove("svm_test.gfsv");

    PcaModel m = fit_pca(sigs, 2);
    save_pca(m, "pca_test.gfpc");
    PcaModel m2 = load_pca("pca_test.gfpc");
    CHECK(m2.dim == m.dim);
    CHECK(m2.k == m.k);
    CHECK(m2.basis == m.basis);
    CHECK(m2.mean == m.mean);
    CHECK(m2.explained == m.explained);
    std::remove("pca_test.gfpc");

    sigs[0].subject = "p003";
    sigs[0].sequence = "N2";
    sigs[0].scenario = Scenario::S;
    sigs[0].window_start = 10;
    save_signatures(sigs, "sigs_test.gfgl");
    auto back = load_signatures("sigs_test.gfgl");
    REQUIRE(back.size() == sigs.size());
    CHECK(back[0].vector == sigs[0].vector);
    CHECK(back[0].subject == "p003");
    CHECK(back[0].scenario == Scenario::S);
    CHECK(back[0].label == 0);
    std::remove("sigs_test.gfgl");
    std::remove("sigs_test.gfgl.manifest.json");
}
