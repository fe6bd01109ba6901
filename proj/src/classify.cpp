#include "gaitflow/classify.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

using nlohmann::json;

namespace gaitflow {

namespace {

void rank_by_score(RankedPrediction& r) {
    std::vector<size_t> order(r.identities.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (r.scores[a] != r.scores[b]) return r.scores[a] > r.scores[b];
        return r.identities[a] < r.identities[b];
    });
    RankedPrediction sorted;
    sorted.identities.reserve(order.size());
    sorted.scores.reserve(order.size());
    for (size_t i : order) {
        sorted.identities.push_back(r.identities[i]);
        sorted.scores.push_back(r.scores[i]);
    }
    r = std::move(sorted);
}

}  // namespace

// -------------------------------------------------------------------- svm

SvmEnsemble train_ovr_svm(const std::vector<GaitSignature>& sigs, const std::vector<int>& labels,
                          const SvmTrainParams& params, const std::vector<int>& classes) {
    if (sigs.empty() || sigs.size() != labels.size())
        throw DataError("train_ovr_svm: empty input or label count mismatch");
    const int dim = int(sigs[0].vector.size());
    for (const auto& s : sigs)
        if (int(s.vector.size()) != dim) throw DataError("train_ovr_svm: mixed dimensions");

    std::set<int> present(labels.begin(), labels.end());
    std::vector<int> cls = classes;
    if (cls.empty()) {
        cls.assign(present.begin(), present.end());
    } else {
        std::sort(cls.begin(), cls.end());
        for (int c : cls)
            if (!present.count(c))
                throw DataError("train_ovr_svm: class " + std::to_string(c) +
                                " has no training samples");
    }
    if (cls.size() < 2) throw DataError("train_ovr_svm: need at least 2 classes");

    SvmEnsemble ens;
    ens.dim = dim;
    ens.labels = cls;
    ens.lambda = params.lambda;
    ens.weights.assign(cls.size(), std::vector<float>(size_t(dim), 0.f));
    ens.bias.assign(cls.size(), 0.f);

    const size_t n = sigs.size();
    // Independent deterministic problem per class; safe to parallelize.
    parallel_for(cls.size(), default_threads(), [&](size_t ci) {
        const int target = cls[ci];
        std::vector<double> w(size_t(dim), 0.0), wavg(size_t(dim), 0.0);
        double b = 0.0, bavg = 0.0;
        uint64_t averaged = 0;
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t(0));
        Rng rng(derive_seed(params.seed, 0x73766dULL, uint64_t(ci)));
        uint64_t step = 0;
        for (int epoch = 0; epoch < params.epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng.engine());
            for (size_t i : order) {
                const double eta = params.lr0 / (1.0 + params.lr0 * params.lambda * double(step));
                ++step;
                const double y = labels[i] == target ? 1.0 : -1.0;
                const float* x = sigs[i].vector.data();
                double margin = b;
                for (int d = 0; d < dim; ++d) margin += w[size_t(d)] * x[d];
                const double shrink = 1.0 - eta * params.lambda;
                if (y * margin < 1.0) {
                    for (int d = 0; d < dim; ++d)
                        w[size_t(d)] = shrink * w[size_t(d)] + eta * y * x[d];
                    b += eta * y;  // bias unregularized
                } else {
                    for (int d = 0; d < dim; ++d) w[size_t(d)] *= shrink;
                }
                if (epoch >= params.epochs / 2) {  // average the second half
                    for (int d = 0; d < dim; ++d) wavg[size_t(d)] += w[size_t(d)];
                    bavg += b;
                    ++averaged;
                }
            }
        }
        const double inv = averaged ? 1.0 / double(averaged) : 1.0;
        for (int d = 0; d < dim; ++d) ens.weights[ci][size_t(d)] = float(wavg[size_t(d)] * inv);
        ens.bias[ci] = float(bavg * inv);
    });
    return ens;
}

RankedPrediction svm_rank(const SvmEnsemble& ens, const std::vector<float>& sig) {
    if (int(sig.size()) != ens.dim) throw DataError("svm_rank: dimension mismatch");
    RankedPrediction r;
    r.identities = ens.labels;
    r.scores.resize(ens.labels.size());
    for (size_t c = 0; c < ens.labels.size(); ++c) {
        double s = ens.bias[c];
        const auto& w = ens.weights[c];
        for (size_t d = 0; d < sig.size(); ++d) s += double(w[d]) * sig[d];
        r.scores[c] = float(s);
    }
    rank_by_score(r);
    return r;
}

SvmEnsemble train_gender_svm(const std::vector<GaitSignature>& sigs,
                             const std::vector<int>& gender_labels,
                             const SvmTrainParams& params) {
    for (int g : gender_labels)
        if (g != 0 && g != 1) throw DataError("train_gender_svm: labels must be 0 or 1");
    return train_ovr_svm(sigs, gender_labels, params, {0, 1});
}

// -------------------------------------------------------------------- pca

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
// eigenvalues (descending) and matching eigenvectors as columns of V.
void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& eigval,
                  std::vector<double>& V) {
    V.assign(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) V[size_t(i) * n + i] = 1.0;
    auto A = [&](int i, int j) -> double& { return a[size_t(i) * n + j]; };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += A(i, j) * A(i, j);
        if (off < 1e-22) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = A(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = A(i, p), aiq = A(i, q);
                    A(i, p) = c * aip - s * aiq;
                    A(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = A(p, i), aqi = A(q, i);
                    A(p, i) = c * api - s * aqi;
                    A(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = V[size_t(i) * n + p], viq = V[size_t(i) * n + q];
                    V[size_t(i) * n + p] = c * vip - s * viq;
                    V[size_t(i) * n + q] = s * vip + c * viq;
                }
            }
    }
    eigval.resize(size_t(n));
    for (int i = 0; i < n; ++i) eigval[size_t(i)] = A(i, i);
    // sort descending, permuting V's columns
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return eigval[size_t(x)] > eigval[size_t(y)]; });
    std::vector<double> ev(static_cast<size_t>(n)), Vs(size_t(n) * n);
    for (int j = 0; j < n; ++j) {
        ev[size_t(j)] = eigval[size_t(order[size_t(j)])];
        for (int i = 0; i < n; ++i) Vs[size_t(i) * n + j] = V[size_t(i) * n + order[size_t(j)]];
    }
    eigval = std::move(ev);
    V = std::move(Vs);
}

std::vector<float> normalized(const std::vector<float>& v) {
    double n2 = 0.0;
    for (float x : v) n2 += double(x) * x;
    std::vector<float> out = v;
    if (n2 > 0) {
        const float inv = float(1.0 / std::sqrt(n2));
        for (float& x : out) x *= inv;
    }
    return out;
}

}  // namespace

std::vector<float> PcaModel::column(int j) const {
    std::vector<float> c(size_t(dim));
    for (int i = 0; i < dim; ++i) c[size_t(i)] = basis[size_t(i) * k + j];
    return c;
}

PcaModel fit_pca_vectors(const std::vector<std::vector<float>>& rows, int k) {
    const int n = int(rows.size());
    if (n == 0) throw DataError("fit_pca: empty input");
    const int dim = int(rows[0].size());
    if (k < 1 || k > dim) throw DataError("fit_pca: k must be in [1, dim]");
    if (k >= n) throw DataError("fit_pca: need more samples than components");

    // L2-normalize, then center.
    std::vector<std::vector<float>> X(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        if (int(rows[i].size()) != dim) throw DataError("fit_pca: mixed dimensions");
        X[i] = normalized(rows[i]);
    }
    PcaModel m;
    m.dim = dim;
    m.k = k;
    m.mean.assign(size_t(dim), 0.f);
    for (const auto& x : X)
        for (int d = 0; d < dim; ++d) m.mean[size_t(d)] += x[size_t(d)];
    for (auto& v : m.mean) v /= float(n);
    for (auto& x : X)
        for (int d = 0; d < dim; ++d) x[size_t(d)] -= m.mean[size_t(d)];

    m.basis.assign(size_t(dim) * k, 0.f);
    m.explained.assign(size_t(k), 0.f);

    std::vector<double> eigval, V;
    if (dim <= n) {
        // covariance route: C = X^T X / (n-1), dim x dim
        std::vector<double> C(size_t(dim) * dim, 0.0);
        for (const auto& x : X)
            for (int i = 0; i < dim; ++i) {
                const double xi = x[size_t(i)];
                if (xi == 0.0) continue;
                for (int j = 0; j < dim; ++j) C[size_t(i) * dim + j] += xi * x[size_t(j)];
            }
        for (auto& v : C) v /= double(n - 1);
        for (int i = 0; i < dim; ++i) m.total_variance += C[size_t(i) * dim + i];
        jacobi_eigen(C, dim, eigval, V);
        for (int j = 0; j < k; ++j) {
            m.explained[size_t(j)] = float(std::max(0.0, eigval[size_t(j)]));
            for (int i = 0; i < dim; ++i)
                m.basis[size_t(i) * k + j] = float(V[size_t(i) * dim + j]);
        }
    } else {
        // Gram route: G = X X^T / (n-1), n x n; v_j = X^T u_j / sqrt((n-1) l_j)
        std::vector<double> G(size_t(n) * n, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
                double s = 0.0;
                for (int d = 0; d < dim; ++d)
                    s += double(X[size_t(i)][size_t(d)]) * X[size_t(j)][size_t(d)];
                G[size_t(i) * n + j] = s / double(n - 1);
                G[size_t(j) * n + i] = G[size_t(i) * n + j];
            }
        for (int i = 0; i < n; ++i) m.total_variance += G[size_t(i) * n + i];
        jacobi_eigen(G, n, eigval, V);
        for (int j = 0; j < k; ++j) {
            const double lj = eigval[size_t(j)];
            if (lj <= 1e-12)
                throw NumericError("fit_pca: requested components exceed the data rank");
            m.explained[size_t(j)] = float(lj);
            const double scale = 1.0 / std::sqrt(lj * double(n - 1));
            for (int d = 0; d < dim; ++d) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += double(V[size_t(i) * n + j]) * X[size_t(i)][size_t(d)];
                m.basis[size_t(d) * k + j] = float(s * scale);
            }
        }
    }

    // Deterministic sign: largest-magnitude component of each column positive.
    for (int j = 0; j < k; ++j) {
        int arg = 0;
        float best = 0.f;
        for (int d = 0; d < dim; ++d) {
            const float v = std::fabs(m.basis[size_t(d) * k + j]);
            if (v > best) {
                best = v;
                arg = d;
            }
        }
        if (m.basis[size_t(arg) * k + j] < 0.f)
            for (int d = 0; d < dim; ++d) m.basis[size_t(d) * k + j] = -m.basis[size_t(d) * k + j];
    }
    return m;
}

PcaModel fit_pca(const std::vector<GaitSignature>& sigs, int k) {
    std::vector<std::vector<float>> rows;
    rows.reserve(sigs.size());
    for (const auto& s : sigs) rows.push_back(s.vector);
    return fit_pca_vectors(rows, k);
}

std::vector<float> pca_project(const PcaModel& m, const std::vector<float>& x) {
    if (int(x.size()) != m.dim) throw DataError("pca_project: dimension mismatch");
    std::vector<float> out(size_t(m.k), 0.f);
    for (int d = 0; d < m.dim; ++d) {
        const float xc = x[size_t(d)] - m.mean[size_t(d)];
        if (xc == 0.f) continue;
        const float* row = m.basis.data() + size_t(d) * m.k;
        for (int j = 0; j < m.k; ++j) out[size_t(j)] += xc * row[j];
    }
    return out;
}

// --------------------------------------------------------------------- nn

RankedPrediction nn_rank(const GallerySet& gallery, const std::vector<float>& query) {
    if (gallery.vectors.empty()) throw DataError("nn_rank: empty gallery");
    if (int(query.size()) != gallery.dim) throw DataError("nn_rank: dimension mismatch");
    std::map<int, double> best;
    for (size_t i = 0; i < gallery.vectors.size(); ++i) {
        const auto& g = gallery.vectors[i];
        double d2 = 0.0;
        for (size_t d = 0; d < query.size(); ++d) {
            const double diff = double(query[d]) - g[d];
            d2 += diff * diff;
        }
        const double dist = std::sqrt(d2);
        auto [it, inserted] = best.emplace(gallery.labels[i], dist);
        if (!inserted && dist < it->second) it->second = dist;
    }
    RankedPrediction r;
    for (const auto& [label, dist] : best) {
        r.identities.push_back(label);
        r.scores.push_back(float(-dist));
    }
    rank_by_score(r);
    return r;
}

// ------------------------------------------------------------------ voting

RankedPrediction vote_ranking(const std::vector<RankedPrediction>& preds) {
    if (preds.empty()) throw DataError("vote_ranking: empty prediction list");
    struct Tally {
        int votes = 0;
        double vote_score = 0.0;        // sum of top-1 scores of its votes
        double overall_score = 0.0;     // sum of this identity's score everywhere
        int overall_count = 0;
    };
    std::map<int, Tally> tally;
    for (const auto& p : preds) {
        if (p.identities.empty()) throw DataError("vote_ranking: empty ranking member");
        Tally& t = tally[p.identities[0]];
        t.votes += 1;
        t.vote_score += double(p.scores.empty() ? 0.f : p.scores[0]);
        for (size_t i = 0; i < p.identities.size(); ++i) {
            Tally& o = tally[p.identities[i]];
            o.overall_score += double(i < p.scores.size() ? p.scores[i] : 0.f);
            o.overall_count += 1;
        }
    }
    std::vector<int> ids;
    for (const auto& [id, t] : tally) ids.push_back(id);
    auto key = [&](int id) {
        const Tally& t = tally.at(id);
        const double mean_vote = t.votes ? t.vote_score / t.votes : 0.0;
        const double mean_all = t.overall_count ? t.overall_score / t.overall_count : 0.0;
        return std::tuple<int, double, double>(t.votes, mean_vote, mean_all);
    };
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        const auto ka = key(a), kb = key(b);
        if (std::get<0>(ka) != std::get<0>(kb)) return std::get<0>(ka) > std::get<0>(kb);
        if (std::get<0>(ka) > 0 && std::get<1>(ka) != std::get<1>(kb))
            return std::get<1>(ka) > std::get<1>(kb);
        if (std::get<2>(ka) != std::get<2>(kb)) return std::get<2>(ka) > std::get<2>(kb);
        return a < b;
    });
    RankedPrediction r;
    for (int id : ids) {
        const auto k = key(id);
        r.identities.push_back(id);
        r.scores.push_back(float(std::get<0>(k)));
    }
    return r;
}

int majority_vote(const std::vector<RankedPrediction>& preds) {
    return vote_ranking(preds).identities.at(0);
}

// -------------------------------------------------------------------- io

void save_svm(const SvmEnsemble& ens, const std::string& path) {
    auto os = open_out(path);
    write_magic(os, "GFSV");
    write_pod<uint32_t>(os, uint32_t(ens.labels.size()));
    write_pod<uint32_t>(os, uint32_t(ens.dim));
    for (size_t c = 0; c < ens.labels.size(); ++c) {
        write_bytes(os, ens.weights[c].data(), ens.weights[c].size() * sizeof(float));
        write_pod<float>(os, ens.bias[c]);
    }
    write_pod<double>(os, ens.lambda);
    for (int label : ens.labels) write_pod<uint32_t>(os, uint32_t(label));
}

SvmEnsemble load_svm(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "GFSV", path);
    const auto C = read_pod<uint32_t>(is, "class count");
    const auto dim = read_pod<uint32_t>(is, "dim");
    SvmEnsemble ens;
    ens.dim = int(dim);
    ens.weights.assign(C, std::vector<float>(dim));
    ens.bias.assign(C, 0.f);
    for (uint32_t c = 0; c < C; ++c) {
        read_bytes(is, ens.weights[c].data(), size_t(dim) * sizeof(float), "svm weights");
        ens.bias[c] = read_pod<float>(is, "svm bias");
    }
    ens.lambda = read_pod<double>(is, "lambda");
    ens.labels.resize(C);
    for (uint32_t c = 0; c < C; ++c) ens.labels[c] = int(read_pod<uint32_t>(is, "label"));
    return ens;
}

void save_pca(const PcaModel& m, const std::string& path) {
    auto os = open_out(path);
    write_magic(os, "GFPC");
    write_pod<uint32_t>(os, uint32_t(m.dim));
    write_pod<uint32_t>(os, uint32_t(m.k));
    write_bytes(os, m.mean.data(), m.mean.size() * sizeof(float));
    write_bytes(os, m.basis.data(), m.basis.size() * sizeof(float));
    write_pod<double>(os, m.total_variance);
    write_bytes(os, m.explained.data(), m.explained.size() * sizeof(float));
}

PcaModel load_pca(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "GFPC", path);
    PcaModel m;
    m.dim = int(read_pod<uint32_t>(is, "dim"));
    m.k = int(read_pod<uint32_t>(is, "k"));
    m.mean.resize(size_t(m.dim));
    m.basis.resize(size_t(m.dim) * m.k);
    read_bytes(is, m.mean.data(), m.mean.size() * sizeof(float), "pca mean");
    read_bytes(is, m.basis.data(), m.basis.size() * sizeof(float), "pca basis");
    m.total_variance = read_pod<double>(is, "total variance");
    m.explained.resize(size_t(m.k));
    read_bytes(is, m.explained.data(), m.explained.size() * sizeof(float), "explained");
    return m;
}

void save_gallery(const GallerySet& g, const std::string& path) {
    auto os = open_out(path);
    write_magic(os, "GFGL");
    write_pod<uint32_t>(os, uint32_t(g.vectors.size()));
    write_pod<uint32_t>(os, uint32_t(g.dim));
    for (size_t i = 0; i < g.vectors.size(); ++i) {
        write_pod<uint32_t>(os, uint32_t(g.labels[i]));
        write_bytes(os, g.vectors[i].data(), g.vectors[i].size() * sizeof(float));
    }
}

GallerySet load_gallery(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "GFGL", path);
    const auto count = read_pod<uint32_t>(is, "count");
    const auto dim = read_pod<uint32_t>(is, "dim");
    GallerySet g;
    g.dim = int(dim);
    for (uint32_t i = 0; i < count; ++i) {
        g.labels.push_back(int(int32_t(read_pod<uint32_t>(is, "label"))));
        std::vector<float> v(dim);
        read_bytes(is, v.data(), size_t(dim) * sizeof(float), "gallery vector");
        g.vectors.push_back(std::move(v));
    }
    return g;
}

void save_signatures(const std::vector<GaitSignature>& sigs, const std::string& path) {
    if (sigs.empty()) throw DataError("refusing to write an empty signature table");
    GallerySet g;
    g.dim = int(sigs[0].vector.size());
    for (const auto& s : sigs) {
        g.labels.push_back(s.label);
        g.vectors.push_back(s.vector);
    }
    save_gallery(g, path);
    json meta = json::array();
    for (const auto& s : sigs) {
        json row;
        row["subject"] = s.subject;
        row["sequence"] = s.sequence;
        row["scenario"] = scenario_name(s.scenario);
        row["window_start"] = s.window_start;
        meta.push_back(std::move(row));
    }
    std::ofstream ms(path + ".manifest.json");
    if (!ms) throw DataError("cannot write signature manifest for " + path);
    ms << meta.dump() << "\n";
}

std::vector<GaitSignature> load_signatures(const std::string& path) {
    GallerySet g = load_gallery(path);
    std::vector<GaitSignature> sigs(g.vectors.size());
    for (size_t i = 0; i < g.vectors.size(); ++i) {
        sigs[i].vector = std::move(g.vectors[i]);
        sigs[i].label = g.labels[i];
    }
    std::ifstream ms(path + ".manifest.json");
    if (ms) {
        json meta;
        ms >> meta;
        if (meta.size() != sigs.size())
            throw DataError("signature manifest does not match table " + path);
        for (size_t i = 0; i < sigs.size(); ++i) {
            sigs[i].subject = meta[i].value("subject", "");
            sigs[i].sequence = meta[i].value("sequence", "");
            sigs[i].scenario = scenario_from_name(meta[i].value("scenario", "N"));
            sigs[i].window_start = meta[i].value("window_start", 0);
        }
    }
    return sigs;
}

}  // namespace gaitflow
