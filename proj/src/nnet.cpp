#include "gaitflow/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "gemm.hpp"

using nlohmann::json;

namespace gaitflow {

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1, u2;
    do {
        u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::lrn: return "lrn";
        case LayerKind::relu: return "relu";
        case LayerKind::fully_connected: return "fully_connected";
        case LayerKind::dropout: return "dropout";
        case LayerKind::softmax: return "softmax";
    }
    throw DataError("bad layer kind");
}

LayerKind layer_kind_from_name(const std::string& s) {
    for (uint8_t i = 0; i <= 6; ++i)
        if (s == layer_kind_name(LayerKind(i))) return LayerKind(i);
    throw DataError("unknown layer kind: " + s);
}

LayerSpec LayerSpec::conv(std::string name, int fh, int fw, int stride, int out_c) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.name = std::move(name);
    l.filter_h = fh;
    l.filter_w = fw;
    l.stride = stride;
    l.out_channels = out_c;
    return l;
}

LayerSpec LayerSpec::maxpool(std::string name, int size, int stride) {
    LayerSpec l;
    l.kind = LayerKind::maxpool;
    l.name = std::move(name);
    l.pool = size;
    l.pool_stride = stride;
    return l;
}

LayerSpec LayerSpec::lrn(std::string name, int n, double k, double alpha, double beta) {
    LayerSpec l;
    l.kind = LayerKind::lrn;
    l.name = std::move(name);
    l.lrn_n = n;
    l.lrn_k = k;
    l.lrn_alpha = alpha;
    l.lrn_beta = beta;
    return l;
}

LayerSpec LayerSpec::relu(std::string name) {
    LayerSpec l;
    l.kind = LayerKind::relu;
    l.name = std::move(name);
    return l;
}

LayerSpec LayerSpec::fully_connected(std::string name, int units) {
    LayerSpec l;
    l.kind = LayerKind::fully_connected;
    l.name = std::move(name);
    l.units = units;
    return l;
}

LayerSpec LayerSpec::dropout(std::string name, double p) {
    LayerSpec l;
    l.kind = LayerKind::dropout;
    l.name = std::move(name);
    l.rate = p;
    return l;
}

LayerSpec LayerSpec::softmax(std::string name) {
    LayerSpec l;
    l.kind = LayerKind::softmax;
    l.name = std::move(name);
    return l;
}

template <typename T>
int NetworkT<T>::num_classes() const {
    for (int i = int(layers.size()) - 1; i >= 0; --i)
        if (layers[size_t(i)].kind == LayerKind::fully_connected)
            return layers[size_t(i)].units;
    throw DataError("network has no fully connected layer");
}

template <typename T>
size_t NetworkT<T>::param_count() const {
    size_t n = 0;
    for (size_t i = 0; i < layers.size(); ++i) n += weights[i].size() + biases[i].size();
    return n;
}

template <typename T>
NetworkT<T> make_network(Shape input, std::vector<LayerSpec> layers) {
    if (input.count() <= 0) throw DataError("network input shape must be non-empty");
    NetworkT<T> net;
    net.input = input;
    net.layers = std::move(layers);
    Shape cur = input;
    for (const auto& l : net.layers) {
        Shape out = cur;
        switch (l.kind) {
            case LayerKind::conv: {
                if (l.stride < 1) throw DataError(l.name + ": stride must be >= 1");
                if (l.filter_h < 1 || l.filter_w < 1 || l.out_channels < 1)
                    throw DataError(l.name + ": bad conv geometry");
                if (l.filter_h > cur.h || l.filter_w > cur.w)
                    throw DataError(l.name + ": filter larger than input");
                out.h = (cur.h - l.filter_h) / l.stride + 1;
                out.w = (cur.w - l.filter_w) / l.stride + 1;
                out.c = l.out_channels;
                net.weights.emplace_back(size_t(l.out_channels) * l.filter_h * l.filter_w * cur.c,
                                         T(0));
                net.biases.emplace_back(size_t(l.out_channels), T(0));
                break;
            }
            case LayerKind::maxpool: {
                if (l.pool < 1 || l.pool_stride < 1) throw DataError(l.name + ": bad pool");
                if (l.pool > cur.h || l.pool > cur.w)
                    throw DataError(l.name + ": pool larger than input");
                out.h = (cur.h - l.pool) / l.pool_stride + 1;
                out.w = (cur.w - l.pool) / l.pool_stride + 1;
                net.weights.emplace_back();
                net.biases.emplace_back();
                break;
            }
            case LayerKind::fully_connected: {
                if (l.units < 1) throw DataError(l.name + ": units must be >= 1");
                out = Shape{1, 1, l.units};
                net.weights.emplace_back(size_t(l.units) * cur.count(), T(0));
                net.biases.emplace_back(size_t(l.units), T(0));
                break;
            }
            case LayerKind::dropout: {
                if (l.rate < 0.0 || l.rate >= 1.0) throw DataError(l.name + ": p must be in [0,1)");
                net.weights.emplace_back();
                net.biases.emplace_back();
                break;
            }
            case LayerKind::lrn: {
                if (l.lrn_n < 1) throw DataError(l.name + ": lrn n must be >= 1");
                net.weights.emplace_back();
                net.biases.emplace_back();
                break;
            }
            case LayerKind::relu:
            case LayerKind::softmax: {
                net.weights.emplace_back();
                net.biases.emplace_back();
                break;
            }
        }
        net.out_shape.push_back(out);
        cur = out;
    }
    net.weights_t.resize(net.layers.size());
    return net;
}

template <typename T>
void init_params(NetworkT<T>& net, Rng& rng, double std_dev, double bias) {
    for (size_t i = 0; i < net.layers.size(); ++i) {
        if (net.weights[i].empty()) continue;
        double sd = std_dev;
        if (sd <= 0.0) {
            const Shape in = i == 0 ? net.input : net.out_shape[i - 1];
            const auto& l = net.layers[i];
            const size_t fan_in = l.kind == LayerKind::conv
                                      ? size_t(l.filter_h) * l.filter_w * in.c
                                      : size_t(in.count());
            sd = std::sqrt(2.0 / double(fan_in));
        }
        for (auto& w : net.weights[i]) w = T(rng.normal() * sd);
        for (auto& b : net.biases[i]) b = T(bias);
    }
    invalidate_transpose_cache(net);
}

template <typename T>
void build_transpose_cache(NetworkT<T>& net) {
    for (size_t i = 0; i < net.layers.size(); ++i) {
        if (!net.layers[i].has_params()) continue;
        const Shape in = i == 0 ? net.input : net.out_shape[i - 1];
        const auto& l = net.layers[i];
        const int rows = l.kind == LayerKind::conv ? l.out_channels : l.units;
        const int cols = l.kind == LayerKind::conv ? l.filter_h * l.filter_w * in.c : in.count();
        auto& t = net.weights_t[i];
        t.assign(net.weights[i].size(), T(0));
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                t[size_t(c) * rows + r] = net.weights[i][size_t(r) * cols + c];
    }
}

template <typename T>
void invalidate_transpose_cache(NetworkT<T>& net) {
    for (auto& t : net.weights_t) t.clear();
}

NetworkT<double> to_double(const NetworkT<float>& net) {
    NetworkT<double> out = make_network<double>(net.input, net.layers);
    for (size_t i = 0; i < net.weights.size(); ++i) {
        out.weights[i].assign(net.weights[i].begin(), net.weights[i].end());
        out.biases[i].assign(net.biases[i].begin(), net.biases[i].end());
    }
    out.train_mode = net.train_mode;
    out.debug_nan = net.debug_nan;
    return out;
}

// ----------------------------------------------------------------- kernels

namespace {

template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
    detail::gemm_nt_ref(M, N, K, A, B, C, accumulate);
}

template <>
void gemm_nt<float>(int M, int N, int K, const float* A, const float* B, float* C,
                    bool accumulate) {
    detail::sgemm_nt(M, N, K, A, B, C, accumulate);
}

template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
    detail::gemm_tn_ref(M, N, K, A, B, C, accumulate);
}

template <>
void gemm_tn<float>(int M, int N, int K, const float* A, const float* B, float* C,
                    bool accumulate) {
    detail::sgemm_tn(M, N, K, A, B, C, accumulate);
}

constexpr int kRowTile = 256;

struct ConvGeom {
    int ih, iw, ic, oh, ow, oc, fh, fw, stride;
    int patch_len() const { return fh * fw * ic; }
    size_t rows_per_sample() const { return size_t(oh) * ow; }
};

ConvGeom conv_geom(const LayerSpec& l, Shape in, Shape out) {
    return {in.h, in.w, in.c, out.h, out.w, l.out_channels, l.filter_h, l.filter_w, l.stride};
}

// Patch rows for GEMM: row r <-> (sample, oy, ox); each row is the
// concatenation over ky of kw*ic contiguous input floats.
template <typename T>
void fill_patches(const TensorT<T>& in, const ConvGeom& g, size_t row0, int rows, T* buf) {
    const size_t rps = g.rows_per_sample();
    for (int r = 0; r < rows; ++r) {
        const size_t abs = row0 + size_t(r);
        const int s = int(abs / rps);
        const int rem = int(abs % rps);
        const int oy = rem / g.ow;
        const int ox = rem % g.ow;
        const T* sp = in.sample(s);
        T* dst = buf + size_t(r) * g.patch_len();
        for (int ky = 0; ky < g.fh; ++ky) {
            const T* src =
                sp + (size_t(oy * g.stride + ky) * g.iw + size_t(ox) * g.stride) * g.ic;
            std::memcpy(dst, src, size_t(g.fw) * g.ic * sizeof(T));
            dst += size_t(g.fw) * g.ic;
        }
    }
}

template <typename T>
void conv_forward(const TensorT<T>& in, const LayerSpec& l, const std::vector<T>& w,
                  const std::vector<T>& b, TensorT<T>& out) {
    const ConvGeom g = conv_geom(l, in.shape, out.shape);
    const size_t total_rows = size_t(in.n) * g.rows_per_sample();
    const int K = g.patch_len();
    thread_local std::vector<T> patches;
    patches.resize(size_t(kRowTile) * K);
    for (size_t row0 = 0; row0 < total_rows; row0 += kRowTile) {
        const int rows = int(std::min<size_t>(kRowTile, total_rows - row0));
        fill_patches(in, g, row0, rows, patches.data());
        gemm_nt<T>(rows, g.oc, K, patches.data(), w.data(), out.v.data() + row0 * g.oc, false);
    }
    for (size_t r = 0; r < total_rows; ++r) {
        T* o = out.v.data() + r * g.oc;
        for (int c = 0; c < g.oc; ++c) o[c] += b[size_t(c)];
    }
}

template <typename T>
void conv_backward(const TensorT<T>& in, const LayerSpec& l, const std::vector<T>& w,
                   const std::vector<T>& wt, const TensorT<T>& dout, std::vector<T>& dw,
                   std::vector<T>& db, TensorT<T>* din) {
    const ConvGeom g = conv_geom(l, in.shape, dout.shape);
    const size_t total_rows = size_t(in.n) * g.rows_per_sample();
    const int K = g.patch_len();

    thread_local std::vector<T> wt_local;
    const T* wtp = nullptr;
    if (din != nullptr) {
        if (!wt.empty()) {
            wtp = wt.data();
        } else {
            wt_local.assign(w.size(), T(0));
            for (int r = 0; r < g.oc; ++r)
                for (int c = 0; c < K; ++c) wt_local[size_t(c) * g.oc + r] = w[size_t(r) * K + c];
            wtp = wt_local.data();
        }
    }

    thread_local std::vector<T> patches, dpatches;
    patches.resize(size_t(kRowTile) * K);
    if (din != nullptr) dpatches.resize(size_t(kRowTile) * K);

    const size_t rps = g.rows_per_sample();
    for (size_t row0 = 0; row0 < total_rows; row0 += kRowTile) {
        const int rows = int(std::min<size_t>(kRowTile, total_rows - row0));
        fill_patches(in, g, row0, rows, patches.data());

        // dW += dOut_tile^T x patches_tile; packing handles the transpose.
        gemm_tn<T>(g.oc, K, rows, dout.v.data() + row0 * g.oc, patches.data(), dw.data(), true);

        for (int r = 0; r < rows; ++r) {
            const T* dor = dout.v.data() + (row0 + size_t(r)) * g.oc;
            for (int c = 0; c < g.oc; ++c) db[size_t(c)] += dor[c];
        }

        if (din == nullptr) continue;
        // dPatches = dOut_tile x W; scatter-add back to the input.
        gemm_nt<T>(rows, K, g.oc, dout.v.data() + row0 * g.oc, wtp, dpatches.data(), false);
        for (int r = 0; r < rows; ++r) {
            const size_t abs = row0 + size_t(r);
            const int s = int(abs / rps);
            const int rem = int(abs % rps);
            const int oy = rem / g.ow;
            const int ox = rem % g.ow;
            T* sp = din->sample(s);
            const T* dp = dpatches.data() + size_t(r) * K;
            for (int ky = 0; ky < g.fh; ++ky) {
                T* dst = sp + (size_t(oy * g.stride + ky) * g.iw + size_t(ox) * g.stride) * g.ic;
                for (int t = 0; t < g.fw * g.ic; ++t) dst[t] += dp[size_t(ky) * g.fw * g.ic + t];
            }
        }
    }
}

template <typename T>
void fc_forward(const TensorT<T>& in, const std::vector<T>& w, const std::vector<T>& b,
                TensorT<T>& out) {
    const int units = out.shape.c;
    const int dim = in.shape.count();
    gemm_nt<T>(in.n, units, dim, in.v.data(), w.data(), out.v.data(), false);
    for (int s = 0; s < in.n; ++s) {
        T* o = out.sample(s);
        for (int u = 0; u < units; ++u) o[u] += b[size_t(u)];
    }
}

template <typename T>
void fc_backward(const TensorT<T>& in, const std::vector<T>& w, const std::vector<T>& wt,
                 const TensorT<T>& dout, std::vector<T>& dw, std::vector<T>& db,
                 TensorT<T>* din) {
    const int units = dout.shape.c;
    const int dim = in.shape.count();
    gemm_tn<T>(units, dim, in.n, dout.v.data(), in.v.data(), dw.data(), true);
    for (int s = 0; s < in.n; ++s)
        for (int u = 0; u < units; ++u) db[size_t(u)] += dout.sample(s)[u];

    if (din == nullptr) return;
    thread_local std::vector<T> wt_local;
    const T* wtp;
    if (!wt.empty()) {
        wtp = wt.data();
    } else {
        wt_local.assign(w.size(), T(0));
        for (int r = 0; r < units; ++r)
            for (int c = 0; c < dim; ++c) wt_local[size_t(c) * units + r] = w[size_t(r) * dim + c];
        wtp = wt_local.data();
    }
    gemm_nt<T>(in.n, dim, units, dout.v.data(), wtp, din->v.data(), false);
}

}  // namespace

// ----------------------------------------------------------------- forward

template <typename T>
TraceT<T> forward(const NetworkT<T>& net, const TensorT<T>& input, const ForwardOpts& opts) {
    if (!(input.shape == net.input))
        throw DataError("forward: input shape does not match the network");
    if (input.n <= 0) throw DataError("forward: empty batch");

    bool needs_rng = false;
    for (const auto& l : net.layers)
        if (l.kind == LayerKind::dropout && l.rate > 0.0 && opts.train) needs_rng = true;
    if (needs_rng && !opts.has_seed && opts.frozen_masks == nullptr)
        throw DataError("forward: train-mode dropout needs a seed or frozen masks");

    TraceT<T> trace;
    trace.input = input;
    trace.act.reserve(net.layers.size());
    trace.pool_argmax.resize(net.layers.size());
    trace.drop_mask.resize(net.layers.size());
    trace.lrn_den.resize(net.layers.size());

    const TensorT<T>* cur = &trace.input;
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.layers[i];
        TensorT<T> out(input.n, net.out_shape[i]);
        switch (l.kind) {
            case LayerKind::conv:
                conv_forward(*cur, l, net.weights[i], net.biases[i], out);
                break;
            case LayerKind::fully_connected:
                fc_forward(*cur, net.weights[i], net.biases[i], out);
                break;
            case LayerKind::relu:
                for (size_t k = 0; k < cur->size(); ++k)
                    out.v[k] = cur->v[k] > T(0) ? cur->v[k] : T(0);
                break;
            case LayerKind::maxpool: {
                const Shape in_s = cur->shape, out_s = out.shape;
                auto& arg = trace.pool_argmax[i];
                arg.resize(out.size());
                for (int s = 0; s < input.n; ++s) {
                    const T* sp = cur->sample(s);
                    T* op = out.sample(s);
                    int32_t* ap = arg.data() + size_t(s) * out_s.count();
                    for (int oy = 0; oy < out_s.h; ++oy)
                        for (int ox = 0; ox < out_s.w; ++ox)
                            for (int c = 0; c < out_s.c; ++c) {
                                T best{};
                                int32_t best_idx = -1;
                                for (int ky = 0; ky < l.pool; ++ky)
                                    for (int kx = 0; kx < l.pool; ++kx) {
                                        const int y = oy * l.pool_stride + ky;
                                        const int x = ox * l.pool_stride + kx;
                                        const int32_t idx =
                                            int32_t((size_t(y) * in_s.w + x) * in_s.c + c);
                                        const T v = sp[idx];
                                        if (best_idx < 0 || v > best) {
                                            best = v;
                                            best_idx = idx;
                                        }
                                    }
                                const size_t o = (size_t(oy) * out_s.w + ox) * out_s.c + c;
                                op[o] = best;
                                ap[o] = best_idx;
                            }
                }
                break;
            }
            case LayerKind::lrn: {
                const int C = cur->shape.c;
                const int half = l.lrn_n / 2;
                auto& den = trace.lrn_den[i];
                den.resize(cur->size());
                const size_t pixels = cur->size() / size_t(C);
                for (size_t p = 0; p < pixels; ++p) {
                    const T* ip = cur->v.data() + p * size_t(C);
                    T* op = out.v.data() + p * size_t(C);
                    T* dp = den.data() + p * size_t(C);
                    for (int c = 0; c < C; ++c) {
                        T acc = T(0);
                        const int lo = std::max(0, c - half);
                        const int hi = std::min(C - 1, c + half);
                        for (int j = lo; j <= hi; ++j) acc += ip[j] * ip[j];
                        const T d = T(l.lrn_k) + T(l.lrn_alpha / l.lrn_n) * acc;
                        dp[c] = d;
                        op[c] = ip[c] * std::pow(d, T(-l.lrn_beta));
                    }
                }
                break;
            }
            case LayerKind::dropout: {
                const bool active = opts.train && l.rate > 0.0;
                if (!active) {
                    out.v = cur->v;
                    break;
                }
                auto& mask = trace.drop_mask[i];
                if (opts.frozen_masks != nullptr) {
                    const auto& frozen = (*opts.frozen_masks)[i];
                    if (frozen.size() != cur->size())
                        throw DataError("forward: frozen dropout mask size mismatch");
                    mask = frozen;
                } else {
                    Rng rng(derive_seed(opts.dropout_seed, 0x64726f70ULL, i));
                    mask.resize(cur->size());
                    for (auto& m : mask) m = rng.uniform() >= l.rate ? 1 : 0;
                }
                const T scale = T(1.0 / (1.0 - l.rate));
                for (size_t k = 0; k < cur->size(); ++k)
                    out.v[k] = mask[k] ? cur->v[k] * scale : T(0);
                break;
            }
            case LayerKind::softmax: {
                const int C = cur->shape.count();
                for (int s = 0; s < input.n; ++s) {
                    const T* ip = cur->sample(s);
                    T* op = out.sample(s);
                    T m = ip[0];
                    for (int c = 1; c < C; ++c) m = std::max(m, ip[c]);
                    T sum = T(0);
                    for (int c = 0; c < C; ++c) {
                        op[c] = std::exp(ip[c] - m);
                        sum += op[c];
                    }
                    for (int c = 0; c < C; ++c) op[c] /= sum;
                }
                break;
            }
        }
        if (net.debug_nan)
            for (const T v : out.v)
                if (!std::isfinite(double(v)))
                    throw NumericError("non-finite activation after layer " + l.name);
        trace.act.push_back(std::move(out));
        cur = &trace.act.back();
    }
    return trace;
}

// ---------------------------------------------------------------- backward

template <typename T>
void GradientsT<T>::accumulate(const GradientsT<T>& other) {
    for (size_t i = 0; i < weights.size(); ++i) {
        for (size_t k = 0; k < weights[i].size(); ++k) weights[i][k] += other.weights[i][k];
        for (size_t k = 0; k < biases[i].size(); ++k) biases[i][k] += other.biases[i][k];
    }
}

template <typename T>
void GradientsT<T>::scale(T s) {
    for (auto& w : weights)
        for (auto& v : w) v *= s;
    for (auto& b : biases)
        for (auto& v : b) v *= s;
    for (auto& v : input.v) v *= s;
}

template <typename T>
GradientsT<T> backward(const NetworkT<T>& net, const TraceT<T>& trace, const TensorT<T>& grad,
                       int from_layer, bool want_input_grad) {
    const int L = int(net.layers.size());
    if (trace.act.size() != size_t(L)) throw DataError("backward: stale or missing trace");
    if (from_layer < 0) from_layer = L - 1;
    if (from_layer >= L) throw DataError("backward: from_layer out of range");
    if (!(grad.shape == net.out_shape[size_t(from_layer)]) || grad.n != trace.input.n)
        throw DataError("backward: gradient shape mismatch");

    GradientsT<T> g;
    g.weights.resize(size_t(L));
    g.biases.resize(size_t(L));
    for (int i = 0; i < L; ++i) {
        g.weights[size_t(i)].assign(net.weights[size_t(i)].size(), T(0));
        g.biases[size_t(i)].assign(net.biases[size_t(i)].size(), T(0));
    }

    TensorT<T> d = grad;
    for (int i = from_layer; i >= 0; --i) {
        const LayerSpec& l = net.layers[size_t(i)];
        const TensorT<T>& in = i == 0 ? trace.input : trace.act[size_t(i) - 1];
        const bool need_din = i > 0 || want_input_grad;
        TensorT<T> din;
        if (need_din || !l.has_params()) din = TensorT<T>(in.n, in.shape);
        switch (l.kind) {
            case LayerKind::conv:
                conv_backward(in, l, net.weights[size_t(i)], net.weights_t[size_t(i)], d,
                              g.weights[size_t(i)], g.biases[size_t(i)],
                              need_din ? &din : nullptr);
                break;
            case LayerKind::fully_connected:
                fc_backward(in, net.weights[size_t(i)], net.weights_t[size_t(i)], d,
                            g.weights[size_t(i)], g.biases[size_t(i)],
                            need_din ? &din : nullptr);
                break;
            case LayerKind::relu:
                for (size_t k = 0; k < in.size(); ++k)
                    din.v[k] = in.v[k] > T(0) ? d.v[k] : T(0);
                break;
            case LayerKind::maxpool: {
                const auto& arg = trace.pool_argmax[size_t(i)];
                if (arg.size() != d.size()) throw DataError("backward: missing pool argmax");
                const int per_out = d.shape.count();
                const int per_in = in.shape.count();
                for (int s = 0; s < in.n; ++s) {
                    const T* dp = d.sample(s);
                    T* ip = din.sample(s);
                    const int32_t* ap = arg.data() + size_t(s) * per_out;
                    (void)per_in;
                    for (int k = 0; k < per_out; ++k) ip[ap[k]] += dp[k];
                }
                break;
            }
            case LayerKind::lrn: {
                const auto& den = trace.lrn_den[size_t(i)];
                if (den.size() != in.size()) throw DataError("backward: missing lrn state");
                const int C = in.shape.c;
                const int half = l.lrn_n / 2;
                const T coef = T(2.0 * l.lrn_alpha * l.lrn_beta / l.lrn_n);
                const size_t pixels = in.size() / size_t(C);
                for (size_t p = 0; p < pixels; ++p) {
                    const T* ip = in.v.data() + p * size_t(C);
                    const T* dp = d.v.data() + p * size_t(C);
                    const T* dn = den.data() + p * size_t(C);
                    T* op = din.v.data() + p * size_t(C);
                    for (int c = 0; c < C; ++c) {
                        const int lo = std::max(0, c - half);
                        const int hi = std::min(C - 1, c + half);
                        T acc = dp[c] * std::pow(dn[c], T(-l.lrn_beta));
                        T sum = T(0);
                        for (int j = lo; j <= hi; ++j)
                            sum += dp[j] * ip[j] * std::pow(dn[j], T(-l.lrn_beta - 1));
                        op[c] = acc - coef * ip[c] * sum;
                    }
                }
                break;
            }
            case LayerKind::dropout: {
                const auto& mask = trace.drop_mask[size_t(i)];
                if (mask.empty()) {
                    din.v = d.v;  // was identity in eval mode
                } else {
                    const T scale = T(1.0 / (1.0 - l.rate));
                    for (size_t k = 0; k < d.size(); ++k)
                        din.v[k] = mask[k] ? d.v[k] * scale : T(0);
                }
                break;
            }
            case LayerKind::softmax: {
                const TensorT<T>& out = trace.act[size_t(i)];
                const int C = out.shape.count();
                for (int s = 0; s < in.n; ++s) {
                    const T* p = out.sample(s);
                    const T* dp = d.sample(s);
                    T* op = din.sample(s);
                    T dot = T(0);
                    for (int c = 0; c < C; ++c) dot += dp[c] * p[c];
                    for (int c = 0; c < C; ++c) op[c] = p[c] * (dp[c] - dot);
                }
                break;
            }
        }
        d = std::move(din);
    }
    g.input = std::move(d);
    return g;
}

template <typename T>
LossResult<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
    if (labels.size() != size_t(logits.n))
        throw DataError("softmax_cross_entropy: label count mismatch");
    const int C = logits.shape.count();
    LossResult<T> r;
    r.loss.resize(labels.size());
    r.grad = TensorT<T>(logits.n, logits.shape);
    for (int s = 0; s < logits.n; ++s) {
        const int label = labels[size_t(s)];
        if (label < 0 || label >= C)
            throw DataError("softmax_cross_entropy: label out of range");
        const T* x = logits.sample(s);
        T* gp = r.grad.sample(s);
        T m = x[0];
        for (int c = 1; c < C; ++c) m = std::max(m, x[c]);
        T sum = T(0);
        for (int c = 0; c < C; ++c) sum += std::exp(x[c] - m);
        const T lse = m + std::log(sum);
        r.loss[size_t(s)] = lse - x[label];
        for (int c = 0; c < C; ++c) gp[c] = std::exp(x[c] - lse);
        gp[label] -= T(1);
    }
    return r;
}

// -------------------------------------------------------------- optimizer

OptimizerState make_optimizer(const Network& net, float lr, float momentum, float weight_decay) {
    OptimizerState opt;
    opt.lr = lr;
    opt.momentum = momentum;
    opt.weight_decay = weight_decay;
    opt.velocity_w.resize(net.weights.size());
    opt.velocity_b.resize(net.biases.size());
    for (size_t i = 0; i < net.weights.size(); ++i) {
        opt.velocity_w[i].assign(net.weights[i].size(), 0.f);
        opt.velocity_b[i].assign(net.biases[i].size(), 0.f);
    }
    return opt;
}

void sgd_step(Network& net, const Gradients& grads, OptimizerState& opt) {
    if (grads.weights.size() != net.weights.size())
        throw DataError("sgd_step: gradient layout mismatch");
    for (size_t i = 0; i < net.weights.size(); ++i) {
        if (grads.weights[i].size() != net.weights[i].size() ||
            grads.biases[i].size() != net.biases[i].size())
            throw DataError("sgd_step: gradient shape mismatch");
        auto& w = net.weights[i];
        auto& vw = opt.velocity_w[i];
        const auto& gw = grads.weights[i];
        for (size_t k = 0; k < w.size(); ++k) {
            vw[k] = opt.momentum * vw[k] - opt.lr * (gw[k] + opt.weight_decay * w[k]);
            w[k] += vw[k];
        }
        auto& b = net.biases[i];
        auto& vb = opt.velocity_b[i];
        const auto& gb = grads.biases[i];
        for (size_t k = 0; k < b.size(); ++k) {
            vb[k] = opt.momentum * vb[k] - opt.lr * (gb[k] + opt.weight_decay * b[k]);
            b[k] += vb[k];
        }
    }
    invalidate_transpose_cache(net);
}

// ------------------------------------------------------------- grad check

GradCheckResult grad_check(const NetworkT<double>& net, const TensorT<double>& input,
                           const std::vector<int>& labels, double eps, size_t max_params,
                           uint64_t seed, bool freeze_dropout) {
    bool has_dropout = false;
    for (const auto& l : net.layers)
        if (l.kind == LayerKind::dropout && l.rate > 0.0) has_dropout = true;
    if (has_dropout && !freeze_dropout)
        throw DataError("grad_check: dropout must be frozen for finite differences");

    // Logits = input of the trailing softmax when present, else the last layer.
    int loss_layer = int(net.layers.size()) - 1;
    if (net.layers.back().kind == LayerKind::softmax) --loss_layer;
    if (loss_layer < 0) throw DataError("grad_check: empty network");

    ForwardOpts opts;
    opts.train = net.train_mode;
    opts.has_seed = true;
    opts.dropout_seed = seed;
    TraceT<double> ref = forward(net, input, opts);

    ForwardOpts frozen = opts;
    frozen.frozen_masks = &ref.drop_mask;

    auto loss_of = [&](const NetworkT<double>& n) {
        TraceT<double> tr = forward(n, input, frozen);
        auto lr = softmax_cross_entropy(tr.act[size_t(loss_layer)], labels);
        double total = 0.0;
        for (double v : lr.loss) total += v;
        return total / double(lr.loss.size());
    };

    auto lossres = softmax_cross_entropy(ref.act[size_t(loss_layer)], labels);
    TensorT<double> g0 = lossres.grad;
    for (auto& v : g0.v) v /= double(input.n);
    GradientsT<double> analytic = backward(net, ref, g0, loss_layer);

    // Gather (layer, index, is_bias) coordinates and subsample deterministically.
    struct Coord {
        size_t layer, idx;
        bool bias;
    };
    std::vector<Coord> coords;
    for (size_t i = 0; i < net.layers.size(); ++i) {
        for (size_t k = 0; k < net.weights[i].size(); ++k) coords.push_back({i, k, false});
        for (size_t k = 0; k < net.biases[i].size(); ++k) coords.push_back({i, k, true});
    }
    if (coords.empty()) throw DataError("grad_check: network has no parameters");
    if (coords.size() > max_params) {
        Rng rng(derive_seed(seed, 0x70696b63ULL));
        std::shuffle(coords.begin(), coords.end(), rng.engine());
        coords.resize(max_params);
    }

    NetworkT<double> probe = net;
    invalidate_transpose_cache(probe);
    GradCheckResult res;
    res.params_checked = coords.size();
    for (const Coord& c : coords) {
        auto& slot = c.bias ? probe.biases[c.layer][c.idx] : probe.weights[c.layer][c.idx];
        const double saved = slot;
        slot = saved + eps;
        const double lp = loss_of(probe);
        slot = saved - eps;
        const double lm = loss_of(probe);
        slot = saved;
        const double fd = (lp - lm) / (2.0 * eps);
        const double an =
            c.bias ? analytic.biases[c.layer][c.idx] : analytic.weights[c.layer][c.idx];
        const double denom = std::max({1e-4, std::fabs(an), std::fabs(fd)});
        res.max_rel_error = std::max(res.max_rel_error, std::fabs(an - fd) / denom);
    }
    return res;
}

// ------------------------------------------------------------- checkpoint

namespace {

json layer_to_json(const LayerSpec& l) {
    json j;
    j["kind"] = layer_kind_name(l.kind);
    j["name"] = l.name;
    switch (l.kind) {
        case LayerKind::conv:
            j["filter"] = {l.filter_h, l.filter_w};
            j["stride"] = l.stride;
            j["out_channels"] = l.out_channels;
            break;
        case LayerKind::maxpool:
            j["pool"] = l.pool;
            j["stride"] = l.pool_stride;
            break;
        case LayerKind::fully_connected:
            j["units"] = l.units;
            break;
        case LayerKind::dropout:
            j["rate"] = l.rate;
            break;
        case LayerKind::lrn:
            j["n"] = l.lrn_n;
            j["k"] = l.lrn_k;
            j["alpha"] = l.lrn_alpha;
            j["beta"] = l.lrn_beta;
            break;
        default:
            break;
    }
    return j;
}

LayerSpec layer_from_json(const json& j) {
    const LayerKind kind = layer_kind_from_name(j.at("kind").get<std::string>());
    const std::string name = j.value("name", "");
    switch (kind) {
        case LayerKind::conv:
            return LayerSpec::conv(name, j.at("filter")[0], j.at("filter")[1], j.at("stride"),
                                   j.at("out_channels"));
        case LayerKind::maxpool:
            return LayerSpec::maxpool(name, j.at("pool"), j.at("stride"));
        case LayerKind::fully_connected:
            return LayerSpec::fully_connected(name, j.at("units"));
        case LayerKind::dropout:
            return LayerSpec::dropout(name, j.at("rate"));
        case LayerKind::lrn:
            return LayerSpec::lrn(name, j.at("n"), j.at("k"), j.at("alpha"), j.at("beta"));
        case LayerKind::relu:
            return LayerSpec::relu(name);
        case LayerKind::softmax:
            return LayerSpec::softmax(name);
    }
    throw DataError("bad layer json");
}

void write_blob(std::ostream& os, const std::vector<float>& v) {
    write_pod<uint64_t>(os, v.size());
    if (!v.empty()) write_bytes(os, v.data(), v.size() * sizeof(float));
}

std::vector<float> read_blob(std::istream& is, const char* what) {
    const auto n = read_pod<uint64_t>(is, what);
    std::vector<float> v(n);
    if (n) read_bytes(is, v.data(), n * sizeof(float), what);
    return v;
}

}  // namespace

void save_checkpoint(const Network& net, const std::string& path, const OptimizerState* opt) {
    auto os = open_out(path);
    write_magic(os, "GFNN");
    write_pod<uint32_t>(os, 1u);
    json meta;
    meta["input"] = {net.input.h, net.input.w, net.input.c};
    meta["layers"] = json::array();
    for (const auto& l : net.layers) meta["layers"].push_back(layer_to_json(l));
    const std::string table = meta.dump();
    write_pod<uint32_t>(os, uint32_t(table.size()));
    write_bytes(os, table.data(), table.size());
    for (size_t i = 0; i < net.layers.size(); ++i) {
        if (!net.layers[i].has_params()) continue;
        write_blob(os, net.weights[i]);
        write_blob(os, net.biases[i]);
    }
    write_pod<uint8_t>(os, opt ? 1 : 0);
    if (opt) {
        write_pod<double>(os, double(opt->lr));
        write_pod<double>(os, double(opt->momentum));
        write_pod<double>(os, double(opt->weight_decay));
        for (size_t i = 0; i < net.layers.size(); ++i) {
            if (!net.layers[i].has_params()) continue;
            write_blob(os, opt->velocity_w[i]);
            write_blob(os, opt->velocity_b[i]);
        }
    }
}

Network load_checkpoint(const std::string& path, OptimizerState* opt) {
    auto is = open_in(path);
    expect_magic(is, "GFNN", path);
    const auto version = read_pod<uint32_t>(is, "version");
    if (version != 1) throw DataError("unsupported checkpoint version in " + path);
    const auto len = read_pod<uint32_t>(is, "table length");
    std::string table(len, '\0');
    read_bytes(is, table.data(), len, "layer table");
    json meta = json::parse(table);
    Shape in{meta.at("input")[0], meta.at("input")[1], meta.at("input")[2]};
    std::vector<LayerSpec> layers;
    for (const auto& jl : meta.at("layers")) layers.push_back(layer_from_json(jl));
    Network net = make_network<float>(in, std::move(layers));
    for (size_t i = 0; i < net.layers.size(); ++i) {
        if (!net.layers[i].has_params()) continue;
        auto w = read_blob(is, "weights");
        auto b = read_blob(is, "biases");
        if (w.size() != net.weights[i].size() || b.size() != net.biases[i].size())
            throw DataError("checkpoint parameter size mismatch in " + path);
        net.weights[i] = std::move(w);
        net.biases[i] = std::move(b);
    }
    const auto has_opt = read_pod<uint8_t>(is, "optimizer flag");
    if (has_opt && opt) {
        *opt = make_optimizer(net, 0.f, 0.f, 0.f);
        opt->lr = float(read_pod<double>(is, "lr"));
        opt->momentum = float(read_pod<double>(is, "momentum"));
        opt->weight_decay = float(read_pod<double>(is, "weight decay"));
        for (size_t i = 0; i < net.layers.size(); ++i) {
            if (!net.layers[i].has_params()) continue;
            opt->velocity_w[i] = read_blob(is, "velocity w");
            opt->velocity_b[i] = read_blob(is, "velocity b");
        }
    }
    return net;
}

// ------------------------------------------------------ instantiations

template struct NetworkT<float>;
template struct NetworkT<double>;
template struct GradientsT<float>;
template struct GradientsT<double>;

template NetworkT<float> make_network<float>(Shape, std::vector<LayerSpec>);
template NetworkT<double> make_network<double>(Shape, std::vector<LayerSpec>);
template void init_params<float>(NetworkT<float>&, Rng&, double, double);
template void init_params<double>(NetworkT<double>&, Rng&, double, double);
template void build_transpose_cache<float>(NetworkT<float>&);
template void build_transpose_cache<double>(NetworkT<double>&);
template void invalidate_transpose_cache<float>(NetworkT<float>&);
template void invalidate_transpose_cache<double>(NetworkT<double>&);
template TraceT<float> forward<float>(const NetworkT<float>&, const TensorT<float>&,
                                      const ForwardOpts&);
template TraceT<double> forward<double>(const NetworkT<double>&, const TensorT<double>&,
                                        const ForwardOpts&);
template GradientsT<float> backward<float>(const NetworkT<float>&, const TraceT<float>&,
                                           const TensorT<float>&, int, bool);
template GradientsT<double> backward<double>(const NetworkT<double>&, const TraceT<double>&,
                                             const TensorT<double>&, int, bool);
template LossResult<float> softmax_cross_entropy<float>(const TensorT<float>&,
                                                        const std::vector<int>&);
template LossResult<double> softmax_cross_entropy<double>(const TensorT<double>&,
                                                          const std::vector<int>&);

}  // namespace gaitflow
