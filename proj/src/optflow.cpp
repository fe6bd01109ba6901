#include "gaitflow/optflow.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace gaitflow {

void FlowParams::validate() const {
    if (pyramid_scale <= 0.0 || pyramid_scale >= 1.0)
        throw DataError("pyramid_scale must be in (0,1)");
    if (pyramid_levels < 1) throw DataError("pyramid_levels must be >= 1");
    if (window < 3 || window % 2 == 0) throw DataError("window must be odd and >= 3");
    if (poly_n < 3 || poly_n % 2 == 0) throw DataError("poly_n must be odd and >= 3");
    if (iterations < 1) throw DataError("iterations must be >= 1");
    if (poly_sigma <= 0.0) throw DataError("poly_sigma must be positive");
}

namespace {

// Quadratic fit per pixel: f(x0+u) ~ c + b.u + u'Au with b=(b1,b2),
// A=[[a11,a12],[a12,a22]].
struct PolyExp {
    int w = 0, h = 0;
    std::vector<float> b1, b2, a11, a22, a12;

    PolyExp(int w_, int h_)
        : w(w_), h(h_), b1(size_t(w_) * h_), b2(size_t(w_) * h_), a11(size_t(w_) * h_),
          a22(size_t(w_) * h_), a12(size_t(w_) * h_) {}
};

// Gauss-Jordan inverse with partial pivoting, for the 6x6 basis Gram matrix.
std::array<std::array<double, 6>, 6> invert6(std::array<std::array<double, 6>, 6> m) {
    std::array<std::array<double, 6>, 6> inv{};
    for (int i = 0; i < 6; ++i) inv[i][i] = 1.0;
    for (int col = 0; col < 6; ++col) {
        int piv = col;
        for (int r = col + 1; r < 6; ++r)
            if (std::fabs(m[r][col]) > std::fabs(m[piv][col])) piv = r;
        if (std::fabs(m[piv][col]) < 1e-12) throw NumericError("singular expansion Gram matrix");
        std::swap(m[col], m[piv]);
        std::swap(inv[col], inv[piv]);
        const double d = m[col][col];
        for (int c = 0; c < 6; ++c) {
            m[col][c] /= d;
            inv[col][c] /= d;
        }
        for (int r = 0; r < 6; ++r) {
            if (r == col) continue;
            const double f = m[r][col];
            if (f == 0.0) continue;
            for (int c = 0; c < 6; ++c) {
                m[r][c] -= f * m[col][c];
                inv[r][c] -= f * inv[col][c];
            }
        }
    }
    return inv;
}

std::vector<double> gaussian_kernel(int radius, double sigma) {
    std::vector<double> g(size_t(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        g[size_t(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += g[size_t(i + radius)];
    }
    for (auto& v : g) v /= sum;
    return g;
}

// Separable Gaussian with replicate borders, on a single plane.
void gaussian_blur_plane(std::vector<float>& p, int w, int h, const std::vector<double>& g) {
    const int r = int(g.size() / 2);
    std::vector<float> tmp(p.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) {
                const int xi = std::clamp(x + i, 0, w - 1);
                s += g[size_t(i + r)] * p[size_t(y) * w + xi];
            }
            tmp[size_t(y) * w + x] = float(s);
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) {
                const int yi = std::clamp(y + i, 0, h - 1);
                s += g[size_t(i + r)] * tmp[size_t(yi) * w + x];
            }
            p[size_t(y) * w + x] = float(s);
        }
}

Image blur_image(const Image& img, double sigma) {
    if (sigma <= 0.01) return img;
    Image out = img;
    const int r = std::max(1, int(sigma * 3.0 + 0.5));
    gaussian_blur_plane(out.px, out.width, out.height, gaussian_kernel(r, sigma));
    return out;
}

// Weighted-LS quadratic expansion with Gaussian applicability.
PolyExp poly_expansion(const Image& img, int poly_n, double sigma) {
    const int w = img.width, h = img.height;
    const int n = (poly_n - 1) / 2;
    std::vector<double> g = gaussian_kernel(n, sigma);

    // Gram matrix of the basis [1, x, y, x^2, y^2, xy] under g(x)g(y).
    std::array<std::array<double, 6>, 6> gram{};
    for (int j = -n; j <= n; ++j)
        for (int i = -n; i <= n; ++i) {
            const double wgt = g[size_t(i + n)] * g[size_t(j + n)];
            const double basis[6] = {1.0, double(i), double(j), double(i) * i, double(j) * j,
                                     double(i) * j};
            for (int p = 0; p < 6; ++p)
                for (int q = 0; q < 6; ++q) gram[p][q] += wgt * basis[p] * basis[q];
        }
    const auto ginv = invert6(gram);

    // Row pass: correlate with g, g*x, g*x^2 (replicate border).
    std::vector<float> r0(size_t(w) * h), r1(size_t(w) * h), r2(size_t(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s0 = 0.0, s1 = 0.0, s2 = 0.0;
            for (int i = -n; i <= n; ++i) {
                const int xi = std::clamp(x + i, 0, w - 1);
                const double gv = g[size_t(i + n)] * img.at(xi, y);
                s0 += gv;
                s1 += gv * i;
                s2 += gv * i * i;
            }
            const size_t k = size_t(y) * w + x;
            r0[k] = float(s0);
            r1[k] = float(s1);
            r2[k] = float(s2);
        }

    PolyExp out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double m00 = 0, m10 = 0, m01 = 0, m20 = 0, m02 = 0, m11 = 0;
            for (int j = -n; j <= n; ++j) {
                const int yj = std::clamp(y + j, 0, h - 1);
                const size_t k = size_t(yj) * w + x;
                const double gv = g[size_t(j + n)];
                m00 += gv * r0[k];
                m01 += gv * j * r0[k];
                m02 += gv * j * j * r0[k];
                m10 += gv * r1[k];
                m11 += gv * j * r1[k];
                m20 += gv * r2[k];
            }
            const double m[6] = {m00, m10, m01, m20, m02, m11};
            double coef[6];
            for (int p = 0; p < 6; ++p) {
                double s = 0.0;
                for (int q = 0; q < 6; ++q) s += ginv[p][q] * m[q];
                coef[p] = s;
            }
            const size_t k = size_t(y) * w + x;
            out.b1[k] = float(coef[1]);
            out.b2[k] = float(coef[2]);
            out.a11[k] = float(coef[3]);
            out.a22[k] = float(coef[4]);
            out.a12[k] = float(coef[5] * 0.5);
        }
    return out;
}

struct Sample5 {
    float b1, b2, a11, a22, a12;
};

Sample5 sample_bilinear(const PolyExp& p, float fx, float fy) {
    fx = std::clamp(fx, 0.f, float(p.w - 1));
    fy = std::clamp(fy, 0.f, float(p.h - 1));
    const int x0 = std::min(int(fx), p.w - 2 >= 0 ? p.w - 2 : 0);
    const int y0 = std::min(int(fy), p.h - 2 >= 0 ? p.h - 2 : 0);
    const int x1 = std::min(x0 + 1, p.w - 1);
    const int y1 = std::min(y0 + 1, p.h - 1);
    const float ax = fx - x0, ay = fy - y0;
    const float w00 = (1 - ax) * (1 - ay), w10 = ax * (1 - ay);
    const float w01 = (1 - ax) * ay, w11 = ax * ay;
    auto lerp = [&](const std::vector<float>& pl) {
        return w00 * pl[size_t(y0) * p.w + x0] + w10 * pl[size_t(y0) * p.w + x1] +
               w01 * pl[size_t(y1) * p.w + x0] + w11 * pl[size_t(y1) * p.w + x1];
    };
    return {lerp(p.b1), lerp(p.b2), lerp(p.a11), lerp(p.a22), lerp(p.a12)};
}

// One displacement refinement: build normal-equation planes from the two
// expansions under the current flow, Gaussian-average them over the window,
// then solve the 2x2 system per pixel.
void update_flow(const PolyExp& p1, const PolyExp& p2, OpticalFlowMap& flow, int window) {
    const int w = p1.w, h = p1.h;
    std::vector<float> m11(size_t(w) * h), m12(size_t(w) * h), m22(size_t(w) * h),
        h1(size_t(w) * h), h2(size_t(w) * h);

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t k = size_t(y) * w + x;
            const float dx = flow.u[k], dy = flow.v[k];
            const Sample5 s2 = sample_bilinear(p2, float(x) + dx, float(y) + dy);
            const float a11 = 0.5f * (p1.a11[k] + s2.a11);
            const float a12 = 0.5f * (p1.a12[k] + s2.a12);
            const float a22 = 0.5f * (p1.a22[k] + s2.a22);
            const float db1 = -0.5f * (s2.b1 - p1.b1[k]) + a11 * dx + a12 * dy;
            const float db2 = -0.5f * (s2.b2 - p1.b2[k]) + a12 * dx + a22 * dy;
            m11[k] = a11 * a11 + a12 * a12;
            m12[k] = a12 * (a11 + a22);
            m22[k] = a12 * a12 + a22 * a22;
            h1[k] = a11 * db1 + a12 * db2;
            h2[k] = a12 * db1 + a22 * db2;
        }

    const int r = (window - 1) / 2;
    const double sigma = 0.3 * (r - 1) + 0.8;
    const auto g = gaussian_kernel(r, sigma);
    gaussian_blur_plane(m11, w, h, g);
    gaussian_blur_plane(m12, w, h, g);
    gaussian_blur_plane(m22, w, h, g);
    gaussian_blur_plane(h1, w, h, g);
    gaussian_blur_plane(h2, w, h, g);

    for (size_t k = 0; k < flow.size(); ++k) {
        // Regularized inverse keeps flat regions near zero displacement.
        const double det = double(m11[k]) * m22[k] - double(m12[k]) * m12[k] + 1e-3;
        flow.u[k] = float((double(m22[k]) * h1[k] - double(m12[k]) * h2[k]) / det);
        flow.v[k] = float((double(m11[k]) * h2[k] - double(m12[k]) * h1[k]) / det);
    }
}

OpticalFlowMap upsample_flow(const OpticalFlowMap& f, int nw, int nh) {
    OpticalFlowMap out(nw, nh);
    const float sx = float(nw) / f.width, sy = float(nh) / f.height;
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x) {
            const float fx = std::clamp((x + 0.5f) / sx - 0.5f, 0.f, float(f.width - 1));
            const float fy = std::clamp((y + 0.5f) / sy - 0.5f, 0.f, float(f.height - 1));
            const int x0 = std::min(int(fx), std::max(f.width - 2, 0));
            const int y0 = std::min(int(fy), std::max(f.height - 2, 0));
            const int x1 = std::min(x0 + 1, f.width - 1);
            const int y1 = std::min(y0 + 1, f.height - 1);
            const float ax = fx - x0, ay = fy - y0;
            auto lerp = [&](const std::vector<float>& p) {
                const float top = p[size_t(y0) * f.width + x0] +
                                  ax * (p[size_t(y0) * f.width + x1] - p[size_t(y0) * f.width + x0]);
                const float bot = p[size_t(y1) * f.width + x0] +
                                  ax * (p[size_t(y1) * f.width + x1] - p[size_t(y1) * f.width + x0]);
                return top + ay * (bot - top);
            };
            out.u[size_t(y) * nw + x] = lerp(f.u) * sx;
            out.v[size_t(y) * nw + x] = lerp(f.v) * sy;
        }
    return out;
}

}  // namespace

OpticalFlowMap dense_flow(const Image& prev, const Image& next, const FlowParams& params) {
    params.validate();
    if (prev.width != next.width || prev.height != next.height)
        throw DataError("dense_flow: frame dimension mismatch");
    if (prev.width < params.poly_n || prev.height < params.poly_n)
        throw DataError("dense_flow: frame smaller than poly_n");

    // Work on a 0..255 intensity scale; the LS regularizer is tuned for it.
    Image a = prev, b = next;
    for (auto& v : a.px) v *= 255.f;
    for (auto& v : b.px) v *= 255.f;

    // Drop pyramid levels that would shrink below the expansion support.
    std::vector<std::pair<int, int>> dims;
    for (int k = 0; k < params.pyramid_levels; ++k) {
        const double s = std::pow(params.pyramid_scale, k);
        const int w = int(std::lround(prev.width * s));
        const int h = int(std::lround(prev.height * s));
        if (w < params.poly_n + 2 || h < params.poly_n + 2) break;
        dims.emplace_back(w, h);
    }
    if (dims.empty()) dims.emplace_back(prev.width, prev.height);

    OpticalFlowMap flow;
    for (int level = int(dims.size()) - 1; level >= 0; --level) {
        const auto [w, h] = dims[size_t(level)];
        Image la = a, lb = b;
        if (level > 0 || w != prev.width || h != prev.height) {
            const double sigma = 0.5 * (double(prev.width) / w - 1.0);
            la = resize_image(blur_image(a, sigma), w, h);
            lb = resize_image(blur_image(b, sigma), w, h);
        }
        const PolyExp p1 = poly_expansion(la, params.poly_n, params.poly_sigma);
        const PolyExp p2 = poly_expansion(lb, params.poly_n, params.poly_sigma);

        if (flow.width == 0)
            flow = OpticalFlowMap(w, h);
        else if (flow.width != w || flow.height != h)
            flow = upsample_flow(flow, w, h);

        for (int it = 0; it < params.iterations; ++it) update_flow(p1, p2, flow, params.window);
    }
    return flow;
}

std::vector<OpticalFlowMap> flow_sequence(const FrameSequence& seq, const FlowParams& params,
                                          unsigned threads) {
    if (seq.frames.size() < 2) throw DataError("flow_sequence needs at least 2 frames");
    std::vector<OpticalFlowMap> flows(seq.frames.size() - 1);
    parallel_for(flows.size(), threads, [&](size_t t) {
        flows[t] = dense_flow(seq.frames[t], seq.frames[t + 1], params);
    });
    return flows;
}

OpticalFlowMap mirror_flow(const OpticalFlowMap& f) {
    OpticalFlowMap out(f.width, f.height);
    for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) {
            const size_t src = size_t(y) * f.width + (f.width - 1 - x);
            const size_t dst = size_t(y) * f.width + x;
            out.u[dst] = -f.u[src];
            out.v[dst] = f.v[src];
        }
    return out;
}

void save_flows(const std::vector<OpticalFlowMap>& flows, const std::string& path) {
    if (flows.empty()) throw DataError("refusing to write empty flow list");
    auto os = open_out(path);
    write_magic(os, "GFOF");
    write_pod<uint32_t>(os, uint32_t(flows[0].width));
    write_pod<uint32_t>(os, uint32_t(flows[0].height));
    write_pod<uint32_t>(os, uint32_t(flows.size()));
    for (const auto& f : flows) {
        if (f.width != flows[0].width || f.height != flows[0].height)
            throw DataError("flow list has mixed dimensions");
        write_bytes(os, f.u.data(), f.u.size() * sizeof(float));
        write_bytes(os, f.v.data(), f.v.size() * sizeof(float));
    }
}

std::vector<OpticalFlowMap> load_flows(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "GFOF", path);
    const auto w = read_pod<uint32_t>(is, "width");
    const auto h = read_pod<uint32_t>(is, "height");
    const auto count = read_pod<uint32_t>(is, "count");
    std::vector<OpticalFlowMap> flows;
    flows.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        OpticalFlowMap f(static_cast<int>(w), static_cast<int>(h));
        read_bytes(is, f.u.data(), f.u.size() * sizeof(float), "u plane");
        read_bytes(is, f.v.data(), f.v.size() * sizeof(float), "v plane");
        flows.push_back(std::move(f));
    }
    return flows;
}

}  // namespace gaitflow
