#include "gaitflow/cuboid.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

using nlohmann::json;

namespace gaitflow {

std::vector<CuboidWindow> build_subsequence_windows(const std::vector<OpticalFlowMap>& flows,
                                                    const TrackEstimate& track,
                                                    const CuboidBuildParams& params) {
    const int L = params.length;
    const int n = int(flows.size());
    if (n < L) throw DataError("need at least " + std::to_string(L) + " flow maps");
    if (track.x_center.size() < flows.size())
        throw DataError("track shorter than flow sequence");

    const int step = std::max(1, int(std::lround(L * (1.0 - params.overlap))));
    const int src_w = flows[0].width;
    const int src_h = flows[0].height;
    const int crop_w = params.crop_width;
    if (src_w < crop_w) throw DataError("flow maps narrower than the crop width");

    std::vector<CuboidWindow> out;
    for (int start = 0; start + L <= n; start += step) {
        const int central = start + (L - 1) / 2;  // 1-based frame #13 for L=25
        if (!track.valid[size_t(central)]) continue;
        const float xc = track.x_center[size_t(central)];
        const int x0 = std::clamp(int(std::lround(xc)) - crop_w / 2, 0, src_w - crop_w);

        CuboidWindow win;
        win.source.height = src_h;
        win.source.width = src_w;
        win.source.channels = 2 * L;
        win.source.data.resize(size_t(src_h) * src_w * 2 * L);
        win.source.crop_x0 = x0;
        for (int k = 0; k < L; ++k) {
            const OpticalFlowMap& f = flows[size_t(start + k)];
            std::copy(f.u.begin(), f.u.end(),
                      win.source.data.begin() + size_t(2 * k) * src_h * src_w);
            std::copy(f.v.begin(), f.v.end(),
                      win.source.data.begin() + size_t(2 * k + 1) * src_h * src_w);
        }

        FlowCuboid c(src_h, crop_w, 2 * L);
        for (int ch = 0; ch < 2 * L; ++ch)
            for (int y = 0; y < src_h; ++y)
                for (int x = 0; x < crop_w; ++x)
                    c.at(ch, y, x) = win.source.at(ch, y, x0 + x);
        c.center_frame_x = xc;
        c.window_start = start;
        win.cuboid = std::move(c);
        out.push_back(std::move(win));
    }
    return out;
}

std::vector<FlowCuboid> build_subsequences(const std::vector<OpticalFlowMap>& flows,
                                           const TrackEstimate& track,
                                           const CuboidBuildParams& params) {
    std::vector<FlowCuboid> out;
    for (auto& w : build_subsequence_windows(flows, track, params))
        out.push_back(std::move(w.cuboid));
    return out;
}

namespace {

FlowCuboid crop_shifted(const FlowCuboid& base, const FlowWindow& src, int dx, int dy) {
    FlowCuboid c(base.height, base.width, base.channels);
    const int x0 = src.crop_x0 + dx;
    for (int ch = 0; ch < c.channels; ++ch)
        for (int y = 0; y < c.height; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= src.height) continue;  // zero-filled
            for (int x = 0; x < c.width; ++x) {
                const int sx = x0 + x;
                if (sx < 0 || sx >= src.width) continue;
                c.at(ch, y, x) = src.at(ch, sy, sx);
            }
        }
    c.label = base.label;
    c.scenario = base.scenario;
    c.center_frame_x = base.center_frame_x;
    c.subject = base.subject;
    c.sequence = base.sequence;
    c.window_start = base.window_start;
    c.aug_dx = dx;
    c.aug_dy = dy;
    return c;
}

FlowCuboid mirror_cuboid(const FlowCuboid& c) {
    FlowCuboid m = c;
    for (int k = 0; 2 * k + 1 < c.channels; ++k)
        for (int y = 0; y < c.height; ++y)
            for (int x = 0; x < c.width; ++x) {
                m.at(2 * k, y, x) = -c.at(2 * k, y, c.width - 1 - x);
                m.at(2 * k + 1, y, x) = c.at(2 * k + 1, y, c.width - 1 - x);
            }
    m.aug_mirror = true;
    return m;
}

}  // namespace

std::vector<FlowCuboid> augment(const FlowCuboid& c, const FlowWindow& source, int shift) {
    std::vector<FlowCuboid> out;
    out.reserve(18);
    out.push_back(c);  // base crop, unmirrored
    out.back().aug_dx = 0;
    out.back().aug_dy = 0;
    out.back().aug_mirror = false;
    for (int dy = -shift; dy <= shift; dy += shift)
        for (int dx = -shift; dx <= shift; dx += shift) {
            if (dx == 0 && dy == 0) continue;
            out.push_back(crop_shifted(c, source, dx, dy));
        }
    const size_t base = out.size();
    for (size_t i = 0; i < base; ++i) out.push_back(mirror_cuboid(out[i]));
    return out;
}

void MeanAccumulator::add(const FlowCuboid& c) {
    double s = 0.0;
    for (float v : c.data) s += v;
    sum_ += s;
    elements_ += c.data.size();
    samples_ += 1;
}

CuboidSetStats MeanAccumulator::stats() const {
    if (samples_ == 0) throw DataError("mean over an empty cuboid stream");
    CuboidSetStats st;
    st.mean = sum_ / double(elements_);
    st.count = samples_;
    if (!std::isfinite(st.mean)) throw NumericError("non-finite cuboid mean");
    return st;
}

CuboidSetStats compute_mean(const std::vector<FlowCuboid>& train) {
    MeanAccumulator acc;
    for (const auto& c : train) acc.add(c);
    return acc.stats();
}

FlowCuboid normalize(const FlowCuboid& c, const CuboidSetStats& stats) {
    FlowCuboid out = c;
    normalize_inplace(out, stats);
    return out;
}

void normalize_inplace(FlowCuboid& c, const CuboidSetStats& stats) {
    if (!std::isfinite(stats.mean)) throw NumericError("non-finite normalization mean");
    const float m = float(stats.mean);
    for (float& v : c.data) v -= m;
    c.normalized = true;
}

void save_stats(const CuboidSetStats& stats, const std::string& path) {
    json j;
    j["mean"] = stats.mean;
    j["count"] = stats.count;
    std::ofstream os(path);
    if (!os) throw DataError("cannot write stats: " + path);
    os << j.dump(2) << "\n";
}

CuboidSetStats load_stats(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open stats: " + path);
    json j;
    is >> j;
    CuboidSetStats st;
    st.mean = j.at("mean").get<double>();
    st.count = j.at("count").get<uint64_t>();
    return st;
}

// --------------------------------------------------------------- archive

namespace {
std::string manifest_path(const std::string& archive) { return archive + ".manifest.json"; }
}

struct CuboidArchiveWriter::Impl {
    std::ofstream os;
    std::string path;
    int h, w, c;
    uint32_t count = 0;
    json samples = json::array();
    std::vector<std::string> label_names;
    bool closed = false;
};

CuboidArchiveWriter::CuboidArchiveWriter(const std::string& path, int h, int w, int c)
    : impl_(new Impl) {
    impl_->path = path;
    impl_->h = h;
    impl_->w = w;
    impl_->c = c;
    impl_->os = open_out(path);
    write_magic(impl_->os, "GFCB");
    write_pod<uint32_t>(impl_->os, 0);  // patched on close
    write_pod<uint32_t>(impl_->os, uint32_t(h));
    write_pod<uint32_t>(impl_->os, uint32_t(w));
    write_pod<uint32_t>(impl_->os, uint32_t(c));
}

CuboidArchiveWriter::~CuboidArchiveWriter() {
    try {
        close();
    } catch (...) {
    }
}

void CuboidArchiveWriter::append(const FlowCuboid& cuboid) {
    auto& im = *impl_;
    if (im.closed) throw DataError("archive already closed");
    if (cuboid.height != im.h || cuboid.width != im.w || cuboid.channels != im.c)
        throw DataError("cuboid shape does not match archive header");
    write_pod<uint32_t>(im.os, uint32_t(cuboid.label));
    write_pod<uint8_t>(im.os, uint8_t(cuboid.scenario));
    write_bytes(im.os, cuboid.data.data(), cuboid.data.size() * sizeof(float));
    json s;
    s["label"] = cuboid.label;
    s["scenario"] = scenario_name(cuboid.scenario);
    s["subject"] = cuboid.subject;
    s["sequence"] = cuboid.sequence;
    s["window_start"] = cuboid.window_start;
    s["center_x"] = cuboid.center_frame_x;
    s["aug"] = {cuboid.aug_dx, cuboid.aug_dy, cuboid.aug_mirror ? 1 : 0};
    im.samples.push_back(std::move(s));
    if (cuboid.label >= 0) {
        if (size_t(cuboid.label) >= im.label_names.size())
            im.label_names.resize(size_t(cuboid.label) + 1);
        if (im.label_names[size_t(cuboid.label)].empty())
            im.label_names[size_t(cuboid.label)] = cuboid.subject;
    }
    ++im.count;
}

void CuboidArchiveWriter::close() {
    auto& im = *impl_;
    if (im.closed) return;
    im.closed = true;
    im.os.seekp(4);
    write_pod<uint32_t>(im.os, im.count);
    im.os.close();
    json j;
    j["labels"] = im.label_names;
    j["samples"] = std::move(im.samples);
    std::ofstream ms(manifest_path(im.path));
    if (!ms) throw DataError("cannot write manifest for " + im.path);
    ms << j.dump() << "\n";
}

struct CuboidArchiveReader::Impl {
    int fd = -1;
    std::string path;
    uint32_t count = 0, h = 0, w = 0, c = 0;
    size_t record_bytes = 0;
    std::vector<int> labels;
    std::vector<Scenario> scenarios;
    std::vector<std::string> label_names;
    json samples;  // manifest rows, may be null

    void pread_exact(void* buf, size_t n, off_t off) const {
        size_t done = 0;
        while (done < n) {
            const ssize_t got =
                ::pread(fd, static_cast<char*>(buf) + done, n - done, off + off_t(done));
            if (got <= 0) throw DataError("short read in archive " + path);
            done += size_t(got);
        }
    }
};

CuboidArchiveReader::CuboidArchiveReader(const std::string& path) : impl_(new Impl) {
    auto& im = *impl_;
    im.path = path;
    im.fd = ::open(path.c_str(), O_RDONLY);
    if (im.fd < 0) throw DataError("cannot open archive: " + path);
    char header[20];
    im.pread_exact(header, sizeof(header), 0);
    if (std::memcmp(header, "GFCB", 4) != 0) throw DataError("bad magic in " + path);
    std::memcpy(&im.count, header + 4, 4);
    std::memcpy(&im.h, header + 8, 4);
    std::memcpy(&im.w, header + 12, 4);
    std::memcpy(&im.c, header + 16, 4);
    im.record_bytes = 5 + size_t(im.h) * im.w * im.c * sizeof(float);

    im.labels.resize(im.count);
    im.scenarios.resize(im.count);
    for (uint32_t i = 0; i < im.count; ++i) {
        char rec[5];
        im.pread_exact(rec, 5, off_t(20 + im.record_bytes * i));
        uint32_t lab;
        std::memcpy(&lab, rec, 4);
        im.labels[i] = int(lab);
        const uint8_t sc = uint8_t(rec[4]);
        if (sc > 5) throw DataError("bad scenario code in " + path);
        im.scenarios[i] = Scenario(sc);
    }

    std::ifstream ms(manifest_path(path));
    if (ms) {
        json j;
        ms >> j;
        im.label_names = j.value("labels", std::vector<std::string>{});
        im.samples = j.value("samples", json());
        if (im.samples.is_array() && im.samples.size() != im.count)
            throw DataError("manifest does not match archive " + path);
    }
}

CuboidArchiveReader::~CuboidArchiveReader() {
    if (impl_ && impl_->fd >= 0) ::close(impl_->fd);
}

size_t CuboidArchiveReader::size() const { return impl_->count; }
int CuboidArchiveReader::height() const { return int(impl_->h); }
int CuboidArchiveReader::width() const { return int(impl_->w); }
int CuboidArchiveReader::channels() const { return int(impl_->c); }
int CuboidArchiveReader::label(size_t i) const { return impl_->labels.at(i); }
Scenario CuboidArchiveReader::scenario(size_t i) const { return impl_->scenarios.at(i); }
const std::vector<std::string>& CuboidArchiveReader::label_names() const {
    return impl_->label_names;
}

FlowCuboid CuboidArchiveReader::read(size_t index) const {
    const auto& im = *impl_;
    if (index >= im.count) throw DataError("archive index out of range");
    FlowCuboid c(int(im.h), int(im.w), int(im.c));
    c.label = im.labels[index];
    c.scenario = im.scenarios[index];
    im.pread_exact(c.data.data(), c.data.size() * sizeof(float),
                   off_t(20 + im.record_bytes * index + 5));
    if (im.samples.is_array()) {
        const json& s = im.samples[index];
        c.subject = s.value("subject", "");
        c.sequence = s.value("sequence", "");
        c.window_start = s.value("window_start", 0);
        c.center_frame_x = s.value("center_x", 0.f);
        if (s.contains("aug")) {
            c.aug_dx = s["aug"][0].get<int>();
            c.aug_dy = s["aug"][1].get<int>();
            c.aug_mirror = s["aug"][2].get<int>() != 0;
        }
    }
    return c;
}

}  // namespace gaitflow
