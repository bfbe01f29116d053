#pragma once

#include "glab/rng.hpp"
#include "glab/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace glab {

enum class EventKind { Linear, Hyperbolic };

// Recipe for one synthetic ghosted/deghosted image pair family. Rows are the
// time axis; a ghost is a delayed copy of the primary image with coefficient
// rho (polarity reversed for the default -1).
struct EventSpec {
    int h = 64;
    int w = 64;
    int events_min = 1;
    int events_max = 4;
    bool linear_events = true;
    bool hyperbolic_events = true;
    double ricker_width = 2.0; // peak width in pixels
    double amp_min = 0.3;      // amplitude range, subset of [-1, 1]
    double amp_max = 1.0;
    int tau_min = 4; // ghost delay range in pixels, drawn per sample
    int tau_max = 7;
    double rho = -1.0;    // ghost coefficient
    double noise = 0.0;   // sigma_n, additive on targets only
    std::uint64_t seed = 1;

    void validate() const {
        if (h < 1 || w < 1) throw std::invalid_argument("EventSpec: non-positive extents");
        if (events_min < 1 || events_max < events_min)
            throw std::invalid_argument("EventSpec: event count range must satisfy 1 <= min <= max");
        if (!(linear_events || hyperbolic_events))
            throw std::invalid_argument("EventSpec: no event kinds enabled");
        if (tau_min < 1 || tau_max < tau_min || tau_max >= h / 4)
            throw std::invalid_argument("EventSpec: require 1 <= tau and tau < h/4");
        if (std::fabs(rho) > 1.0) throw std::invalid_argument("EventSpec: |rho| must be <= 1");
        if (noise < 0.0) throw std::invalid_argument("EventSpec: negative noise level");
        if (amp_min < -1.0 || amp_max > 1.0 || amp_max < amp_min)
            throw std::invalid_argument("EventSpec: amplitude range must be inside [-1, 1]");
        if (static_cast<double>(h) < 8.0 * ricker_width)
            throw std::invalid_argument("EventSpec: extents too small for the wavelet support (h < 8*width)");
    }
};

struct SamplePair {
    Tensor x; // ghosted input
    Tensor y; // deghosted target
};

struct Dataset {
    std::vector<SamplePair> pairs;
    EventSpec spec;

    int size() const { return static_cast<int>(pairs.size()); }
};

namespace detail {

inline double ricker(double t, double a) {
    const double u = t / a;
    return (1.0 - u * u) * std::exp(-0.5 * u * u);
}

// Round through float32: dataset values are stored as float32 on disk, and
// generating them pre-rounded makes save/load round trips lossless.
inline void round_f32(std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

} // namespace detail

// Deterministic clean image: a per-(seed,index) draw of Ricker-wavelet events
// along linear or hyperbolic trajectories. Values clipped to [-1.5, 1.5].
inline Tensor gen_primary(const EventSpec& spec, int index) {
    spec.validate();
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(index) * 2 + 0);

    const int h = spec.h, w = spec.w;
    std::vector<double> img(static_cast<std::size_t>(h) * w, 0.0);
    const int n_events = rng.uniform_int(spec.events_min, spec.events_max);
    const double support = 4.0 * spec.ricker_width;

    for (int e = 0; e < n_events; ++e) {
        EventKind kind;
        if (spec.linear_events && spec.hyperbolic_events)
            kind = rng.uniform() < 0.5 ? EventKind::Linear : EventKind::Hyperbolic;
        else
            kind = spec.linear_events ? EventKind::Linear : EventKind::Hyperbolic;
        const double amp = rng.uniform(spec.amp_min, spec.amp_max);

        double t0, slope = 0.0, x0 = 0.0, v = 1.0;
        if (kind == EventKind::Linear) {
            t0 = rng.uniform(0.15 * h, 0.80 * h);
            slope = rng.uniform(-0.4, 0.4);
        } else {
            t0 = rng.uniform(0.15 * h, 0.70 * h);
            x0 = rng.uniform(0.0, static_cast<double>(w - 1));
            v = rng.uniform(1.5, 4.0); // moveout in column-pixels per row-pixel
        }

        for (int j = 0; j < w; ++j) {
            double center;
            if (kind == EventKind::Linear) {
                center = t0 + slope * j;
            } else {
                const double dx = (j - x0) / v;
                center = std::sqrt(t0 * t0 + dx * dx);
            }
            const int ilo = std::max(0, static_cast<int>(std::floor(center - support)));
            const int ihi = std::min(h - 1, static_cast<int>(std::ceil(center + support)));
            for (int i = ilo; i <= ihi; ++i)
                img[static_cast<std::size_t>(i) * w + j] += amp * detail::ricker(i - center, spec.ricker_width);
        }
    }
    for (double& x : img) x = std::clamp(x, -1.5, 1.5);
    return Tensor({1, h, w}, std::move(img));
}

// X = Y + rho * shift_tau(Y); shift is down the row (time) axis, zero fill.
inline Tensor apply_ghost(const Tensor& primary, int tau, double rho) {
    if (primary.shape().size() != 3)
        throw std::invalid_argument("apply_ghost: expected [C,H,W] image, got " + shape_str(primary.shape()));
    const int c = primary.shape()[0], h = primary.shape()[1], w = primary.shape()[2];
    if (tau < 1 || tau >= h)
        throw std::invalid_argument("apply_ghost: delay tau = " + std::to_string(tau) +
                                    " outside [1, " + std::to_string(h) + ")");
    std::vector<double> out(primary.values());
    const std::vector<double>& y = primary.values();
    for (int k = 0; k < c; ++k)
        for (int i = tau; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const std::size_t at = (static_cast<std::size_t>(k) * h + i) * w + j;
                out[at] = y[at] + rho * y[at - static_cast<std::size_t>(tau) * w];
            }
    return Tensor(primary.shape(), std::move(out));
}

// Per-sample tau, drawn from the spec range on the sample's own stream.
inline int sample_tau(const EventSpec& spec, int index) {
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(index) * 2 + 1);
    return rng.uniform_int(spec.tau_min, spec.tau_max);
}

// Full (X, Y) realization: Y is the clean primary plus optional noise, X the
// ghosted clean primary. Values rounded to float32 so that dataset files
// round-trip exactly.
inline SamplePair make_sample(const EventSpec& spec, int index) {
    const Tensor clean = gen_primary(spec, index);
    const int tau = sample_tau(spec, index);
    Tensor x = apply_ghost(clean, tau, spec.rho);

    std::vector<double> yv = clean.values();
    if (spec.noise > 0.0) {
        Rng rng = Rng::stream(spec.seed ^ 0x6e6f697365ull, static_cast<std::uint64_t>(index));
        for (double& v : yv) v += spec.noise * rng.normal();
    }
    std::vector<double> xv = x.values();
    detail::round_f32(xv);
    detail::round_f32(yv);
    return SamplePair{Tensor(x.shape(), std::move(xv)), Tensor(clean.shape(), std::move(yv))};
}

inline Dataset make_dataset(const EventSpec& spec, int n) {
    if (n < 1) throw std::invalid_argument("make_dataset: need n >= 1");
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    ds.pairs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ds.pairs.push_back(make_sample(spec, i));
    return ds;
}

// ---- dataset file format ----------------------------------------------------
// "GLAB", version u32 = 1, then n, c, h, w as little-endian u32, then n
// records of (X plane, Y plane), each c*h*w little-endian float32, row-major.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    b[0] = static_cast<char>(v & 0xff);
    b[1] = static_cast<char>((v >> 8) & 0xff);
    b[2] = static_cast<char>((v >> 16) & 0xff);
    b[3] = static_cast<char>((v >> 24) & 0xff);
    out.append(b, 4);
}

inline std::uint32_t get_u32(const std::string& in, std::size_t off) {
    const auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])); };
    return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

inline void put_plane_f32(std::string& out, const std::vector<double>& v) {
    for (double d : v) {
        float f = static_cast<float>(d);
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put_u32(out, u);
    }
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
    if (ds.pairs.empty()) throw std::invalid_argument("save_dataset: empty dataset");
    const Shape& s = ds.pairs[0].x.shape();
    std::string out;
    out.append("GLAB", 4);
    detail::put_u32(out, 1u);
    detail::put_u32(out, static_cast<std::uint32_t>(ds.pairs.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(s[0]));
    detail::put_u32(out, static_cast<std::uint32_t>(s[1]));
    detail::put_u32(out, static_cast<std::uint32_t>(s[2]));
    for (const SamplePair& p : ds.pairs) {
        if (p.x.shape() != s || p.y.shape() != s)
            throw std::invalid_argument("save_dataset: pairs have mismatched extents");
        detail::put_plane_f32(out, p.x.values());
        detail::put_plane_f32(out, p.y.values());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_dataset: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("save_dataset: short write to '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_dataset: cannot open '" + path + "'");
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (in.size() < 24)
        throw std::runtime_error("load_dataset: '" + path + "' truncated header: expected at least 24 bytes, got " +
                                 std::to_string(in.size()));
    if (in.compare(0, 4, "GLAB") != 0)
        throw std::runtime_error("load_dataset: '" + path + "' bad magic at offset 0 (expected \"GLAB\")");
    const std::uint32_t version = detail::get_u32(in, 4);
    if (version != 1u)
        throw std::runtime_error("load_dataset: '" + path + "' unsupported version " + std::to_string(version) +
                                 " at offset 4");
    const std::uint32_t n = detail::get_u32(in, 8);
    const std::uint32_t c = detail::get_u32(in, 12);
    const std::uint32_t h = detail::get_u32(in, 16);
    const std::uint32_t w = detail::get_u32(in, 20);
    if (n == 0 || c == 0 || h == 0 || w == 0)
        throw std::runtime_error("load_dataset: '" + path + "' zero extent in header");

    const std::size_t plane = static_cast<std::size_t>(c) * h * w;
    const std::size_t expected = 24 + static_cast<std::size_t>(n) * 2 * plane * 4;
    if (in.size() != expected)
        throw std::runtime_error("load_dataset: '" + path + "' expected " + std::to_string(expected) +
                                 " bytes, got " + std::to_string(in.size()));

    Dataset ds;
    ds.pairs.reserve(n);
    const Shape shape{static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)};
    std::size_t off = 24;
    auto read_plane = [&]() {
        std::vector<double> v(plane);
        for (std::size_t i = 0; i < plane; ++i) {
            std::uint32_t u = detail::get_u32(in, off);
            off += 4;
            float fv;
            std::memcpy(&fv, &u, 4);
            v[i] = static_cast<double>(fv);
        }
        return v;
    };
    for (std::uint32_t i = 0; i < n; ++i) {
        std::vector<double> xv = read_plane();
        std::vector<double> yv = read_plane();
        ds.pairs.push_back(SamplePair{Tensor(shape, std::move(xv)), Tensor(shape, std::move(yv))});
    }
    return ds;
}

} // namespace glab
