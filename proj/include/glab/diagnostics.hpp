#pragma once

#include "glab/losses.hpp"
#include "glab/nets.hpp"
#include "glab/synth.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace glab {

// Raw F(X,Y) map before the sum pooling.
inline Tensor f_map(Net& F, const Tensor& X, const Tensor& Y) {
    return discriminator_f_map(F, nullptr, X, Y);
}

// dLOSS/dG(y) at G = G_theta(X): the signal back-propagated into the
// generator. The prediction is treated as the differentiation variable, so
// the map reflects the loss alone.
inline Tensor adjoint_input(LossMode mode, Net& G, Net* DorF, const Tensor& X, const Tensor& Y,
                            const LossConfig& cfg) {
    Tensor pred = generator_forward(G, nullptr, X);
    Tape tape;
    Tensor g = tape.leaf(pred);
    Tensor loss;
    switch (mode) {
        case LossMode::LpOnly:
            loss = lp_loss(g, Y, cfg.p, cfg.sigma_weights);
            break;
        case LossMode::Wcgan: {
            if (!DorF) throw std::invalid_argument("adjoint_input: wcgan mode needs a discriminator");
            loss = scale(discriminator_value(*DorF, &tape, X, g), -1.0);
            break;
        }
        case LossMode::Ccgan: {
            if (!DorF) throw std::invalid_argument("adjoint_input: ccgan mode needs a discriminator");
            Tensor fr = discriminator_f_map(*DorF, &tape, X, Y);
            Tensor ff = discriminator_f_map(*DorF, &tape, X, g);
            loss = reduce_sum(abs_pow(sub(fr, ff), 1.0));
            break;
        }
    }
    return tape.backward(loss).at(g.node()).detached();
}

// Same signature with an arbitrary scalar loss builder, used by the
// independent finite-difference cross checks.
inline Tensor adjoint_input_of(const std::function<Tensor(Tape&, const Tensor&)>& loss_of_pred,
                               const Tensor& pred) {
    Tape tape;
    Tensor g = tape.leaf(pred);
    Tensor loss = loss_of_pred(tape, g);
    return tape.backward(loss).at(g.node()).detached();
}

// Recovers the ghost delay (and coefficient) of a pair by correlating the
// input-minus-target residual against shifted copies of the target.
struct GhostLag {
    int tau = 0;
    double rho = 0.0;
};

inline GhostLag infer_ghost_lag(const Tensor& x, const Tensor& y, int tau_max) {
    if (x.shape() != y.shape() || x.shape().size() != 3)
        throw std::invalid_argument("infer_ghost_lag: need matching [C,H,W] images");
    const int h = x.shape()[1], w = x.shape()[2];
    tau_max = std::min(tau_max, h - 1);
    GhostLag best;
    double best_score = -1.0;
    for (int tau = 1; tau <= tau_max; ++tau) {
        double num = 0.0, den = 0.0;
        for (int i = tau; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double r = x[i * w + j] - y[i * w + j];
                const double s = y[(i - tau) * w + j];
                num += r * s;
                den += s * s;
            }
        if (den <= 0.0) continue;
        const double score = num * num / den; // energy explained by this lag
        if (score > best_score) {
            best_score = score;
            best.tau = tau;
            best.rho = num / den;
        }
    }
    return best;
}

// Energy of (pred - target) inside the ghost window -- the pixels where
// shift_tau(target) has support, boundary rows excluded -- normalized by the
// target energy. Zero iff the prediction matches the target on the window.
inline double ghost_residual_energy(const Tensor& pred, const Tensor& target, int tau) {
    if (pred.shape() != target.shape() || pred.shape().size() != 3)
        throw std::invalid_argument("ghost_residual_energy: need matching [C,H,W] images");
    const int h = pred.shape()[1], w = pred.shape()[2];
    if (tau < 1 || tau >= h)
        throw std::invalid_argument("ghost_residual_energy: invalid tau " + std::to_string(tau));

    double max_abs = 0.0;
    for (double v : target.values()) max_abs = std::max(max_abs, std::fabs(v));
    const double support_level = 0.05 * max_abs;

    double window = 0.0, total = 0.0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double t = target[i * w + j];
            total += t * t;
            if (i < tau || i >= h - tau) continue; // boundary rows excluded
            const double ghost_src = target[(i - tau) * w + j];
            if (std::fabs(ghost_src) <= support_level) continue;
            const double r = pred[i * w + j] - t;
            window += r * r;
        }
    return window / (total + 1e-30);
}

// ---- report emission ---------------------------------------------------------

struct DiagnosticReport {
    int epoch = 0;
    std::string mode;
    std::uint64_t seed = 0;
    double ghost_residual = 0.0;
    // named images, all sharing extents
    std::vector<std::pair<std::string, Tensor>> images;
};

namespace detail {

inline void png_chunk(std::string& out, const char type[4], const std::string& payload) {
    const std::uint32_t len = static_cast<std::uint32_t>(payload.size());
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    std::string body(type, 4);
    body += payload;
    out += body;
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((crc >> (8 * i)) & 0xff));
}

} // namespace detail

// 8-bit grayscale PNG with symmetric amplitude clip at the 99th percentile of
// |values|; zero maps to mid gray, positive amplitudes darken.
inline void write_png_gray(const Tensor& img, const std::string& path) {
    if (img.shape().size() != 3 || img.shape()[0] != 1)
        throw std::invalid_argument("write_png_gray: need a [1,H,W] image");
    const int h = img.shape()[1], w = img.shape()[2];

    std::vector<double> mags;
    mags.reserve(img.values().size());
    for (double v : img.values()) mags.push_back(std::fabs(v));
    std::sort(mags.begin(), mags.end());
    double clip = mags[static_cast<std::size_t>(0.99 * (mags.size() - 1))];
    if (clip <= 0.0) clip = 1.0;

    std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (w + 1));
    for (int i = 0; i < h; ++i) {
        raw[static_cast<std::size_t>(i) * (w + 1)] = 0; // filter: none
        for (int j = 0; j < w; ++j) {
            const double v = std::clamp(img[i * w + j] / clip, -1.0, 1.0);
            // dark = positive
            raw[static_cast<std::size_t>(i) * (w + 1) + 1 + j] =
                static_cast<unsigned char>(std::lround(127.5 * (1.0 - v)));
        }
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw std::runtime_error("write_png_gray: deflate failed for '" + path + "'");

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    auto be32 = [&](std::string& s, std::uint32_t v) {
        for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    be32(ihdr, static_cast<std::uint32_t>(w));
    be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr += std::string("\x08\x00\x00\x00\x00", 5); // 8-bit gray
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", std::string(reinterpret_cast<char*>(comp.data()), comp_len));
    detail::png_chunk(out, "IEND", "");

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_png_gray: cannot open '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write_png_gray: short write to '" + path + "'");
}

// One grayscale PNG per image, a JSON metadata sidecar, and a CSV append.
// Names are deterministic in (epoch, mode, seed); re-emitting overwrites.
inline std::vector<std::string> emit_report(const DiagnosticReport& report, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("emit_report: cannot create '" + out_dir + "': " + ec.message());

    const std::string stem = report.mode + "-ep" + std::to_string(report.epoch) + "-seed" +
                             std::to_string(report.seed);
    std::vector<std::string> written;
    for (const auto& [name, img] : report.images) {
        const std::string path = (fs::path(out_dir) / (stem + "-" + name + ".png")).string();
        write_png_gray(img, path);
        written.push_back(path);
    }

    nlohmann::json meta{{"epoch", report.epoch},
                        {"mode", report.mode},
                        {"seed", report.seed},
                        {"ghost_residual", report.ghost_residual}};
    {
        const std::string path = (fs::path(out_dir) / (stem + ".json")).string();
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw std::runtime_error("emit_report: cannot open '" + path + "'");
        f << meta.dump(2) << "\n";
        written.push_back(path);
    }
    {
        const std::string path = (fs::path(out_dir) / "diagnostics.csv").string();
        const bool fresh = !fs::exists(path);
        std::ofstream f(path, std::ios::app);
        if (!f) throw std::runtime_error("emit_report: cannot open '" + path + "'");
        if (fresh) f << "epoch,mode,seed,ghost_residual\n";
        f << report.epoch << "," << report.mode << "," << report.seed << "," << report.ghost_residual << "\n";
        written.push_back(path);
    }
    return written;
}

} // namespace glab
