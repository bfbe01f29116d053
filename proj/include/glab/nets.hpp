#pragma once

#include "glab/rng.hpp"
#include "glab/tensor.hpp"

#include <json.hpp>

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace glab {

enum class NetKind { GeneratorUnet, DiscriminatorDenet, DiscriminatorLinear };

inline const char* net_kind_name(NetKind k) {
    switch (k) {
        case NetKind::GeneratorUnet: return "generator-unet";
        case NetKind::DiscriminatorDenet: return "discriminator-denet";
        case NetKind::DiscriminatorLinear: return "discriminator-linear";
    }
    return "?";
}

struct NetConfig {
    NetKind kind = NetKind::GeneratorUnet;
    // generator: one width per level, bottleneck reuses the last entry.
    // denet: one width per layer, final entry must be 1.
    std::vector<int> widths = {16, 32, 64};
    int kernel = 3;
    double leaky_slope = 0.2;
    int in_channels = 1;      // X channels
    int latent_channels = 0;  // generator only; Z concatenated to the input
    bool input_skip = true;   // generator predicts X + correction
    std::uint64_t init_seed = 1;

    int depth() const { return static_cast<int>(widths.size()); }

    void validate() const {
        if (widths.empty()) throw std::invalid_argument("NetConfig: empty widths");
        for (int w : widths)
            if (w < 1) throw std::invalid_argument("NetConfig: non-positive width");
        if (kernel < 1 || kernel % 2 == 0)
            throw std::invalid_argument("NetConfig: kernel extent must be odd and positive");
        if (kind == NetKind::DiscriminatorDenet && widths.back() != 1)
            throw std::invalid_argument("NetConfig: denet final width must be 1");
        if (latent_channels < 0) throw std::invalid_argument("NetConfig: negative latent channels");
    }
};

struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
};

// A parameterized net: immutable wiring (config) plus mutable parameter
// values. Forward passes bind the parameters as leaves of the caller's tape.
struct Net {
    NetConfig cfg;
    std::vector<Param> params;

    std::size_t num_scalars() const {
        std::size_t n = 0;
        for (const Param& p : params) n += p.value.size();
        return n;
    }

    bool all_finite() const {
        for (const Param& p : params)
            for (double v : p.value)
                if (!std::isfinite(v)) return false;
        return true;
    }
};

// Node ids of the bound parameter leaves, parallel to Net::params.
struct BoundParams {
    std::vector<int> node_ids;
};

namespace detail {

inline void add_conv_param(Net& net, const std::string& name, int co, int ci, int k, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(ci) * k * k);
    std::vector<double> w(static_cast<std::size_t>(co) * ci * k * k);
    for (double& x : w) x = rng.uniform(-s, s);
    net.params.push_back(Param{name, Shape{co, ci, k, k}, std::move(w)});
    net.params.push_back(Param{name + ".bias", Shape{co}, std::vector<double>(static_cast<std::size_t>(co), 0.0)});
}

// Binds parameter `i` on the tape (or returns it detached when tape is null).
struct ParamBinder {
    Net* net;
    Tape* tape;
    BoundParams* bound;

    Tensor operator()(std::size_t i) const {
        Param& p = net->params[i];
        Tensor t(p.shape, p.value);
        if (!tape) return t;
        Tensor leafed = tape->leaf(t);
        if (bound) {
            if (bound->node_ids.size() < net->params.size()) bound->node_ids.resize(net->params.size(), -1);
            bound->node_ids[i] = leafed.node();
        }
        return leafed;
    }
};

} // namespace detail

inline Net build_net(const NetConfig& cfg) {
    cfg.validate();
    Net net;
    net.cfg = cfg;
    Rng rng(hash_u64(cfg.init_seed, 0x6e6574u));
    const int k = cfg.kernel;

    switch (cfg.kind) {
        case NetKind::GeneratorUnet: {
            const int d = cfg.depth();
            int c = cfg.in_channels + cfg.latent_channels;
            for (int l = 0; l < d; ++l) {
                detail::add_conv_param(net, "enc" + std::to_string(l), cfg.widths[static_cast<std::size_t>(l)], c, k, rng);
                c = cfg.widths[static_cast<std::size_t>(l)];
            }
            detail::add_conv_param(net, "bottleneck", cfg.widths.back(), cfg.widths.back(), k, rng);
            int up = cfg.widths.back();
            for (int l = d - 1; l >= 0; --l) {
                const int skip = cfg.widths[static_cast<std::size_t>(l)];
                detail::add_conv_param(net, "dec" + std::to_string(l), skip, up + skip, k, rng);
                up = skip;
            }
            detail::add_conv_param(net, "out", 1, up, k, rng);
            break;
        }
        case NetKind::DiscriminatorDenet: {
            int c = cfg.in_channels + 1; // X concatenated with Y
            for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
                detail::add_conv_param(net, "denet" + std::to_string(l), cfg.widths[l], c, k, rng);
                c = cfg.widths[l];
            }
            break;
        }
        case NetKind::DiscriminatorLinear: {
            int c = cfg.in_channels;
            for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
                detail::add_conv_param(net, "alpha" + std::to_string(l), cfg.widths[l], c, k, rng);
                c = cfg.widths[l];
            }
            detail::add_conv_param(net, "alpha_out", 1, c, k, rng);
            break;
        }
    }
    return net;
}

// G(X[, Z]) -> prediction with the extents of X. Extents must be divisible by
// 2^depth. Deterministic given (parameters, X, Z).
inline Tensor generator_forward(Net& net, Tape* tape, const Tensor& X, const Tensor* Z = nullptr,
                                BoundParams* bound = nullptr) {
    if (net.cfg.kind != NetKind::GeneratorUnet)
        throw std::invalid_argument("generator_forward: net is not a generator");
    if (X.shape().size() != 3 || X.shape()[0] != net.cfg.in_channels)
        throw std::invalid_argument("generator_forward: bad input shape " + shape_str(X.shape()));
    const int d = net.cfg.depth();
    const int div = 1 << d;
    if (X.shape()[1] % div != 0 || X.shape()[2] % div != 0)
        throw std::invalid_argument("generator_forward: extents " + shape_str(X.shape()) +
                                    " not divisible by 2^depth = " + std::to_string(div));
    if (net.cfg.latent_channels > 0) {
        if (!Z) throw std::invalid_argument("generator_forward: net expects a latent Z image");
        if (Z->shape() != Shape{net.cfg.latent_channels, X.shape()[1], X.shape()[2]})
            throw std::invalid_argument("generator_forward: bad Z shape " + shape_str(Z->shape()));
    }

    detail::ParamBinder P{&net, tape, bound};
    std::size_t pi = 0;
    auto conv_block = [&](const Tensor& in) {
        Tensor w = P(pi++);
        Tensor b = P(pi++);
        return bias_add_channels(conv2d_same(in, w), b);
    };

    Tensor in = X;
    if (net.cfg.latent_channels > 0) in = concat_channels({X, *Z});

    std::vector<Tensor> enc;
    Tensor t = in;
    for (int l = 0; l < d; ++l) {
        t = leaky_relu(conv_block(t), net.cfg.leaky_slope);
        enc.push_back(t);
        t = avg_pool2x(t);
    }
    t = leaky_relu(conv_block(t), net.cfg.leaky_slope);
    for (int l = d - 1; l >= 0; --l)
        t = leaky_relu(conv_block(concat_channels({upsample_nearest2x(t), enc[static_cast<std::size_t>(l)]})), 0.0);
    Tensor out = conv_block(t); // linear output
    if (net.cfg.input_skip) out = add(out, X);
    return out;
}

// F(X, Y) before the sum pooling; [1, H, W].
inline Tensor discriminator_f_map(Net& net, Tape* tape, const Tensor& X, const Tensor& Y,
                                  BoundParams* bound = nullptr) {
    if (net.cfg.kind != NetKind::DiscriminatorDenet)
        throw std::invalid_argument("discriminator_f_map: net is not a denet discriminator");
    if (X.shape() != Y.shape())
        throw std::invalid_argument("discriminator_f_map: extent mismatch " + shape_str(X.shape()) + " vs " +
                                    shape_str(Y.shape()));
    detail::ParamBinder P{&net, tape, bound};
    std::size_t pi = 0;
    Tensor t = concat_channels({X, Y});
    const std::size_t layers = net.cfg.widths.size();
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor w = P(pi++);
        Tensor b = P(pi++);
        t = bias_add_channels(conv2d_same(t, w), b);
        if (l + 1 < layers) t = leaky_relu(t, net.cfg.leaky_slope);
    }
    return t;
}

// D_X(Y) = sum over pixels of F(X, Y); the model is extent independent.
inline Tensor discriminator_value(Net& net, Tape* tape, const Tensor& X, const Tensor& Y,
                                  BoundParams* bound = nullptr) {
    return reduce_sum(discriminator_f_map(net, tape, X, Y, bound));
}

// alpha(X) for the linear parameterization F(X,Y) = alpha(X) .* Y.
inline Tensor linear_alpha_map(Net& net, Tape* tape, const Tensor& X, BoundParams* bound = nullptr) {
    if (net.cfg.kind != NetKind::DiscriminatorLinear)
        throw std::invalid_argument("linear_alpha_map: net is not a linear discriminator");
    detail::ParamBinder P{&net, tape, bound};
    std::size_t pi = 0;
    Tensor t = X;
    const std::size_t hidden = net.cfg.widths.size();
    for (std::size_t l = 0; l < hidden; ++l) {
        Tensor w = P(pi++);
        Tensor b = P(pi++);
        t = leaky_relu(bias_add_channels(conv2d_same(t, w), b), net.cfg.leaky_slope);
    }
    Tensor w = P(pi++);
    Tensor b = P(pi++);
    return bias_add_channels(conv2d_same(t, w), b);
}

// map / ||map||_q, on tape (differentiable).
inline Tensor normalize_lq(const Tensor& map, double q) {
    Tensor nq = abs_pow_scaled(reduce_sum(abs_pow(map, q)), 1.0, 1.0 / q, false);
    Tensor inv = abs_pow_scaled(nq, 1.0, -1.0, true);
    return mul(map, broadcast_scalar(inv, map.shape()));
}

inline Tensor linear_discriminator_value(Net& net, Tape* tape, const Tensor& X, const Tensor& Y,
                                         BoundParams* bound = nullptr) {
    return reduce_sum(mul(linear_alpha_map(net, tape, X, bound), Y));
}

// ---- checkpoints -------------------------------------------------------------
// "GLCK", version u32 = 1, kind u32, config echo (u32 length + JSON), then
// parameter payloads in declaration order as little-endian f64.

inline nlohmann::json net_config_json(const NetConfig& cfg) {
    return nlohmann::json{{"kind", net_kind_name(cfg.kind)}, {"widths", cfg.widths},
                          {"kernel", cfg.kernel},           {"leaky_slope", cfg.leaky_slope},
                          {"in_channels", cfg.in_channels}, {"latent_channels", cfg.latent_channels},
                          {"input_skip", cfg.input_skip},   {"init_seed", cfg.init_seed}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
    NetConfig cfg;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "generator-unet")
        cfg.kind = NetKind::GeneratorUnet;
    else if (kind == "discriminator-denet")
        cfg.kind = NetKind::DiscriminatorDenet;
    else if (kind == "discriminator-linear")
        cfg.kind = NetKind::DiscriminatorLinear;
    else
        throw std::runtime_error("unknown net kind '" + kind + "'");
    cfg.widths = j.at("widths").get<std::vector<int>>();
    cfg.kernel = j.at("kernel").get<int>();
    cfg.leaky_slope = j.at("leaky_slope").get<double>();
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.latent_channels = j.at("latent_channels").get<int>();
    cfg.input_skip = j.at("input_skip").get<bool>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    return cfg;
}

inline void save_checkpoint(const Net& net, const std::string& path) {
    std::string out;
    out.append("GLCK", 4);
    auto put_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    put_u32(1u);
    put_u32(static_cast<std::uint32_t>(net.cfg.kind));
    const std::string cfg = net_config_json(net.cfg).dump();
    put_u32(static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    for (const Param& p : net.params)
        for (double v : p.value) {
            std::uint64_t u;
            std::memcpy(&u, &v, 8);
            for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
        }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("save_checkpoint: short write to '" + path + "'");
}

inline Net load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (in.size() < 16 || in.compare(0, 4, "GLCK") != 0)
        throw std::runtime_error("load_checkpoint: '" + path + "' is not a checkpoint file");
    auto get_u32 = [&](std::size_t off) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
        return v;
    };
    if (get_u32(4) != 1u) throw std::runtime_error("load_checkpoint: unsupported version");
    const std::uint32_t cfg_len = get_u32(12);
    if (in.size() < 16 + cfg_len) throw std::runtime_error("load_checkpoint: truncated config");
    NetConfig cfg = net_config_from_json(nlohmann::json::parse(in.substr(16, cfg_len)));
    Net net = build_net(cfg);
    std::size_t off = 16 + cfg_len;
    const std::size_t need = net.num_scalars() * 8;
    if (in.size() - off != need)
        throw std::runtime_error("load_checkpoint: expected " + std::to_string(need) + " payload bytes, got " +
                                 std::to_string(in.size() - off));
    for (Param& p : net.params)
        for (double& v : p.value) {
            std::uint64_t u = 0;
            for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + static_cast<std::size_t>(i)])) << (8 * i);
            std::memcpy(&v, &u, 8);
            off += 8;
        }
    return net;
}

} // namespace glab
