#pragma once

#include "glab/diagnostics.hpp"
#include "glab/losses.hpp"
#include "glab/ot.hpp"
#include "glab/rng.hpp"
#include "glab/synth.hpp"
#include "glab/tensor.hpp"

#include <cstdio>
#include <functional>
#include <string>

namespace glab {

// Fast invariant sweep backing the `selftest` subcommand. Each check prints
// one line; returns false when anything fails.
inline bool run_selftest() {
    int failed = 0;
    auto check = [&](const std::string& name, const std::function<bool()>& fn) {
        bool ok = false;
        std::string err;
        try {
            ok = fn();
        } catch (const std::exception& e) {
            err = e.what();
        }
        std::printf("%-58s %s%s%s\n", name.c_str(), ok ? "ok" : "FAIL", err.empty() ? "" : ": ", err.c_str());
        if (!ok) ++failed;
    };

    auto rand_img = [](const Shape& s, std::uint64_t seed, double away = 0.05) {
        Rng rng(seed);
        std::vector<double> v(static_cast<std::size_t>(numel(s)));
        for (double& x : v) {
            do {
                x = rng.uniform(-1.0, 1.0);
            } while (std::fabs(x) < away);
        }
        return Tensor(s, std::move(v));
    };

    check("forward-op gradients vs finite differences", [&] {
        for (std::uint64_t seed = 0; seed < 8; ++seed) {
            const Tensor x = rand_img({1, 8, 8}, seed + 1);
            const Tensor w = rand_img({2, 1, 3, 3}, seed + 100);
            const double e1 = grad_check([&](Tape&, const Tensor& v) {
                return reduce_sum(abs_pow(leaky_relu(conv2d_same(v, w), 0.2), 1.5));
            }, x);
            if (e1 >= 1e-4) return false;
        }
        return true;
    });

    check("double backprop through the gradient penalty", [&] {
        const Tensor x = rand_img({1, 6, 6}, 3);
        const Tensor w2 = rand_img({1, 2, 3, 3}, 4);
        const Tensor w1 = rand_img({2, 1, 3, 3}, 5);
        auto penalty = [&](Tape& t, const Tensor& wv) {
            Tensor y = t.leaf(x);
            Tensor h = leaky_relu(conv2d_same(y, wv), 0.2);
            Tensor d = reduce_sum(conv2d_same(h, w2));
            Tensor g = t.backward(d, true).at(y.node());
            Tensor n = abs_pow_scaled(reduce_sum(abs_pow(g, 2.0)), 1.0, 0.5, false);
            return abs_pow(add_const(n, -1.0), 2.0);
        };
        return grad_check(penalty, w1) < 1e-3;
    });

    check("tape replay is bit-exact", [&] {
        Tape t;
        Tensor x = t.leaf(rand_img({2, 8, 8}, 6));
        Tensor w = t.leaf(rand_img({3, 2, 3, 3}, 7));
        Tensor z = reduce_sum(abs_pow(avg_pool2x(leaky_relu(conv2d_same(x, w), 0.2)), 1.5));
        t.backward(z, true);
        return t.replay_bitexact();
    });

    check("dual-norm identity for linear discriminators", [&] {
        for (double q : {1.05, 1.5, 2.0, 3.0}) {
            Tensor a = rand_img({1, 3, 3}, 8);
            Tape t;
            DiscFn lin = [&a](Tape&, const Tensor&, const Tensor& Y) { return reduce_sum(mul(a, Y)); };
            const double n =
                lipschitz_grad_norm(t, lin, Tensor::zeros({1, 3, 3}), rand_img({1, 3, 3}, 9), q).scalar_value();
            double direct = 0.0;
            for (double v : a.values()) direct += std::pow(std::fabs(v), q);
            direct = std::pow(direct, 1.0 / q);
            if (std::fabs(n - direct) >= 1e-10) return false;
        }
        return true;
    });

    check("linearized closed form equals per-pair lp root", [&] {
        for (double p : {1.0, 1.5, 2.0}) {
            Tensor r = rand_img({1, 4, 4}, 10);
            const double direct = linearized_jw({r}, p);
            const double via_lp = std::pow(lp_loss(Tensor::zeros(r.shape()), r, p).scalar_value(), 1.0 / p);
            if (std::fabs(direct - via_lp) >= 1e-9) return false;
        }
        return true;
    });

    check("gaussian-xe equals lp up to a constant", [&] {
        Tensor b = rand_img({1, 4, 4}, 11);
        const Tensor a1 = rand_img({1, 4, 4}, 12), a2 = rand_img({1, 4, 4}, 13);
        const double d1 = gaussian_xe(a1, b, 1.5).scalar_value() - lp_loss(a1, b, 1.5).scalar_value();
        const double d2 = gaussian_xe(a2, b, 1.5).scalar_value() - lp_loss(a2, b, 1.5).scalar_value();
        return std::fabs(d1 - d2) < 1e-18;
    });

    check("exact OT matches brute force on tiny instances", [&] {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed + 500);
            DiscretePdf P{{Tensor::scalar(rng.uniform(-2, 2)), Tensor::scalar(rng.uniform(-2, 2))}, {0.5, 0.5}};
            DiscretePdf Q{{Tensor::scalar(rng.uniform(-2, 2)), Tensor::scalar(rng.uniform(-2, 2)),
                           Tensor::scalar(rng.uniform(-2, 2))},
                          {0.25, 0.25, 0.5}};
            const double lp = wasserstein_exact(P, Q, 2.0, 1.0).value;
            const double bf = wasserstein_bruteforce(P, Q, 2.0, 1.0);
            if (std::fabs(lp - bf) >= 1e-9) return false;
        }
        return true;
    });

    check("KR dual witness closes the gap", [&] {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed + 600);
            DiscretePdf P{{Tensor::scalar(rng.uniform(-2, 2)), Tensor::scalar(rng.uniform(-2, 2))}, {0.5, 0.5}};
            DiscretePdf Q{{Tensor::scalar(rng.uniform(-2, 2))}, {1.0}};
            if (std::fabs(kr_dual_gap(P, Q, kr_optimal_witness(P, Q, 2.0), 2.0)) >= 1e-8) return false;
        }
        return true;
    });

    check("jw metric axioms on tiny joints", [&] {
        Rng rng(700);
        auto rand_pdf = [&]() {
            DiscretePdf p{{Tensor::scalar(rng.uniform(-2, 2)), Tensor::scalar(rng.uniform(-2, 2))}, {0.5, 0.5}};
            return p;
        };
        std::vector<Tensor> xs{Tensor::scalar(0.0), Tensor::scalar(1.0)};
        std::vector<double> xw{0.5, 0.5};
        for (int i = 0; i < 10; ++i) {
            DiscreteJoint a{xs, {rand_pdf(), rand_pdf()}, xw};
            DiscreteJoint b{xs, {rand_pdf(), rand_pdf()}, xw};
            DiscreteJoint c{xs, {rand_pdf(), rand_pdf()}, xw};
            if (std::fabs(jw_exact(a, b) - jw_exact(b, a)) >= 1e-12) return false;
            if (jw_exact(a, a) >= 1e-10) return false;
            if (jw_exact(a, c) > jw_exact(a, b) + jw_exact(b, c) + 1e-9) return false;
        }
        return true;
    });

    check("jw2 sigma limit approaches jw", [&] {
        Rng rng(800);
        std::vector<Tensor> xs{Tensor::scalar(0.0), Tensor::scalar(1.0)};
        std::vector<double> xw{0.5, 0.5};
        auto rand_pdf = [&]() {
            DiscretePdf p{{Tensor::scalar(rng.uniform(-2, 2)), Tensor::scalar(rng.uniform(-2, 2))}, {0.5, 0.5}};
            return p;
        };
        DiscreteJoint a{xs, {rand_pdf(), rand_pdf()}, xw};
        DiscreteJoint b{xs, {rand_pdf(), rand_pdf()}, xw};
        return std::fabs(jw2_exact(a, b, 0.001) - jw_exact(a, b)) < 1e-3;
    });

    check("ghost model identities and determinism", [&] {
        EventSpec s;
        s.h = 32;
        s.w = 32;
        s.seed = 12345;
        Tensor y1 = gen_primary(s, 0);
        Tensor y2 = gen_primary(s, 0);
        if (y1.values() != y2.values()) return false;
        Tensor x = apply_ghost(y1, 5, 0.0);
        return x.values() == y1.values();
    });

    check("ccgan nonnegativity on random nets", [&] {
        NetConfig fc;
        fc.kind = NetKind::DiscriminatorDenet;
        fc.widths = {4, 1};
        SamplePair pr{rand_img({1, 8, 8}, 20, 0.0), rand_img({1, 8, 8}, 21, 0.0)};
        Tensor fake = rand_img({1, 8, 8}, 22, 0.0);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            fc.init_seed = 3000 + seed;
            Net f = build_net(fc);
            Tape t;
            if (ccgan_loss(t, denet_f_map_fn(f), {&pr}, {fake}).scalar_value() < 0.0) return false;
        }
        return true;
    });

    return failed == 0;
}

} // namespace glab
