#pragma once

#include "glab/nets.hpp"
#include "glab/synth.hpp"
#include "glab/tensor.hpp"

#include <functional>
#include <stdexcept>
#include <vector>

namespace glab {

enum class LossMode { LpOnly, Wcgan, Ccgan };

inline const char* loss_mode_name(LossMode m) {
    switch (m) {
        case LossMode::LpOnly: return "lp-only";
        case LossMode::Wcgan: return "wcgan";
        case LossMode::Ccgan: return "ccgan";
    }
    return "?";
}

inline LossMode loss_mode_from_name(const std::string& s) {
    if (s == "lp-only") return LossMode::LpOnly;
    if (s == "wcgan") return LossMode::Wcgan;
    if (s == "ccgan") return LossMode::Ccgan;
    throw std::invalid_argument("unknown loss mode '" + s + "'");
}

// Every loss hyper-parameter in one place.
struct LossConfig {
    double p = 1.5;         // content-loss exponent p'
    double q = 1.05;        // dual exponent of the Lipschitz constraint; q ~ 1
    double r = 1.0;         // Wasserstein order (oracle side)
    Tensor sigma_weights;   // per-pixel positive weights; undefined = all ones
    double lambda_gp = 10.0;
    bool balance_equal = true;    // equal-contribution EMA balancing
    double lambda_adv_fixed = 1.0;
    double ema_decay = 0.9;
    int n_z = 1; // Monte-Carlo latent draws per input

    // ground-norm exponent paired with q by 1/p + 1/q = 1
    double p_adv() const { return q / (q - 1.0); }

    void validate() const {
        if (p < 1.0) throw std::invalid_argument("LossConfig: p must be >= 1");
        if (q <= 1.0) throw std::invalid_argument("LossConfig: q must be > 1 (the dual norm is non-smooth at 1)");
        if (r < 1.0) throw std::invalid_argument("LossConfig: r must be >= 1");
        if (lambda_gp < 0.0) throw std::invalid_argument("LossConfig: negative gradient-penalty weight");
        if (ema_decay <= 0.0 || ema_decay >= 1.0) throw std::invalid_argument("LossConfig: ema decay must be in (0,1)");
        if (n_z < 1) throw std::invalid_argument("LossConfig: n_z must be >= 1");
        if (sigma_weights.defined()) {
            for (double s : sigma_weights.values())
                if (!(s > 0.0) || !std::isfinite(s))
                    throw std::invalid_argument("LossConfig: sigma weights must be strictly positive and finite");
        }
    }
};

namespace detail {

inline void check_sigma(const Tensor& sigma, const Shape& expect, const char* who) {
    if (!sigma.defined()) return;
    if (sigma.shape() != expect)
        throw std::invalid_argument(std::string(who) + ": sigma weights " + shape_str(sigma.shape()) +
                                    " do not match " + shape_str(expect));
    for (double s : sigma.values())
        if (!(s > 0.0) || !std::isfinite(s))
            throw std::invalid_argument(std::string(who) + ": sigma weights must be strictly positive and finite");
}

inline Tensor reciprocal_values(const Tensor& sigma) {
    std::vector<double> inv(sigma.values().size());
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / sigma.values()[i];
    return Tensor(sigma.shape(), std::move(inv));
}

} // namespace detail

// sum_y |(target - pred)(y) / sigma(y)|^p
inline Tensor lp_loss(const Tensor& pred, const Tensor& target, double p, const Tensor& sigma = Tensor()) {
    if (p < 1.0) throw std::invalid_argument("lp_loss: p must be >= 1");
    detail::check_sigma(sigma, pred.shape(), "lp_loss");
    Tensor r = sub(target, pred);
    if (sigma.defined()) r = mul(r, detail::reciprocal_values(sigma));
    return reduce_sum(abs_pow(r, p));
}

// Cross entropy of the generalized-Gaussian conditional parameterization:
// equal to the L_p loss up to a parameter-independent log-normalizer, which
// is fixed at 0 here. Differences across predictions match lp_loss exactly.
inline Tensor gaussian_xe(const Tensor& pred, const Tensor& target, double p, const Tensor& sigma = Tensor()) {
    return add_const(lp_loss(pred, target, p, sigma), 0.0);
}

// A conditional discriminator: builds the scalar D_X(Y) on the given tape.
using DiscFn = std::function<Tensor(Tape&, const Tensor& X, const Tensor& Y)>;
// The F(X,Y) output-space map of Eq.-(8)-style discriminators.
using FMapFn = std::function<Tensor(Tape&, const Tensor& X, const Tensor& Y)>;

inline DiscFn denet_disc_fn(Net& net, std::vector<BoundParams>* sink = nullptr) {
    return [&net, sink](Tape& t, const Tensor& X, const Tensor& Y) {
        BoundParams bp;
        Tensor v = discriminator_value(net, &t, X, Y, &bp);
        if (sink) sink->push_back(std::move(bp));
        return v;
    };
}

inline FMapFn denet_f_map_fn(Net& net, std::vector<BoundParams>* sink = nullptr) {
    return [&net, sink](Tape& t, const Tensor& X, const Tensor& Y) {
        BoundParams bp;
        Tensor v = discriminator_f_map(net, &t, X, Y, &bp);
        if (sink) sink->push_back(std::move(bp));
        return v;
    };
}

// || sigma .* dD_X(Y)/dY ||_{L_q} at the given Y, built on the tape so it can
// be differentiated again (double backprop).
inline Tensor lipschitz_grad_norm(Tape& tape, const DiscFn& D, const Tensor& X, const Tensor& Y, double q,
                                  const Tensor& sigma = Tensor()) {
    if (q <= 1.0)
        throw std::invalid_argument("lipschitz_grad_norm: q must be > 1 (dual norm is non-smooth at q = 1)");
    detail::check_sigma(sigma, Y.shape(), "lipschitz_grad_norm");
    Tensor y = tape.leaf(Y.detached());
    Tensor v = D(tape, X, y);
    if (!v.is_scalar()) throw std::invalid_argument("lipschitz_grad_norm: discriminator must return a scalar");
    // restrict the recorded sweep to the dY cone; adjoints of the
    // discriminator parameters are not needed to express dD/dY
    GradMap grads = tape.backward(v, /*create_graph=*/true, y.node());
    Tensor g = grads.at(y.node());
    if (sigma.defined()) g = mul(g, sigma);
    return abs_pow_scaled(reduce_sum(abs_pow(g, q)), 1.0, 1.0 / q, false);
}

// lambda * (||sigma .* dD/dY||_q(Yhat) - 1)^2 at Yhat = eps*Yreal + (1-eps)*Yfake.
inline Tensor gradient_penalty(Tape& tape, const DiscFn& D, const Tensor& X, const Tensor& Yreal,
                               const Tensor& Yfake, double q, double lambda_gp, double eps,
                               const Tensor& sigma = Tensor()) {
    if (eps < 0.0 || eps > 1.0) throw std::invalid_argument("gradient_penalty: eps must be in [0,1]");
    if (Yreal.shape() != Yfake.shape())
        throw std::invalid_argument("gradient_penalty: extent mismatch " + shape_str(Yreal.shape()) + " vs " +
                                    shape_str(Yfake.shape()));
    std::vector<double> yhat(Yreal.values().size());
    for (std::size_t i = 0; i < yhat.size(); ++i)
        yhat[i] = eps * Yreal.values()[i] + (1.0 - eps) * Yfake.values()[i];
    Tensor norm = lipschitz_grad_norm(tape, D, X, Tensor(Yreal.shape(), std::move(yhat)), q, sigma);
    return scale(abs_pow(add_const(norm, -1.0), 2.0), lambda_gp);
}

// sum_i [ D(X_i, Y_i) - mean_z D(X_i, fake_i[z]) ]. In the deterministic mode
// fakes[i] holds a single prediction; with latent Z it holds the n_z draws.
inline Tensor wcgan_objective(Tape& tape, const DiscFn& D, const std::vector<const SamplePair*>& batch,
                              const std::vector<std::vector<Tensor>>& fakes) {
    if (batch.empty()) throw std::invalid_argument("wcgan_objective: empty batch");
    if (fakes.size() != batch.size()) throw std::invalid_argument("wcgan_objective: fakes/batch size mismatch");
    Tensor total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (fakes[i].empty()) throw std::invalid_argument("wcgan_objective: no fake draws for element");
        Tensor real = D(tape, batch[i]->x, batch[i]->y);
        Tensor fake_mean;
        for (const Tensor& f : fakes[i]) {
            Tensor v = D(tape, batch[i]->x, f);
            fake_mean = fake_mean.defined() ? add(fake_mean, v) : v;
        }
        fake_mean = scale(fake_mean, 1.0 / static_cast<double>(fakes[i].size()));
        Tensor term = sub(real, fake_mean);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

// sum_i sum_y | F(X_i, Y_i)(y) - F(X_i, G(X_i))(y) |; nonnegative for any F, G.
inline Tensor ccgan_loss(Tape& tape, const FMapFn& F, const std::vector<const SamplePair*>& batch,
                         const std::vector<Tensor>& fakes) {
    if (batch.empty()) throw std::invalid_argument("ccgan_loss: empty batch");
    if (fakes.size() != batch.size()) throw std::invalid_argument("ccgan_loss: fakes/batch size mismatch");
    Tensor total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor fr = F(tape, batch[i]->x, batch[i]->y);
        Tensor ff = F(tape, batch[i]->x, fakes[i]);
        Tensor term = reduce_sum(abs_pow(sub(fr, ff), 1.0));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

// sign( F(X,Y) - F(X,G(X)) ), detached; the sign is a constant of the
// differentiation (its argument does not depend on the D input Y').
inline Tensor ccgan_sign_map(Net& F, const Tensor& X, const Tensor& Y, const Tensor& fake) {
    Tensor fr = discriminator_f_map(F, nullptr, X, Y);
    Tensor ff = discriminator_f_map(F, nullptr, X, fake);
    std::vector<double> s(fr.values().size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double d = fr.values()[i] - ff.values()[i];
        s[i] = (d > 0.0) - (d < 0.0);
    }
    return Tensor(fr.shape(), std::move(s));
}

// The Eq.-(10)-composed discriminator D(Y') = sum_y sign(y) * F(X, Y')(y),
// with the sign supplied as a constant. This is the D the gradient penalty
// applies to in C-CGAN training.
inline DiscFn ccgan_composed_disc_fn(Net& F, const Tensor& sign_map, std::vector<BoundParams>* sink = nullptr) {
    return [&F, sign_map, sink](Tape& t, const Tensor& X, const Tensor& Y) {
        BoundParams bp;
        Tensor fm = discriminator_f_map(F, &t, X, Y, &bp);
        if (sink) sink->push_back(std::move(bp));
        return reduce_sum(mul(fm, sign_map));
    };
}

// Closed form of the linearized JW: sum_i ||r_i||_{L_p}  ( = sum_i (C^p_i)^{1/p} ).
inline double linearized_jw(const std::vector<Tensor>& residuals, double p) {
    if (p < 1.0) throw std::invalid_argument("linearized_jw: p must be >= 1");
    double total = 0.0;
    for (const Tensor& r : residuals) {
        double s = 0.0;
        for (double v : r.values()) s += std::pow(std::fabs(v), p);
        total += std::pow(s, 1.0 / p);
    }
    return total;
}

// Combined training loss bookkeeping: total = lp + lambda_adv * adv.
struct LossComponents {
    double total = 0.0;
    double lp = 0.0;
    double adv = 0.0;
    double lambda_adv = 0.0;
};

inline LossComponents combine_components(double lp_value, double adv_value, double lambda_adv) {
    LossComponents c;
    c.lp = lp_value;
    c.adv = adv_value;
    c.lambda_adv = lambda_adv;
    c.total = lp_value + lambda_adv * adv_value;
    return c;
}

// Equal-contribution balancing state: per-epoch EMAs of |L_p| and |L_adv|,
// with lambda updated once per epoch from the previous epoch's means. The
// EMAs are primed by direct assignment over the first epochs so lambda does
// not chase the critic's initial growth with a stale denominator.
struct BalanceState {
    double ema_lp = 0.0;
    double ema_adv = 0.0;
    int epochs_seen = 0;
    double lambda_adv = 0.0; // warm-up: pure L_p during the first epoch

    static constexpr int kPrimeEpochs = 3;

    void end_epoch(double mean_abs_lp, double mean_abs_adv, double decay) {
        ++epochs_seen;
        if (epochs_seen <= kPrimeEpochs) {
            ema_lp = mean_abs_lp;
            ema_adv = mean_abs_adv;
        } else {
            ema_lp = decay * ema_lp + (1.0 - decay) * mean_abs_lp;
            ema_adv = decay * ema_adv + (1.0 - decay) * mean_abs_adv;
        }
        lambda_adv = ema_lp / (ema_adv + 1e-12);
    }
};

} // namespace glab
