#pragma once

#include "glab/diagnostics.hpp"
#include "glab/losses.hpp"
#include "glab/nets.hpp"
#include "glab/rng.hpp"
#include "glab/synth.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>
#include <vector>

namespace glab {

struct TrainConfig {
    LossMode mode = LossMode::LpOnly;
    LossConfig loss;
    NetConfig gen;
    NetConfig disc;
    int epochs = 40;
    int batch_size = 2;
    int n_critic = 5;
    double lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.9;
    std::uint64_t seed = 1;
    std::vector<int> checkpoint_epochs = {40, 150};
    bool deterministic = true; // zero wall_time column; byte-stable metrics
    int threads = 1;
    std::string out_dir; // empty: keep everything in memory

    TrainConfig() {
        gen.kind = NetKind::GeneratorUnet;
        disc.kind = NetKind::DiscriminatorDenet;
        disc.widths = {16, 16, 16, 16, 1};
    }

    void validate() const {
        loss.validate();
        gen.validate();
        disc.validate();
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
        if (n_critic < 1) throw std::invalid_argument("TrainConfig: n_critic must be >= 1");
        if (lr <= 0.0) throw std::invalid_argument("TrainConfig: learning rate must be positive");
        if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be >= 1");
    }
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    long t = 0;

    void init(const Net& net) {
        m.clear();
        v.clear();
        for (const Param& p : net.params) {
            m.emplace_back(p.value.size(), 0.0);
            v.emplace_back(p.value.size(), 0.0);
        }
        t = 0;
    }
};

struct MetricsRow {
    int epoch = 0;
    long step = 0;
    double loss_total = 0.0;
    double loss_lp = 0.0;
    double loss_adv = 0.0;
    double lambda_adv = 0.0;
    double gp_value = 0.0;
    double critic_objective = 0.0;
    double ghost_residual_train = 0.0;
    double wall_time_s = 0.0;
};

struct TrainState {
    TrainConfig cfg;
    Net G;
    Net D; // unused in lp-only mode
    AdamState adam_g, adam_d;
    BalanceState balance;
    LossMode mode = LossMode::LpOnly;
    int epoch = 0;
    long step = 0;
    std::vector<MetricsRow> history;
};

struct EvalRecord {
    double lp = 0.0;
    double ghost_residual_energy = 0.0;
    double adv = 0.0;
};

namespace detail {

inline void adam_step(Net& net, AdamState& st, const std::vector<std::vector<double>>& grads, double lr,
                      double b1, double b2) {
    st.t += 1;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        std::vector<double>& p = net.params[i].value;
        std::vector<double>& m = st.m[i];
        std::vector<double>& v = st.v[i];
        const std::vector<double>& g = grads[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + 1e-8);
        }
    }
}

// Sums the adjoints of every tape binding of every parameter, in declaration
// order, scaled by `scale`.
inline void accumulate_param_grads(const Net& net, const std::vector<BoundParams>& bindings,
                                   const GradMap& grads, double scale,
                                   std::vector<std::vector<double>>& out) {
    if (out.size() != net.params.size()) {
        out.assign(net.params.size(), {});
        for (std::size_t i = 0; i < net.params.size(); ++i)
            out[i].assign(net.params[i].value.size(), 0.0);
    }
    for (const BoundParams& bp : bindings)
        for (std::size_t i = 0; i < bp.node_ids.size(); ++i) {
            const int id = bp.node_ids[i];
            if (id < 0) continue;
            auto it = grads.find(id);
            if (it == grads.end()) continue;
            const std::vector<double>& g = it->second.values();
            for (std::size_t k = 0; k < g.size(); ++k) out[i][k] += scale * g[k];
        }
}

// Fixed-order fork-join over batch elements; results land in caller-indexed
// slots so reductions stay deterministic for any worker count.
inline void parallel_for(int n, int threads, const std::function<void(int)>& body) {
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&, w]() {
            for (int i = w; i < n; i += threads) body(i);
        });
    for (std::thread& t : pool) t.join();
}

} // namespace detail

inline Tensor sample_latent(const NetConfig& gen, int h, int w, std::uint64_t seed, std::uint64_t tag) {
    Rng rng = Rng::stream(seed ^ 0x5a5aff00ull, tag);
    std::vector<double> z(static_cast<std::size_t>(gen.latent_channels) * h * w);
    for (double& v : z) v = rng.normal();
    return Tensor({gen.latent_channels, h, w}, std::move(z));
}

// One alternating-optimization run. Per generator step: n_critic critic
// updates maximizing the adversarial objective minus the gradient penalty,
// then one generator update minimizing lp + lambda_adv * adversarial term.
// lp-only mode skips the critic entirely.
inline TrainState train(const TrainConfig& cfg_in, const Dataset& data) {
    TrainConfig cfg = cfg_in;
    cfg.validate();
    if (data.size() < 1) throw std::invalid_argument("train: empty dataset");
    const Shape& img_shape = data.pairs[0].x.shape();
    {
        // fail fast on dataset/net mismatch before step 0
        const int div = 1 << cfg.gen.depth();
        if (img_shape[1] % div != 0 || img_shape[2] % div != 0)
            throw std::invalid_argument("train: dataset extents " + shape_str(img_shape) +
                                        " not divisible by the generator's 2^depth");
    }

    TrainState st;
    st.cfg = cfg;
    st.mode = cfg.mode;
    NetConfig gcfg = cfg.gen;
    gcfg.init_seed = hash_u64(cfg.seed, 0xB001ull);
    st.G = build_net(gcfg);
    if (cfg.mode != LossMode::LpOnly) {
        NetConfig dcfg = cfg.disc;
        dcfg.init_seed = hash_u64(cfg.seed, 0xD15Cull);
        st.D = build_net(dcfg);
        // With the sum-pooled head, || dD/dY ||_q at q ~ 1 scales with the
        // pixel count; rescaling the last layer puts the fresh critic near
        // the Lipschitz-feasible set instead of far outside it.
        const double head_scale = 1.0 / (static_cast<double>(img_shape[1]) * img_shape[2]);
        for (double& v : st.D.params[st.D.params.size() - 2].value) v *= head_scale;
        st.adam_d.init(st.D);
    }
    st.adam_g.init(st.G);
    st.balance.lambda_adv = cfg.loss.balance_equal ? 0.0 : cfg.loss.lambda_adv_fixed;

    std::ofstream metrics;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        metrics.open(std::filesystem::path(cfg.out_dir) / "metrics.csv", std::ios::trunc);
        if (!metrics) throw std::runtime_error("train: cannot open metrics.csv under '" + cfg.out_dir + "'");
        metrics << "epoch,step,loss_total,loss_lp,loss_adv,lambda_adv,gp_value,critic_objective,"
                   "ghost_residual_train,wall_time_s\n";
        metrics.precision(17);
    }

    // per-sample ghost lags for the residual metric
    std::vector<int> lags(static_cast<std::size_t>(data.size()));
    for (int i = 0; i < data.size(); ++i)
        lags[static_cast<std::size_t>(i)] = infer_ghost_lag(data.pairs[static_cast<std::size_t>(i)].x,
                                                            data.pairs[static_cast<std::size_t>(i)].y,
                                                            img_shape[1] / 4)
                                                .tau;

    const auto t0 = std::chrono::steady_clock::now();
    const bool adversarial = cfg.mode != LossMode::LpOnly;
    const int n = data.size();
    const int h = img_shape[1], w = img_shape[2];

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        st.epoch = epoch;
        // seeded shuffle
        std::vector<int> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        Rng shuffle_rng = Rng::stream(cfg.seed ^ 0x0e90c4ull, static_cast<std::uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

        double epoch_abs_lp = 0.0, epoch_abs_adv = 0.0;
        long epoch_gen_steps = 0;
        const double lambda_adv =
            cfg.loss.balance_equal ? st.balance.lambda_adv : cfg.loss.lambda_adv_fixed;

        for (int start = 0; start < n; start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, n - start);
            std::vector<const SamplePair*> batch(static_cast<std::size_t>(bsz));
            std::vector<int> batch_lags(static_cast<std::size_t>(bsz));
            for (int b = 0; b < bsz; ++b) {
                batch[static_cast<std::size_t>(b)] = &data.pairs[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
                batch_lags[static_cast<std::size_t>(b)] = lags[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
            }

            double gp_mean = 0.0, critic_obj_mean = 0.0;

            if (adversarial) {
                // fakes are fixed across the critic inner loop (G unchanged)
                std::vector<Tensor> fakes(static_cast<std::size_t>(bsz));
                detail::parallel_for(bsz, cfg.threads, [&](int b) {
                    const SamplePair& pr = *batch[static_cast<std::size_t>(b)];
                    if (cfg.gen.latent_channels > 0) {
                        Tensor z = sample_latent(cfg.gen, h, w,
                                                 cfg.seed + 17 * static_cast<std::uint64_t>(st.step),
                                                 static_cast<std::uint64_t>(b));
                        fakes[static_cast<std::size_t>(b)] = generator_forward(st.G, nullptr, pr.x, &z);
                    } else {
                        fakes[static_cast<std::size_t>(b)] = generator_forward(st.G, nullptr, pr.x);
                    }
                });

                for (int c = 0; c < cfg.n_critic; ++c) {
                    // pre-draw interpolation factors in index order
                    std::vector<double> eps(static_cast<std::size_t>(bsz));
                    Rng eps_rng = Rng::stream(cfg.seed ^ 0x9e5ull,
                                              static_cast<std::uint64_t>(st.step) * 131ull + static_cast<std::uint64_t>(c));
                    for (double& e : eps) e = eps_rng.uniform();

                    std::vector<std::vector<std::vector<double>>> elem_grads(static_cast<std::size_t>(bsz));
                    std::vector<double> elem_obj(static_cast<std::size_t>(bsz), 0.0);
                    std::vector<double> elem_gp(static_cast<std::size_t>(bsz), 0.0);

                    detail::parallel_for(bsz, cfg.threads, [&](int b) {
                        const SamplePair& pr = *batch[static_cast<std::size_t>(b)];
                        const Tensor& fake = fakes[static_cast<std::size_t>(b)];
                        Tape tape;
                        std::vector<BoundParams> sink;
                        Tensor obj, gp;
                        if (cfg.mode == LossMode::Wcgan) {
                            DiscFn dfn = denet_disc_fn(st.D, &sink);
                            obj = wcgan_objective(tape, dfn, {&pr}, {{fake}});
                            gp = gradient_penalty(tape, dfn, pr.x, pr.y, fake, cfg.loss.q,
                                                  cfg.loss.lambda_gp, eps[static_cast<std::size_t>(b)],
                                                  cfg.loss.sigma_weights);
                        } else {
                            Tensor sign = ccgan_sign_map(st.D, pr.x, pr.y, fake);
                            DiscFn dfn = ccgan_composed_disc_fn(st.D, sign, &sink);
                            obj = sub(dfn(tape, pr.x, pr.y), dfn(tape, pr.x, fake));
                            gp = gradient_penalty(tape, dfn, pr.x, pr.y, fake, cfg.loss.q,
                                                  cfg.loss.lambda_gp, eps[static_cast<std::size_t>(b)],
                                                  cfg.loss.sigma_weights);
                        }
                        Tensor critic_loss = add(scale(obj, -1.0), gp);
                        GradMap grads = tape.backward(critic_loss);
                        detail::accumulate_param_grads(st.D, sink, grads, 1.0,
                                                       elem_grads[static_cast<std::size_t>(b)]);
                        elem_obj[static_cast<std::size_t>(b)] = obj.scalar_value();
                        elem_gp[static_cast<std::size_t>(b)] = gp.scalar_value();
                    });

                    std::vector<std::vector<double>> dgrads;
                    double obj_sum = 0.0, gp_sum = 0.0;
                    for (int b = 0; b < bsz; ++b) { // fixed-order reduction
                        auto& eg = elem_grads[static_cast<std::size_t>(b)];
                        if (dgrads.empty())
                            dgrads = std::move(eg);
                        else
                            for (std::size_t i = 0; i < dgrads.size(); ++i)
                                for (std::size_t k = 0; k < dgrads[i].size(); ++k) dgrads[i][k] += eg[i][k];
                        obj_sum += elem_obj[static_cast<std::size_t>(b)];
                        gp_sum += elem_gp[static_cast<std::size_t>(b)];
                    }
                    for (auto& g : dgrads)
                        for (double& v : g) v /= static_cast<double>(bsz);
                    detail::adam_step(st.D, st.adam_d, dgrads, cfg.lr, cfg.beta1, cfg.beta2);
                    if (!st.D.all_finite())
                        throw std::runtime_error("train: NaN discriminator parameter at step " +
                                                 std::to_string(st.step));
                    critic_obj_mean = obj_sum / bsz;
                    gp_mean = gp_sum / bsz;
                }
            }

            // generator update
            std::vector<std::vector<std::vector<double>>> elem_grads(static_cast<std::size_t>(bsz));
            std::vector<double> elem_lp(static_cast<std::size_t>(bsz), 0.0);
            std::vector<double> elem_adv(static_cast<std::size_t>(bsz), 0.0);
            std::vector<double> elem_total(static_cast<std::size_t>(bsz), 0.0);
            std::vector<double> elem_ghost(static_cast<std::size_t>(bsz), 0.0);

            detail::parallel_for(bsz, cfg.threads, [&](int b) {
                const SamplePair& pr = *batch[static_cast<std::size_t>(b)];
                Tape tape;
                std::vector<BoundParams> gsink;
                auto gen_fwd = [&](std::uint64_t ztag) {
                    BoundParams bp;
                    Tensor pred;
                    if (cfg.gen.latent_channels > 0) {
                        Tensor z = sample_latent(cfg.gen, h, w,
                                                 cfg.seed + 31 * static_cast<std::uint64_t>(st.step), ztag);
                        pred = generator_forward(st.G, &tape, pr.x, &z, &bp);
                    } else {
                        pred = generator_forward(st.G, &tape, pr.x, nullptr, &bp);
                    }
                    gsink.push_back(std::move(bp));
                    return pred;
                };

                const int nz = cfg.gen.latent_channels > 0 ? cfg.loss.n_z : 1;
                std::vector<Tensor> preds;
                for (int z = 0; z < nz; ++z)
                    preds.push_back(gen_fwd(static_cast<std::uint64_t>(b) * 97ull + static_cast<std::uint64_t>(z)));

                Tensor lp;
                for (const Tensor& pred : preds) {
                    Tensor t = lp_loss(pred, pr.y, cfg.loss.p, cfg.loss.sigma_weights);
                    lp = lp.defined() ? add(lp, t) : t;
                }
                lp = scale(lp, 1.0 / static_cast<double>(nz));

                Tensor total = lp;
                double adv_value = 0.0;
                if (adversarial) {
                    Tensor adv;
                    if (cfg.mode == LossMode::Wcgan) {
                        Tensor dsum;
                        for (const Tensor& pred : preds) {
                            Tensor v = discriminator_value(st.D, &tape, pr.x, pred);
                            dsum = dsum.defined() ? add(dsum, v) : v;
                        }
                        adv = scale(dsum, -1.0 / static_cast<double>(nz)); // minimize the negated fake term
                    } else {
                        adv = ccgan_loss(tape, denet_f_map_fn(st.D), {&pr}, {preds[0]});
                    }
                    adv_value = adv.scalar_value();
                    if (lambda_adv != 0.0) total = add(total, scale(adv, lambda_adv));
                }

                GradMap grads = tape.backward(total);
                detail::accumulate_param_grads(st.G, gsink, grads, 1.0, elem_grads[static_cast<std::size_t>(b)]);
                elem_lp[static_cast<std::size_t>(b)] = lp.scalar_value();
                elem_adv[static_cast<std::size_t>(b)] = adv_value;
                elem_total[static_cast<std::size_t>(b)] = total.scalar_value();
                elem_ghost[static_cast<std::size_t>(b)] = ghost_residual_energy(
                    preds[0].detached(), pr.y, batch_lags[static_cast<std::size_t>(b)]);
            });

            std::vector<std::vector<double>> ggrads;
            double lp_sum = 0.0, adv_sum = 0.0, total_sum = 0.0, ghost_sum = 0.0;
            for (int b = 0; b < bsz; ++b) {
                auto& eg = elem_grads[static_cast<std::size_t>(b)];
                if (ggrads.empty())
                    ggrads = std::move(eg);
                else
                    for (std::size_t i = 0; i < ggrads.size(); ++i)
                        for (std::size_t k = 0; k < ggrads[i].size(); ++k) ggrads[i][k] += eg[i][k];
                lp_sum += elem_lp[static_cast<std::size_t>(b)];
                adv_sum += elem_adv[static_cast<std::size_t>(b)];
                total_sum += elem_total[static_cast<std::size_t>(b)];
                ghost_sum += elem_ghost[static_cast<std::size_t>(b)];
            }
            for (auto& g : ggrads)
                for (double& v : g) v /= static_cast<double>(bsz);
            detail::adam_step(st.G, st.adam_g, ggrads, cfg.lr, cfg.beta1, cfg.beta2);
            if (!st.G.all_finite())
                throw std::runtime_error("train: NaN generator parameter at step " + std::to_string(st.step));

            epoch_abs_lp += std::fabs(lp_sum / bsz);
            epoch_abs_adv += std::fabs(adv_sum / bsz);
            ++epoch_gen_steps;

            MetricsRow row;
            row.epoch = epoch;
            row.step = st.step;
            row.loss_total = total_sum / bsz;
            row.loss_lp = lp_sum / bsz;
            row.loss_adv = adv_sum / bsz;
            row.lambda_adv = lambda_adv;
            row.gp_value = gp_mean;
            row.critic_objective = critic_obj_mean;
            row.ghost_residual_train = ghost_sum / bsz;
            row.wall_time_s = cfg.deterministic
                                  ? 0.0
                                  : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            st.history.push_back(row);
            if (metrics.is_open()) {
                metrics << row.epoch << ',' << row.step << ',' << row.loss_total << ',' << row.loss_lp << ','
                        << row.loss_adv << ',' << row.lambda_adv << ',' << row.gp_value << ','
                        << row.critic_objective << ',' << row.ghost_residual_train << ',' << row.wall_time_s
                        << '\n';
            }
            ++st.step;
        }

        if (adversarial && cfg.loss.balance_equal)
            st.balance.end_epoch(epoch_abs_lp / static_cast<double>(epoch_gen_steps),
                                 epoch_abs_adv / static_cast<double>(epoch_gen_steps), cfg.loss.ema_decay);

        if (!cfg.out_dir.empty() &&
            std::find(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end(), epoch) !=
                cfg.checkpoint_epochs.end()) {
            save_checkpoint(st.G, (std::filesystem::path(cfg.out_dir) / ("gen-ep" + std::to_string(epoch) + ".glck")).string());
            if (adversarial)
                save_checkpoint(st.D, (std::filesystem::path(cfg.out_dir) / ("disc-ep" + std::to_string(epoch) + ".glck")).string());
        }
    }
    return st;
}

// Held-out metrics; no parameter mutation, idempotent.
inline EvalRecord evaluate(TrainState& st, const Dataset& data, int n_z = 1) {
    if (data.size() < 1) throw std::invalid_argument("evaluate: empty dataset");
    EvalRecord rec;
    const int h = data.pairs[0].x.shape()[1];
    const int w = data.pairs[0].x.shape()[2];
    const bool latent = st.G.cfg.latent_channels > 0;
    const int nz = latent ? std::max(1, n_z) : 1;

    for (int i = 0; i < data.size(); ++i) {
        const SamplePair& pr = data.pairs[static_cast<std::size_t>(i)];
        double lp_i = 0.0;
        Tensor first_pred;
        for (int z = 0; z < nz; ++z) {
            Tensor pred;
            if (latent) {
                Tensor zt = sample_latent(st.G.cfg, h, w, 0xe7a1u, static_cast<std::uint64_t>(i) * 1009ull + static_cast<std::uint64_t>(z));
                pred = generator_forward(st.G, nullptr, pr.x, &zt);
            } else {
                pred = generator_forward(st.G, nullptr, pr.x);
            }
            if (z == 0) first_pred = pred;
            lp_i += lp_loss(pred, pr.y, st.cfg.loss.p, st.cfg.loss.sigma_weights).scalar_value();
        }
        rec.lp += lp_i / nz;
        const GhostLag lag = infer_ghost_lag(pr.x, pr.y, h / 4);
        rec.ghost_residual_energy += ghost_residual_energy(first_pred, pr.y, lag.tau);

        if (st.mode == LossMode::Wcgan) {
            rec.adv += -discriminator_value(st.D, nullptr, pr.x, first_pred).scalar_value();
        } else if (st.mode == LossMode::Ccgan) {
            Tape tape;
            rec.adv += ccgan_loss(tape, denet_f_map_fn(st.D), {&pr}, {first_pred}).scalar_value();
        }
    }
    rec.lp /= data.size();
    rec.ghost_residual_energy /= data.size();
    rec.adv /= data.size();
    return rec;
}

} // namespace glab
