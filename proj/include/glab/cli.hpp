#pragma once

#include "glab/config.hpp"
#include "glab/diagnostics.hpp"
#include "glab/ot.hpp"
#include "glab/selftest.hpp"
#include "glab/trainer.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

namespace glab {

namespace detail {

inline int resolve_threads(const RunConfig& c) {
    if (const char* env = std::getenv("GLAB_THREADS")) {
        try {
            return std::max(1, std::stoi(env));
        } catch (const std::exception&) {
            throw std::invalid_argument("GLAB_THREADS is not an integer: " + std::string(env));
        }
    }
    if (c.train_cfg.deterministic) return 1;
    return std::max(1u, std::thread::hardware_concurrency());
}

inline void echo_config(const RunConfig& c, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const auto path = std::filesystem::path(out_dir) / "config.txt";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write config echo to '" + path.string() + "'");
    f << run_config_echo(c);
}

inline Dataset dataset_for(const RunConfig& c) {
    if (!c.dataset_path.empty()) return load_dataset(c.dataset_path);
    return make_dataset(c.data, c.n);
}

// `oracle` input: one directive or support point per line.
//   ground <p>     order <r>    sigma <s>   (jw2 only)
//   P <weight> <v0> [v1 ...]    Q <weight> <v0> [v1 ...]
inline int run_oracle(std::istream& in, std::ostream& out) {
    DiscretePdf P, Q;
    double ground = 2.0, order = 1.0;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        std::string tag;
        if (!(ss >> tag)) continue;
        if (tag == "ground") {
            ss >> ground;
        } else if (tag == "order") {
            ss >> order;
        } else if (tag == "P" || tag == "Q") {
            double wgt;
            if (!(ss >> wgt))
                throw std::invalid_argument("oracle: line " + std::to_string(lineno) + ": missing weight");
            std::vector<double> vals;
            double v;
            while (ss >> v) vals.push_back(v);
            if (vals.empty())
                throw std::invalid_argument("oracle: line " + std::to_string(lineno) + ": missing support values");
            DiscretePdf& dst = tag == "P" ? P : Q;
            dst.support.push_back(Tensor({static_cast<int>(vals.size())}, vals));
            dst.weights.push_back(wgt);
        } else {
            throw std::invalid_argument("oracle: line " + std::to_string(lineno) + ": unknown tag '" + tag + "'");
        }
    }
    if (P.support.empty() || Q.support.empty())
        throw std::invalid_argument("oracle: need at least one P and one Q support point");

    WassersteinResult res = wasserstein_exact(P, Q, ground, order);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", res.value);
    out << "wasserstein = " << buf << "\n";
    if (order == 1.0) {
        const double gap = kr_dual_gap(P, Q, kr_optimal_witness(P, Q, ground), ground);
        std::snprintf(buf, sizeof buf, "%.12g", gap);
        out << "kr_dual_gap = " << buf << "\n";
    }
    return 0;
}

} // namespace detail

// Subcommand dispatch; exit 0 on success, 1 on validation errors, 2 on
// runtime failure.
inline int cli_dispatch(int argc, const char* const* argv) {
    CLI::App app{"adversarial-loss laboratory for deterministic image-to-image tasks"};
    app.require_subcommand(1);

    std::string config_path, dataset_out, oracle_spec, preset;
    RunConfig base;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "configuration file with key=value lines");
        cmd->add_option("--preset", preset, "named preset (fig2-analog)")->check(CLI::IsMember({"fig2-analog"}));
    };
    // flag overrides, applied after the file
    std::vector<std::pair<std::string, std::string>> overrides;
    auto add_override = [&](CLI::App* cmd, const std::string& flag, const std::string& key) {
        cmd->add_option_function<std::string>(
            flag, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); });
    };

    CLI::App* gen_data = app.add_subcommand("gen-data", "generate a synthetic ghost dataset");
    gen_data->set_help_flag("--help", "print help"); // frees --h for the height flag
    add_common(gen_data);
    gen_data->add_option("--out", dataset_out, "output dataset file")->required();
    add_override(gen_data, "--n", "data.n");
    add_override(gen_data, "--h", "data.h");
    add_override(gen_data, "--w", "data.w");
    add_override(gen_data, "--seed", "data.seed");
    add_override(gen_data, "--noise", "data.noise");

    CLI::App* train_cmd = app.add_subcommand("train", "run a training configuration");
    add_common(train_cmd);
    add_override(train_cmd, "--mode", "train.mode");
    add_override(train_cmd, "--epochs", "train.epochs");
    add_override(train_cmd, "--seed", "train.seed");
    add_override(train_cmd, "--out", "paths.out_dir");
    add_override(train_cmd, "--data", "paths.dataset");
    add_override(train_cmd, "--batch", "train.batch_size");
    add_override(train_cmd, "--n-critic", "train.n_critic");
    add_override(train_cmd, "--threads", "train.threads");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(eval_cmd);
    add_override(eval_cmd, "--checkpoint", "paths.checkpoint");
    add_override(eval_cmd, "--disc-checkpoint", "paths.disc_checkpoint");
    add_override(eval_cmd, "--data", "paths.dataset");
    add_override(eval_cmd, "--mode", "train.mode");
    add_override(eval_cmd, "--n-z", "loss.n_z");

    CLI::App* diagnose = app.add_subcommand("diagnose", "emit F-map / adjoint-input diagnostics");
    add_common(diagnose);
    int diag_index = 0;
    diagnose->add_option("--index", diag_index, "sample index to diagnose");
    add_override(diagnose, "--checkpoint", "paths.checkpoint");
    add_override(diagnose, "--disc-checkpoint", "paths.disc_checkpoint");
    add_override(diagnose, "--data", "paths.dataset");
    add_override(diagnose, "--mode", "train.mode");
    add_override(diagnose, "--out", "paths.out_dir");

    CLI::App* oracle = app.add_subcommand("oracle", "exact Wasserstein values for discrete distributions");
    oracle->add_option("--spec", oracle_spec, "text description; '-' reads stdin")->required();

    app.add_subcommand("selftest", "run the fast invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (app.got_subcommand("selftest")) return run_selftest() ? 0 : 2;

        if (app.got_subcommand("oracle")) {
            if (oracle_spec == "-") return detail::run_oracle(std::cin, std::cout);
            std::ifstream f(oracle_spec);
            if (!f) throw std::invalid_argument("oracle: cannot open '" + oracle_spec + "'");
            return detail::run_oracle(f, std::cout);
        }

        RunConfig cfg = preset == "fig2-analog" ? fig2_analog_preset() : RunConfig();
        if (!config_path.empty()) cfg = load_run_config(config_path, std::move(cfg));
        for (const auto& [key, value] : overrides) apply_config_kv(cfg, key, value);

        if (app.got_subcommand("gen-data")) {
            cfg.data.validate();
            Dataset ds = make_dataset(cfg.data, cfg.n);
            save_dataset(ds, dataset_out);
            std::cout << "wrote " << ds.size() << " pairs (" << cfg.data.h << "x" << cfg.data.w << ") to "
                      << dataset_out << "\n";
            return 0;
        }

        if (app.got_subcommand("train")) {
            TrainConfig t = resolve_train_config(cfg);
            t.threads = detail::resolve_threads(cfg);
            if (t.out_dir.empty()) throw std::invalid_argument("train: an output directory is required (--out)");
            detail::echo_config(cfg, t.out_dir);
            Dataset ds = detail::dataset_for(cfg);
            TrainState st = train(t, ds);
            save_checkpoint(st.G, (std::filesystem::path(t.out_dir) / "gen-final.glck").string());
            if (cfg.train_cfg.mode != LossMode::LpOnly)
                save_checkpoint(st.D, (std::filesystem::path(t.out_dir) / "disc-final.glck").string());
            std::cout << "trained " << loss_mode_name(t.mode) << " for " << t.epochs << " epochs; metrics in "
                      << t.out_dir << "/metrics.csv\n";
            return 0;
        }

        if (app.got_subcommand("eval")) {
            if (cfg.checkpoint_path.empty()) throw std::invalid_argument("eval: --checkpoint is required");
            TrainState st;
            st.cfg = resolve_train_config(cfg);
            st.mode = cfg.train_cfg.mode;
            st.G = load_checkpoint(cfg.checkpoint_path);
            if (st.mode != LossMode::LpOnly) {
                if (cfg.disc_checkpoint_path.empty())
                    throw std::invalid_argument("eval: adversarial modes need --disc-checkpoint");
                st.D = load_checkpoint(cfg.disc_checkpoint_path);
            }
            Dataset ds = detail::dataset_for(cfg);
            EvalRecord rec = evaluate(st, ds, cfg.train_cfg.loss.n_z);
            std::cout.precision(12);
            std::cout << "lp_loss = " << rec.lp << "\n"
                      << "ghost_residual_energy = " << rec.ghost_residual_energy << "\n"
                      << "adversarial = " << rec.adv << "\n";
            return 0;
        }

        if (app.got_subcommand("diagnose")) {
            if (cfg.checkpoint_path.empty()) throw std::invalid_argument("diagnose: --checkpoint is required");
            if (cfg.out_dir.empty()) throw std::invalid_argument("diagnose: --out is required");
            Net G = load_checkpoint(cfg.checkpoint_path);
            std::optional<Net> D;
            if (!cfg.disc_checkpoint_path.empty()) D = load_checkpoint(cfg.disc_checkpoint_path);
            Dataset ds = detail::dataset_for(cfg);
            if (diag_index < 0 || diag_index >= ds.size())
                throw std::invalid_argument("diagnose: --index out of range");
            const SamplePair& pr = ds.pairs[static_cast<std::size_t>(diag_index)];

            DiagnosticReport rep;
            rep.epoch = cfg.train_cfg.epochs;
            rep.mode = loss_mode_name(cfg.train_cfg.mode);
            rep.seed = cfg.train_cfg.seed;
            Tensor pred = generator_forward(G, nullptr, pr.x);
            const GhostLag lag = infer_ghost_lag(pr.x, pr.y, pr.x.shape()[1] / 4);
            rep.ghost_residual = ghost_residual_energy(pred, pr.y, lag.tau);
            rep.images.emplace_back("input", pr.x);
            rep.images.emplace_back("target", pr.y);
            rep.images.emplace_back("pred", pred);
            rep.images.emplace_back(
                "adjoint", adjoint_input(cfg.train_cfg.mode, G, D ? &*D : nullptr, pr.x, pr.y, cfg.train_cfg.loss));
            if (D && cfg.train_cfg.mode != LossMode::LpOnly)
                rep.images.emplace_back("fmap", f_map(*D, pr.x, pr.y));
            emit_report(rep, cfg.out_dir);
            std::cout << "ghost_residual_energy = " << rep.ghost_residual << "\n"
                      << "report written to " << cfg.out_dir << "\n";
            return 0;
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace glab
