#pragma once

#include "glab/losses.hpp"
#include "glab/nets.hpp"
#include "glab/synth.hpp"
#include "glab/trainer.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace glab {

// Flat dotted-key run configuration ("loss.p=1.5", "train.mode=ccgan", ...).
// Unknown keys are rejected; every run directory receives an echo of the
// fully resolved configuration so a run can be reproduced from it alone.
struct RunConfig {
    // data.*
    EventSpec data;
    int n = 200;
    // gen.* / disc.*
    NetConfig gen;
    NetConfig disc;
    // loss.* / train.*
    TrainConfig train_cfg;
    // paths.*
    std::string dataset_path;
    std::string eval_dataset_path;
    std::string out_dir;
    std::string checkpoint_path;
    std::string disc_checkpoint_path;

    RunConfig() {
        gen.kind = NetKind::GeneratorUnet;
        disc.kind = NetKind::DiscriminatorDenet;
        disc.widths = {16, 16, 16, 16, 1};
    }
};

namespace detail {

inline std::string ints_to_csv(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += std::to_string(v[i]);
        if (i + 1 < v.size()) s += ",";
    }
    return s;
}

inline std::vector<int> csv_to_ints(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw std::invalid_argument("config: bad integer list for '" + key + "': " + s);
        }
    }
    if (out.empty()) throw std::invalid_argument("config: empty integer list for '" + key + "'");
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: bad boolean for '" + key + "': " + v);
}

} // namespace detail

// Serializes the fully resolved configuration, one dotted key per line.
inline std::string run_config_echo(const RunConfig& c) {
    std::ostringstream o;
    o.precision(17);
    o << "data.h=" << c.data.h << "\n";
    o << "data.w=" << c.data.w << "\n";
    o << "data.n=" << c.n << "\n";
    o << "data.events_min=" << c.data.events_min << "\n";
    o << "data.events_max=" << c.data.events_max << "\n";
    o << "data.linear_events=" << (c.data.linear_events ? "true" : "false") << "\n";
    o << "data.hyperbolic_events=" << (c.data.hyperbolic_events ? "true" : "false") << "\n";
    o << "data.ricker_width=" << c.data.ricker_width << "\n";
    o << "data.amp_min=" << c.data.amp_min << "\n";
    o << "data.amp_max=" << c.data.amp_max << "\n";
    o << "data.tau_min=" << c.data.tau_min << "\n";
    o << "data.tau_max=" << c.data.tau_max << "\n";
    o << "data.rho=" << c.data.rho << "\n";
    o << "data.noise=" << c.data.noise << "\n";
    o << "data.seed=" << c.data.seed << "\n";
    o << "gen.widths=" << detail::ints_to_csv(c.gen.widths) << "\n";
    o << "gen.kernel=" << c.gen.kernel << "\n";
    o << "gen.leaky_slope=" << c.gen.leaky_slope << "\n";
    o << "gen.latent_channels=" << c.gen.latent_channels << "\n";
    o << "gen.input_skip=" << (c.gen.input_skip ? "true" : "false") << "\n";
    o << "disc.widths=" << detail::ints_to_csv(c.disc.widths) << "\n";
    o << "disc.kernel=" << c.disc.kernel << "\n";
    o << "disc.leaky_slope=" << c.disc.leaky_slope << "\n";
    o << "loss.p=" << c.train_cfg.loss.p << "\n";
    o << "loss.q=" << c.train_cfg.loss.q << "\n";
    o << "loss.r=" << c.train_cfg.loss.r << "\n";
    o << "loss.lambda_gp=" << c.train_cfg.loss.lambda_gp << "\n";
    o << "loss.balance=" << (c.train_cfg.loss.balance_equal ? "equal" : "fixed") << "\n";
    o << "loss.lambda_adv=" << c.train_cfg.loss.lambda_adv_fixed << "\n";
    o << "loss.ema_decay=" << c.train_cfg.loss.ema_decay << "\n";
    o << "loss.n_z=" << c.train_cfg.loss.n_z << "\n";
    o << "train.mode=" << loss_mode_name(c.train_cfg.mode) << "\n";
    o << "train.epochs=" << c.train_cfg.epochs << "\n";
    o << "train.batch_size=" << c.train_cfg.batch_size << "\n";
    o << "train.n_critic=" << c.train_cfg.n_critic << "\n";
    o << "train.lr=" << c.train_cfg.lr << "\n";
    o << "train.beta1=" << c.train_cfg.beta1 << "\n";
    o << "train.beta2=" << c.train_cfg.beta2 << "\n";
    o << "train.seed=" << c.train_cfg.seed << "\n";
    o << "train.checkpoint_epochs=" << detail::ints_to_csv(c.train_cfg.checkpoint_epochs) << "\n";
    o << "train.deterministic=" << (c.train_cfg.deterministic ? "true" : "false") << "\n";
    o << "train.threads=" << c.train_cfg.threads << "\n";
    o << "paths.dataset=" << c.dataset_path << "\n";
    o << "paths.eval_dataset=" << c.eval_dataset_path << "\n";
    o << "paths.out_dir=" << c.out_dir << "\n";
    o << "paths.checkpoint=" << c.checkpoint_path << "\n";
    o << "paths.disc_checkpoint=" << c.disc_checkpoint_path << "\n";
    return o.str();
}

inline void apply_config_kv(RunConfig& c, const std::string& key, const std::string& value) {
    auto d = [&](const std::string& v) {
        try {
            return std::stod(v);
        } catch (const std::exception&) {
            throw std::invalid_argument("config: bad number for '" + key + "': " + v);
        }
    };
    auto i = [&](const std::string& v) {
        try {
            return std::stoi(v);
        } catch (const std::exception&) {
            throw std::invalid_argument("config: bad integer for '" + key + "': " + v);
        }
    };
    auto u64 = [&](const std::string& v) {
        try {
            return static_cast<std::uint64_t>(std::stoull(v));
        } catch (const std::exception&) {
            throw std::invalid_argument("config: bad integer for '" + key + "': " + v);
        }
    };

    if (key == "data.h") c.data.h = i(value);
    else if (key == "data.w") c.data.w = i(value);
    else if (key == "data.n") c.n = i(value);
    else if (key == "data.events_min") c.data.events_min = i(value);
    else if (key == "data.events_max") c.data.events_max = i(value);
    else if (key == "data.linear_events") c.data.linear_events = detail::parse_bool(value, key);
    else if (key == "data.hyperbolic_events") c.data.hyperbolic_events = detail::parse_bool(value, key);
    else if (key == "data.ricker_width") c.data.ricker_width = d(value);
    else if (key == "data.amp_min") c.data.amp_min = d(value);
    else if (key == "data.amp_max") c.data.amp_max = d(value);
    else if (key == "data.tau_min") c.data.tau_min = i(value);
    else if (key == "data.tau_max") c.data.tau_max = i(value);
    else if (key == "data.rho") c.data.rho = d(value);
    else if (key == "data.noise") c.data.noise = d(value);
    else if (key == "data.seed") c.data.seed = u64(value);
    else if (key == "gen.widths") c.gen.widths = detail::csv_to_ints(value, key);
    else if (key == "gen.kernel") c.gen.kernel = i(value);
    else if (key == "gen.leaky_slope") c.gen.leaky_slope = d(value);
    else if (key == "gen.latent_channels") c.gen.latent_channels = i(value);
    else if (key == "gen.input_skip") c.gen.input_skip = detail::parse_bool(value, key);
    else if (key == "disc.widths") c.disc.widths = detail::csv_to_ints(value, key);
    else if (key == "disc.kernel") c.disc.kernel = i(value);
    else if (key == "disc.leaky_slope") c.disc.leaky_slope = d(value);
    else if (key == "loss.p") c.train_cfg.loss.p = d(value);
    else if (key == "loss.q") c.train_cfg.loss.q = d(value);
    else if (key == "loss.r") c.train_cfg.loss.r = d(value);
    else if (key == "loss.lambda_gp") c.train_cfg.loss.lambda_gp = d(value);
    else if (key == "loss.balance") {
        if (value == "equal") c.train_cfg.loss.balance_equal = true;
        else if (value == "fixed") c.train_cfg.loss.balance_equal = false;
        else throw std::invalid_argument("config: loss.balance must be 'equal' or 'fixed', got " + value);
    }
    else if (key == "loss.lambda_adv") c.train_cfg.loss.lambda_adv_fixed = d(value);
    else if (key == "loss.ema_decay") c.train_cfg.loss.ema_decay = d(value);
    else if (key == "loss.n_z") c.train_cfg.loss.n_z = i(value);
    else if (key == "train.mode") c.train_cfg.mode = loss_mode_from_name(value);
    else if (key == "train.epochs") c.train_cfg.epochs = i(value);
    else if (key == "train.batch_size") c.train_cfg.batch_size = i(value);
    else if (key == "train.n_critic") c.train_cfg.n_critic = i(value);
    else if (key == "train.lr") c.train_cfg.lr = d(value);
    else if (key == "train.beta1") c.train_cfg.beta1 = d(value);
    else if (key == "train.beta2") c.train_cfg.beta2 = d(value);
    else if (key == "train.seed") c.train_cfg.seed = u64(value);
    else if (key == "train.checkpoint_epochs") c.train_cfg.checkpoint_epochs = detail::csv_to_ints(value, key);
    else if (key == "train.deterministic") c.train_cfg.deterministic = detail::parse_bool(value, key);
    else if (key == "train.threads") c.train_cfg.threads = i(value);
    else if (key == "paths.dataset") c.dataset_path = value;
    else if (key == "paths.eval_dataset") c.eval_dataset_path = value;
    else if (key == "paths.out_dir") c.out_dir = value;
    else if (key == "paths.checkpoint") c.checkpoint_path = value;
    else if (key == "paths.disc_checkpoint") c.disc_checkpoint_path = value;
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline RunConfig parse_run_config(std::istream& in, RunConfig base = RunConfig()) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string& s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
        };
        trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key=value: " + line);
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        trim(key);
        trim(value);
        apply_config_kv(base, key, value);
    }
    return base;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = RunConfig()) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("config: cannot open '" + path + "'");
    return parse_run_config(f, std::move(base));
}

// Finalizes the nested configs (net kinds, data plumbing) after key parsing.
inline TrainConfig resolve_train_config(const RunConfig& c) {
    TrainConfig t = c.train_cfg;
    t.gen = c.gen;
    t.gen.kind = NetKind::GeneratorUnet;
    t.disc = c.disc;
    t.disc.kind = NetKind::DiscriminatorDenet;
    t.out_dir = c.out_dir;
    return t;
}

// The desk-scale analog of the two-checkpoint training protocol: 200 pairs at
// 64x64, three loss modes, checkpoints at 40 and 150 epochs. Net sizes and
// n_critic are chosen so the full grid fits a CPU budget.
inline RunConfig fig2_analog_preset() {
    RunConfig c;
    c.data.h = 64;
    c.data.w = 64;
    c.data.events_min = 1;
    c.data.events_max = 4;
    c.data.tau_min = 4;
    c.data.tau_max = 7;
    c.data.ricker_width = 2.0;
    c.data.rho = -1.0;
    c.data.seed = 2024;
    c.n = 200;
    c.gen.widths = {4, 8, 16};
    c.disc.widths = {6, 6, 1};
    c.train_cfg.epochs = 150;
    c.train_cfg.batch_size = 2;
    c.train_cfg.n_critic = 1;
    c.train_cfg.checkpoint_epochs = {40, 150};
    c.train_cfg.deterministic = true;
    return c;
}

} // namespace glab
