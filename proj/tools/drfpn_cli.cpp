// Command-line front end: training, evaluation, gradient checks, the full
// verification suite, feature dumps, and timing.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "drfpn/harness.hpp"
#include "drfpn/suite.hpp"

namespace fs = std::filesystem;
using namespace drfpn;

namespace {

struct CommonOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "run configuration file (key = value lines)");
    cmd->add_option("--seed", opts.seed, "override the config seed");
    cmd->add_option("--out", opts.out_dir, "override the output directory");
}

RunConfig load_config(const CommonOpts& opts) {
    RunConfig cfg =
        opts.config_path.empty() ? RunConfig::defaults() : RunConfig::parse_file(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.out_dir) cfg.out_dir = *opts.out_dir;
    cfg.validate();
    return cfg;
}

std::string fmt3(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

int cmd_train(const CommonOpts& opts) {
    RunConfig cfg = load_config(opts);
    TrainReport report = train(cfg);
    fs::create_directories(cfg.out_dir);
    write_loss_csv(report.step_losses, (fs::path(cfg.out_dir) / "loss.csv").string());
    save_weights(report.params, (fs::path(cfg.out_dir) / "weights.drfw").string());
    std::cout << "steps " << cfg.steps << ", initial loss " << fmt3(report.initial_loss)
              << ", final loss " << fmt3(report.final_loss) << "\n";
    std::cout << "wrote " << cfg.out_dir << "/loss.csv and " << cfg.out_dir << "/weights.drfw\n";
    return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& weights) {
    RunConfig cfg = load_config(opts);
    ModelParams params = build_params(cfg.model, Rng(cfg.seed).child(0).next_u64(), true);
    if (!weights.empty()) load_weights(weights, params);
    auto ds = gen_dataset(Rng(cfg.seed).child(1).next_u64(), cfg.dataset_size, cfg.image_size);
    EvalMetrics m = evaluate(
        [&](const SyntheticSample& s) { return model_forward(s.image, params, cfg.model); }, ds);
    fs::create_directories(cfg.out_dir);
    write_metrics_csv(m, (fs::path(cfg.out_dir) / "metrics.csv").string());
    for (int l = 0; l < 4; ++l) {
        std::cout << "level " << l + 2 << " mse " << fmt3(m.level_mse[l]) << "\n";
    }
    std::cout << "hit rate " << m.hits << "/" << m.total_blobs << " = " << fmt3(m.hit_rate) << "\n";
    return 0;
}

int cmd_gradcheck(const CommonOpts& opts, const std::string& scope_name) {
    RunConfig cfg = load_config(opts);
    SuiteScope scope;
    if (scope_name == "op") scope = SuiteScope::op;
    else if (scope_name == "module") scope = SuiteScope::module;
    else if (scope_name == "full") scope = SuiteScope::full;
    else if (scope_name == "all") scope = SuiteScope::all;
    else throw ConfigError("unknown gradcheck scope '" + scope_name + "'");

    auto results = run_gradcheck_suite(scope, cfg.seed);
    int failures = 0;
    for (const auto& r : results) {
        std::printf("%-32s max_rel %-12.3g thr %-8.1g %s\n", r.name.c_str(), r.max_rel,
                    r.threshold, r.pass ? "pass" : "FAIL");
        failures += r.pass ? 0 : 1;
    }
    std::cout << results.size() << " cases, " << failures << " failed\n";
    return failures == 0 ? 0 : 1;
}

int cmd_verify() {
    auto results = run_acceptance(std::cout);
    for (const auto& r : results) {
        if (!r.pass) return 1;
    }
    return 0;
}

int cmd_dump(const CommonOpts& opts, const std::string& weights, long channels) {
    RunConfig cfg = load_config(opts);
    ModelParams params = build_params(cfg.model, Rng(cfg.seed).child(0).next_u64(), true);
    if (!weights.empty()) load_weights(weights, params);
    auto ds = gen_dataset(Rng(cfg.seed).child(1).next_u64(), 1, cfg.image_size);
    auto files = dump_features(params, cfg.model, ds[0].image, cfg.out_dir, channels);
    std::cout << "wrote " << files.size() << " files to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_bench(const CommonOpts& opts, int repeats) {
    RunConfig cfg = load_config(opts);
    BenchReport r = bench(cfg, repeats);
    std::printf("forward  %8.3f ms\n", r.forward_ms);
    std::printf("backward %8.3f ms\n", r.backward_ms);
    for (const auto& [name, ms] : r.breakdown_ms) std::printf("  %-10s %8.3f ms\n", name.c_str(), ms);
    std::printf("plain fpn forward %8.3f ms\n", r.fpn_forward_ms);
    std::printf("drfpn/fpn ratio %s\n", fmt3(r.drfpn_vs_fpn_ratio).c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual refinement feature pyramid: training and verification harness"};
    app.require_subcommand(1);

    CommonOpts train_opts, eval_opts, grad_opts, verify_opts, dump_opts, bench_opts;
    std::string eval_weights, dump_weights;
    std::string scope = "all";
    long dump_channels = 2;
    int repeats = 5;

    add_common(app.add_subcommand("train", "train on the synthetic dataset"), train_opts);
    auto* eval_cmd = app.add_subcommand("eval", "evaluate metrics on the synthetic dataset");
    add_common(eval_cmd, eval_opts);
    eval_cmd->add_option("--weights", eval_weights, "weight file to load");
    auto* grad_cmd = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
    add_common(grad_cmd, grad_opts);
    grad_cmd->add_option("--scope", scope, "op|module|full|all");
    add_common(app.add_subcommand("verify", "run the full acceptance suite"), verify_opts);
    auto* dump_cmd = app.add_subcommand("dump", "export feature maps as pgm + csv");
    add_common(dump_cmd, dump_opts);
    dump_cmd->add_option("--weights", dump_weights, "weight file to load");
    dump_cmd->add_option("--channels", dump_channels, "channels per level to export");
    auto* bench_cmd = app.add_subcommand("bench", "time forward/backward passes");
    add_common(bench_cmd, bench_opts);
    bench_cmd->add_option("--repeats", repeats, "timing repetitions (median reported)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("train")) return cmd_train(train_opts);
        if (app.got_subcommand("eval")) return cmd_eval(eval_opts, eval_weights);
        if (app.got_subcommand("gradcheck")) return cmd_gradcheck(grad_opts, scope);
        if (app.got_subcommand("verify")) return cmd_verify();
        if (app.got_subcommand("dump")) return cmd_dump(dump_opts, dump_weights, dump_channels);
        if (app.got_subcommand("bench")) return cmd_bench(bench_opts, repeats);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
