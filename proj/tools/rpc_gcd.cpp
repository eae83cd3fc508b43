// rpc_gcd: data generation, training, evaluation, gradient checks, ablations
// and sweeps on synthetic GCD worlds.
//
// Exit codes: 0 ok, 1 usage/config error, 2 numerical failure, 3 I/O error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rpc.hpp"
#include "rpc/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace rpc;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumerical = 2, kIo = 3 };

struct CommonArgs {
    std::optional<fs::path> config;
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
    std::vector<std::string> sets;
};

void add_common(CLI::App* app, CommonArgs& a) {
    app->add_option("--config", a.config, "config file (INI, or JSON incl. a run summary)");
    app->add_option("--seed", a.seed, "root seed; overrides run.seed");
    app->add_option("--out", a.out, "output directory; overrides run.output_dir");
    app->add_option("--set", a.sets, "override, section.key=value (repeatable)");
}

RunConfig load_config(const CommonArgs& a) {
    ConfigAssignments as;
    if (a.config) {
        as = read_config_file(*a.config);
    }
    for (const auto& s : a.sets) {
        as.push_back(parse_override(s));
    }
    if (a.seed) {
        as.emplace_back("run.seed", std::to_string(*a.seed));
    }
    if (a.out) {
        as.emplace_back("run.output_dir", a.out->string());
    }
    return build_config(as);
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create " + dir.string() + ": " + ec.message());
    }
}

std::string acc_line(const GcdAccuracy& a) {
    auto cell = [](const std::optional<double>& v) {
        char b[16];
        std::snprintf(b, sizeof b, "%.4f", v.value_or(0.0));
        return v ? std::string(b) : std::string("-");
    };
    char buf[96];
    std::snprintf(buf, sizeof buf, "All %.4f  Old %s  New %s", a.all, cell(a.old_acc).c_str(), cell(a.new_acc).c_str());
    return buf;
}

nlohmann::json acc_json(const GcdAccuracy& a) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"all", a.all}, {"old", opt(a.old_acc)}, {"new", opt(a.new_acc)}, {"n_old", a.n_old}, {"n_new", a.n_new}};
}

std::vector<double> parse_list(const std::string& s, const char* what) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        v.push_back(config_detail::parse_value<double>(config_detail::trim(item), what));
    }
    if (v.empty()) {
        throw ConfigError(std::string(what) + " is empty");
    }
    return v;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> v;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        v.push_back(config_detail::parse_value<std::uint64_t>(config_detail::trim(item), "--seeds"));
    }
    if (v.empty()) {
        throw ConfigError("--seeds is empty");
    }
    return v;
}

int cmd_gen_data(const CommonArgs& a) {
    const RunConfig cfg = load_config(a);
    make_dir(cfg.output_dir);
    const World w = generate_world(cfg.world);
    const fs::path path = cfg.output_dir / "dataset.csv";
    save_dataset(w.split, w.truth, path);
    io_detail::write_file(cfg.output_dir / "config.ini", config_ini(cfg));
    std::printf("wrote %s (%zu labeled, %zu unlabeled, dim %zu)\n", path.string().c_str(), w.split.labeled.rows(),
                w.split.unlabeled.rows(), w.split.dim());
    std::printf("nearest-center accuracy %.4f\n", nearest_center_accuracy(w));
    return kOk;
}

struct TrainArgs {
    std::optional<fs::path> data;
    std::optional<fs::path> resume;
    std::optional<int> stop_after;
    bool baseline = false;
    bool quiet = false;
};

int cmd_train(const CommonArgs& a, const TrainArgs& t) {
    const RunConfig cfg = load_config(a);
    make_dir(cfg.output_dir);

    GcdSplit split;
    std::optional<EvalHandle> truth;
    if (t.data) {
        split = load_dataset(*t.data);
        if (fs::exists(truth_path(*t.data))) {
            truth = load_truth(*t.data);
        }
    } else {
        World w = generate_world(cfg.world);
        split = std::move(w.split);
        truth = std::move(w.truth);
    }
    check_compatible(cfg.train, split);

    RunOptions opt;
    opt.output_dir = cfg.output_dir;
    opt.resume_from = t.resume;
    opt.stop_after_epoch = t.stop_after;
    opt.config_echo = config_json(cfg);
    if (!t.quiet) {
        opt.on_epoch = [&cfg](const EpochMetrics& m) {
            std::printf("epoch %3d/%d  lr %.4f  total %.4f  rho_id %.3f", m.epoch + 1, cfg.train.epochs, m.lr, m.total,
                        m.rho_id);
            if (m.all) {
                std::printf("  All %.4f Old %.4f New %.4f", *m.all, m.old_acc.value_or(0.0), m.new_acc.value_or(0.0));
            }
            std::printf("\n");
            std::fflush(stdout);
        };
    }
    io_detail::write_file(cfg.output_dir / "config.json", config_json(cfg).dump(2) + "\n");
    const Evaluator eval = truth ? make_evaluator(*truth) : Evaluator{};
    const RunResult res = t.baseline ? run_training<Objective::baseline>(cfg.train, split, eval, opt)
                                     : run_training<Objective::rpc>(cfg.train, split, eval, opt);
    std::printf("%s after %zu epochs (%.1f s); outputs in %s\n", res.completed ? "finished" : "stopped",
                res.metrics.epochs.size(), res.wall_seconds, cfg.output_dir.string().c_str());
    if (truth) {
        std::printf("%s\n", acc_line(gcd_accuracy(predict_clusters(res.params, split.unlabeled), *truth)).c_str());
    }
    return kOk;
}

int cmd_eval(const CommonArgs& a, const fs::path& checkpoint, const std::optional<fs::path>& data) {
    const ModelParams params = read_model(load_checkpoint(checkpoint));
    GcdSplit split;
    EvalHandle truth;
    std::optional<fs::path> out;
    if (data) {
        split = load_dataset(*data);
        truth = load_truth(*data);
        if (a.out) {
            out = *a.out;
        }
    } else {
        const RunConfig cfg = load_config(a);
        World w = generate_world(cfg.world);
        split = std::move(w.split);
        truth = std::move(w.truth);
        if (a.out || a.config) {
            out = cfg.output_dir;
        }
    }
    const auto& m = params.config;
    if (split.dim() != static_cast<std::size_t>(m.input_dim) || split.num_classes != m.num_classes ||
        split.num_known != m.num_known) {
        throw DimensionError("checkpoint model (dim " + std::to_string(m.input_dim) + ", K " +
                             std::to_string(m.num_classes) + ", C_L " + std::to_string(m.num_known) +
                             ") does not match dataset (dim " + std::to_string(split.dim()) + ", K " +
                             std::to_string(split.num_classes) + ", C_L " + std::to_string(split.num_known) + ")");
    }
    const GcdAccuracy acc = gcd_accuracy(predict_clusters(params, split.unlabeled), truth);
    std::printf("%s\n", acc_line(acc).c_str());
    if (out) {
        make_dir(*out);
        io_detail::write_file(*out / "eval.json", acc_json(acc).dump(2) + "\n");
    }
    return kOk;
}

int cmd_gradcheck(std::size_t instances, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto rows = run_gradcheck_suite(instances, seed);
    std::printf("%s", gradcheck_table(rows).c_str());
    std::printf("%.2f s\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    for (const auto& r : rows) {
        if (!r.passed()) {
            return kNumerical;
        }
    }
    return kOk;
}

std::vector<WorldConfig> worlds_for(const RunConfig& cfg, const std::vector<std::uint64_t>& world_seeds) {
    std::vector<WorldConfig> ws;
    for (auto s : world_seeds) {
        WorldConfig w = cfg.world;
        w.seed = s;
        ws.push_back(w);
    }
    return ws;
}

int cmd_ablate(const CommonArgs& a, const std::string& variants, const std::string& seeds) {
    const RunConfig cfg = load_config(a);
    std::vector<AblationSpec> specs;
    const auto all = standard_ablation();
    if (variants == "all") {
        specs = all;
    } else {
        std::stringstream ss(variants);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const std::string k = config_detail::trim(item);
            if (k == "full") {
                specs.push_back(all[0]);
            } else if (k == "fusion") {
                specs.push_back(all[1]);
            } else if (k == "align") {
                specs.push_back(all[2]);
            } else if (k == "discover") {
                specs.push_back(all[3]);
            } else {
                throw ConfigError("unknown variant '" + k + "' (expected full, fusion, align, discover)");
            }
        }
    }
    make_dir(cfg.output_dir);
    const auto ws = worlds_for(cfg, parse_seeds(seeds));
    const std::vector<std::uint64_t> train_seeds{cfg.seed};
    const AblationTable t = run_ablation(cfg.train, specs, ws, train_seeds, cfg.output_dir / "runs");
    io_detail::write_file(cfg.output_dir / "ablation.csv", ablation_csv(t));
    io_detail::write_file(cfg.output_dir / "ablation.txt", ablation_text(t));
    io_detail::write_file(cfg.output_dir / "config.json", config_json(cfg).dump(2) + "\n");
    std::printf("%s", ablation_text(t).c_str());
    return kOk;
}

int cmd_sweep(const CommonArgs& a, const std::string& param, const std::string& grid, const std::string& seeds) {
    const RunConfig cfg = load_config(a);
    const SweepParam p = parse_sweep_param(param);
    const auto g = parse_list(grid, "--grid");
    make_dir(cfg.output_dir);
    const auto ws = worlds_for(cfg, parse_seeds(seeds));
    const std::vector<std::uint64_t> train_seeds{cfg.seed};
    const auto pts = run_sweep(p, g, cfg.train, ws, train_seeds, cfg.output_dir / "runs");
    const std::string csv = sweep_csv(p, pts);
    io_detail::write_file(cfg.output_dir / ("sweep_" + param + ".csv"), csv);
    io_detail::write_file(cfg.output_dir / "config.json", config_json(cfg).dump(2) + "\n");
    std::printf("%s", csv.c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Relational pattern consistency for generalized category discovery on synthetic worlds"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, ablate_args, sweep_args;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic world and save it");
    add_common(gen, gen_args);

    TrainArgs targs;
    auto* train = app.add_subcommand("train", "train on a generated or saved world");
    add_common(train, train_args);
    train->add_option("--data", targs.data, "dataset file (default: generate from config)");
    train->add_option("--resume", targs.resume, "state checkpoint to resume from");
    train->add_option("--stop-after-epoch", targs.stop_after, "stop once this many epochs are done");
    train->add_flag("--baseline", targs.baseline, "use the trainer with RPC terms compiled out");
    train->add_flag("--quiet", targs.quiet, "no per-epoch lines");

    fs::path ckpt;
    std::optional<fs::path> eval_data;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, eval_args);
    eval->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    eval->add_option("--data", eval_data, "dataset file with sibling .truth (default: generate from config)");

    std::size_t gc_instances = 20;
    std::uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss");
    gc->add_option("--instances", gc_instances, "random instances per loss")->check(CLI::PositiveNumber);
    gc->add_option("--seed", gc_seed, "seed for the random instances");

    std::string variants = "all", ablate_seeds = "1,2,3";
    auto* ablate = app.add_subcommand("ablate", "ablation table over world seeds");
    add_common(ablate, ablate_args);
    ablate->add_option("--variants", variants, "all, or a list of full,fusion,align,discover");
    ablate->add_option("--seeds", ablate_seeds, "comma-separated world seeds");

    std::string sweep_param, sweep_grid, sweep_seeds = "1,2,3";
    auto* sweep = app.add_subcommand("sweep", "one-parameter sweep");
    add_common(sweep, sweep_args);
    sweep->add_option("--param", sweep_param, "lambda1, lambda2 or alpha")->required();
    sweep->add_option("--grid", sweep_grid, "comma-separated values")->required();
    sweep->add_option("--seeds", sweep_seeds, "comma-separated world seeds");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) {
            return cmd_gen_data(gen_args);
        }
        if (*train) {
            return cmd_train(train_args, targs);
        }
        if (*eval) {
            return cmd_eval(eval_args, ckpt, eval_data);
        }
        if (*gc) {
            return cmd_gradcheck(gc_instances, gc_seed);
        }
        if (*ablate) {
            return cmd_ablate(ablate_args, variants, ablate_seeds);
        }
        if (*sweep) {
            return cmd_sweep(sweep_args, sweep_param, sweep_grid, sweep_seeds);
        }
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kNumerical;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kIo;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
