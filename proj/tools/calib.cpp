// calib: experiment runner and analysis emitter.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "calib/error.hpp"
#include "calib/experiment.hpp"

namespace fs = std::filesystem;
using namespace calib;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRunError = 1;
constexpr int kExitConfigError = 2;

std::vector<double> parse_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw ConfigError("--logits: malformed number '" + item + "'");
        out.push_back(v);
    }
    return out;
}

PairContext parse_ctx(const std::string& text) {
    PairContext ctx;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("--ctx: expected key=value, got '" + item + "'");
        const std::string key = item.substr(0, eq);
        const std::string value = item.substr(eq + 1);
        try {
            if (key == "own") {
                ctx.own_history = static_cast<std::uint32_t>(std::stoul(value));
            } else if (key == "partner") {
                ctx.partner_history = static_cast<std::uint32_t>(std::stoul(value));
            } else if (key == "partner_confidence") {
                ctx.partner_confidence = std::stod(value);
            } else {
                throw ConfigError("--ctx: unknown key '" + key + "'");
            }
        } catch (const std::invalid_argument&) {
            throw ConfigError("--ctx: malformed value for '" + key + "'");
        } catch (const std::out_of_range&) {
            throw ConfigError("--ctx: value out of range for '" + key + "'");
        }
    }
    return ctx;
}

int cmd_run(const std::string& config_path, const std::string& output_dir, std::size_t threads) {
    ExperimentConfig cfg = load_config(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    const ExperimentSummary summary = run_experiment(cfg, threads);
    for (const auto& a : summary.aggregates) {
        if (a.runs == 0) {
            std::cout << a.label << ": no successful runs\n";
            continue;
        }
        std::printf("%-16s runs=%zu  test ECE %.3f +- %.3f  AECE %.3f +- %.3f  ACC %.2f +- %.2f\n", a.label.c_str(),
                    a.runs, a.test_ece.mean, a.test_ece.stddev, a.test_aece.mean, a.test_aece.stddev,
                    a.test_accuracy.mean, a.test_accuracy.stddev);
    }
    for (const auto& r : summary.runs) {
        if (!r.ok) std::cerr << "run " << r.label << " seed " << r.seed << " failed: " << r.error << '\n';
    }
    std::cout << "wrote " << (cfg.output_dir / "summary.json").string() << '\n';
    return summary.any_failed() ? kExitRunError : kExitOk;
}

struct AnatomyArgs {
    std::string method;
    std::string logits;
    std::optional<std::size_t> label;
    std::string ctx;
    std::string profile = "default";
    std::string sweep_out;
    std::optional<std::size_t> sweep_target;
    std::string sweep_axis = "logit";
    std::string sweep_branch = "automatic";
    double sweep_from = -5.0;
    double sweep_to = 5.0;
    std::size_t sweep_steps = 101;
};

int cmd_anatomy(const AnatomyArgs& args) {
    const MethodSpec spec = parse_method_string(args.method, profile_margin(args.profile));
    std::vector<double> values = parse_list(args.logits);
    LogitVector z = [&] {
        try {
            return LogitVector(values);
        } catch (const InvalidInput& e) {
            throw ConfigError(std::string("--logits: ") + e.what());
        }
    }();
    const ClassIndex y = args.label.value_or(argmax_tiebreak_lowest(z.values()));
    std::optional<PairContext> ctx;
    if (!args.ctx.empty()) ctx = parse_ctx(args.ctx);

    SweepConfig sweep;
    sweep.target = args.sweep_target;
    sweep.axis = args.sweep_axis == "probability" ? SweepAxis::probability : SweepAxis::logit;
    sweep.branch = args.sweep_branch == "yhat"    ? SweepBranch::yhat
                   : args.sweep_branch == "other" ? SweepBranch::other
                                                  : SweepBranch::automatic;
    sweep.from = args.sweep_from;
    sweep.to = args.sweep_to;
    sweep.steps = args.sweep_out.empty() ? 0 : args.sweep_steps;

    const Anatomy a = anatomy(spec, z, y, ctx, sweep);
    std::cout << "method " << method_to_json(spec).dump() << "  label " << y << "  yhat " << a.decomposition.yhat
              << '\n';
    write_anatomy_table(std::cout, a);
    if (!args.sweep_out.empty()) {
        std::ofstream out(args.sweep_out);
        if (!out) throw IoError("cannot open for writing: " + args.sweep_out);
        write_sweep_csv(out, a.sweep);
        if (!out) throw IoError("write failed: " + args.sweep_out);
        std::cout << "wrote " << args.sweep_out << '\n';
    }
    return kExitOk;
}

int cmd_reg_hist(const std::string& run_dir) {
    for (const auto& [stem, hist] : reg_histogram_dir(run_dir)) {
        std::size_t n = 0;
        for (const auto& b : hist) n += b.count;
        std::printf("%-24s samples=%zu  first-bin share %.4f\n", stem.c_str(), n, first_bin_share(hist));
    }
    return kExitOk;
}

int cmd_ts(const std::string& target, std::size_t bins) {
    nlohmann::json out = nlohmann::json::object();
    if (fs::is_directory(target)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(target)) {
            const std::string name = e.path().filename().string();
            if (name.rfind("logits_", 0) == 0 && e.path().extension() == ".csv") files.push_back(e.path());
        }
        if (files.empty()) throw IoError("no logits_*.csv artifacts in " + target);
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const std::string stem = f.stem().string().substr(std::string("logits_").size());
            out[stem] = temperature_report_to_json(posthoc_ts(read_logits_csv(f), bins));
        }
        std::ofstream file(fs::path(target) / "ts_report.json");
        if (!file) throw IoError("cannot write ts_report.json in " + target);
        file << out.dump(2) << '\n';
    } else {
        out = temperature_report_to_json(posthoc_ts(read_logits_csv(fs::path(target)), bins));
    }
    std::cout << out.dump(2) << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"calibration-loss laboratory"};
    app.require_subcommand(1);

    std::string config_path, output_dir;
    std::size_t threads = 0;
    auto* run = app.add_subcommand("run", "train every (method, seed) in a config");
    run->add_option("config", config_path, "experiment config (JSON)")->required();
    run->add_option("--output-dir", output_dir, "override the config's output_dir");
    run->add_option("--threads", threads, "worker slots (default: CALIB_THREADS or hardware)");

    AnatomyArgs an;
    auto* anat = app.add_subcommand("anatomy", "per-class gradient decomposition and sweep");
    anat->add_option("--method", an.method, "e.g. acls:lambda1=0.1,lambda2=0.01,margin=1")->required();
    anat->add_option("--logits", an.logits, "comma-separated logits")->required();
    anat->add_option("--label", an.label, "ground-truth class (default: the prediction)");
    anat->add_option("--ctx", an.ctx, "own=N,partner=N,partner_confidence=P");
    anat->add_option("--profile", an.profile, "default margin profile")->check(CLI::IsMember({"default", "cifar10"}));
    anat->add_option("--sweep-out", an.sweep_out, "write a sweep CSV here");
    anat->add_option("--sweep-target", an.sweep_target, "class to vary (default: yhat)");
    anat->add_option("--sweep-axis", an.sweep_axis)->check(CLI::IsMember({"logit", "probability"}));
    anat->add_option("--sweep-branch", an.sweep_branch)->check(CLI::IsMember({"automatic", "yhat", "other"}));
    anat->add_option("--sweep-from", an.sweep_from);
    anat->add_option("--sweep-to", an.sweep_to);
    anat->add_option("--sweep-steps", an.sweep_steps);

    std::string run_dir;
    auto* hist = app.add_subcommand("reg-hist", "histogram final-epoch regularizer activity");
    hist->add_option("run-dir", run_dir)->required();

    std::string ts_target;
    std::size_t ts_bins = kDefaultBinCount;
    auto* ts = app.add_subcommand("ts", "post-hoc temperature scaling on saved logits");
    ts->add_option("target", ts_target, "run directory or logits CSV")->required();
    ts->add_option("--bins", ts_bins)->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigError;
    }

    try {
        if (run->parsed()) return cmd_run(config_path, output_dir, threads);
        if (anat->parsed()) return cmd_anatomy(an);
        if (hist->parsed()) return cmd_reg_hist(run_dir);
        if (ts->parsed()) return cmd_ts(ts_target, ts_bins);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfigError;
    } catch (const InvalidInput& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRunError;
    }
    return kExitRunError;
}
