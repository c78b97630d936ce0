#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"

#include "gaitlab/config.hpp"
#include "gaitlab/dataset.hpp"
#include "gaitlab/evaluate.hpp"
#include "gaitlab/gradcheck.hpp"
#include "gaitlab/model.hpp"
#include "gaitlab/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

int cmd_gen_data(const std::string& out, int subjects, int seqs, int frames,
                 std::uint64_t seed) {
    gaitlab::data::GenOptions opt;
    opt.out_dir = out;
    opt.n_subjects = subjects;
    opt.seqs_per_subject = seqs;
    opt.frames_per_sequence = frames;
    opt.seed = seed;
    gaitlab::data::DatasetIndex index = gaitlab::data::generate_dataset(opt);
    std::printf("wrote %zu subjects to %s\n", index.subjects.size(), index.root.c_str());
    return kExitOk;
}

// everything wrong with user-supplied inputs maps to the usage exit code
template <typename Fn>
auto load_or_usage_error(const char* what, Fn&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        throw CLI::ValidationError(what, e.what());
    }
}

int cmd_train(const std::string& config_path, const std::string& data_override,
              const std::string& out_override) {
    gaitlab::config::RunConfig cfg = load_or_usage_error(
        "train", [&] { return gaitlab::config::RunConfig::load(config_path); });
    if (!data_override.empty()) cfg.data_dir = data_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (cfg.data_dir.empty() || cfg.out_dir.empty())
        throw CLI::ValidationError("train", "both a data directory and an output directory are required");
    if (!std::filesystem::exists(cfg.data_dir))
        throw CLI::ValidationError("train", "data directory does not exist: " + cfg.data_dir);

    gaitlab::data::DatasetIndex index =
        load_or_usage_error("train", [&] { return gaitlab::data::load_index(cfg.data_dir); });
    gaitlab::net::NetConfig net_cfg = gaitlab::net::scaled_config(cfg.width_scale);
    net_cfg.n_classes = static_cast<int>(index.train_subjects.size());
    gaitlab::trainer::TrainResult result =
        gaitlab::trainer::train(cfg.train, net_cfg, index, cfg.out_dir, cfg.sensor);
    std::printf("trained %d iterations, checkpoint %s\n", result.iterations_run,
                result.final_checkpoint.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data, std::uint64_t seed, int frames,
             const std::string& subset, const std::string& report_path) {
    if (!std::filesystem::exists(ckpt))
        throw CLI::ValidationError("eval", "checkpoint does not exist: " + ckpt);
    if (!std::filesystem::exists(data))
        throw CLI::ValidationError("eval", "data directory does not exist: " + data);

    gaitlab::data::DatasetIndex index =
        load_or_usage_error("eval", [&] { return gaitlab::data::load_index(data); });
    gaitlab::net::Model model =
        load_or_usage_error("eval", [&] { return gaitlab::net::load_checkpoint(ckpt); });
    gaitlab::eval::EvalOptions opts;
    opts.checkpoint_id = std::filesystem::path(ckpt).filename().string();
    opts.n_frames = frames;
    if (subset == "cross_view")
        opts.subset = gaitlab::eval::SubsetFilter::cross_view;
    else if (subset == "night")
        opts.subset = gaitlab::eval::SubsetFilter::night;
    gaitlab::eval::MetricsReport report = gaitlab::eval::evaluate(model, index, seed, opts);

    if (!report_path.empty()) {
        std::ofstream out(report_path);
        if (!out) throw std::runtime_error("cannot write report: " + report_path);
        out << report.to_json().dump(2) << "\n";
        std::ofstream csv(report_path + ".csv");
        csv << report.frames_csv();
    }
    std::printf("rank1=%.2f rank5=%.2f map=%.2f\n", report.rank1, report.rank5, report.map);
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, bool inject_fault) {
    gaitlab::gradcheck::Report report = gaitlab::gradcheck::run(seed, inject_fault);
    for (const auto& g : report.groups)
        std::printf("%-24s max_rel_err=%.3e\n", g.name.c_str(), g.max_rel_err);
    std::printf("overall max_rel_err=%.3e (%s)\n", report.max_rel_err,
                report.pass ? "pass" : "FAIL");
    return report.pass ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale LiDAR gait recognition pipeline"};
    app.require_subcommand(1);

    std::string out_dir, config_path, data_dir, ckpt, subset = "all", report_path;
    int subjects = 8, seqs = 4, frames_per_seq = 12, eval_frames = 0;
    std::uint64_t seed = 1;
    bool inject_fault = false;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic walking dataset");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--subjects", subjects, "number of subjects")->check(CLI::Range(1, 1000000));
    gen->add_option("--seqs", seqs, "sequences per subject")->check(CLI::Range(1, 1000000));
    gen->add_option("--frames", frames_per_seq, "frames per sequence")->check(CLI::Range(1, 1000000));
    gen->add_option("--seed", seed, "dataset seed")->envname("GAITLAB_SEED");

    CLI::App* train = app.add_subcommand("train", "train a model from a run configuration");
    train->add_option("--config", config_path, "run configuration (json)")->required();
    train->add_option("--data", data_dir, "dataset directory (overrides config)");
    train->add_option("--out", out_dir, "output directory (overrides config)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--seed", seed, "gallery split seed")->envname("GAITLAB_SEED");
    eval->add_option("--frames", eval_frames, "limit probe/gallery sequences to the first N frames");
    eval->add_option("--subset", subset, "subset filter: all, cross_view, night")
        ->check(CLI::IsMember({"all", "cross_view", "night"}));
    eval->add_option("--report", report_path, "write the metrics report (json) here");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    gradcheck->add_option("--seed", seed, "fixture seed")->envname("GAITLAB_SEED");
    gradcheck->add_flag("--inject-fault", inject_fault, "corrupt one gradient (test fixture)")
        ->group("");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(out_dir, subjects, seqs, frames_per_seq, seed);
        if (train->parsed()) return cmd_train(config_path, data_dir, out_dir);
        if (eval->parsed())
            return cmd_eval(ckpt, data_dir, seed, eval_frames, subset, report_path);
        if (gradcheck->parsed()) return cmd_gradcheck(seed, inject_fault);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitCheckFailed;
    }
}
