#include <CLI11.hpp>

#include <Eigen/Core>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "spcl/config.hpp"
#include "spcl/gradcheck.hpp"
#include "spcl/metrics.hpp"
#include "spcl/synthdata.hpp"
#include "spcl/trainer.hpp"

namespace fs = std::filesystem;
using namespace spcl;

namespace {

void apply_thread_cap() {
    int threads = 1;
    if (const char* env = std::getenv("SPCL_THREADS")) {
        threads = std::max(1, std::atoi(env));
    }
    Eigen::setNbThreads(threads);
}

TrainConfig load_train_config(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
    KeyValueConfig kv =
        config_path.empty() ? KeyValueConfig{} : KeyValueConfig::parse_file(config_path);
    for (const std::string& s : overrides) kv.set(s);
    TrainConfig cfg = train_config_from(kv);
    kv.finish();
    return cfg;
}

std::string palette_comment(int classes) {
    std::string s = "palette";
    for (int c = 0; c < std::min(classes, 8); ++c) {
        const auto rgb = class_color(c);
        s += " " + std::to_string(c) + "=" + std::to_string(std::lround(rgb[0] * 255)) + "," +
             std::to_string(std::lround(rgb[1] * 255)) + "," +
             std::to_string(std::lround(rgb[2] * 255));
    }
    return s;
}

void render_labels(const fs::path& path, const LabelMap& labels, int classes) {
    Eigen::ArrayXd image(static_cast<long>(labels.rows) * labels.cols * 3);
    for (long p = 0; p < labels.size(); ++p) {
        const auto rgb = class_color(labels.v[static_cast<std::size_t>(p)] % 8);
        for (int ch = 0; ch < 3; ++ch) image[p * 3 + ch] = rgb[static_cast<std::size_t>(ch)];
    }
    save_ppm(path, image, labels.rows, labels.cols, palette_comment(classes));
}

int cmd_synth(const std::string& out, int count, std::uint64_t seed, int height, int width,
              int classes, const std::string& preset) {
    SceneSpec spec = SceneSpec::defaults();
    spec.height = height;
    spec.width = width;
    spec.seed = seed;
    if (classes != spec.classes) {
        spec.classes = classes;
        spec.class_weights.assign(static_cast<std::size_t>(classes), 1.0);
        if (classes >= 2) spec.class_weights.back() = 0.15;  // keep one tail class
    }
    write_dataset(out, spec, DomainShiftParams::preset(preset), count, count);
    return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              const std::string& resume, const std::vector<std::string>& overrides,
              const std::string& metrics_path, long halt) {
    TrainConfig cfg = load_train_config(config, overrides);
    TrainDataset dataset = TrainDataset::load(data);
    Trainer trainer(dataset, cfg);
    if (resume.empty()) {
        trainer.init_fresh();
    } else {
        trainer.restore(load_checkpoint(resume));
    }
    if (trainer.stage() == "C") {
        throw std::runtime_error("checkpoint is already in stage C; use the selftrain command");
    }
    if (halt > 0) trainer.set_halt(halt);

    const std::string metrics_file = metrics_path.empty() ? out + ".metrics.csv" : metrics_path;
    auto finish = [&](bool halted) {
        save_checkpoint(out, trainer.checkpoint());
        write_metrics_csv(metrics_file, trainer.metrics_log());
        std::cout << "stage = " << trainer.stage() << "\niteration = " << trainer.stage_iter()
                  << "\nhalted = " << (halted ? 1 : 0) << "\n";
    };

    if (trainer.stage() == "A") {
        if (!trainer.run_stage_a()) {
            finish(true);
            return 0;
        }
        save_checkpoint(out + ".A", trainer.checkpoint());
    }
    if (!trainer.run_stage_b()) {
        finish(true);
        return 0;
    }
    finish(false);
    return 0;
}

int cmd_selftrain(const std::string& config, const std::string& data, const std::string& out,
                  const std::string& resume, const std::vector<std::string>& overrides,
                  const std::string& metrics_path, long halt) {
    TrainConfig cfg = load_train_config(config, overrides);
    TrainDataset dataset = TrainDataset::load(data);
    Trainer trainer(dataset, cfg);
    trainer.restore(load_checkpoint(resume));
    if (halt > 0) trainer.set_halt(halt);
    const bool done = trainer.run_stage_c();
    save_checkpoint(out, trainer.checkpoint());
    const std::string metrics_file = metrics_path.empty() ? out + ".metrics.csv" : metrics_path;
    write_metrics_csv(metrics_file, trainer.metrics_log());
    std::cout << "stage = C\niteration = " << trainer.stage_iter() << "\nhalted = " << (done ? 0 : 1)
              << "\npseudo_coverage = " << trainer.pseudo_coverage() << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& split,
             const std::string& render_dir, const std::string& out_csv) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const SegModel model = model_from_checkpoint(ckpt);
    TrainDataset dataset = TrainDataset::load(data);
    const Domain domain = split == "source" ? Domain::source : Domain::target;
    if (split != "source" && split != "target") {
        throw std::runtime_error("--split must be source or target");
    }
    MetricReport report = evaluate_split(model, dataset, domain);
    if (out_csv.empty()) {
        std::cout << report_csv(report);
    } else {
        write_report_csv(out_csv, report);
    }
    if (!render_dir.empty()) {
        fs::create_directories(render_dir);
        const int n = domain == Domain::source ? dataset.n_source() : dataset.n_target();
        for (int i = 0; i < n; ++i) {
            const Eigen::ArrayXd& img =
                domain == Domain::source ? dataset.source(i).image : dataset.target_image(i);
            LabelMap pred = predict_labels(model, img, dataset.height(), dataset.width());
            render_labels(fs::path(render_dir) / ("pred_" + std::to_string(i) + ".ppm"), pred,
                          dataset.classes());
        }
    }
    return 0;
}

int cmd_ccd(const std::string& ckpt_path, const std::string& data, const std::string& out_csv,
            int max_images) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const SegModel model = model_from_checkpoint(ckpt);
    TrainDataset dataset = TrainDataset::load(data);
    std::ofstream out(out_csv);
    if (!out) throw std::runtime_error("cannot write " + out_csv);
    out.precision(17);
    out << "domain,class,ccd\n";
    for (Domain domain : {Domain::source, Domain::target}) {
        auto by_class = collect_class_features(model, dataset, domain, max_images);
        const Eigen::MatrixXd mu = feature_centroids(by_class, model.feature_dim);
        const Eigen::VectorXd values = ccd(by_class, mu);
        double sum = 0.0;
        int n = 0;
        for (int c = 0; c < values.size(); ++c) {
            if (values[c] < 0.0) continue;  // class without features
            out << domain_name(domain) << "," << c << "," << values[c] << "\n";
            sum += values[c];
            ++n;
        }
        out << domain_name(domain) << ",mean," << (n ? sum / n : 0.0) << "\n";
    }
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, int trials) {
    const auto reports = run_gradient_suite(seed, trials);
    bool all_pass = true;
    double overall = 0.0;
    for (const auto& r : reports) {
        std::printf("%-30s trials=%d  max_rel_err=%.3e  tol=%.0e  %s\n", r.name.c_str(), r.trials,
                    r.max_rel_err, r.tolerance, r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
        overall = std::max(overall, r.max_rel_err);
    }
    std::printf("max relative error over all checks: %.3e\n", overall);
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    CLI::App app{"semantic prototype contrastive learning pipeline"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a paired-domain synthetic dataset");
    std::string synth_out;
    int synth_count = 32, synth_h = 64, synth_w = 64, synth_classes = 8;
    std::uint64_t synth_seed = 7;
    std::string synth_preset = "default";
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--count", synth_count, "samples per domain");
    synth->add_option("--seed", synth_seed, "scene seed");
    synth->add_option("--height", synth_h, "image height");
    synth->add_option("--width", synth_w, "image width");
    synth->add_option("--classes", synth_classes, "class count");
    synth->add_option("--shift-preset", synth_preset, "none|default|strong");

    // train / selftrain
    std::string tr_config, tr_data, tr_out, tr_resume, tr_metrics;
    std::vector<std::string> tr_set;
    long tr_halt = 0;
    auto* train = app.add_subcommand("train", "run warm-up and adaptation (stages A and B)");
    train->add_option("--config", tr_config, "key = value config file");
    train->add_option("--data", tr_data, "dataset directory")->required();
    train->add_option("--out", tr_out, "output checkpoint path")->required();
    train->add_option("--resume", tr_resume, "checkpoint to continue from");
    train->add_option("--set", tr_set, "override config entries, key=value");
    train->add_option("--metrics", tr_metrics, "metrics csv path (default <out>.metrics.csv)");
    train->add_option("--halt", tr_halt, "stop at this global iteration");

    std::string st_config, st_data, st_out, st_resume, st_metrics;
    std::vector<std::string> st_set;
    long st_halt = 0;
    auto* selftrain =
        app.add_subcommand("selftrain", "run pseudo-label self-training (stage C)");
    selftrain->add_option("--config", st_config, "key = value config file");
    selftrain->add_option("--data", st_data, "dataset directory")->required();
    selftrain->add_option("--out", st_out, "output checkpoint path")->required();
    selftrain->add_option("--resume", st_resume, "stage-B (or partial stage-C) checkpoint")
        ->required();
    selftrain->add_option("--set", st_set, "override config entries, key=value");
    selftrain->add_option("--metrics", st_metrics, "metrics csv path");
    selftrain->add_option("--halt", st_halt, "stop at this global iteration");

    // eval
    std::string ev_ckpt, ev_data, ev_split = "target", ev_render, ev_out;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
    eval_cmd->add_option("--split", ev_split, "source|target");
    eval_cmd->add_option("--render", ev_render, "write color prediction maps here");
    eval_cmd->add_option("--out", ev_out, "metric report csv (stdout when omitted)");

    // ccd
    std::string cc_ckpt, cc_data, cc_out;
    int cc_max_images = 1000;
    auto* ccd_cmd = app.add_subcommand("ccd", "class center distance per class and domain");
    ccd_cmd->add_option("--ckpt", cc_ckpt, "checkpoint path")->required();
    ccd_cmd->add_option("--data", cc_data, "dataset directory")->required();
    ccd_cmd->add_option("--out", cc_out, "output csv")->required();
    ccd_cmd->add_option("--max-images", cc_max_images, "feature sample cap per domain");

    // gradcheck
    std::uint64_t gc_seed = 20240901;
    int gc_trials = 20;
    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
    gradcheck_cmd->add_option("--trials", gc_trials, "random instances per check");
    gradcheck_cmd->add_option("--seed", gc_seed, "suite seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            return cmd_synth(synth_out, synth_count, synth_seed, synth_h, synth_w, synth_classes,
                             synth_preset);
        }
        if (train->parsed()) {
            return cmd_train(tr_config, tr_data, tr_out, tr_resume, tr_set, tr_metrics, tr_halt);
        }
        if (selftrain->parsed()) {
            return cmd_selftrain(st_config, st_data, st_out, st_resume, st_set, st_metrics,
                                 st_halt);
        }
        if (eval_cmd->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_render, ev_out);
        if (ccd_cmd->parsed()) return cmd_ccd(cc_ckpt, cc_data, cc_out, cc_max_images);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(gc_seed, gc_trials);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
