// Experiment CLI. Verbs:
//   run        train one configuration file
//   sweep      run all 12 configuration x strategy cells from a base config
//   gridsearch search the loss-weight grid for one configuration
//   report     fold records.jsonl files into the ordering report
//
// Exit codes: 0 ok, 2 configuration error, 3 training divergence, 1 anything
// else. Output root: --out flag, else $KDML_OUT, else ./kdml_out.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdml/experiment.hpp"

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

kdml::config::ExperimentConfig load_config(const std::string& path, const std::string& out) {
    auto cfg = kdml::config::load(path);
    cfg.out = kdml::experiment::output_root(out);
    return cfg;
}

void print_summary(const kdml::experiment::ExperimentResult& res) {
    std::printf("%s: %zu run(s) -> %s\n", res.records.front().model.c_str(), res.records.size(),
                res.dir.c_str());
    for (const auto& [key, st] : res.summary)
        std::printf("  %-22s %8.4f %% (std %.4f, n=%d)\n", key.c_str(), st.mean * 100.0,
                    st.stddev * 100.0, st.count);
}

int cmd_run(const std::string& config_path, const std::string& out) {
    const auto res = kdml::experiment::run_experiment(load_config(config_path, out));
    print_summary(res);
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out) {
    const auto results = kdml::experiment::sweep(load_config(config_path, out));
    for (const auto& r : results) print_summary(r);
    std::vector<kdml::train::RunRecord> all;
    for (const auto& r : results) all.insert(all.end(), r.records.begin(), r.records.end());
    std::printf("%s", kdml::experiment::compare_report(all).text().c_str());
    return 0;
}

int cmd_gridsearch(const std::string& config_path, const std::string& out) {
    auto cfg = load_config(config_path, out);
    const auto best = kdml::experiment::run_grid_search(cfg);
    std::printf("best weights: alpha=%g beta=%g gamma=%g alpha2=%g beta2=%g gamma2=%g\n",
                best.s1.alpha, best.s1.beta, best.s1.gamma, best.s2.alpha, best.s2.beta,
                best.s2.gamma);
    cfg.weights = best;
    const auto dir = std::filesystem::path(cfg.out) / kdml::to_string(cfg.task);
    std::filesystem::create_directories(dir);
    const auto path = dir / (kdml::train::model_name(cfg.plan()) + "-gridsearch.ini");
    std::ofstream os(path);
    os << kdml::config::serialize(cfg);
    std::printf("written to %s\n", path.string().c_str());
    return 0;
}

int cmd_report(const std::vector<std::string>& record_files) {
    std::vector<kdml::train::RunRecord> records;
    for (const auto& path : record_files) {
        std::ifstream is(path);
        if (!is) throw kdml::error("cannot open " + path);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            kdml::train::RunRecord r;
            r.model = j.at("model").get<std::string>();
            r.seed = j.at("seed").get<uint64_t>();
            r.ensemble = j.at("ensemble").get<double>();
            r.fingerprint = j.value("fingerprint", "");
            records.push_back(std::move(r));
        }
    }
    if (records.empty()) throw kdml::config_error("report: no records found");
    std::printf("%s", kdml::experiment::compare_report(records).text().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge-sharing training experiments"};
    app.require_subcommand(1);

    std::string config_path, out;
    std::vector<std::string> record_files;

    auto* run = app.add_subcommand("run", "train one configuration");
    run->add_option("-c,--config", config_path, "INI config file")->required();
    run->add_option("-o,--out", out, "output root");

    auto* sweep = app.add_subcommand("sweep", "run all 12 models");
    sweep->add_option("-c,--config", config_path, "base INI config file")->required();
    sweep->add_option("-o,--out", out, "output root");

    auto* grid = app.add_subcommand("gridsearch", "search loss weights");
    grid->add_option("-c,--config", config_path, "INI config file")->required();
    grid->add_option("-o,--out", out, "output root");

    auto* report = app.add_subcommand("report", "summarize records.jsonl files");
    report->add_option("records", record_files, "records.jsonl paths")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, out);
        if (sweep->parsed()) return cmd_sweep(config_path, out);
        if (grid->parsed()) return cmd_gridsearch(config_path, out);
        return cmd_report(record_files);
    } catch (const kdml::config_error& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const kdml::divergence_error& e) {
        std::fprintf(stderr, "training diverged: %s\n", e.what());
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
}
