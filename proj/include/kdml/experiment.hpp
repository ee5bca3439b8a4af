#pragma once

// Experiment orchestration: one configuration end to end (data -> plan ->
// multi-seed training -> metrics -> files), the 12-model sweep, grid search
// driving, and the ordering report.
//
// Each experiment writes into <root>/<task>/<model>/:
//   config.ini     resolved configuration
//   records.jsonl  one RunRecord per seed
//   summary.csv    model,strategy,network,metric,mean,std,seed_count
//   run_seed<N>.ckpt
//   masks/seed<N>/mask_XXXX.pgm   (segmentation: ensemble test masks)
//
// Metric values are fractions internally and percentages in CSV and reports.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdml/checkpoint.hpp"
#include "kdml/config.hpp"
#include "kdml/train.hpp"

namespace kdml::experiment {

namespace fs = std::filesystem;

inline constexpr const char* kOutputEnvVar = "KDML_OUT";

// Precedence: explicit value, then $KDML_OUT, then ./kdml_out.
inline std::string output_root(const std::string& explicit_root = {}) {
    if (!explicit_root.empty()) return explicit_root;
    if (const char* env = std::getenv(kOutputEnvVar); env && *env) return env;
    return "kdml_out";
}

struct ExperimentResult {
    config::ExperimentConfig cfg;
    std::vector<train::RunRecord> records;  // one per seed
    std::map<std::string, train::MetricStats> summary;
    std::string dir;
};

namespace detail {

inline nlohmann::json report_json(const sharing::LossReport& r) {
    nlohmann::json j;
    j["network"] = r.network;
    j["total"] = r.total;
    auto comps = nlohmann::json::array();
    for (const auto& c : r.components)
        comps.push_back({{"name", c.name}, {"weight", c.weight}, {"value", c.value}});
    j["components"] = comps;
    return j;
}

inline nlohmann::json record_json(const train::RunRecord& r) {
    nlohmann::json j;
    j["fingerprint"] = r.fingerprint;
    j["model"] = r.model;
    j["seed"] = r.seed;
    j["metrics"] = r.metrics;
    j["ensemble"] = r.ensemble;
    j["wall_seconds"] = r.wall_seconds;
    auto epochs = nlohmann::json::array();
    for (const auto& e : r.epochs) {
        auto reports = nlohmann::json::array();
        for (const auto& rep : e.reports) reports.push_back(report_json(rep));
        epochs.push_back({{"epoch", e.epoch}, {"reports", reports}});
    }
    j["epochs"] = epochs;
    return j;
}

template <class T>
void save_group(const std::string& path, const train::GroupT<T>& g) {
    std::vector<std::pair<std::string, TensorPtrT<T>>> flat;
    for (const auto& [name, net] : g.nets)
        for (const auto& [pname, p] : net->params) flat.emplace_back(name + "/" + pname, p);
    for (const auto& [key, a] : g.adapters) {
        flat.emplace_back("adapter:" + key + "/w", a->w);
        flat.emplace_back("adapter:" + key + "/b", a->b);
    }
    save_checkpoint(path, flat);
}

template <class T>
void dump_ensemble_masks(const fs::path& dir, const train::GroupT<T>& g,
                         const sharing::SharingPlan& plan, const data::Dataset& ds) {
    fs::create_directories(dir);
    const auto idx = data::indices_of(ds, data::SplitTag::test);
    const auto students = plan.students();
    const int H = ds.in_shape[1], W = ds.in_shape[2];
    char name[32];
    int written = 0;
    for (size_t at = 0; at < idx.size(); at += 32) {
        std::vector<int> bidx(idx.begin() + at, idx.begin() + std::min(idx.size(), at + 32));
        auto batch = data::make_batch<T>(ds, bidx);
        std::vector<TensorPtrT<T>> maps;
        for (const auto& s : students) maps.push_back(g.nets.at(s)->forward(batch.x).output);
        auto uni = metrics::ensemble_mask(maps);
        for (size_t b = 0; b < bidx.size(); ++b) {
            ImageU8 img{W, H, 1, {}};
            img.pixels.resize(static_cast<size_t>(H) * W);
            const T* plane = uni->data.data() + b * img.pixels.size();
            for (size_t p = 0; p < img.pixels.size(); ++p)
                img.pixels[p] = plane[p] >= T(0.5) ? 255 : 0;
            std::snprintf(name, sizeof name, "mask_%04d.pgm", written++);
            write_pnm((dir / name).string(), img);
        }
    }
}

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline void write_summary_csv(const std::string& path, const std::string& config_name,
                              const std::string& strategy_name,
                              const std::map<std::string, train::MetricStats>& summary) {
    std::ofstream os(path);
    if (!os) throw error("cannot write " + path);
    os << "model,strategy,network,metric,mean,std,seed_count\n";
    for (const auto& [key, st] : summary) {
        const auto slash = key.find('/');
        const std::string metric = key.substr(0, slash);
        const std::string network = key.substr(slash + 1);
        os << config_name << "," << strategy_name << "," << network << "," << metric << ","
           << detail::fmt_g17(st.mean * 100.0) << "," << detail::fmt_g17(st.stddev * 100.0) << ","
           << st.count << "\n";
    }
}

// Trains cfg.seeds runs of one configuration and writes the experiment
// directory. Returns records plus per-metric statistics.
template <class T = float>
ExperimentResult run_experiment(const config::ExperimentConfig& cfg) {
    const auto plan = cfg.plan();
    const auto ds = cfg.dataset();
    ExperimentResult result;
    result.cfg = cfg;

    const fs::path dir =
        fs::path(output_root(cfg.out)) / to_string(cfg.task) / train::model_name(plan);
    fs::create_directories(dir);
    result.dir = dir.string();
    {
        std::ofstream os(dir / "config.ini");
        os << config::serialize(cfg);
    }

    std::ofstream jsonl(dir / "records.jsonl");
    train::TrainOptions topt;
    topt.batch_size = cfg.batch_size;
    topt.lr = cfg.lr;
    topt.augment = cfg.augment;
    for (uint64_t seed : cfg.seeds) {
        auto group = train::build_group<T>(plan, ds.in_shape, ds.n_classes, seed);
        auto rec = plan.schedule == sharing::Schedule::offline
                       ? train::train_offline(plan, group, ds, cfg.resolved_teacher_epochs(),
                                              cfg.resolved_epochs(), seed, topt)
                       : train::train_online(plan, group, ds, cfg.resolved_epochs(), seed, topt);
        jsonl << detail::record_json(rec).dump() << "\n";
        detail::save_group((dir / ("run_seed" + std::to_string(seed) + ".ckpt")).string(), group);
        if (cfg.task == Task::segmentation)
            detail::dump_ensemble_masks(dir / "masks" / ("seed" + std::to_string(seed)), group,
                                        plan, ds);
        result.records.push_back(std::move(rec));
    }

    std::map<std::string, std::vector<double>> collected;
    for (const auto& r : result.records)
        for (const auto& [k, v] : r.metrics) collected[k].push_back(v);
    for (auto& [k, vs] : collected) result.summary[k] = train::summarize(std::move(vs));
    write_summary_csv((dir / "summary.csv").string(), sharing::to_string(cfg.config),
                      sharing::to_string(cfg.strategy), result.summary);
    return result;
}

// The sweep reuses one weight set: KD_ML cells take it verbatim, single-family
// cells keep its alphas and derive the coupled weight.
inline sharing::WeightSet sweep_weights(const sharing::WeightSet& base, sharing::Config c) {
    sharing::WeightSet w = base;
    if (c == sharing::Config::KD_on || c == sharing::Config::KD_off) {
        w.s1 = {base.s1.alpha, 1.0 - base.s1.alpha, 0.0};
        w.s2 = {base.s2.alpha, 1.0 - base.s2.alpha, 0.0};
    } else if (c == sharing::Config::ML) {
        w.s1 = {base.s1.alpha, 0.0, 1.0 - base.s1.alpha};
        w.s2 = {base.s2.alpha, 0.0, 1.0 - base.s2.alpha};
    }
    return w;
}

struct CompareEntry {
    std::string config;
    std::string strategy;
    double mean = 0.0;  // ensemble metric, fraction
    int runs = 0;
};

struct CompareReport {
    std::vector<CompareEntry> entries;  // one row per configuration x strategy
    std::map<std::string, bool> v3_best;
    std::map<std::string, bool> v3_tie;
    bool kdml_best = false;
    bool kdml_tie = false;

    std::string text() const {
        std::ostringstream os;
        os << "config    strategy  ensemble mean (%)  runs\n";
        char buf[64];
        for (const auto& e : entries) {
            std::snprintf(buf, sizeof buf, "%-9s %-9s %17.4f %5d\n", e.config.c_str(),
                          e.strategy.c_str(), e.mean * 100.0, e.runs);
            os << buf;
        }
        for (const auto& [cfg, best] : v3_best) {
            os << "V3 best within " << cfg << ": " << (best ? "yes" : "no");
            if (v3_tie.at(cfg)) os << " (tie)";
            os << "\n";
        }
        os << "KD+ML best across configurations: " << (kdml_best ? "yes" : "no");
        if (kdml_tie) os << " (tie)";
        os << "\n";
        return os.str();
    }
};

// Folds run records into the per-cell ensemble means and the two headline
// ordering claims, reported as flags rather than asserted.
inline CompareReport compare_report(const std::vector<train::RunRecord>& records) {
    std::map<std::string, std::pair<double, int>> cells;  // model -> (sum, count)
    for (const auto& r : records) {
        auto& c = cells[r.model];
        c.first += r.ensemble;
        c.second += 1;
    }
    CompareReport rep;
    std::map<std::string, std::map<std::string, double>> by_config;
    for (const auto& [model, sc] : cells) {
        const auto dash = model.rfind('-');
        CompareEntry e;
        e.config = model.substr(0, dash);
        e.strategy = model.substr(dash + 1);
        e.mean = sc.first / sc.second;
        e.runs = sc.second;
        by_config[e.config][e.strategy] = e.mean;
        rep.entries.push_back(std::move(e));
    }
    std::map<std::string, double> config_best;
    for (const auto& [cfg, strategies] : by_config) {
        double best_other = -1.0, v3 = -1.0;
        for (const auto& [strat, mean] : strategies) {
            if (strat == "V3")
                v3 = mean;
            else
                best_other = std::max(best_other, mean);
            config_best[cfg] = std::max(config_best[cfg], mean);
        }
        rep.v3_best[cfg] = v3 >= 0 && best_other >= 0 && v3 > best_other;
        rep.v3_tie[cfg] = v3 >= 0 && best_other >= 0 && v3 == best_other;
    }
    double kdml = -1.0, other = -1.0;
    for (const auto& [cfg, best] : config_best) {
        if (cfg == "KD_ML")
            kdml = best;
        else
            other = std::max(other, best);
    }
    rep.kdml_best = kdml >= 0 && other >= 0 && kdml > other;
    rep.kdml_tie = kdml >= 0 && other >= 0 && kdml == other;
    return rep;
}

// Runs all 12 configuration x strategy cells, writes each cell's experiment
// directory plus a combined CSV and the ordering report at the task root.
template <class T = float>
std::vector<ExperimentResult> sweep(const config::ExperimentConfig& base) {
    std::vector<ExperimentResult> results;
    std::vector<train::RunRecord> all;
    for (auto c : {sharing::Config::ML, sharing::Config::KD_on, sharing::Config::KD_off,
                   sharing::Config::KD_ML}) {
        for (auto s : {sharing::Strategy::V1, sharing::Strategy::V2, sharing::Strategy::V3}) {
            config::ExperimentConfig cfg = base;
            cfg.config = c;
            cfg.strategy = s;
            cfg.weights = sweep_weights(base.weights, c);
            cfg.plan();
            results.push_back(run_experiment<T>(cfg));
            for (const auto& r : results.back().records) all.push_back(r);
        }
    }
    const fs::path root = fs::path(output_root(base.out)) / to_string(base.task);
    {
        std::ofstream os(root / "sweep_summary.csv");
        os << "model,strategy,network,metric,mean,std,seed_count\n";
        for (const auto& res : results) {
            std::ifstream is(fs::path(res.dir) / "summary.csv");
            std::string line;
            std::getline(is, line);  // header
            while (std::getline(is, line)) os << line << "\n";
        }
    }
    {
        std::ofstream os(root / "report.txt");
        os << compare_report(all).text();
    }
    return results;
}

// Grid search over loss weights: each cell trains cfg.seeds.front() briefly
// and is scored by the validation ensemble metric.
template <class T = float>
sharing::WeightSet run_grid_search(const config::ExperimentConfig& cfg,
                                   const train::GridSpace& space = {}) {
    const auto ds = cfg.dataset();
    const uint64_t seed = cfg.seeds.front();
    train::TrainOptions topt;
    topt.batch_size = cfg.batch_size;
    topt.lr = cfg.lr;
    topt.augment = cfg.augment;
    auto objective = [&](const sharing::WeightSet& w, int budget) {
        config::ExperimentConfig cell = cfg;
        cell.weights = w;
        const auto plan = cell.plan();
        auto group = train::build_group<T>(plan, ds.in_shape, ds.n_classes, seed);
        if (plan.schedule == sharing::Schedule::offline)
            train::train_offline(plan, group, ds, budget, budget, seed, topt);
        else
            train::train_online(plan, group, ds, budget, seed, topt);
        return train::primary_ensemble(
            train::evaluate(group, plan, ds, data::SplitTag::val, topt.eval_batch), cfg.task);
    };
    return train::grid_search(cfg.config, space, cfg.grid_epochs, objective);
}

}  // namespace kdml::experiment
