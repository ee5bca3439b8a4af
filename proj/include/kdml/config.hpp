#pragma once

// INI experiment configs. Recognized sections and keys:
//
//   [task]    type
//   [plan]    config, strategy, temperature, v3_swap
//   [weights] alpha, beta, gamma, alpha2, beta2, gamma2, teacher
//   [weights] (beta/gamma may be omitted for KD-only and ML-only plans;
//              they are then derived from the coupling identities)
//   [train]   seeds, epochs, teacher_epochs, batch_size, lr, augment,
//             grid_epochs
//   [data]    source, n, resolution, seed, index
//
// Unknown sections or keys are configuration errors, as are identity
// violations in the weight set (checked by building the plan up front).

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kdml/data.hpp"
#include "kdml/sharing.hpp"

namespace kdml::config {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

// section -> key -> value, last assignment wins
using IniData = std::map<std::string, std::map<std::string, std::string>>;

inline IniData parse_ini(const std::string& text) {
    IniData ini;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto cut = line.find_first_of("#;");
        if (cut != std::string::npos) line.erase(cut);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw config_error("line " + std::to_string(lineno) + ": unterminated section");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw config_error("line " + std::to_string(lineno) + ": empty section name");
            ini[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("line " + std::to_string(lineno) + ": expected key = value");
        if (section.empty())
            throw config_error("line " + std::to_string(lineno) + ": key outside any section");
        const std::string key = detail::trim(line.substr(0, eq));
        if (key.empty()) throw config_error("line " + std::to_string(lineno) + ": empty key");
        ini[section][key] = detail::trim(line.substr(eq + 1));
    }
    return ini;
}

struct ExperimentConfig {
    Task task = Task::classification;
    sharing::Config config = sharing::Config::KD_ML;
    sharing::Strategy strategy = sharing::Strategy::V3;
    double temperature = 2.0;
    bool v3_swap = false;
    sharing::WeightSet weights;
    std::vector<uint64_t> seeds;
    int epochs = 0;          // 0 = task default (20 classification, 30 segmentation)
    int teacher_epochs = 0;  // offline phase 1; 0 = same as epochs
    int batch_size = 8;
    double lr = 1e-4;
    bool augment = true;
    int grid_epochs = 5;
    std::string source = "synth";  // synth | index
    int n = 0;
    int resolution = 0;
    uint64_t data_seed = 1;
    std::string index_path;
    std::string out;  // output root, resolved by the caller (flag or env var)

    int resolved_epochs() const {
        if (epochs > 0) return epochs;
        return task == Task::classification ? 20 : 30;
    }

    int resolved_teacher_epochs() const {
        return teacher_epochs > 0 ? teacher_epochs : resolved_epochs();
    }

    sharing::SharingPlan plan() const {
        return sharing::build_plan(config, strategy, task, weights, temperature, v3_swap);
    }

    data::Dataset dataset() const {
        data::Dataset ds;
        if (source == "synth") {
            if (n < 2 || resolution < 8)
                throw config_error("[data] synth source needs n >= 2 and resolution >= 8");
            ds = task == Task::classification
                     ? data::synth_classification(n, resolution, data_seed)
                     : data::synth_segmentation(n, resolution, data_seed);
            data::split(ds, data_seed);
        } else {
            ds = data::load_dataset(index_path);
            if (ds.task != task)
                throw config_error("[data] index task does not match [task] type");
        }
        return ds;
    }
};

namespace detail {

class SectionReader {
public:
    SectionReader(const IniData& ini, const std::string& name) : name_(name) {
        auto it = ini.find(name);
        if (it != ini.end()) keys_ = it->second;
    }

    ~SectionReader() = default;

    std::optional<std::string> take(const std::string& key) {
        auto it = keys_.find(key);
        if (it == keys_.end()) return std::nullopt;
        std::string v = it->second;
        keys_.erase(it);
        return v;
    }

    std::string require(const std::string& key) {
        auto v = take(key);
        if (!v) throw config_error("[" + name_ + "] missing required key '" + key + "'");
        return *v;
    }

    void finish() const {
        if (!keys_.empty())
            throw config_error("[" + name_ + "] unknown key '" + keys_.begin()->first + "'");
    }

private:
    std::string name_;
    std::map<std::string, std::string> keys_;
};

inline double to_double(const std::string& v, const std::string& what) {
    try {
        size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw config_error(what + ": '" + v + "' is not a number");
    }
}

inline int to_int(const std::string& v, const std::string& what) {
    const double d = to_double(v, what);
    const int i = static_cast<int>(d);
    if (static_cast<double>(i) != d) throw config_error(what + ": '" + v + "' is not an integer");
    return i;
}

inline bool to_bool(const std::string& v, const std::string& what) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw config_error(what + ": '" + v + "' is not a boolean");
}

inline std::vector<uint64_t> to_seed_list(const std::string& v) {
    std::vector<uint64_t> seeds;
    std::string tok;
    std::istringstream ss(v);
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            seeds.push_back(std::stoull(tok));
        } catch (const std::exception&) {
            throw config_error("[train] seeds: '" + tok + "' is not a seed");
        }
    }
    if (seeds.empty()) throw config_error("[train] seeds must list at least one seed");
    return seeds;
}

}  // namespace detail

inline ExperimentConfig from_ini(const IniData& ini) {
    for (const auto& [section, _] : ini)
        if (section != "task" && section != "plan" && section != "weights" &&
            section != "train" && section != "data")
            throw config_error("unknown section [" + section + "]");

    ExperimentConfig cfg;

    detail::SectionReader task(ini, "task");
    const std::string type = task.require("type");
    if (type == "classification")
        cfg.task = Task::classification;
    else if (type == "segmentation")
        cfg.task = Task::segmentation;
    else
        throw config_error("[task] type must be classification or segmentation");
    task.finish();

    detail::SectionReader plan(ini, "plan");
    cfg.config = sharing::parse_config(plan.require("config"));
    cfg.strategy = sharing::parse_strategy(plan.require("strategy"));
    if (auto v = plan.take("temperature"))
        cfg.temperature = detail::to_double(*v, "[plan] temperature");
    if (auto v = plan.take("v3_swap")) cfg.v3_swap = detail::to_bool(*v, "[plan] v3_swap");
    plan.finish();

    detail::SectionReader weights(ini, "weights");
    const bool kd_only =
        cfg.config == sharing::Config::KD_on || cfg.config == sharing::Config::KD_off;
    const bool ml_only = cfg.config == sharing::Config::ML;
    auto read_student = [&](const char* a, const char* b, const char* g) {
        sharing::StudentWeights w;
        w.alpha = detail::to_double(weights.require(a), std::string("[weights] ") + a);
        auto bv = weights.take(b), gv = weights.take(g);
        if (kd_only) {
            w.beta = bv ? detail::to_double(*bv, std::string("[weights] ") + b) : 1.0 - w.alpha;
            w.gamma = gv ? detail::to_double(*gv, std::string("[weights] ") + g) : 0.0;
        } else if (ml_only) {
            w.beta = bv ? detail::to_double(*bv, std::string("[weights] ") + b) : 0.0;
            w.gamma = gv ? detail::to_double(*gv, std::string("[weights] ") + g) : 1.0 - w.alpha;
        } else {
            if (!bv || !gv)
                throw config_error("[weights] KD_ML plans need explicit " + std::string(b) +
                                   " and " + g);
            w.beta = detail::to_double(*bv, std::string("[weights] ") + b);
            w.gamma = detail::to_double(*gv, std::string("[weights] ") + g);
        }
        return w;
    };
    cfg.weights.s1 = read_student("alpha", "beta", "gamma");
    cfg.weights.s2 = read_student("alpha2", "beta2", "gamma2");
    if (auto v = weights.take("teacher"))
        cfg.weights.teacher = detail::to_double(*v, "[weights] teacher");
    weights.finish();

    detail::SectionReader tr(ini, "train");
    cfg.seeds = detail::to_seed_list(tr.require("seeds"));
    if (auto v = tr.take("epochs")) cfg.epochs = detail::to_int(*v, "[train] epochs");
    if (auto v = tr.take("teacher_epochs"))
        cfg.teacher_epochs = detail::to_int(*v, "[train] teacher_epochs");
    if (auto v = tr.take("batch_size")) cfg.batch_size = detail::to_int(*v, "[train] batch_size");
    if (auto v = tr.take("lr")) cfg.lr = detail::to_double(*v, "[train] lr");
    if (auto v = tr.take("augment")) cfg.augment = detail::to_bool(*v, "[train] augment");
    if (auto v = tr.take("grid_epochs")) cfg.grid_epochs = detail::to_int(*v, "[train] grid_epochs");
    tr.finish();

    detail::SectionReader dt(ini, "data");
    if (auto v = dt.take("source")) cfg.source = *v;
    if (cfg.source == "synth") {
        cfg.n = detail::to_int(dt.require("n"), "[data] n");
        cfg.resolution = detail::to_int(dt.require("resolution"), "[data] resolution");
        if (auto v = dt.take("seed"))
            cfg.data_seed = static_cast<uint64_t>(detail::to_int(*v, "[data] seed"));
        if (auto v = dt.take("index"))
            throw config_error("[data] index is only valid with source = index");
    } else if (cfg.source == "index") {
        cfg.index_path = dt.require("index");
    } else {
        throw config_error("[data] source must be synth or index");
    }
    dt.finish();

    if (cfg.batch_size < 1) throw config_error("[train] batch_size must be >= 1");
    if (cfg.epochs < 0 || cfg.teacher_epochs < 0)
        throw config_error("[train] epoch counts cannot be negative");
    if (cfg.lr <= 0) throw config_error("[train] lr must be positive");
    cfg.plan();  // surfaces weight-identity violations before any work starts
    return cfg;
}

inline ExperimentConfig parse(const std::string& text) { return from_ini(parse_ini(text)); }

inline ExperimentConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw config_error("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

inline std::string serialize(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "[task]\ntype = " << to_string(cfg.task) << "\n\n";
    os << "[plan]\nconfig = " << sharing::to_string(cfg.config)
       << "\nstrategy = " << sharing::to_string(cfg.strategy)
       << "\ntemperature = " << cfg.temperature << "\n";
    if (cfg.v3_swap) os << "v3_swap = true\n";
    os << "\n[weights]\n";
    os << "alpha = " << cfg.weights.s1.alpha << "\nbeta = " << cfg.weights.s1.beta
       << "\ngamma = " << cfg.weights.s1.gamma << "\n";
    os << "alpha2 = " << cfg.weights.s2.alpha << "\nbeta2 = " << cfg.weights.s2.beta
       << "\ngamma2 = " << cfg.weights.s2.gamma << "\n";
    if (cfg.weights.teacher != 1.0) os << "teacher = " << cfg.weights.teacher << "\n";
    os << "\n[train]\nseeds = ";
    for (size_t i = 0; i < cfg.seeds.size(); ++i) os << (i ? "," : "") << cfg.seeds[i];
    os << "\nepochs = " << cfg.resolved_epochs();
    if (cfg.config == sharing::Config::KD_off)
        os << "\nteacher_epochs = " << cfg.resolved_teacher_epochs();
    os << "\nbatch_size = " << cfg.batch_size << "\nlr = " << cfg.lr
       << "\naugment = " << (cfg.augment ? "true" : "false")
       << "\ngrid_epochs = " << cfg.grid_epochs << "\n";
    os << "\n[data]\nsource = " << cfg.source << "\n";
    if (cfg.source == "synth")
        os << "n = " << cfg.n << "\nresolution = " << cfg.resolution
           << "\nseed = " << cfg.data_seed << "\n";
    else
        os << "index = " << cfg.index_path << "\n";
    return os.str();
}

}  // namespace kdml::config
