#pragma once

// The strategy engine. build_plan materializes one (configuration, strategy)
// cell of the sharing matrix as an explicit edge list; the objective
// assemblers turn a batch of network outputs into each network's weighted
// composite loss.
//
// Channel semantics per edge src -> dst:
//   predictions: KL from the temperature-softened prediction of src (held
//                constant) to the one of dst.
//   features:    MSE between dst's own tap and src's detached tap, passed
//                through the edge adapter when shapes differ.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kdml/losses.hpp"
#include "kdml/nets.hpp"

namespace kdml::sharing {

enum class Config { ML, KD_on, KD_off, KD_ML };
enum class Strategy { V1, V2, V3 };
enum class Channel { predictions, features };
enum class Schedule { online, offline };

inline const char* to_string(Config c) {
    switch (c) {
        case Config::ML: return "ML";
        case Config::KD_on: return "KD_on";
        case Config::KD_off: return "KD_off";
        default: return "KD_ML";
    }
}

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::V1: return "V1";
        case Strategy::V2: return "V2";
        default: return "V3";
    }
}

inline const char* to_string(Channel c) {
    return c == Channel::predictions ? "predictions" : "features";
}

inline const char* to_string(Schedule s) { return s == Schedule::online ? "online" : "offline"; }

inline Config parse_config(const std::string& s) {
    if (s == "ML") return Config::ML;
    if (s == "KD_on") return Config::KD_on;
    if (s == "KD_off") return Config::KD_off;
    if (s == "KD_ML") return Config::KD_ML;
    throw config_error("unknown configuration '" + s + "' (expected ML, KD_on, KD_off or KD_ML)");
}

inline Strategy parse_strategy(const std::string& s) {
    if (s == "V1") return Strategy::V1;
    if (s == "V2") return Strategy::V2;
    if (s == "V3") return Strategy::V3;
    throw config_error("unknown strategy '" + s + "' (expected V1, V2 or V3)");
}

struct Edge {
    std::string src, dst;
    Channel channel = Channel::predictions;

    bool operator==(const Edge&) const = default;
};

inline std::string edge_key(const Edge& e) { return e.src + "->" + e.dst; }

struct StudentWeights {
    double alpha = 1.0;  // task term
    double beta = 0.0;   // teacher (KD) term
    double gamma = 0.0;  // peer (ML) term
};

struct WeightSet {
    StudentWeights s1, s2;
    double teacher = 1.0;
};

struct SharingPlan {
    Config config = Config::ML;
    Strategy strategy = Strategy::V1;
    Task task = Task::classification;
    Schedule schedule = Schedule::online;
    double temperature = 2.0;
    WeightSet weights;
    std::vector<std::pair<std::string, Role>> networks;
    std::vector<Edge> edges;

    bool has_teacher() const {
        for (const auto& [_, role] : networks)
            if (role == Role::teacher) return true;
        return false;
    }

    Role role_of(const std::string& name) const {
        for (const auto& [n, role] : networks)
            if (n == name) return role;
        throw contract_error("plan has no network named " + name);
    }

    std::vector<std::string> students() const {
        std::vector<std::string> out;
        for (const auto& [n, role] : networks)
            if (role == Role::student) out.push_back(n);
        return out;
    }

    const StudentWeights& weights_of(const std::string& student) const {
        const auto s = students();
        if (!s.empty() && student == s[0]) return weights.s1;
        if (s.size() > 1 && student == s[1]) return weights.s2;
        throw contract_error("plan has no student named " + student);
    }

    std::vector<Edge> incoming(const std::string& dst) const {
        std::vector<Edge> out;
        for (const auto& e : edges)
            if (e.dst == dst) out.push_back(e);
        return out;
    }
};

namespace detail {

inline void check_identity(const char* label, double got, double want, const std::string& what) {
    if (std::abs(got - want) > 1e-12)
        throw config_error(std::string(label) + " requires " + what + ", got " +
                           std::to_string(got));
}

inline Channel flip(Channel c) {
    return c == Channel::predictions ? Channel::features : Channel::predictions;
}

}  // namespace detail

// Builds the edge set of one configuration x strategy cell. V1 puts
// predictions on every edge, V2 features; V3 mixes channels asymmetrically:
// the teacher sends features to S1 and predictions to S2 while the peers
// exchange the opposite channels. v3_swap mirrors that assignment (the
// symmetric alternative), which for KD-only and ML-only also yields exactly
// the teacher-edge and peer-edge subsets of the combined V3 plan.
inline SharingPlan build_plan(Config config, Strategy strategy, Task task, const WeightSet& w,
                              double temperature, bool v3_swap = false) {
    if (temperature <= 0) throw config_error("temperature must be positive");
    for (auto [label, sw] : {std::pair{"S1", w.s1}, std::pair{"S2", w.s2}})
        if (sw.alpha < 0 || sw.beta < 0 || sw.gamma < 0)
            throw config_error(std::string("negative loss weight for ") + label);

    SharingPlan plan;
    plan.config = config;
    plan.strategy = strategy;
    plan.task = task;
    plan.temperature = temperature;
    plan.weights = w;
    plan.schedule = config == Config::KD_off ? Schedule::offline : Schedule::online;

    const bool kd = config != Config::ML;
    const bool ml = config == Config::ML || config == Config::KD_ML;
    if (kd && !ml) {
        detail::check_identity("KD-only", w.s1.gamma, 0.0, "gamma = 0");
        detail::check_identity("KD-only", w.s2.gamma, 0.0, "gamma' = 0");
        detail::check_identity("KD-only", w.s1.beta, 1.0 - w.s1.alpha, "beta = 1 - alpha");
        detail::check_identity("KD-only", w.s2.beta, 1.0 - w.s2.alpha, "beta' = 1 - alpha'");
    }
    if (ml && !kd) {
        detail::check_identity("ML-only", w.s1.beta, 0.0, "beta = 0");
        detail::check_identity("ML-only", w.s2.beta, 0.0, "beta' = 0");
        detail::check_identity("ML-only", w.s1.gamma, 1.0 - w.s1.alpha, "gamma = 1 - alpha");
        detail::check_identity("ML-only", w.s2.gamma, 1.0 - w.s2.alpha, "gamma' = 1 - alpha'");
    }

    if (kd) plan.networks.emplace_back("T", Role::teacher);
    plan.networks.emplace_back("S1", Role::student);
    plan.networks.emplace_back("S2", Role::student);

    const Channel P = Channel::predictions, F = Channel::features;
    auto push = [&](std::string src, std::string dst, Channel c) {
        plan.edges.push_back({std::move(src), std::move(dst), v3_swap ? detail::flip(c) : c});
    };
    switch (strategy) {
        case Strategy::V1:
            if (kd) {
                plan.edges.push_back({"T", "S1", P});
                plan.edges.push_back({"T", "S2", P});
            }
            if (ml) {
                plan.edges.push_back({"S1", "S2", P});
                plan.edges.push_back({"S2", "S1", P});
            }
            break;
        case Strategy::V2:
            if (kd) {
                plan.edges.push_back({"T", "S1", F});
                plan.edges.push_back({"T", "S2", F});
            }
            if (ml) {
                plan.edges.push_back({"S1", "S2", F});
                plan.edges.push_back({"S2", "S1", F});
            }
            break;
        case Strategy::V3:
            if (kd && ml) {
                push("T", "S1", F);
                push("T", "S2", P);
                push("S1", "S2", F);
                push("S2", "S1", P);
            } else if (kd) {
                push("T", "S1", P);
                push("T", "S2", F);
            } else {
                push("S1", "S2", P);
                push("S2", "S1", F);
            }
            break;
    }
    return plan;
}

struct LossComponent {
    std::string name;
    double weight = 0.0;
    double value = 0.0;
};

struct LossReport {
    std::string network;
    double total = 0.0;
    std::vector<LossComponent> components;

    // total must reconstruct from the weighted components
    bool consistent(double tol = 1e-6) const {
        double sum = 0.0;
        for (const auto& c : components) sum += c.weight * c.value;
        return std::abs(sum - total) <= tol;
    }
};

template <class T>
struct NetOutputT {
    TensorPtrT<T> output;  // classification logits, segmentation probability map
    TensorPtrT<T> logits;
    std::map<std::string, TensorPtrT<T>> taps;
};

template <class T>
struct BatchOutputsT {
    std::map<std::string, NetOutputT<T>> nets;
    TensorPtrT<T> y;  // one-hot labels or ground-truth masks
    // adapters per feature edge whose tap shapes differ, keyed "src->dst"
    std::map<std::string, std::shared_ptr<nets::AdapterBlockT<T>>> adapters;
};

namespace detail {

template <class T>
const NetOutputT<T>& net_of(const BatchOutputsT<T>& out, const std::string& name) {
    auto it = out.nets.find(name);
    if (it == out.nets.end()) throw contract_error("batch outputs missing network " + name);
    return it->second;
}

template <class T>
const TensorPtrT<T>& tap_of(const NetOutputT<T>& net, const std::string& name) {
    if (net.taps.size() != 1)
        throw config_error("feature edge endpoint " + name + " must expose exactly one tap, has " +
                           std::to_string(net.taps.size()));
    return net.taps.begin()->second;
}

template <class T>
TensorPtrT<T> soft_mask(const TensorPtrT<T>& logits, double temperature) {
    return temperature == 1.0 ? sigmoid(logits) : sigmoid(scale(logits, 1.0 / temperature));
}

template <class T>
TensorPtrT<T> task_loss(Task task, const NetOutputT<T>& net, const TensorPtrT<T>& y) {
    if (task == Task::classification)
        return losses::cross_entropy(losses::softmax_T(net.logits, 1.0), y);
    return losses::fd_loss(net.output, y, 2.0);
}

// One edge's contribution to the receiving network's objective. Incoming
// knowledge never backpropagates into the sender.
template <class T>
TensorPtrT<T> edge_loss(const SharingPlan& plan, const Edge& e, const BatchOutputsT<T>& out) {
    const auto& src = net_of(out, e.src);
    const auto& dst = net_of(out, e.dst);
    if (e.channel == Channel::predictions) {
        if (plan.task == Task::classification)
            return losses::kl_div(losses::softmax_T(src.logits, plan.temperature),
                                  losses::softmax_T(dst.logits, plan.temperature));
        return losses::pixel_kl(soft_mask(src.logits, plan.temperature),
                                soft_mask(dst.logits, plan.temperature));
    }
    const auto& own = tap_of(dst, e.dst);
    auto incoming = detach(tap_of(src, e.src));
    if (incoming->shape != own->shape) {
        auto it = out.adapters.find(edge_key(e));
        if (it == out.adapters.end())
            throw config_error("feature edge " + edge_key(e) +
                               " needs an adapter: tap shapes " + shape_str(incoming->shape) +
                               " vs " + shape_str(own->shape));
        incoming = it->second->apply(incoming);
    }
    return losses::feature_mse(own, incoming);
}

}  // namespace detail

// Weighted composite objective of one student: alpha * task loss plus beta
// and gamma times the losses over its incoming teacher and peer edges.
template <class T>
std::pair<TensorPtrT<T>, LossReport> student_objective(const SharingPlan& plan,
                                                       const std::string& student,
                                                       const BatchOutputsT<T>& out) {
    if (plan.role_of(student) != Role::student)
        throw contract_error(student + " is not a student in this plan");
    const StudentWeights& w = plan.weights_of(student);
    const auto& own = detail::net_of(out, student);

    TensorPtrT<T> kd_term, ml_term;
    for (const auto& e : plan.edges) {
        if (e.dst != student) continue;
        auto term = detail::edge_loss(plan, e, out);
        auto& slot = plan.role_of(e.src) == Role::teacher ? kd_term : ml_term;
        slot = slot ? add(slot, term) : term;
    }

    auto task_term = detail::task_loss(plan.task, own, out.y);
    auto total = scale(task_term, w.alpha);
    LossReport report;
    report.network = student;
    report.components.push_back({"task", w.alpha, static_cast<double>(task_term->data[0])});
    if (kd_term) {
        total = add(total, scale(kd_term, w.beta));
        report.components.push_back({"kd", w.beta, static_cast<double>(kd_term->data[0])});
    }
    if (ml_term) {
        total = add(total, scale(ml_term, w.gamma));
        report.components.push_back({"ml", w.gamma, static_cast<double>(ml_term->data[0])});
    }
    report.total = static_cast<double>(total->data[0]);
    return {total, report};
}

// The teacher trains on ground truth alone, whatever the sharing topology.
template <class T>
std::pair<TensorPtrT<T>, LossReport> teacher_objective(const SharingPlan& plan,
                                                       const BatchOutputsT<T>& out,
                                                       int phase = 1) {
    if (!plan.has_teacher()) throw contract_error("plan has no teacher network");
    if (plan.schedule == Schedule::offline && phase == 2)
        throw contract_error("offline schedule: the teacher is frozen in phase 2");
    auto task_term = detail::task_loss(plan.task, detail::net_of(out, "T"), out.y);
    auto total = scale(task_term, plan.weights.teacher);
    LossReport report;
    report.network = "T";
    report.components.push_back(
        {"task", plan.weights.teacher, static_cast<double>(task_term->data[0])});
    report.total = static_cast<double>(total->data[0]);
    return {total, report};
}

// Confirms that zeroing gamma (resp. beta) in the combined plan reproduces
// the KD-only (resp. ML-only) student objectives on the same batch. The
// passed single-family plans must carry edge sets compatible with the
// combined plan (for V3 that is the v3_swap variant).
template <class T>
bool reduction_check(const SharingPlan& plan_kdml, const SharingPlan& plan_kd,
                     const SharingPlan& plan_ml, const BatchOutputsT<T>& out,
                     double tol = 1e-9) {
    if (plan_kdml.config != Config::KD_ML)
        throw contract_error("reduction_check: first plan must be KD_ML");
    if (plan_kd.config != Config::KD_on && plan_kd.config != Config::KD_off)
        throw contract_error("reduction_check: second plan must be KD-only");
    if (plan_ml.config != Config::ML)
        throw contract_error("reduction_check: third plan must be ML-only");
    for (const auto& sub : {plan_kd, plan_ml})
        for (const auto& e : sub.edges)
            if (std::find(plan_kdml.edges.begin(), plan_kdml.edges.end(), e) ==
                plan_kdml.edges.end())
                throw config_error("reduction_check: edge " + edge_key(e) + " (" +
                                   to_string(e.channel) +
                                   ") of the reduced plan is not part of the combined plan");

    auto reduced = [&](bool zero_gamma) {
        SharingPlan p = plan_kdml;
        auto& a = zero_gamma ? p.weights.s1.gamma : p.weights.s1.beta;
        auto& b = zero_gamma ? p.weights.s2.gamma : p.weights.s2.beta;
        a = b = 0.0;
        return p;
    };
    const SharingPlan no_ml = reduced(true), no_kd = reduced(false);
    for (const auto& student : plan_kdml.students()) {
        auto [t_kd, r_kd] = student_objective(no_ml, student, out);
        auto [t_kd_ref, r_kd_ref] = student_objective(plan_kd, student, out);
        if (std::abs(r_kd.total - r_kd_ref.total) > tol) return false;
        auto [t_ml, r_ml] = student_objective(no_kd, student, out);
        auto [t_ml_ref, r_ml_ref] = student_objective(plan_ml, student, out);
        if (std::abs(r_ml.total - r_ml_ref.total) > tol) return false;
    }
    return true;
}

}  // namespace kdml::sharing
