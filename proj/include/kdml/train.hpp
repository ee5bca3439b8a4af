#pragma once

// Training loops and experiment statistics. Online training computes every
// objective from one shared forward pass, backpropagates them all, and only
// then lets each optimizer step, so the update order within a step cannot
// matter. Offline training pre-trains the teacher, freezes it, and trains
// the students against the frozen weights.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "kdml/data.hpp"
#include "kdml/metrics.hpp"
#include "kdml/sharing.hpp"

namespace kdml::train {

template <class T>
class AdamT {
public:
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamT(double lr_ = 1e-4) : lr(lr_) {}

    void add_param(const TensorPtrT<T>& p) {
        params_.push_back(p);
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(p->numel(), 0.0);
    }

    template <class Named>
    void add_params(const Named& named) {
        for (const auto& [_, p] : named) add_param(p);
    }

    int64_t step_count() const { return t_; }

    // One bias-corrected update from the gradients currently stored on the
    // attached parameters. An absent gradient counts as zero.
    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            p.ensure_grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < p.data.size(); ++j) {
                const double g = static_cast<double>(p.grad[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
                p.data[j] = static_cast<T>(static_cast<double>(p.data[j]) - update);
            }
        }
    }

private:
    std::vector<TensorPtrT<T>> params_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

// The networks and edge adapters of one plan instantiation.
template <class T>
struct GroupT {
    std::map<std::string, std::shared_ptr<nets::NetworkT<T>>> nets;
    std::map<std::string, std::shared_ptr<nets::AdapterBlockT<T>>> adapters;  // by edge key
};

// Builds every network the plan names (seeded per network name) plus an
// adapter for each feature edge whose endpoint tap shapes differ.
template <class T>
GroupT<T> build_group(const sharing::SharingPlan& plan, const Shape& in_shape, int n_classes,
                      uint64_t run_seed) {
    GroupT<T> g;
    for (const auto& [name, role] : plan.networks) {
        const uint64_t s = derive_seed(run_seed, name);
        auto net = plan.task == Task::classification
                       ? nets::build_classifier<T>(role, in_shape, n_classes, s, name)
                       : nets::build_segmenter<T>(role, in_shape, s, name);
        g.nets[name] = std::make_shared<nets::NetworkT<T>>(std::move(net));
    }
    for (const auto& e : plan.edges) {
        if (e.channel != sharing::Channel::features) continue;
        const Shape from = g.nets.at(e.src)->tap_shape();
        const Shape to = g.nets.at(e.dst)->tap_shape();
        if (from == to) continue;
        g.adapters[sharing::edge_key(e)] = std::make_shared<nets::AdapterBlockT<T>>(
            from, to, derive_seed(run_seed, "adapter:" + sharing::edge_key(e)));
    }
    return g;
}

template <class T>
sharing::BatchOutputsT<T> forward_group(const GroupT<T>& g, const TensorPtrT<T>& x,
                                        const TensorPtrT<T>& y) {
    sharing::BatchOutputsT<T> out;
    for (const auto& [name, net] : g.nets) {
        auto r = net->forward(x);
        out.nets[name] = {r.output, r.logits, r.taps};
    }
    out.y = y;
    out.adapters = g.adapters;
    return out;
}

namespace detail {

template <class T>
int argmax_row(const T* p, int k) {
    int best = 0;
    for (int i = 1; i < k; ++i)
        if (p[i] > p[best]) best = i;
    return best;
}

}  // namespace detail

// Test/val metrics for every network plus the student ensemble. Keys are
// "<metric>/<network>" and "<metric>/ensemble"; classification reports
// accuracy, segmentation IoU and F-score.
template <class T>
std::map<std::string, double> evaluate(const GroupT<T>& g, const sharing::SharingPlan& plan,
                                       const data::Dataset& ds, data::SplitTag tag,
                                       int batch_size = 32) {
    const auto idx = data::indices_of(ds, tag);
    if (idx.empty())
        throw contract_error(std::string("evaluate: split '") + data::to_string(tag) +
                             "' is empty");
    const auto students = plan.students();
    std::map<std::string, double> acc;     // summed per-sample scores
    long total = 0;
    for (size_t at = 0; at < idx.size(); at += batch_size) {
        std::vector<int> bidx(idx.begin() + at,
                              idx.begin() + std::min(idx.size(), at + batch_size));
        auto batch = data::make_batch<T>(ds, bidx);
        auto out = forward_group(g, batch.x, batch.y);
        const int B = static_cast<int>(bidx.size());
        total += B;
        if (plan.task == Task::classification) {
            const int K = ds.n_classes;
            std::vector<losses::ProbVectorT<T>> student_probs;
            for (const auto& [name, net] : out.nets) {
                auto probs = losses::softmax_T(net.logits, 1.0);
                long correct = 0;
                for (int b = 0; b < B; ++b)
                    correct += detail::argmax_row(probs.probs->data.data() + b * K, K) ==
                               batch.labels[b];
                acc["accuracy/" + name] += static_cast<double>(correct);
                if (std::find(students.begin(), students.end(), name) != students.end())
                    student_probs.push_back(probs);
            }
            const auto votes = metrics::ensemble_classify(student_probs);
            long correct = 0;
            for (int b = 0; b < B; ++b) correct += votes[b] == batch.labels[b];
            acc["accuracy/ensemble"] += static_cast<double>(correct);
        } else {
            std::vector<TensorPtrT<T>> student_maps;
            for (const auto& [name, net] : out.nets) {
                auto s = metrics::seg_score_batch(metrics::threshold_mask(net.output), batch.y);
                acc["iou/" + name] += s.iou * B;
                acc["fscore/" + name] += s.fscore * B;
                if (std::find(students.begin(), students.end(), name) != students.end())
                    student_maps.push_back(net.output);
            }
            auto s = metrics::seg_score_batch(metrics::ensemble_mask(student_maps), batch.y);
            acc["iou/ensemble"] += s.iou * B;
            acc["fscore/ensemble"] += s.fscore * B;
        }
    }
    for (auto& [_, v] : acc) v /= static_cast<double>(total);
    return acc;
}

struct EpochLog {
    int epoch = 0;
    std::vector<sharing::LossReport> reports;  // component values averaged over the epoch
};

struct RunRecord {
    std::string fingerprint;
    std::string model;  // "<config>-<strategy>"
    uint64_t seed = 0;
    std::vector<EpochLog> epochs;
    std::map<std::string, double> metrics;  // test-split metrics
    double ensemble = 0.0;                  // primary ensemble metric
    double wall_seconds = 0.0;
};

namespace detail {

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 1469598103934665603ull) {
    return fnv1a64(s.data(), s.size(), h);
}

}  // namespace detail

inline uint64_t dataset_hash(const data::Dataset& ds) {
    uint64_t h = detail::fnv1a64(std::string(to_string(ds.task)));
    h = detail::fnv1a64(&ds.n_classes, sizeof ds.n_classes, h);
    h = detail::fnv1a64(ds.in_shape.data(), ds.in_shape.size() * sizeof(int), h);
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        h = detail::fnv1a64(s.image.data(), s.image.size() * sizeof(float), h);
        h = detail::fnv1a64(&s.label, sizeof s.label, h);
        if (!s.mask.empty()) h = detail::fnv1a64(s.mask.data(), s.mask.size() * sizeof(float), h);
        const int tag = static_cast<int>(ds.splits[i]);
        h = detail::fnv1a64(&tag, sizeof tag, h);
    }
    return h;
}

inline std::string model_name(const sharing::SharingPlan& plan) {
    return std::string(sharing::to_string(plan.config)) + "-" +
           sharing::to_string(plan.strategy);
}

inline std::string fingerprint(const sharing::SharingPlan& plan, uint64_t seed, uint64_t ds_hash,
                               int epochs) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s|%s|%s|T=%.6g|w=%.10g,%.10g,%.10g,%.10g,%.10g,%.10g|%.10g",
                  model_name(plan).c_str(), to_string(plan.task),
                  sharing::to_string(plan.schedule), plan.temperature, plan.weights.s1.alpha,
                  plan.weights.s1.beta, plan.weights.s1.gamma, plan.weights.s2.alpha,
                  plan.weights.s2.beta, plan.weights.s2.gamma, plan.weights.teacher);
    uint64_t h = detail::fnv1a64(std::string(buf));
    h = detail::fnv1a64(&seed, sizeof seed, h);
    h = detail::fnv1a64(&ds_hash, sizeof ds_hash, h);
    h = detail::fnv1a64(&epochs, sizeof epochs, h);
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct TrainOptions {
    int batch_size = 8;
    double lr = 1e-4;
    bool augment = true;
    int eval_batch = 32;
};

namespace detail {

// Averages step-level reports into one report per network.
class EpochAccumulator {
public:
    void add(const sharing::LossReport& r) {
        auto& slot = acc_[r.network];
        if (slot.counts == 0) {
            slot.report = r;
        } else {
            slot.report.total += r.total;
            for (size_t i = 0; i < r.components.size(); ++i)
                slot.report.components[i].value += r.components[i].value;
        }
        ++slot.counts;
    }

    std::vector<sharing::LossReport> take() {
        std::vector<sharing::LossReport> out;
        for (auto& [_, slot] : acc_) {
            slot.report.total /= slot.counts;
            for (auto& c : slot.report.components) c.value /= slot.counts;
            out.push_back(std::move(slot.report));
        }
        acc_.clear();
        return out;
    }

private:
    struct Slot {
        sharing::LossReport report;
        int counts = 0;
    };
    std::map<std::string, Slot> acc_;
};

template <class T>
void zero_all_grads(GroupT<T>& g) {
    for (auto& [_, net] : g.nets) net->zero_grad();
    for (auto& [_, a] : g.adapters) {
        a->w->zero_grad();
        a->b->zero_grad();
    }
}

template <class T>
void check_finite(const std::vector<std::pair<std::string, sharing::LossReport>>& reports,
                  int64_t step) {
    for (const auto& [name, r] : reports)
        if (!std::isfinite(r.total))
            throw divergence_error("non-finite loss for " + name + " at step " +
                                   std::to_string(step));
}

template <class T>
AdamT<T> make_optimizer(const GroupT<T>& g, const sharing::SharingPlan& plan,
                        const std::string& net_name, double lr) {
    AdamT<T> o(lr);
    o.add_params(g.nets.at(net_name)->params);
    // a student's optimizer also owns the adapters on its incoming edges
    for (const auto& e : plan.edges) {
        if (e.dst != net_name) continue;
        auto it = g.adapters.find(sharing::edge_key(e));
        if (it == g.adapters.end()) continue;
        o.add_param(it->second->w);
        o.add_param(it->second->b);
    }
    return o;
}

}  // namespace detail

inline double primary_ensemble(const std::map<std::string, double>& m, Task task) {
    return m.at(task == Task::classification ? "accuracy/ensemble" : "iou/ensemble");
}

// Simultaneous schedule: teacher (when present) and students advance together
// each step, all objectives taken from a single shared forward pass.
template <class T>
RunRecord train_online(const sharing::SharingPlan& plan, GroupT<T>& group,
                       const data::Dataset& ds, int epochs, uint64_t seed,
                       const TrainOptions& opt = {}) {
    if (plan.schedule != sharing::Schedule::online)
        throw contract_error("train_online: plan prescribes the offline schedule");
    const auto t0 = std::chrono::steady_clock::now();
    const auto train_idx = data::indices_of(ds, data::SplitTag::train);
    if (train_idx.empty()) throw contract_error("train_online: no train split");

    std::map<std::string, AdamT<T>> optims;
    for (const auto& [name, _] : plan.networks)
        optims.emplace(name, detail::make_optimizer(group, plan, name, opt.lr));

    RunRecord rec;
    rec.seed = seed;
    rec.model = model_name(plan);
    rec.fingerprint = fingerprint(plan, seed, dataset_hash(ds), epochs);

    Rng order_rng(derive_seed(seed, "batch_order"));
    int64_t step = 0;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        detail::EpochAccumulator log;
        for (const auto& bidx : data::epoch_batches(train_idx, opt.batch_size, order_rng)) {
            ++step;
            auto batch = data::make_batch<T>(ds, bidx);
            if (opt.augment)
                batch = data::augment(batch, derive_seed(seed, "aug:" + std::to_string(step)));
            auto out = forward_group(group, batch.x, batch.y);

            std::vector<std::pair<std::string, sharing::LossReport>> reports;
            std::vector<TensorPtrT<T>> totals;
            if (plan.has_teacher()) {
                auto [total, report] = sharing::teacher_objective(plan, out, 1);
                totals.push_back(total);
                reports.emplace_back("T", std::move(report));
            }
            for (const auto& s : plan.students()) {
                auto [total, report] = sharing::student_objective(plan, s, out);
                totals.push_back(total);
                reports.emplace_back(s, std::move(report));
            }
            detail::check_finite<T>(reports, step);

            detail::zero_all_grads(group);
            for (const auto& t : totals) backward(t);
            for (auto& [_, o] : optims) o.step();
            for (const auto& [_, r] : reports) log.add(r);
        }
        rec.epochs.push_back({epoch, log.take()});
    }

    rec.metrics = evaluate(group, plan, ds, data::SplitTag::test, opt.eval_batch);
    rec.ensemble = primary_ensemble(rec.metrics, plan.task);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

// Two-phase schedule: the teacher trains alone first, then stays frozen while
// the students train against it.
template <class T>
RunRecord train_offline(const sharing::SharingPlan& plan, GroupT<T>& group,
                        const data::Dataset& ds, int epochs_teacher, int epochs_student,
                        uint64_t seed, const TrainOptions& opt = {}) {
    if (plan.schedule != sharing::Schedule::offline)
        throw contract_error("train_offline: plan prescribes the online schedule");
    const auto t0 = std::chrono::steady_clock::now();
    const auto train_idx = data::indices_of(ds, data::SplitTag::train);
    if (train_idx.empty()) throw contract_error("train_offline: no train split");

    RunRecord rec;
    rec.seed = seed;
    rec.model = model_name(plan);
    rec.fingerprint = fingerprint(plan, seed, dataset_hash(ds), epochs_teacher + epochs_student);

    Rng order_rng(derive_seed(seed, "batch_order"));
    int64_t step = 0;
    auto& teacher = *group.nets.at("T");

    AdamT<T> teacher_opt(opt.lr);
    teacher_opt.add_params(teacher.params);
    for (int epoch = 1; epoch <= epochs_teacher; ++epoch) {
        detail::EpochAccumulator log;
        for (const auto& bidx : data::epoch_batches(train_idx, opt.batch_size, order_rng)) {
            ++step;
            auto batch = data::make_batch<T>(ds, bidx);
            if (opt.augment)
                batch = data::augment(batch, derive_seed(seed, "aug:" + std::to_string(step)));
            sharing::BatchOutputsT<T> out;
            auto r = teacher.forward(batch.x);
            out.nets["T"] = {r.output, r.logits, r.taps};
            out.y = batch.y;
            auto [total, report] = sharing::teacher_objective(plan, out, 1);
            std::vector<std::pair<std::string, sharing::LossReport>> reports{{"T", report}};
            detail::check_finite<T>(reports, step);
            teacher.zero_grad();
            backward(total);
            teacher_opt.step();
            log.add(report);
        }
        rec.epochs.push_back({epoch, log.take()});
    }

    teacher.set_requires_grad(false);
    std::map<std::string, AdamT<T>> optims;
    for (const auto& s : plan.students())
        optims.emplace(s, detail::make_optimizer(group, plan, s, opt.lr));
    for (int epoch = 1; epoch <= epochs_student; ++epoch) {
        detail::EpochAccumulator log;
        for (const auto& bidx : data::epoch_batches(train_idx, opt.batch_size, order_rng)) {
            ++step;
            auto batch = data::make_batch<T>(ds, bidx);
            if (opt.augment)
                batch = data::augment(batch, derive_seed(seed, "aug:" + std::to_string(step)));
            auto out = forward_group(group, batch.x, batch.y);
            std::vector<std::pair<std::string, sharing::LossReport>> reports;
            std::vector<TensorPtrT<T>> totals;
            for (const auto& s : plan.students()) {
                auto [total, report] = sharing::student_objective(plan, s, out);
                totals.push_back(total);
                reports.emplace_back(s, std::move(report));
            }
            detail::check_finite<T>(reports, step);
            detail::zero_all_grads(group);
            for (const auto& t : totals) backward(t);
            for (auto& [_, o] : optims) o.step();
            for (const auto& [_, r] : reports) log.add(r);
        }
        rec.epochs.push_back({epochs_teacher + epoch, log.take()});
    }

    rec.metrics = evaluate(group, plan, ds, data::SplitTag::test, opt.eval_batch);
    rec.ensemble = primary_ensemble(rec.metrics, plan.task);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

// Exhaustive weight search over the declared per-weight value lists.
// Configurations with coupled weights enumerate only their free weights; the
// coupled ones are derived, so no identity-violating cell is ever evaluated.
struct GridSpace {
    std::vector<double> alpha{0.1, 0.2, 0.3, 0.4, 0.45};
    std::vector<double> beta{0.1, 0.2, 0.3, 0.4, 0.45};
    std::vector<double> gamma{0.1, 0.2, 0.3, 0.4, 0.45};
    std::vector<double> alpha2{0.1, 0.2, 0.3, 0.4, 0.45};
    std::vector<double> beta2{0.1, 0.2, 0.3, 0.4, 0.45};
    std::vector<double> gamma2{0.1, 0.2, 0.3, 0.4, 0.45};
};

inline std::vector<sharing::WeightSet> grid_cells(sharing::Config config, const GridSpace& s) {
    std::vector<sharing::WeightSet> cells;
    const bool kd_only = config == sharing::Config::KD_on || config == sharing::Config::KD_off;
    if (kd_only) {
        for (double a : s.alpha)
            for (double a2 : s.alpha2)
                cells.push_back({{a, 1.0 - a, 0.0}, {a2, 1.0 - a2, 0.0}});
    } else if (config == sharing::Config::ML) {
        for (double a : s.alpha)
            for (double a2 : s.alpha2)
                cells.push_back({{a, 0.0, 1.0 - a}, {a2, 0.0, 1.0 - a2}});
    } else {
        for (double a : s.alpha)
            for (double b : s.beta)
                for (double g : s.gamma)
                    for (double a2 : s.alpha2)
                        for (double b2 : s.beta2)
                            for (double g2 : s.gamma2)
                                cells.push_back({{a, b, g}, {a2, b2, g2}});
    }
    return cells;
}

// objective(weights, budget_epochs) -> validation ensemble metric, maximized.
// Ties go to the smallest total distillation weight, then lexicographically
// smallest weight tuple.
inline sharing::WeightSet grid_search(
    sharing::Config config, const GridSpace& space, int budget_epochs,
    const std::function<double(const sharing::WeightSet&, int)>& objective) {
    const auto cells = grid_cells(config, space);
    if (cells.empty()) throw contract_error("grid_search: empty grid");
    auto rank = [](const sharing::WeightSet& w) {
        return std::tuple(w.s1.beta + w.s1.gamma + w.s2.beta + w.s2.gamma, w.s1.alpha, w.s1.beta,
                          w.s1.gamma, w.s2.alpha, w.s2.beta, w.s2.gamma);
    };
    bool have_best = false;
    sharing::WeightSet best;
    double best_val = 0.0;
    for (const auto& w : cells) {
        const double val = objective(w, budget_epochs);
        if (!std::isfinite(val)) continue;
        if (!have_best || val > best_val || (val == best_val && rank(w) < rank(best))) {
            have_best = true;
            best = w;
            best_val = val;
        }
    }
    if (!have_best) throw divergence_error("grid_search: every cell produced a non-finite objective");
    return best;
}

struct MetricStats {
    double mean = 0.0;
    double stddev = 0.0;  // population (n divisor)
    int count = 0;
};

inline MetricStats summarize(std::vector<double> xs) {
    if (xs.empty()) throw contract_error("summarize: no values");
    std::sort(xs.begin(), xs.end());
    MetricStats s;
    s.count = static_cast<int>(xs.size());
    for (double x : xs) s.mean += x;
    s.mean /= s.count;
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(var / s.count);
    return s;
}

// run_one(seed) -> {metric name: value}; returns per-metric mean and
// population std over the seeds. Seed order cannot affect the result.
template <class RunFn>
std::map<std::string, MetricStats> multi_run(RunFn&& run_one,
                                             const std::vector<uint64_t>& seeds) {
    if (seeds.empty()) throw contract_error("multi_run: no seeds");
    std::map<std::string, std::vector<double>> collected;
    for (uint64_t s : seeds)
        for (const auto& [k, v] : run_one(s)) collected[k].push_back(v);
    std::map<std::string, MetricStats> out;
    for (auto& [k, vs] : collected) {
        if (vs.size() != seeds.size())
            throw contract_error("multi_run: metric " + k + " missing from some runs");
        out[k] = summarize(std::move(vs));
    }
    return out;
}

}  // namespace kdml::train
