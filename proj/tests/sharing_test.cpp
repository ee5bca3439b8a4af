#include "kdml/sharing.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "kdml/train.hpp"
#include "oracles.hpp"

using kdml::Role;
using kdml::Task;
namespace sharing = kdml::sharing;
namespace data = kdml::data;
namespace train = kdml::train;

using sharing::Channel;
using sharing::Config;
using sharing::Edge;
using sharing::Strategy;

namespace {

const Channel P = Channel::predictions;
const Channel F = Channel::features;

sharing::WeightSet free_weights() {
    return {{0.2, 0.5, 0.3}, {0.4, 0.25, 0.35}};
}

sharing::WeightSet kd_weights(double a1 = 0.3, double a2 = 0.4) {
    return {{a1, 1.0 - a1, 0.0}, {a2, 1.0 - a2, 0.0}};
}

sharing::WeightSet ml_weights(double a1 = 0.3, double a2 = 0.4) {
    return {{a1, 0.0, 1.0 - a1}, {a2, 0.0, 1.0 - a2}};
}

template <class T>
double grad_abs_sum(const kdml::nets::NetworkT<T>& net) {
    double s = 0.0;
    for (const auto& [name, p] : net.params)
        for (auto g : p->grad) s += std::abs(static_cast<double>(g));
    return s;
}

sharing::BatchOutputsT<float> classification_outputs(const sharing::SharingPlan& plan,
                                                     train::GroupT<float>& group,
                                                     uint64_t seed = 77) {
    group = train::build_group<float>(plan, {1, 16, 16}, 2, seed);
    auto ds = data::synth_classification(8, 16, seed);
    auto batch = data::make_batch<float>(ds, {0, 1, 2, 3, 4, 5, 6, 7});
    return train::forward_group(group, batch.x, batch.y);
}

TEST(Sharing, ParseRoundTrip) {
    for (auto c : {Config::ML, Config::KD_on, Config::KD_off, Config::KD_ML})
        EXPECT_EQ(sharing::parse_config(sharing::to_string(c)), c);
    for (auto s : {Strategy::V1, Strategy::V2, Strategy::V3})
        EXPECT_EQ(sharing::parse_strategy(sharing::to_string(s)), s);
    EXPECT_THROW(sharing::parse_config("KD"), kdml::config_error);
    EXPECT_THROW(sharing::parse_strategy("V4"), kdml::config_error);
}

TEST(Sharing, EdgeKeyFormat) {
    EXPECT_EQ(sharing::edge_key({"T", "S1", P}), "T->S1");
}

TEST(Sharing, ChannelMatrix) {
    using E = std::vector<Edge>;
    const auto plan = [](Config c, Strategy s) {
        auto w = c == Config::KD_ML ? free_weights()
                 : c == Config::ML  ? ml_weights()
                                    : kd_weights();
        return sharing::build_plan(c, s, Task::classification, w, 2.0);
    };
    EXPECT_EQ(plan(Config::ML, Strategy::V1).edges, (E{{"S1", "S2", P}, {"S2", "S1", P}}));
    EXPECT_EQ(plan(Config::ML, Strategy::V2).edges, (E{{"S1", "S2", F}, {"S2", "S1", F}}));
    EXPECT_EQ(plan(Config::ML, Strategy::V3).edges, (E{{"S1", "S2", P}, {"S2", "S1", F}}));
    for (auto c : {Config::KD_on, Config::KD_off}) {
        EXPECT_EQ(plan(c, Strategy::V1).edges, (E{{"T", "S1", P}, {"T", "S2", P}}));
        EXPECT_EQ(plan(c, Strategy::V2).edges, (E{{"T", "S1", F}, {"T", "S2", F}}));
        EXPECT_EQ(plan(c, Strategy::V3).edges, (E{{"T", "S1", P}, {"T", "S2", F}}));
    }
    EXPECT_EQ(plan(Config::KD_ML, Strategy::V1).edges,
              (E{{"T", "S1", P}, {"T", "S2", P}, {"S1", "S2", P}, {"S2", "S1", P}}));
    EXPECT_EQ(plan(Config::KD_ML, Strategy::V2).edges,
              (E{{"T", "S1", F}, {"T", "S2", F}, {"S1", "S2", F}, {"S2", "S1", F}}));
    EXPECT_EQ(plan(Config::KD_ML, Strategy::V3).edges,
              (E{{"T", "S1", F}, {"T", "S2", P}, {"S1", "S2", F}, {"S2", "S1", P}}));
}

TEST(Sharing, TeacherPresenceAndSchedule) {
    auto ml = sharing::build_plan(Config::ML, Strategy::V1, Task::classification, ml_weights(), 2.0);
    EXPECT_FALSE(ml.has_teacher());
    EXPECT_EQ(ml.schedule, sharing::Schedule::online);
    auto on = sharing::build_plan(Config::KD_on, Strategy::V1, Task::classification, kd_weights(), 2.0);
    EXPECT_TRUE(on.has_teacher());
    EXPECT_EQ(on.schedule, sharing::Schedule::online);
    auto off =
        sharing::build_plan(Config::KD_off, Strategy::V1, Task::classification, kd_weights(), 2.0);
    EXPECT_EQ(off.schedule, sharing::Schedule::offline);
    auto both =
        sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, free_weights(), 2.0);
    EXPECT_TRUE(both.has_teacher());
    EXPECT_EQ(both.students(), (std::vector<std::string>{"S1", "S2"}));
}

TEST(Sharing, V3SwapMirrorsChannels) {
    using E = std::vector<Edge>;
    auto kd = sharing::build_plan(Config::KD_on, Strategy::V3, Task::classification, kd_weights(),
                                  2.0, true);
    EXPECT_EQ(kd.edges, (E{{"T", "S1", F}, {"T", "S2", P}}));
    auto ml =
        sharing::build_plan(Config::ML, Strategy::V3, Task::classification, ml_weights(), 2.0, true);
    EXPECT_EQ(ml.edges, (E{{"S1", "S2", F}, {"S2", "S1", P}}));
    auto both = sharing::build_plan(Config::KD_ML, Strategy::V3, Task::classification,
                                    free_weights(), 2.0, true);
    EXPECT_EQ(both.edges,
              (E{{"T", "S1", P}, {"T", "S2", F}, {"S1", "S2", P}, {"S2", "S1", F}}));
    // the swapped single-family V3 edge sets are subsets of the unswapped combined plan
    auto combined =
        sharing::build_plan(Config::KD_ML, Strategy::V3, Task::classification, free_weights(), 2.0);
    for (const auto& e : kd.edges)
        EXPECT_NE(std::find(combined.edges.begin(), combined.edges.end(), e), combined.edges.end());
    for (const auto& e : ml.edges)
        EXPECT_NE(std::find(combined.edges.begin(), combined.edges.end(), e), combined.edges.end());
    // swapping V1 or V2 changes nothing
    auto v1 = sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, free_weights(),
                                  2.0, true);
    for (const auto& e : v1.edges) EXPECT_EQ(e.channel, P);
}

TEST(Sharing, WeightIdentityViolations) {
    auto bad = kd_weights();
    bad.s1.gamma = 0.1;
    EXPECT_THROW(sharing::build_plan(Config::KD_on, Strategy::V1, Task::classification, bad, 2.0),
                 kdml::config_error);
    bad = kd_weights();
    bad.s2.beta = 0.5;
    EXPECT_THROW(sharing::build_plan(Config::KD_off, Strategy::V1, Task::classification, bad, 2.0),
                 kdml::config_error);
    bad = ml_weights();
    bad.s1.beta = 0.2;
    EXPECT_THROW(sharing::build_plan(Config::ML, Strategy::V1, Task::classification, bad, 2.0),
                 kdml::config_error);
    bad = ml_weights();
    bad.s2.gamma = 0.9;
    EXPECT_THROW(sharing::build_plan(Config::ML, Strategy::V1, Task::classification, bad, 2.0),
                 kdml::config_error);
    auto negative = free_weights();
    negative.s1.alpha = -0.1;
    EXPECT_THROW(
        sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, negative, 2.0),
        kdml::config_error);
    EXPECT_THROW(
        sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, free_weights(), 0.0),
        kdml::config_error);
    EXPECT_NO_THROW(
        sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, free_weights(), 2.0));
}

TEST(Sharing, PlanAccessors) {
    auto plan =
        sharing::build_plan(Config::KD_ML, Strategy::V3, Task::classification, free_weights(), 2.0);
    EXPECT_EQ(plan.role_of("T"), Role::teacher);
    EXPECT_EQ(plan.role_of("S1"), Role::student);
    EXPECT_THROW(plan.role_of("S9"), kdml::contract_error);
    EXPECT_EQ(plan.weights_of("S1").alpha, 0.2);
    EXPECT_EQ(plan.weights_of("S2").alpha, 0.4);
    EXPECT_THROW(plan.weights_of("T"), kdml::contract_error);
    auto in = plan.incoming("S1");
    ASSERT_EQ(in.size(), 2u);
    EXPECT_EQ(in[0], (Edge{"T", "S1", F}));
    EXPECT_EQ(in[1], (Edge{"S2", "S1", P}));
}

TEST(Sharing, LossReportConsistency) {
    sharing::LossReport r;
    r.components = {{"task", 0.5, 1.0}, {"kd", 0.25, 2.0}};
    r.total = 1.0;
    EXPECT_TRUE(r.consistent());
    r.total = 1.1;
    EXPECT_FALSE(r.consistent());
}

TEST(Sharing, StudentObjectiveCompositionV1) {
    auto plan =
        sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, free_weights(), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(plan, group);
    auto [total, report] = sharing::student_objective(plan, "S1", out);
    EXPECT_EQ(report.network, "S1");
    ASSERT_EQ(report.components.size(), 3u);
    EXPECT_EQ(report.components[0].name, "task");
    EXPECT_EQ(report.components[1].name, "kd");
    EXPECT_EQ(report.components[2].name, "ml");
    EXPECT_EQ(report.components[0].weight, 0.2);
    EXPECT_EQ(report.components[1].weight, 0.5);
    EXPECT_EQ(report.components[2].weight, 0.3);
    EXPECT_TRUE(report.consistent());
    EXPECT_FLOAT_EQ(total->data[0], static_cast<float>(report.total));

    const auto& s1 = out.nets.at("S1");
    auto ce = kdml::losses::cross_entropy(kdml::losses::softmax_T(s1.logits, 1.0), out.y);
    EXPECT_NEAR(report.components[0].value, ce->data[0], 1e-6);
    auto kd = kdml::losses::kl_div(kdml::losses::softmax_T(out.nets.at("T").logits, 2.0),
                                   kdml::losses::softmax_T(s1.logits, 2.0));
    EXPECT_NEAR(report.components[1].value, kd->data[0], 1e-6);
    auto ml = kdml::losses::kl_div(kdml::losses::softmax_T(out.nets.at("S2").logits, 2.0),
                                   kdml::losses::softmax_T(s1.logits, 2.0));
    EXPECT_NEAR(report.components[2].value, ml->data[0], 1e-6);
}

TEST(Sharing, StudentObjectiveRejectsNonStudents) {
    auto plan =
        sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, free_weights(), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(plan, group);
    EXPECT_THROW(sharing::student_objective(plan, "T", out), kdml::contract_error);
    EXPECT_THROW(sharing::student_objective(plan, "S7", out), kdml::contract_error);
}

TEST(Sharing, TeacherObjectiveIsTaskOnly) {
    auto w = free_weights();
    w.teacher = 0.5;
    auto plan = sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, w, 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(plan, group);
    auto [total, report] = sharing::teacher_objective(plan, out);
    ASSERT_EQ(report.components.size(), 1u);
    EXPECT_EQ(report.components[0].name, "task");
    EXPECT_EQ(report.components[0].weight, 0.5);
    EXPECT_TRUE(report.consistent());

    auto ml = sharing::build_plan(Config::ML, Strategy::V1, Task::classification, ml_weights(), 2.0);
    train::GroupT<float> mlg;
    auto mlout = classification_outputs(ml, mlg);
    EXPECT_THROW(sharing::teacher_objective(ml, mlout), kdml::contract_error);

    auto off =
        sharing::build_plan(Config::KD_off, Strategy::V1, Task::classification, kd_weights(), 2.0);
    train::GroupT<float> offg;
    auto offout = classification_outputs(off, offg);
    EXPECT_THROW(sharing::teacher_objective(off, offout, 2), kdml::contract_error);
}

TEST(Sharing, IncomingKnowledgeIsDetached) {
    auto plan =
        sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, free_weights(), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(plan, group);
    auto [total, report] = sharing::student_objective(plan, "S1", out);
    for (auto& [_, net] : group.nets) net->zero_grad();
    kdml::backward(total);
    EXPECT_GT(grad_abs_sum(*group.nets.at("S1")), 0.0);
    EXPECT_EQ(grad_abs_sum(*group.nets.at("T")), 0.0);
    EXPECT_EQ(grad_abs_sum(*group.nets.at("S2")), 0.0);
}

TEST(Sharing, FeatureEdgeTrainsAdapterNotSender) {
    auto plan =
        sharing::build_plan(Config::KD_ML, Strategy::V3, Task::classification, free_weights(), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(plan, group);
    // teacher tap {64,2,2} vs student tap {16,8,8}: the T->S1 feature edge owns an adapter
    ASSERT_TRUE(out.adapters.count("T->S1"));
    EXPECT_FALSE(out.adapters.count("S1->S2"));
    auto [total, report] = sharing::student_objective(plan, "S1", out);
    for (auto& [_, net] : group.nets) net->zero_grad();
    auto adapter = out.adapters.at("T->S1");
    adapter->w->zero_grad();
    adapter->b->zero_grad();
    kdml::backward(total);
    double adapter_grad = 0.0;
    for (auto g : adapter->w->grad) adapter_grad += std::abs(static_cast<double>(g));
    EXPECT_GT(adapter_grad, 0.0);
    EXPECT_EQ(grad_abs_sum(*group.nets.at("T")), 0.0);
}

TEST(Sharing, MissingAdapterIsConfigError) {
    auto plan =
        sharing::build_plan(Config::KD_ML, Strategy::V3, Task::classification, free_weights(), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(plan, group);
    out.adapters.clear();
    try {
        sharing::student_objective(plan, "S1", out);
        FAIL() << "expected config_error";
    } catch (const kdml::config_error& e) {
        EXPECT_NE(std::string(e.what()).find("T->S1"), std::string::npos);
    }
}

TEST(Sharing, FeatureEdgeNeedsExactlyOneTap) {
    auto plan = sharing::build_plan(Config::ML, Strategy::V2, Task::classification, ml_weights(), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(plan, group);
    out.nets.at("S2").taps.clear();
    EXPECT_THROW(sharing::student_objective(plan, "S1", out), kdml::config_error);
}

TEST(Sharing, SegmentationObjectiveComposition) {
    auto plan =
        sharing::build_plan(Config::KD_ML, Strategy::V3, Task::segmentation, free_weights(), 2.0);
    auto group = train::build_group<float>(plan, {1, 16, 16}, 2, 5);
    auto ds = data::synth_segmentation(4, 16, 5);
    auto batch = data::make_batch<float>(ds, {0, 1, 2, 3});
    auto out = train::forward_group(group, batch.x, batch.y);
    for (const auto& student : {"S1", "S2"}) {
        auto [total, report] = sharing::student_objective(plan, student, out);
        EXPECT_TRUE(report.consistent());
        EXPECT_TRUE(std::isfinite(report.total));
        ASSERT_EQ(report.components.size(), 3u);
    }
    const auto& s2 = out.nets.at("S2");
    auto fd = kdml::losses::fd_loss(s2.output, out.y, 2.0);
    auto [total2, report2] = sharing::student_objective(plan, "S2", out);
    EXPECT_NEAR(report2.components[0].value, fd->data[0], 1e-6);
}

TEST(Sharing, ReductionCheckV1) {
    const sharing::WeightSet w{{0.4, 0.6, 0.6}, {0.25, 0.75, 0.75}};
    auto combined = sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, w, 2.0);
    auto kd = sharing::build_plan(Config::KD_on, Strategy::V1, Task::classification,
                                  kd_weights(0.4, 0.25), 2.0);
    auto ml = sharing::build_plan(Config::ML, Strategy::V1, Task::classification,
                                  ml_weights(0.4, 0.25), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(combined, group);
    EXPECT_TRUE(sharing::reduction_check(combined, kd, ml, out));
    EXPECT_TRUE(sharing::reduction_check(combined, kd, ml, out, 0.0));
}

TEST(Sharing, ReductionCheckV3UsesSwappedSubPlans) {
    const sharing::WeightSet w{{0.4, 0.6, 0.6}, {0.25, 0.75, 0.75}};
    auto combined = sharing::build_plan(Config::KD_ML, Strategy::V3, Task::classification, w, 2.0);
    auto kd = sharing::build_plan(Config::KD_on, Strategy::V3, Task::classification,
                                  kd_weights(0.4, 0.25), 2.0, true);
    auto ml = sharing::build_plan(Config::ML, Strategy::V3, Task::classification,
                                  ml_weights(0.4, 0.25), 2.0, true);
    train::GroupT<float> group;
    auto out = classification_outputs(combined, group);
    EXPECT_TRUE(sharing::reduction_check(combined, kd, ml, out));

    auto kd_unswapped = sharing::build_plan(Config::KD_on, Strategy::V3, Task::classification,
                                            kd_weights(0.4, 0.25), 2.0);
    EXPECT_THROW(sharing::reduction_check(combined, kd_unswapped, ml, out), kdml::config_error);
}

TEST(Sharing, ReductionCheckDetectsWeightMismatch) {
    const sharing::WeightSet w{{0.4, 0.6, 0.6}, {0.25, 0.75, 0.75}};
    auto combined = sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, w, 2.0);
    auto kd = sharing::build_plan(Config::KD_on, Strategy::V1, Task::classification,
                                  kd_weights(0.45, 0.25), 2.0);
    auto ml = sharing::build_plan(Config::ML, Strategy::V1, Task::classification,
                                  ml_weights(0.4, 0.25), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(combined, group);
    EXPECT_FALSE(sharing::reduction_check(combined, kd, ml, out));
}

TEST(Sharing, ReductionCheckValidatesPlanKinds) {
    const sharing::WeightSet w{{0.4, 0.6, 0.6}, {0.25, 0.75, 0.75}};
    auto combined = sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification, w, 2.0);
    auto kd = sharing::build_plan(Config::KD_on, Strategy::V1, Task::classification,
                                  kd_weights(0.4, 0.25), 2.0);
    auto ml = sharing::build_plan(Config::ML, Strategy::V1, Task::classification,
                                  ml_weights(0.4, 0.25), 2.0);
    train::GroupT<float> group;
    auto out = classification_outputs(combined, group);
    EXPECT_THROW(sharing::reduction_check(kd, kd, ml, out), kdml::contract_error);
    EXPECT_THROW(sharing::reduction_check(combined, ml, ml, out), kdml::contract_error);
    EXPECT_THROW(sharing::reduction_check(combined, kd, combined, out), kdml::contract_error);
}

}  // namespace
