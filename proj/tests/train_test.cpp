#include "kdml/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kdml/checkpoint.hpp"
#include "kdml/metrics.hpp"
#include "oracles.hpp"

using kdml::Task;
namespace data = kdml::data;
namespace metrics = kdml::metrics;
namespace sharing = kdml::sharing;
namespace train = kdml::train;

using sharing::Config;
using sharing::Strategy;

namespace {

sharing::WeightSet free_weights() {
    return {{0.2, 0.5, 0.3}, {0.4, 0.25, 0.35}};
}

data::Dataset tiny_classification(int n = 24, uint64_t seed = 9) {
    auto ds = data::synth_classification(n, 16, seed);
    data::split(ds, seed);
    return ds;
}

template <class T>
std::vector<std::pair<std::string, kdml::TensorPtrT<T>>> flat_params(
    const train::GroupT<T>& g) {
    std::vector<std::pair<std::string, kdml::TensorPtrT<T>>> out;
    for (const auto& [name, net] : g.nets)
        for (const auto& [pname, p] : net->params) out.emplace_back(name + "/" + pname, p);
    return out;
}

TEST(Metrics, EnsembleClassifyMaxThenArgmax) {
    auto p1 = kdml::make_tensor<float>({2, 3}, {0.5f, 0.3f, 0.2f, 0.2f, 0.2f, 0.6f}, false);
    auto p2 = kdml::make_tensor<float>({2, 3}, {0.1f, 0.6f, 0.3f, 0.3f, 0.5f, 0.2f}, false);
    auto votes = metrics::ensemble_classify<float>({{p1, 1.0}, {p2, 1.0}});
    EXPECT_EQ(votes, (std::vector<int>{1, 2}));
}

TEST(Metrics, EnsembleClassifyTiesPickLowestClass) {
    auto p1 = kdml::make_tensor<float>({1, 3}, {0.4f, 0.4f, 0.2f}, false);
    auto p2 = kdml::make_tensor<float>({1, 3}, {0.3f, 0.4f, 0.2f}, false);
    auto votes = metrics::ensemble_classify<float>({{p1, 1.0}, {p2, 1.0}});
    EXPECT_EQ(votes, (std::vector<int>{0}));
}

TEST(Metrics, EnsembleClassifyMatchesReference) {
    kdml::Rng rng(31);
    const int B = 16, K = 5;
    for (int trial = 0; trial < 50; ++trial) {
        auto z1 = oracle::tensor_from<float>({B, K}, oracle::random_vec(B * K, rng), false);
        auto z2 = oracle::tensor_from<float>({B, K}, oracle::random_vec(B * K, rng), false);
        auto p1 = kdml::losses::softmax_T(z1, 1.0);
        auto p2 = kdml::losses::softmax_T(z2, 1.0);
        auto votes = metrics::ensemble_classify<float>({p1, p2});
        for (int b = 0; b < B; ++b) {
            int best = 0;
            float best_p = -1.0f;
            for (int k = 0; k < K; ++k) {
                const float p = std::max(p1.probs->data[b * K + k], p2.probs->data[b * K + k]);
                if (p > best_p) {
                    best_p = p;
                    best = k;
                }
            }
            EXPECT_EQ(votes[b], best);
        }
    }
}

TEST(Metrics, EnsembleClassifyErrors) {
    EXPECT_THROW(metrics::ensemble_classify<float>({}), kdml::contract_error);
    auto a = kdml::make_tensor<float>({1, 3}, {0.2f, 0.3f, 0.5f}, false);
    auto b = kdml::make_tensor<float>({1, 2}, {0.5f, 0.5f}, false);
    EXPECT_THROW(metrics::ensemble_classify<float>({{a, 1.0}, {b, 1.0}}), kdml::shape_error);
    auto flat = kdml::make_tensor<float>({3}, {0.2f, 0.3f, 0.5f}, false);
    EXPECT_THROW(metrics::ensemble_classify<float>({{flat, 1.0}}), kdml::shape_error);
}

TEST(Metrics, ThresholdMaskBoundary) {
    auto m = kdml::make_tensor<float>({1, 1, 1, 4}, {0.49f, 0.5f, 0.51f, 0.0f}, false);
    auto t = metrics::threshold_mask(m);
    EXPECT_EQ(t->data, (std::vector<float>{0, 1, 1, 0}));
}

TEST(Metrics, EnsembleMaskIsUnion) {
    auto a = kdml::make_tensor<float>({1, 1, 2, 2}, {0.9f, 0.1f, 0.6f, 0.2f}, false);
    auto b = kdml::make_tensor<float>({1, 1, 2, 2}, {0.1f, 0.8f, 0.7f, 0.3f}, false);
    auto u = metrics::ensemble_mask<float>({a, b});
    EXPECT_EQ(u->data, (std::vector<float>{1, 1, 1, 0}));
    kdml::Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = oracle::tensor_from<float>({2, 1, 4, 4}, oracle::random_vec(32, rng, 0.0, 1.0),
                                            false);
        auto y = oracle::tensor_from<float>({2, 1, 4, 4}, oracle::random_vec(32, rng, 0.0, 1.0),
                                            false);
        auto uni = metrics::ensemble_mask<float>({x, y});
        auto tx = metrics::threshold_mask(x);
        auto ty = metrics::threshold_mask(y);
        for (size_t i = 0; i < uni->data.size(); ++i) {
            EXPECT_GE(uni->data[i], tx->data[i]);
            EXPECT_GE(uni->data[i], ty->data[i]);
            EXPECT_EQ(uni->data[i], std::max(tx->data[i], ty->data[i]));
        }
    }
    EXPECT_THROW(metrics::ensemble_mask<float>({}), kdml::contract_error);
}

TEST(Metrics, SegScorePinned) {
    auto pred = kdml::make_tensor<float>({1, 1, 2, 2}, {1, 1, 0, 0}, false);
    auto gt = kdml::make_tensor<float>({1, 1, 2, 2}, {1, 0, 1, 0}, false);
    auto s = metrics::seg_score(pred, gt);
    EXPECT_NEAR(s.iou, 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(s.fscore, 0.5, 1e-12);
    EXPECT_NEAR(s.recall, 0.5, 1e-12);
}

TEST(Metrics, SegScoreEmptyCases) {
    auto zeros = kdml::zeros<float>({1, 1, 4, 4});
    auto s = metrics::seg_score(zeros, zeros);
    EXPECT_EQ(s.iou, 1.0);
    EXPECT_EQ(s.fscore, 1.0);
    EXPECT_EQ(s.recall, 1.0);
    auto gt = kdml::ones<float>({1, 1, 4, 4});
    auto miss = metrics::seg_score(zeros, gt);
    EXPECT_EQ(miss.iou, 0.0);
    EXPECT_EQ(miss.recall, 0.0);
}

TEST(Metrics, SegScoreBatchAveragesPerSample) {
    auto pred = kdml::make_tensor<float>({2, 1, 2, 2}, {1, 0, 1, 0, 1, 1, 0, 0}, false);
    auto gt = kdml::make_tensor<float>({2, 1, 2, 2}, {1, 0, 1, 0, 1, 0, 1, 0}, false);
    auto s = metrics::seg_score_batch(pred, gt);
    EXPECT_NEAR(s.iou, (1.0 + 1.0 / 3.0) / 2.0, 1e-12);
    EXPECT_NEAR(s.fscore, (1.0 + 0.5) / 2.0, 1e-12);
    EXPECT_THROW(metrics::seg_score_batch(pred, kdml::zeros<float>({2, 1, 4, 4})),
                 kdml::shape_error);
}

TEST(Metrics, AccuracyPinned) {
    EXPECT_EQ(metrics::accuracy({1, 0, 1, 1}, {1, 0, 0, 1}), 0.75);
    EXPECT_THROW(metrics::accuracy({1}, {1, 2}), kdml::contract_error);
    EXPECT_THROW(metrics::accuracy({}, {}), kdml::contract_error);
}

TEST(Checkpoint, RoundTripBitExact) {
    kdml::Rng rng(4);
    auto a = oracle::tensor_from<float>({2, 3}, oracle::random_vec(6, rng));
    auto b = oracle::tensor_from<float>({4}, oracle::random_vec(4, rng));
    const std::string path = ::testing::TempDir() + "ckpt_rt.bin";
    kdml::save_checkpoint<float>(path, {{"a", a}, {"net/b", b}});
    auto loaded = kdml::load_checkpoint<float>(path);
    ASSERT_EQ(loaded.size(), 2u);
    EXPECT_EQ(loaded[0].first, "a");
    EXPECT_EQ(loaded[0].second->shape, a->shape);
    EXPECT_EQ(loaded[0].second->data, a->data);
    EXPECT_EQ(loaded[1].first, "net/b");
    EXPECT_EQ(loaded[1].second->data, b->data);
}

TEST(Checkpoint, ByteLayout) {
    auto t = kdml::make_tensor<float>({1, 2}, {1.0f, -2.5f}, false);
    const std::string path = ::testing::TempDir() + "ckpt_layout.bin";
    kdml::save_checkpoint<float>(path, {{"ab", t}});
    std::ifstream is(path, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    const std::vector<unsigned char> want{
        1, 0, 0, 0,                                  // tensor count
        2, 0, 0, 0, 'a', 'b',                        // name
        2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0,          // rank, extents
        0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};  // payload
    EXPECT_EQ(bytes, want);
}

TEST(Checkpoint, LoadIntoValidates) {
    auto a = kdml::make_tensor<float>({2}, {1.0f, 2.0f}, true);
    const std::string path = ::testing::TempDir() + "ckpt_li.bin";
    kdml::save_checkpoint<float>(path, {{"a", a}});
    auto fresh = kdml::zeros<float>({2});
    std::vector<std::pair<std::string, kdml::TensorPtrT<float>>> target{{"a", fresh}};
    kdml::load_into(path, target);
    EXPECT_EQ(fresh->data, a->data);

    std::vector<std::pair<std::string, kdml::TensorPtrT<float>>> wrong_name{
        {"b", kdml::zeros<float>({2})}};
    EXPECT_THROW(kdml::load_into(path, wrong_name), kdml::contract_error);
    std::vector<std::pair<std::string, kdml::TensorPtrT<float>>> wrong_shape{
        {"a", kdml::zeros<float>({3})}};
    EXPECT_THROW(kdml::load_into(path, wrong_shape), kdml::shape_error);
    std::vector<std::pair<std::string, kdml::TensorPtrT<float>>> wrong_count{
        {"a", kdml::zeros<float>({2})}, {"b", kdml::zeros<float>({2})}};
    EXPECT_THROW(kdml::load_into(path, wrong_count), kdml::contract_error);
}

TEST(Checkpoint, TruncatedFileThrows) {
    const std::string path = ::testing::TempDir() + "ckpt_trunc.bin";
    {
        std::ofstream os(path, std::ios::binary);
        const unsigned char bytes[6] = {1, 0, 0, 0, 9, 0};
        os.write(reinterpret_cast<const char*>(bytes), 6);
    }
    EXPECT_THROW(kdml::load_checkpoint<float>(path), kdml::error);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
    auto p = kdml::make_tensor<float>({2}, {5.0f, -1.0f}, true);
    p->ensure_grad();
    p->grad[0] = 3.0f;
    p->grad[1] = -0.25f;
    train::AdamT<float> opt(0.01);
    opt.add_param(p);
    opt.step();
    EXPECT_EQ(opt.step_count(), 1);
    EXPECT_NEAR(p->data[0], 5.0 - 0.01, 1e-6);
    EXPECT_NEAR(p->data[1], -1.0 + 0.01, 1e-6);
}

TEST(Adam, AbsentGradientIsNoOp) {
    auto p = kdml::make_tensor<float>({2}, {1.5f, -2.0f}, true);
    train::AdamT<float> opt(0.1);
    opt.add_param(p);
    opt.step();
    opt.step();
    EXPECT_EQ(opt.step_count(), 2);
    EXPECT_EQ(p->data, (std::vector<float>{1.5f, -2.0f}));
}

TEST(Adam, ConvergesOnQuadratic) {
    auto x = kdml::make_tensor<float>({1}, {8.0f}, true);
    auto target = kdml::make_tensor<float>({1}, {2.0f}, false);
    train::AdamT<float> opt(0.05);
    opt.add_param(x);
    for (int i = 0; i < 2000; ++i) {
        x->zero_grad();
        auto loss = kdml::mean(kdml::square(kdml::sub(x, target)));
        kdml::backward(loss);
        opt.step();
    }
    EXPECT_NEAR(x->data[0], 2.0, 0.05);
}

TEST(Train, BuildGroupTopologyAndAdapters) {
    auto plan = sharing::build_plan(Config::KD_ML, Strategy::V3, Task::classification,
                                    free_weights(), 2.0);
    auto g = train::build_group<float>(plan, {1, 16, 16}, 2, 3);
    ASSERT_EQ(g.nets.size(), 3u);
    EXPECT_EQ(g.nets.at("T")->widths, (std::vector<int>{16, 32, 64, 64}));
    EXPECT_EQ(g.nets.at("S1")->widths, (std::vector<int>{8, 16}));
    ASSERT_EQ(g.adapters.size(), 1u);
    EXPECT_TRUE(g.adapters.count("T->S1"));

    auto v2 = sharing::build_plan(Config::KD_ML, Strategy::V2, Task::classification,
                                  free_weights(), 2.0);
    auto g2 = train::build_group<float>(v2, {1, 16, 16}, 2, 3);
    ASSERT_EQ(g2.adapters.size(), 2u);
    EXPECT_TRUE(g2.adapters.count("T->S1"));
    EXPECT_TRUE(g2.adapters.count("T->S2"));
}

TEST(Train, BuildGroupSeeding) {
    auto plan = sharing::build_plan(Config::ML, Strategy::V1, Task::classification,
                                    sharing::WeightSet{{0.3, 0, 0.7}, {0.3, 0, 0.7}}, 2.0);
    auto a = train::build_group<float>(plan, {1, 16, 16}, 2, 42);
    auto b = train::build_group<float>(plan, {1, 16, 16}, 2, 42);
    auto c = train::build_group<float>(plan, {1, 16, 16}, 2, 43);
    for (const auto& [name, net] : a.nets) {
        for (const auto& [pname, p] : net->params)
            EXPECT_EQ(p->data, b.nets.at(name)->param(pname)->data);
    }
    EXPECT_NE(a.nets.at("S1")->param("block1.w")->data,
              c.nets.at("S1")->param("block1.w")->data);
    EXPECT_NE(a.nets.at("S1")->param("block1.w")->data,
              a.nets.at("S2")->param("block1.w")->data);
}

TEST(Train, EvaluateKeysAndRanges) {
    auto plan = sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification,
                                    free_weights(), 2.0);
    auto ds = tiny_classification(40);
    auto g = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 1);
    auto m = train::evaluate(g, plan, ds, data::SplitTag::test);
    for (const auto& key : {"accuracy/T", "accuracy/S1", "accuracy/S2", "accuracy/ensemble"}) {
        ASSERT_TRUE(m.count(key)) << key;
        EXPECT_GE(m.at(key), 0.0);
        EXPECT_LE(m.at(key), 1.0);
    }
    EXPECT_EQ(m.size(), 4u);

    auto seg_plan = sharing::build_plan(Config::ML, Strategy::V1, Task::segmentation,
                                        sharing::WeightSet{{0.3, 0, 0.7}, {0.3, 0, 0.7}}, 2.0);
    auto seg = data::synth_segmentation(20, 16, 2);
    data::split(seg, 2);
    auto sg = train::build_group<float>(seg_plan, seg.in_shape, 2, 1);
    auto sm = train::evaluate(sg, seg_plan, seg, data::SplitTag::test);
    for (const auto& key : {"iou/S1", "iou/S2", "iou/ensemble", "fscore/S1", "fscore/S2",
                            "fscore/ensemble"})
        ASSERT_TRUE(sm.count(key)) << key;
    EXPECT_EQ(sm.size(), 6u);

    auto unsplit = data::synth_classification(10, 16, 1);
    EXPECT_THROW(train::evaluate(g, plan, unsplit, data::SplitTag::test), kdml::contract_error);
}

TEST(Train, EvaluateBatchSizeInvariance) {
    auto plan = sharing::build_plan(Config::ML, Strategy::V1, Task::classification,
                                    sharing::WeightSet{{0.3, 0, 0.7}, {0.3, 0, 0.7}}, 2.0);
    auto ds = tiny_classification(40);
    auto g = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 1);
    auto a = train::evaluate(g, plan, ds, data::SplitTag::test, 32);
    auto b = train::evaluate(g, plan, ds, data::SplitTag::test, 5);
    ASSERT_EQ(a.size(), b.size());
    for (const auto& [k, v] : a) EXPECT_EQ(v, b.at(k)) << k;
}

TEST(Train, OnlineDeterminism) {
    auto plan = sharing::build_plan(Config::KD_ML, Strategy::V1, Task::classification,
                                    free_weights(), 2.0);
    auto ds = tiny_classification();
    train::TrainOptions opt;
    opt.lr = 1e-3;

    auto ga = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 5);
    auto ra = train::train_online(plan, ga, ds, 1, 5, opt);
    auto gb = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 5);
    auto rb = train::train_online(plan, gb, ds, 1, 5, opt);

    EXPECT_EQ(ra.fingerprint, rb.fingerprint);
    EXPECT_EQ(ra.model, "KD_ML-V1");
    EXPECT_EQ(ra.metrics, rb.metrics);
    EXPECT_EQ(ra.ensemble, rb.ensemble);
    ASSERT_EQ(ra.epochs.size(), 1u);
    ASSERT_EQ(ra.epochs[0].reports.size(), 3u);
    for (size_t i = 0; i < ra.epochs[0].reports.size(); ++i)
        EXPECT_EQ(ra.epochs[0].reports[i].total, rb.epochs[0].reports[i].total);
    for (const auto& [name, net] : ga.nets)
        for (const auto& [pname, p] : net->params)
            EXPECT_EQ(p->data, gb.nets.at(name)->param(pname)->data) << name << "/" << pname;

    auto gc = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 6);
    auto rc = train::train_online(plan, gc, ds, 1, 6, opt);
    EXPECT_NE(rc.fingerprint, ra.fingerprint);
    EXPECT_NE(ga.nets.at("S1")->param("block1.w")->data,
              gc.nets.at("S1")->param("block1.w")->data);
}

TEST(Train, TrainingReducesLoss) {
    auto plan = sharing::build_plan(Config::ML, Strategy::V1, Task::classification,
                                    sharing::WeightSet{{0.5, 0, 0.5}, {0.5, 0, 0.5}}, 2.0);
    auto ds = tiny_classification(48);
    train::TrainOptions opt;
    opt.lr = 2e-3;
    auto g = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 2);
    auto rec = train::train_online(plan, g, ds, 8, 2, opt);
    ASSERT_EQ(rec.epochs.size(), 8u);
    const auto& first = rec.epochs.front().reports;
    const auto& last = rec.epochs.back().reports;
    double before = 0, after = 0;
    for (const auto& r : first) before += r.total;
    for (const auto& r : last) after += r.total;
    EXPECT_LT(after, before);
}

TEST(Train, ScheduleMismatchThrows) {
    auto off = sharing::build_plan(Config::KD_off, Strategy::V1, Task::classification,
                                   sharing::WeightSet{{0.3, 0.7, 0}, {0.3, 0.7, 0}}, 2.0);
    auto on = sharing::build_plan(Config::KD_on, Strategy::V1, Task::classification,
                                  sharing::WeightSet{{0.3, 0.7, 0}, {0.3, 0.7, 0}}, 2.0);
    auto ds = tiny_classification();
    auto g_off = train::build_group<float>(off, ds.in_shape, ds.n_classes, 1);
    auto g_on = train::build_group<float>(on, ds.in_shape, ds.n_classes, 1);
    EXPECT_THROW(train::train_online(off, g_off, ds, 1, 1), kdml::contract_error);
    EXPECT_THROW(train::train_offline(on, g_on, ds, 1, 1, 1), kdml::contract_error);
    auto unsplit = data::synth_classification(10, 16, 1);
    EXPECT_THROW(train::train_online(on, g_on, unsplit, 1, 1), kdml::contract_error);
}

TEST(Train, OfflineFreezesTeacher) {
    auto plan = sharing::build_plan(Config::KD_off, Strategy::V1, Task::classification,
                                    sharing::WeightSet{{0.3, 0.7, 0}, {0.3, 0.7, 0}}, 2.0);
    auto ds = tiny_classification();
    train::TrainOptions opt;
    opt.lr = 1e-3;

    auto teacher_only = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 7);
    train::train_offline(plan, teacher_only, ds, 2, 0, 7, opt);
    auto full = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 7);
    train::train_offline(plan, full, ds, 2, 3, 7, opt);

    for (const auto& [pname, p] : teacher_only.nets.at("T")->params) {
        EXPECT_EQ(p->data, full.nets.at("T")->param(pname)->data) << pname;
        EXPECT_FALSE(full.nets.at("T")->param(pname)->requires_grad);
    }
    bool student_moved = false;
    for (const auto& [pname, p] : teacher_only.nets.at("S1")->params)
        if (p->data != full.nets.at("S1")->param(pname)->data) student_moved = true;
    EXPECT_TRUE(student_moved);
}

TEST(Train, DivergenceGuard) {
    auto plan = sharing::build_plan(Config::KD_ML, Strategy::V2, Task::classification,
                                    free_weights(), 2.0);
    auto ds = tiny_classification(16);
    train::TrainOptions opt;
    opt.lr = 1e12;
    opt.augment = false;
    auto g = train::build_group<float>(plan, ds.in_shape, ds.n_classes, 1);
    try {
        train::train_online(plan, g, ds, 4, 1, opt);
        FAIL() << "expected divergence_error";
    } catch (const kdml::divergence_error& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite loss"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("at step"), std::string::npos);
    }
}

TEST(Train, FingerprintSensitivity) {
    auto plan = sharing::build_plan(Config::KD_ML, Strategy::V3, Task::classification,
                                    free_weights(), 2.0);
    EXPECT_EQ(train::model_name(plan), "KD_ML-V3");
    const auto fp = train::fingerprint(plan, 1, 99, 20);
    EXPECT_EQ(fp.size(), 16u);
    EXPECT_EQ(fp.find_first_not_of("0123456789abcdef"), std::string::npos);
    EXPECT_EQ(train::fingerprint(plan, 1, 99, 20), fp);
    EXPECT_NE(train::fingerprint(plan, 2, 99, 20), fp);
    EXPECT_NE(train::fingerprint(plan, 1, 98, 20), fp);
    EXPECT_NE(train::fingerprint(plan, 1, 99, 21), fp);
    auto warm = plan;
    warm.temperature = 4.0;
    EXPECT_NE(train::fingerprint(warm, 1, 99, 20), fp);
    auto reweighted = plan;
    reweighted.weights.s1.alpha = 0.25;
    EXPECT_NE(train::fingerprint(reweighted, 1, 99, 20), fp);
}

TEST(Train, DatasetHashSensitivity) {
    auto a = tiny_classification(10, 3);
    auto b = tiny_classification(10, 3);
    EXPECT_EQ(train::dataset_hash(a), train::dataset_hash(b));
    b.samples[0].image[0] += 0.5f;
    EXPECT_NE(train::dataset_hash(a), train::dataset_hash(b));
    auto c = tiny_classification(10, 3);
    c.splits[0] = c.splits[0] == data::SplitTag::train ? data::SplitTag::test
                                                       : data::SplitTag::train;
    EXPECT_NE(train::dataset_hash(a), train::dataset_hash(c));
}

TEST(Grid, CellCountsAndCoupling) {
    train::GridSpace s;
    EXPECT_EQ(train::grid_cells(Config::KD_on, s).size(), 25u);
    EXPECT_EQ(train::grid_cells(Config::KD_off, s).size(), 25u);
    EXPECT_EQ(train::grid_cells(Config::ML, s).size(), 25u);
    EXPECT_EQ(train::grid_cells(Config::KD_ML, s).size(), 15625u);
    for (const auto& w : train::grid_cells(Config::KD_on, s)) {
        EXPECT_DOUBLE_EQ(w.s1.beta, 1.0 - w.s1.alpha);
        EXPECT_EQ(w.s1.gamma, 0.0);
        EXPECT_DOUBLE_EQ(w.s2.beta, 1.0 - w.s2.alpha);
    }
    for (const auto& w : train::grid_cells(Config::ML, s)) {
        EXPECT_EQ(w.s1.beta, 0.0);
        EXPECT_DOUBLE_EQ(w.s1.gamma, 1.0 - w.s1.alpha);
    }
    train::GridSpace small;
    small.alpha = {0.1};
    small.alpha2 = {0.2, 0.3};
    EXPECT_EQ(train::grid_cells(Config::ML, small).size(), 2u);
}

TEST(Grid, SearchMaximizesObjective) {
    train::GridSpace s;
    s.alpha = s.beta = s.gamma = s.alpha2 = s.beta2 = s.gamma2 = {0.1, 0.2};
    int calls = 0;
    auto best = train::grid_search(Config::KD_ML, s, 3, [&](const sharing::WeightSet& w, int budget) {
        EXPECT_EQ(budget, 3);
        ++calls;
        return w.s1.alpha == 0.2 && w.s1.beta == 0.1 && w.s1.gamma == 0.2 &&
                       w.s2.alpha == 0.1 && w.s2.beta == 0.2 && w.s2.gamma == 0.1
                   ? 1.0
                   : 0.5;
    });
    EXPECT_EQ(calls, 64);
    EXPECT_EQ(best.s1.alpha, 0.2);
    EXPECT_EQ(best.s1.beta, 0.1);
    EXPECT_EQ(best.s1.gamma, 0.2);
    EXPECT_EQ(best.s2.alpha, 0.1);
    EXPECT_EQ(best.s2.beta, 0.2);
    EXPECT_EQ(best.s2.gamma, 0.1);
}

TEST(Grid, SearchTieBreaksTowardSmallDistillation) {
    train::GridSpace s;
    s.alpha = s.beta = s.gamma = s.alpha2 = s.beta2 = s.gamma2 = {0.1, 0.2};
    auto best = train::grid_search(Config::KD_ML, s, 1,
                                   [](const sharing::WeightSet&, int) { return 1.0; });
    EXPECT_EQ(best.s1.alpha, 0.1);
    EXPECT_EQ(best.s1.beta, 0.1);
    EXPECT_EQ(best.s1.gamma, 0.1);
    EXPECT_EQ(best.s2.alpha, 0.1);
    EXPECT_EQ(best.s2.beta, 0.1);
    EXPECT_EQ(best.s2.gamma, 0.1);
}

TEST(Grid, SearchSkipsNonFiniteCells) {
    train::GridSpace s;
    s.alpha = {0.1, 0.2};
    s.alpha2 = {0.1};
    auto best = train::grid_search(Config::ML, s, 1, [](const sharing::WeightSet& w, int) {
        return w.s1.alpha == 0.2 ? 0.9 : std::nan("");
    });
    EXPECT_EQ(best.s1.alpha, 0.2);
    EXPECT_THROW(train::grid_search(Config::ML, s, 1,
                                    [](const sharing::WeightSet&, int) { return std::nan(""); }),
                 kdml::divergence_error);
}

TEST(Stats, SummarizePinned) {
    auto s = train::summarize({2, 4, 4, 4, 5, 5, 7, 9});
    EXPECT_DOUBLE_EQ(s.mean, 5.0);
    EXPECT_DOUBLE_EQ(s.stddev, 2.0);
    EXPECT_EQ(s.count, 8);
    auto t = train::summarize({1, 2, 3});
    EXPECT_DOUBLE_EQ(t.mean, 2.0);
    EXPECT_NEAR(t.stddev, 0.8164965809, 1e-9);
    EXPECT_THROW(train::summarize({}), kdml::contract_error);
}

TEST(Stats, SummarizeIsPermutationInvariant) {
    const std::vector<double> xs{0.912, 0.871, 0.903, 0.899};
    std::vector<double> ys{0.903, 0.899, 0.912, 0.871};
    auto a = train::summarize(xs);
    auto b = train::summarize(ys);
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.stddev, b.stddev);
}

TEST(Stats, MultiRunAggregates) {
    auto stats = train::multi_run(
        [](uint64_t seed) {
            return std::map<std::string, double>{{"m", static_cast<double>(seed)}};
        },
        {1, 2, 3});
    EXPECT_DOUBLE_EQ(stats.at("m").mean, 2.0);
    EXPECT_EQ(stats.at("m").count, 3);

    auto reordered = train::multi_run(
        [](uint64_t seed) {
            return std::map<std::string, double>{{"m", static_cast<double>(seed)}};
        },
        {3, 1, 2});
    EXPECT_EQ(stats.at("m").mean, reordered.at("m").mean);
    EXPECT_EQ(stats.at("m").stddev, reordered.at("m").stddev);

    EXPECT_THROW(train::multi_run(
                     [](uint64_t seed) {
                         std::map<std::string, double> m{{"m", 1.0}};
                         if (seed == 2) m["extra"] = 1.0;
                         return m;
                     },
                     std::vector<uint64_t>{1, 2, 3}),
                 kdml::contract_error);
    EXPECT_THROW(
        train::multi_run([](uint64_t) { return std::map<std::string, double>{}; },
                         std::vector<uint64_t>{}),
        kdml::contract_error);
}

TEST(Stats, PrimaryEnsembleSelectsByTask) {
    std::map<std::string, double> m{{"accuracy/ensemble", 0.9}, {"iou/ensemble", 0.6}};
    EXPECT_EQ(train::primary_ensemble(m, Task::classification), 0.9);
    EXPECT_EQ(train::primary_ensemble(m, Task::segmentation), 0.6);
}

}  // namespace
