#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "gaitlab/train.hpp"

using namespace gaitlab;
namespace fs = std::filesystem;

namespace {

// Shared 4-subject dataset (3 sequences x 6 frames each), generated once.
const data::DatasetIndex& fixture_index() {
    static data::DatasetIndex idx = [] {
        data::GenOptions opt;
        opt.out_dir = (fs::temp_directory_path() / "gaitlab_train_fixture").string();
        fs::remove_all(opt.out_dir);
        opt.n_subjects = 4;
        opt.seqs_per_subject = 3;
        opt.frames_per_sequence = 6;
        opt.seed = 5;
        opt.split = data::SplitRule::all_train;
        return data::generate_dataset(opt);
    }();
    return idx;
}

// Narrow network over real preprocessed data: the range pipeline always
// emits 64x64 crops, so only channel widths shrink; n_points == 4 * k.
net::NetConfig tiny_net() {
    net::NetConfig c;
    c.crop = 64;
    c.n_points = 16;
    c.k_neighbors = 4;
    c.c1 = 2;
    c.c2 = 4;
    c.d_k = 4;
    c.c_strip = 8;
    c.c_embed = 4;
    c.reduction = 4;
    c.n_classes = 4;
    return c;
}

trainer::TrainConfig fast_train_cfg() {
    trainer::TrainConfig cfg;
    cfg.batch_subjects = 2;
    cfg.sequences_per_subject = 2;
    cfg.frames = 2;
    cfg.seed = 3;
    return cfg;
}

// Fresh per-test output directory under the system temp root.
std::string fresh_out_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("gaitlab_train_" + tag);
    fs::remove_all(dir);
    return dir.string();
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

std::map<std::string, Tensor> random_grads(const net::Model& model, std::uint64_t seed) {
    Rng rng(seed);
    std::map<std::string, Tensor> grads;
    for (const std::string& name : model.params.names()) {
        Tensor g(model.params.at(name).shape);
        for (double& v : g.data) v = rng.gaussian(0.0, 0.1);
        grads.emplace(name, g);
    }
    return grads;
}

}  // namespace

TEST(TrainConfig, ValidateAcceptsDefaults) {
    trainer::TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
}

TEST(TrainConfig, ValidateRejectsBadFields) {
    auto expect_invalid = [](auto mutate) {
        trainer::TrainConfig cfg;
        cfg.total_iterations = 100;
        mutate(cfg);
        EXPECT_THROW(cfg.validate(), std::invalid_argument);
    };
    expect_invalid([](trainer::TrainConfig& c) { c.alpha = -1; });
    expect_invalid([](trainer::TrainConfig& c) { c.beta = -0.5; });
    expect_invalid([](trainer::TrainConfig& c) { c.batch_subjects = 1; });
    expect_invalid([](trainer::TrainConfig& c) { c.sequences_per_subject = 1; });
    expect_invalid([](trainer::TrainConfig& c) { c.frames = 0; });
    expect_invalid([](trainer::TrainConfig& c) { c.lr = 0; });
    expect_invalid([](trainer::TrainConfig& c) { c.weight_decay = -1e-4; });
    expect_invalid([](trainer::TrainConfig& c) { c.total_iterations = 0; });
    expect_invalid([](trainer::TrainConfig& c) { c.milestones = {30, 10}; });
    expect_invalid([](trainer::TrainConfig& c) { c.milestones = {0}; });
    expect_invalid([](trainer::TrainConfig& c) { c.milestones = {120}; });
}

TEST(TrainConfig, LrScheduleDropsAfterEachMilestone) {
    trainer::TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.total_iterations = 5000;
    cfg.milestones = {1000, 3000};
    EXPECT_DOUBLE_EQ(trainer::lr_at(cfg, 1), 1e-3);
    EXPECT_DOUBLE_EQ(trainer::lr_at(cfg, 1000), 1e-3);
    EXPECT_DOUBLE_EQ(trainer::lr_at(cfg, 1001), 1e-3 * 0.1);
    EXPECT_DOUBLE_EQ(trainer::lr_at(cfg, 3000), 1e-3 * 0.1);
    EXPECT_DOUBLE_EQ(trainer::lr_at(cfg, 3001), 1e-3 * 0.1 * 0.1);
    EXPECT_DOUBLE_EQ(trainer::lr_at(cfg, 5000), 1e-3 * 0.1 * 0.1);
}

TEST(SampleBatch, CompositionMatchesPbTimesKb) {
    const auto& index = fixture_index();
    auto batch = trainer::sample_batch(index, 4, 2, 3, 16, {}, 9, 1);
    ASSERT_EQ(batch.size(), 8u);

    std::map<int, std::vector<const trainer::BatchItem*>> by_label;
    for (const auto& item : batch) by_label[item.label].push_back(&item);
    ASSERT_EQ(by_label.size(), 4u);
    std::set<int> subjects;
    for (const auto& [label, items] : by_label) {
        ASSERT_EQ(items.size(), 2u) << "label " << label;
        EXPECT_EQ(items[0]->subject_id, items[1]->subject_id);
        EXPECT_NE(items[0]->sequence_id, items[1]->sequence_id);  // 3 >= K_b: no replacement
        subjects.insert(items[0]->subject_id);
        EXPECT_EQ(index.train_subjects[static_cast<std::size_t>(label)], items[0]->subject_id);
    }
    EXPECT_EQ(subjects.size(), 4u);
    for (const auto& item : batch) {
        ASSERT_EQ(item.seq.frames.size(), 3u);
        for (const auto& f : item.seq.frames) EXPECT_EQ(f.points.points.size(), 16u);
    }
}

TEST(SampleBatch, DeterministicInSeedAndIteration) {
    const auto& index = fixture_index();
    auto a = trainer::sample_batch(index, 2, 2, 2, 16, {}, 11, 7);
    auto b = trainer::sample_batch(index, 2, 2, 2, 16, {}, 11, 7);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].subject_id, b[i].subject_id);
        EXPECT_EQ(a[i].sequence_id, b[i].sequence_id);
        EXPECT_EQ(a[i].label, b[i].label);
        ASSERT_EQ(a[i].seq.frames.size(), b[i].seq.frames.size());
        const auto& pa = a[i].seq.frames[0].points.points;
        const auto& pb = b[i].seq.frames[0].points.points;
        ASSERT_EQ(pa.size(), pb.size());
        for (std::size_t p = 0; p < pa.size(); ++p) {
            EXPECT_EQ(pa[p].x, pb[p].x);
            EXPECT_EQ(pa[p].y, pb[p].y);
            EXPECT_EQ(pa[p].z, pb[p].z);
        }
    }

    bool any_difference = false;
    for (int it = 1; it <= 5 && !any_difference; ++it) {
        auto c = trainer::sample_batch(index, 2, 2, 2, 16, {}, 11, it);
        for (std::size_t i = 0; i < a.size(); ++i)
            any_difference |= c[i].subject_id != a[i].subject_id ||
                              c[i].sequence_id != a[i].sequence_id;
    }
    EXPECT_TRUE(any_difference);
}

TEST(SampleBatch, CoversAllSubjectsAcrossIterations) {
    const auto& index = fixture_index();
    trainer::SequenceCache cache;
    std::set<int> seen;
    for (int it = 1; it <= 50; ++it)
        for (const auto& item : trainer::sample_batch(index, 2, 2, 2, 16, {}, 13, it, &cache))
            seen.insert(item.subject_id);
    EXPECT_EQ(seen, (std::set<int>{0, 1, 2, 3}));
}

TEST(SampleBatch, FewerSubjectsThanPbThrows) {
    const auto& index = fixture_index();
    EXPECT_THROW(trainer::sample_batch(index, 5, 2, 2, 16, {}, 1, 1), std::invalid_argument);
}

TEST(SampleBatch, DrawsWithReplacementWhenSequencesShort) {
    const auto& index = fixture_index();  // 3 sequences per subject < K_b = 4
    auto batch = trainer::sample_batch(index, 2, 4, 2, 16, {}, 17, 1);
    ASSERT_EQ(batch.size(), 8u);
    for (const auto& item : batch) {
        EXPECT_GE(item.sequence_id, 0);
        EXPECT_LT(item.sequence_id, 3);
    }
}

TEST(Adam, ZeroLrAppliesPureDecay) {
    net::Model model(tiny_net(), 1);
    Rng jitter(2);
    for (const std::string& name : model.params.names())
        for (double& v : model.params.at(name).data) v += jitter.gaussian(0.0, 0.1);
    const net::Model before = model;

    trainer::Adam opt;
    opt.step(model, random_grads(model, 4), /*lr=*/0.0, /*weight_decay=*/0.01);
    EXPECT_EQ(opt.t, 1);
    for (const std::string& name : model.params.names()) {
        const Tensor& now = model.params.at(name);
        const Tensor& old = before.params.at(name);
        for (std::size_t i = 0; i < now.data.size(); ++i)
            ASSERT_DOUBLE_EQ(now.data[i], 0.99 * old.data[i]) << name << "[" << i << "]";
    }
}

TEST(Adam, ZeroLrZeroDecayIsBitwiseNoOp) {
    net::Model model(tiny_net(), 1);
    Rng jitter(2);
    for (const std::string& name : model.params.names())
        for (double& v : model.params.at(name).data) v += jitter.gaussian(0.0, 0.1);
    const net::Model before = model;

    trainer::Adam opt;
    opt.step(model, random_grads(model, 4), 0.0, 0.0);
    for (const std::string& name : model.params.names()) {
        const Tensor& now = model.params.at(name);
        const Tensor& old = before.params.at(name);
        for (std::size_t i = 0; i < now.data.size(); ++i)
            ASSERT_EQ(now.data[i], old.data[i]) << name << "[" << i << "]";
    }
}

TEST(Adam, FirstStepMatchesScalarRecurrence) {
    net::Model model(tiny_net(), 7);
    const std::string name = model.params.names().front();
    const double theta0 = model.params.at(name).data[0];
    auto grads = random_grads(model, 8);
    const double g = grads.at(name).data[0];

    trainer::Adam opt;
    opt.step(model, grads, 0.05, 0.004);

    const double m_hat = ((1.0 - 0.9) * g) / (1.0 - 0.9);  // first-step bias correction
    const double v_hat = ((1.0 - 0.999) * g * g) / (1.0 - 0.999);
    const double expected = (1.0 - 0.004) * theta0 - 0.05 * m_hat / (std::sqrt(v_hat) + 1e-8);
    EXPECT_NEAR(model.params.at(name).data[0], expected, 1e-15);
}

TEST(Adam, StateRoundTripsThroughFile) {
    net::Model model(tiny_net(), 1);
    trainer::Adam opt;
    opt.step(model, random_grads(model, 4), 1e-3, 5e-4);
    opt.step(model, random_grads(model, 5), 1e-3, 5e-4);

    fs::path path = fs::temp_directory_path() / "gaitlab_opt_state.bin";
    trainer::save_optimizer(path.string(), opt);
    trainer::Adam back = trainer::load_optimizer(path.string());

    EXPECT_EQ(back.t, opt.t);
    ASSERT_EQ(back.m.size(), opt.m.size());
    for (const auto& [name, mt] : opt.m) {
        ASSERT_TRUE(back.m.count(name)) << name;
        EXPECT_EQ(back.m.at(name).data, mt.data);
        EXPECT_EQ(back.v.at(name).data, opt.v.at(name).data);
    }
    EXPECT_THROW(trainer::load_optimizer((fs::temp_directory_path() / "missing.opt").string()),
                 std::runtime_error);
}

TEST(Train, SmokeFiftyIterationsLogsFiveRecords) {
    trainer::TrainConfig cfg = fast_train_cfg();
    cfg.total_iterations = 50;
    std::string out = fresh_out_dir("smoke");

    trainer::TrainResult res = trainer::train(cfg, tiny_net(), fixture_index(), out);
    EXPECT_EQ(res.iterations_run, 50);
    EXPECT_FALSE(res.stopped_early);
    ASSERT_EQ(res.history.size(), 5u);
    for (std::size_t i = 0; i < res.history.size(); ++i) {
        EXPECT_EQ(res.history[i].iteration, static_cast<int>(10 * (i + 1)));
        EXPECT_DOUBLE_EQ(res.history[i].lr, cfg.lr);
        EXPECT_TRUE(std::isfinite(res.history[i].total));
        EXPECT_GE(res.history[i].triplet, 0.0);
        EXPECT_GE(res.history[i].ce, 0.0);
    }

    auto lines = read_lines(fs::path(out) / "train.log");
    ASSERT_EQ(lines.size(), 5u);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        int it = 0;
        double lr = 0, tri = 0, ce = 0, total = 0;
        ASSERT_EQ(std::sscanf(lines[i].c_str(), "%d,%lf,%lf,%lf,%lf", &it, &lr, &tri, &ce, &total),
                  5)
            << lines[i];
        EXPECT_EQ(it, static_cast<int>(10 * (i + 1)));
        // values round-trip through %.10g, so compare at that resolution
        EXPECT_NEAR(tri + 0.1 * ce, total, 1e-8 * std::max(1.0, std::abs(total)));
    }

    EXPECT_TRUE(fs::exists(fs::path(out) / "ckpt_0000050.bin"));
    EXPECT_TRUE(fs::exists(fs::path(out) / "ckpt_0000050.bin.opt"));
    auto latest = read_lines(fs::path(out) / "latest");
    ASSERT_EQ(latest.size(), 1u);
    EXPECT_EQ(latest[0], "ckpt_0000050.bin");
}

TEST(Train, MilestonesWriteCheckpointsAndDropLr) {
    trainer::TrainConfig cfg = fast_train_cfg();
    cfg.total_iterations = 25;
    cfg.milestones = {10, 20};
    std::string out = fresh_out_dir("milestones");

    trainer::TrainResult res = trainer::train(cfg, tiny_net(), fixture_index(), out);
    EXPECT_EQ(res.iterations_run, 25);
    EXPECT_TRUE(fs::exists(fs::path(out) / "ckpt_0000010.bin"));
    EXPECT_TRUE(fs::exists(fs::path(out) / "ckpt_0000020.bin"));
    EXPECT_TRUE(fs::exists(fs::path(out) / "ckpt_0000025.bin"));
    ASSERT_EQ(res.history.size(), 2u);
    EXPECT_DOUBLE_EQ(res.history[0].lr, cfg.lr);        // iteration 10: not yet past milestone
    EXPECT_DOUBLE_EQ(res.history[1].lr, cfg.lr * 0.1);  // iteration 20: past the first
}

TEST(Train, ResumeContinuesIterationNumbering) {
    trainer::TrainConfig cfg = fast_train_cfg();
    cfg.total_iterations = 30;
    std::string out = fresh_out_dir("resume");

    trainer::TrainResult first = trainer::train(cfg, tiny_net(), fixture_index(), out);
    EXPECT_EQ(first.iterations_run, 30);

    cfg.total_iterations = 50;
    trainer::TrainResult second = trainer::train(cfg, tiny_net(), fixture_index(), out);
    EXPECT_EQ(second.iterations_run, 50);
    EXPECT_EQ(fs::path(second.final_checkpoint).filename(), "ckpt_0000050.bin");
    ASSERT_EQ(second.history.size(), 2u);
    EXPECT_EQ(second.history[0].iteration, 40);
    EXPECT_EQ(second.history[1].iteration, 50);

    auto lines = read_lines(fs::path(out) / "train.log");  // appended: 10..30 then 40..50
    ASSERT_EQ(lines.size(), 5u);
    int it = 0;
    ASSERT_EQ(std::sscanf(lines[3].c_str(), "%d,", &it), 1);
    EXPECT_EQ(it, 40);
}

TEST(Train, ResumeRejectsConfigMismatch) {
    trainer::TrainConfig cfg = fast_train_cfg();
    cfg.total_iterations = 10;
    std::string out = fresh_out_dir("mismatch");
    trainer::train(cfg, tiny_net(), fixture_index(), out);

    net::NetConfig wider = tiny_net();
    wider.c1 = 4;
    cfg.total_iterations = 20;
    EXPECT_THROW(trainer::train(cfg, wider, fixture_index(), out), std::runtime_error);
}

TEST(Train, RejectsClassCountMismatch) {
    trainer::TrainConfig cfg = fast_train_cfg();
    net::NetConfig net_cfg = tiny_net();
    net_cfg.n_classes = 3;  // fixture has 4 training subjects
    EXPECT_THROW(trainer::train(cfg, net_cfg, fixture_index(), fresh_out_dir("classes")),
                 std::invalid_argument);
}

TEST(Train, StopCheckEndsTrainingEarly) {
    trainer::TrainConfig cfg = fast_train_cfg();
    cfg.total_iterations = 100;
    std::string out = fresh_out_dir("stopcheck");

    std::vector<int> probed;
    trainer::StopCheck stop = [&](int iteration, const net::Model&) {
        probed.push_back(iteration);
        return iteration >= 20;
    };
    trainer::TrainResult res =
        trainer::train(cfg, tiny_net(), fixture_index(), out, {}, stop, /*stop_check_every=*/10);
    EXPECT_TRUE(res.stopped_early);
    EXPECT_EQ(res.iterations_run, 20);
    EXPECT_EQ(probed, (std::vector<int>{10, 20}));
    EXPECT_EQ(fs::path(res.final_checkpoint).filename(), "ckpt_0000020.bin");
}

TEST(Train, AbortsOnNonFiniteLossAndDumpsBatch) {
    std::string out = fresh_out_dir("nanabort");
    fs::create_directories(out);

    net::NetConfig net_cfg = tiny_net();
    net::Model poisoned(net_cfg, 1);
    // poison past the last relu (relu clamps NaN pre-activations to zero)
    for (double& v : poisoned.params.at("head.cls00.w").data)
        v = std::numeric_limits<double>::quiet_NaN();
    net::save_checkpoint((fs::path(out) / "ckpt_0000010.bin").string(), poisoned);
    {
        std::ofstream latest(fs::path(out) / "latest");
        latest << "ckpt_0000010.bin\n";
    }

    trainer::TrainConfig cfg = fast_train_cfg();
    cfg.total_iterations = 20;
    try {
        trainer::train(cfg, net_cfg, fixture_index(), out);
        FAIL() << "expected non-finite loss abort";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    }

    auto dump = read_lines(fs::path(out) / "abort_batch.txt");
    ASSERT_GE(dump.size(), 2u);
    EXPECT_NE(dump[0].find("iteration 11"), std::string::npos);
    EXPECT_NE(dump[1].find("subject"), std::string::npos);
}
