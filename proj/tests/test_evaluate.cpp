#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <gtest/gtest.h>

#include "gaitlab/evaluate.hpp"

using namespace gaitlab;
namespace fs = std::filesystem;

namespace {

// Shared 8-subject test-role dataset: 4 sequences x 6 frames each.
const data::DatasetIndex& fixture_index() {
    static data::DatasetIndex idx = [] {
        data::GenOptions opt;
        opt.out_dir = (fs::temp_directory_path() / "gaitlab_eval_fixture").string();
        fs::remove_all(opt.out_dir);
        opt.n_subjects = 8;
        opt.seqs_per_subject = 4;
        opt.frames_per_sequence = 6;
        opt.seed = 21;
        opt.split = data::SplitRule::all_test;
        return data::generate_dataset(opt);
    }();
    return idx;
}

// Smaller companion set with no night sequences (4 subjects x 2 x 6).
const data::DatasetIndex& day_index() {
    static data::DatasetIndex idx = [] {
        data::GenOptions opt;
        opt.out_dir = (fs::temp_directory_path() / "gaitlab_eval_day").string();
        fs::remove_all(opt.out_dir);
        opt.n_subjects = 4;
        opt.seqs_per_subject = 2;
        opt.frames_per_sequence = 6;
        opt.seed = 22;
        opt.split = data::SplitRule::all_test;
        opt.night_fraction = 0.0;
        return data::generate_dataset(opt);
    }();
    return idx;
}

// Index handed to build_split directly; no files behind it.
data::DatasetIndex manual_index(const std::vector<std::pair<int, int>>& subject_seq_counts) {
    data::DatasetIndex idx;
    for (const auto& [sid, count] : subject_seq_counts) {
        data::SubjectEntry entry;
        entry.subject_id = sid;
        for (int k = 0; k < count; ++k) entry.sequences.push_back({k, 6, 90.0 * k, false});
        idx.subjects.push_back(std::move(entry));
        idx.test_subjects.push_back(sid);
    }
    return idx;
}

// Distinct embedding per subject: distance 0 to itself, equal gap otherwise.
eval::EmbedFn one_hot_embedder(int n_subjects) {
    return [n_subjects](const eval::SeqRef& ref, int) {
        Tensor e({2, n_subjects});
        e.at(0, ref.subject_id) = 1.0;
        e.at(1, ref.subject_id) = 1.0;
        return e;
    };
}

eval::EmbedFn constant_embedder() {
    return [](const eval::SeqRef&, int) {
        Tensor e({2, 4});
        for (double& v : e.data) v = 0.5;
        return e;
    };
}

eval::EmbedFn random_embedder(std::uint64_t salt) {
    return [salt](const eval::SeqRef& ref, int) {
        Rng rng = Rng(salt)
                      .fork(static_cast<std::uint64_t>(ref.subject_id))
                      .fork(static_cast<std::uint64_t>(ref.sequence_id));
        Tensor e({2, 4});
        for (double& v : e.data) v = rng.gaussian(0, 1);
        return e;
    };
}

// Square matrix whose probe r matches gallery column r at the given rank:
// the true column gets distance rank[r], impostors take the other slots.
eval::DistanceMatrix matrix_with_ranks(const std::vector<int>& ranks) {
    const int n = static_cast<int>(ranks.size());
    eval::DistanceMatrix dm;
    dm.d = Tensor({n, n});
    for (int r = 0; r < n; ++r) {
        dm.probe_subject.push_back(r);
        dm.gallery_subject.push_back(r);
        // distances 1..n with the true match placed at position rank[r]
        int impostor = 0;
        for (int c = 0; c < n; ++c) {
            if (c == r) {
                dm.d.at(r, c) = static_cast<double>(ranks[static_cast<std::size_t>(r)]);
            } else {
                double v = 1.0 + impostor++;
                if (v >= ranks[static_cast<std::size_t>(r)]) v += 1.0;  // keep slots distinct
                dm.d.at(r, c) = v + 0.5;  // impostors sit strictly between integers
            }
        }
        // shift impostors below the target rank under it, the rest above
        int below = 0;
        for (int c = 0; c < n; ++c)
            if (c != r && dm.d.at(r, c) < ranks[static_cast<std::size_t>(r)]) ++below;
        EXPECT_EQ(below, ranks[static_cast<std::size_t>(r)] - 1)
            << "fixture must place " << ranks[static_cast<std::size_t>(r)] - 1
            << " impostors ahead";
    }
    return dm;
}

}  // namespace

TEST(BuildSplit, OneGalleryPerSubjectRestAreProbes) {
    const auto& index = fixture_index();
    eval::GalleryProbeSplit split = eval::build_split(index, 3);
    ASSERT_EQ(split.gallery.size(), 8u);
    ASSERT_EQ(split.probes.size(), 24u);
    EXPECT_EQ(split.gallery_only_warnings, 0);
    EXPECT_EQ(split.seed, 3u);

    for (int sid = 0; sid < 8; ++sid) {
        std::set<int> gallery_seqs, probe_seqs;
        for (const auto& g : split.gallery)
            if (g.subject_id == sid) gallery_seqs.insert(g.sequence_id);
        for (const auto& p : split.probes)
            if (p.subject_id == sid) probe_seqs.insert(p.sequence_id);
        EXPECT_EQ(gallery_seqs.size(), 1u) << "subject " << sid;
        EXPECT_EQ(probe_seqs.size(), 3u) << "subject " << sid;
        for (int q : gallery_seqs) EXPECT_FALSE(probe_seqs.count(q));
    }
}

TEST(BuildSplit, DeterministicPerSeedAndVariesAcrossSeeds) {
    const auto& index = fixture_index();
    auto a = eval::build_split(index, 5);
    auto b = eval::build_split(index, 5);
    ASSERT_EQ(a.gallery.size(), b.gallery.size());
    for (std::size_t i = 0; i < a.gallery.size(); ++i)
        EXPECT_EQ(a.gallery[i].sequence_id, b.gallery[i].sequence_id);

    std::set<std::vector<int>> compositions;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        std::vector<int> picks;
        for (const auto& g : eval::build_split(index, seed).gallery) picks.push_back(g.sequence_id);
        compositions.insert(picks);
    }
    EXPECT_GT(compositions.size(), 1u);
}

TEST(BuildSplit, SingleSequenceSubjectIsGalleryOnlyWithWarning) {
    data::DatasetIndex idx = manual_index({{0, 1}, {1, 3}});
    eval::GalleryProbeSplit split = eval::build_split(idx, 7);
    EXPECT_EQ(split.gallery.size(), 2u);
    EXPECT_EQ(split.probes.size(), 2u);
    EXPECT_EQ(split.gallery_only_warnings, 1);
    for (const auto& p : split.probes) EXPECT_EQ(p.subject_id, 1);
}

TEST(BuildSplit, RoleSelectsSubjectList) {
    data::DatasetIndex idx = manual_index({{0, 2}});
    idx.train_subjects = {0};
    idx.test_subjects = {};
    EXPECT_NO_THROW(eval::build_split(idx, 1, eval::SplitRole::train));
    EXPECT_THROW(eval::build_split(idx, 1, eval::SplitRole::test), std::invalid_argument);
}

TEST(Distance, ZeroForIdenticalAndScalesByStripCount) {
    Rng rng(31);
    Tensor a({16, 4});
    for (double& v : a.data) v = rng.gaussian(0, 1);
    EXPECT_EQ(eval::distance(a, a), 0.0);

    Tensor b = a;
    const double dx = 0.3, dy = -0.4;  // one strip moved by a 3-4-5 vector
    b.at(3, 0) += dx;
    b.at(3, 1) += dy;
    EXPECT_NEAR(eval::distance(a, b), 0.5 / 16.0, 1e-12);
}

TEST(Distance, MatchesScalarOracle) {
    Rng rng(32);
    Tensor a({4, 8}), b({4, 8});
    for (double& v : a.data) v = rng.gaussian(0, 1);
    for (double& v : b.data) v = rng.gaussian(0, 1);
    double expected = 0;
    for (int s = 0; s < 4; ++s) {
        double sq = 0;
        for (int j = 0; j < 8; ++j) sq += (a.at(s, j) - b.at(s, j)) * (a.at(s, j) - b.at(s, j));
        expected += std::sqrt(sq);
    }
    expected /= 4;
    EXPECT_NEAR(eval::distance(a, b), expected, 1e-9);
    EXPECT_THROW(eval::distance(a, Tensor({4, 7})), std::invalid_argument);
    EXPECT_THROW(eval::distance(Tensor({8}), Tensor({8})), std::invalid_argument);
}

TEST(Metrics, RankToyAcrossKs) {
    eval::DistanceMatrix dm = matrix_with_ranks({1, 2, 3});
    EXPECT_NEAR(eval::rank_k(dm, 1), 100.0 / 3.0, 1e-12);
    EXPECT_NEAR(eval::rank_k(dm, 2), 200.0 / 3.0, 1e-12);
    EXPECT_NEAR(eval::rank_k(dm, 3), 100.0, 1e-12);
    EXPECT_NEAR(eval::rank_k(dm, 50), 100.0, 1e-12);  // k beyond gallery saturates
    EXPECT_NEAR(eval::mean_average_precision(dm), 100.0 * (1.0 + 0.5 + 1.0 / 3.0) / 3.0, 1e-12);
}

TEST(Metrics, MapSinglePositiveToy) {
    eval::DistanceMatrix dm = matrix_with_ranks({1, 1, 2, 4});
    EXPECT_NEAR(eval::mean_average_precision(dm), 68.75, 1e-12);  // (1+1+1/2+1/4)/4
    EXPECT_NEAR(eval::rank_k(dm, 1), 50.0, 1e-12);
}

TEST(Metrics, TiesBreakByAscendingGalleryIndex) {
    eval::DistanceMatrix dm;
    dm.d = Tensor({1, 2}, {0.5, 0.5});
    dm.gallery_subject = {5, 7};
    dm.probe_subject = {7};
    EXPECT_EQ(eval::rank_k(dm, 1), 0.0);  // tie resolves to gallery index 0 = subject 5
    EXPECT_EQ(eval::mean_average_precision(dm), 50.0);
    dm.probe_subject = {5};
    EXPECT_EQ(eval::rank_k(dm, 1), 100.0);
}

TEST(Metrics, MonotonicInKAndInvariantUnderMonotoneTransform) {
    Rng rng(33);
    eval::DistanceMatrix dm;
    dm.d = Tensor({20, 8});
    for (double& v : dm.d.data) v = rng.uniform(0.1, 10.0);
    for (int c = 0; c < 8; ++c) dm.gallery_subject.push_back(c);
    for (int r = 0; r < 20; ++r)
        dm.probe_subject.push_back(static_cast<int>(rng.uniform_int(8)));

    double prev = 0;
    for (int k = 1; k <= 8; ++k) {
        double rk = eval::rank_k(dm, k);
        EXPECT_GE(rk, prev);
        prev = rk;
    }
    EXPECT_EQ(prev, 100.0);  // every probe subject is in the gallery

    eval::DistanceMatrix warped = dm;
    for (double& v : warped.d.data) v = std::exp(v);  // strictly increasing map
    for (int k = 1; k <= 8; ++k) EXPECT_EQ(eval::rank_k(warped, k), eval::rank_k(dm, k));
    EXPECT_EQ(eval::mean_average_precision(warped), eval::mean_average_precision(dm));
}

TEST(Metrics, GalleryPermutationInvariantWithoutTies) {
    Rng rng(34);
    eval::DistanceMatrix dm;
    dm.d = Tensor({12, 6});
    for (double& v : dm.d.data) v = rng.uniform(0.1, 10.0);
    for (int c = 0; c < 6; ++c) dm.gallery_subject.push_back(10 + c);
    for (int r = 0; r < 12; ++r)
        dm.probe_subject.push_back(10 + static_cast<int>(rng.uniform_int(6)));

    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    eval::DistanceMatrix shuffled = dm;
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 6; ++c)
            shuffled.d.at(r, c) = dm.d.at(r, perm[static_cast<std::size_t>(c)]);
    for (int c = 0; c < 6; ++c)
        shuffled.gallery_subject[static_cast<std::size_t>(c)] =
            dm.gallery_subject[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])];

    for (int k = 1; k <= 6; ++k) EXPECT_EQ(eval::rank_k(shuffled, k), eval::rank_k(dm, k));
    EXPECT_EQ(eval::mean_average_precision(shuffled), eval::mean_average_precision(dm));
}

TEST(Metrics, MapBracketedByRankOne) {
    Rng rng(35);
    eval::DistanceMatrix dm;
    dm.d = Tensor({30, 6});
    for (double& v : dm.d.data) v = rng.uniform(0.1, 10.0);
    for (int c = 0; c < 6; ++c) dm.gallery_subject.push_back(c);
    for (int r = 0; r < 30; ++r)
        dm.probe_subject.push_back(static_cast<int>(rng.uniform_int(6)));
    const double r1 = eval::rank_k(dm, 1);
    const double map = eval::mean_average_precision(dm);
    EXPECT_GE(map, r1);
    EXPECT_LE(map, r1 + (100.0 - r1) / 2.0);  // a miss contributes at most AP 1/2
}

TEST(Metrics, ValidateRejectsMalformedMatrices) {
    eval::DistanceMatrix dm;
    dm.d = Tensor({1, 2}, {0.1, 0.2});
    dm.gallery_subject = {0, 1};
    dm.probe_subject = {0};
    EXPECT_NO_THROW(dm.validate());

    eval::DistanceMatrix negative = dm;
    negative.d.at(0, 1) = -0.1;
    EXPECT_THROW(negative.validate(), std::invalid_argument);

    eval::DistanceMatrix nan = dm;
    nan.d.at(0, 0) = std::nan("");
    EXPECT_THROW(nan.validate(), std::invalid_argument);

    eval::DistanceMatrix mislabeled = dm;
    mislabeled.gallery_subject = {0};
    EXPECT_THROW(mislabeled.validate(), std::invalid_argument);

    eval::DistanceMatrix empty;
    empty.d = Tensor({0, 2});
    empty.gallery_subject = {0, 1};
    EXPECT_THROW(eval::rank_k(empty, 1), std::invalid_argument);
}

TEST(Evaluate, OneHotEmbedderScoresPerfectly) {
    const auto& index = fixture_index();
    eval::MetricsReport report = eval::evaluate_with_embedder(index, 3, one_hot_embedder(8));
    EXPECT_EQ(report.rank1, 100.0);
    EXPECT_EQ(report.rank5, 100.0);
    EXPECT_EQ(report.map, 100.0);
    if (report.cross_view) EXPECT_EQ(report.cross_view->rank1, 100.0);
    if (report.night) EXPECT_EQ(report.night->rank1, 100.0);
    for (const auto& [frames, r1] : report.frames_sweep) EXPECT_EQ(r1, 100.0);
}

TEST(Evaluate, ConstantEmbedderDegeneratesToIndexOrder) {
    const auto& index = fixture_index();
    eval::EvalOptions opts;
    opts.frames_sweep = false;
    eval::MetricsReport report = eval::evaluate_with_embedder(index, 3, constant_embedder(), opts);
    // all distances tie, so every probe ranks the gallery in index order:
    // only subject 0's three probes hit at rank 1, 8-subject chance level
    EXPECT_EQ(report.rank1, 12.5);
    EXPECT_EQ(report.rank5, 62.5);
}

TEST(Evaluate, RandomEmbedderStaysNearChanceAcrossSeeds) {
    const auto& index = fixture_index();
    eval::EvalOptions opts;
    opts.frames_sweep = false;
    opts.subset = eval::SubsetFilter::all;
    double mean_rank1 = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed)
        mean_rank1 +=
            eval::evaluate_with_embedder(index, seed, random_embedder(77), opts).rank1 / 20.0;
    EXPECT_GT(mean_rank1, 1.0);   // not degenerate
    EXPECT_LT(mean_rank1, 40.0);  // nowhere near a learned embedding
}

TEST(Evaluate, EmptyNightSubsetIsAbsentNotZero) {
    eval::MetricsReport report =
        eval::evaluate_with_embedder(day_index(), 5, one_hot_embedder(4));
    EXPECT_FALSE(report.night.has_value());
    nlohmann::json j = report.to_json();
    EXPECT_FALSE(j.at("subsets").contains("night"));
}

TEST(Evaluate, SweepTruncatesToEffectiveLengthAndCachesEmbeddings) {
    const auto& index = day_index();  // 8 sequences of 6 frames
    std::map<std::tuple<int, int, int>, int> calls;
    eval::EmbedFn counting = [&calls](const eval::SeqRef& ref, int n_frames) {
        ++calls[{ref.subject_id, ref.sequence_id, n_frames}];
        return one_hot_embedder(4)(ref, n_frames);
    };
    eval::MetricsReport report = eval::evaluate_with_embedder(index, 9, counting);

    ASSERT_EQ(report.frames_sweep.size(), 6u);
    std::vector<int> lengths;
    for (const auto& [frames, r1] : report.frames_sweep) {
        lengths.push_back(frames);
        EXPECT_TRUE(std::isfinite(r1));
    }
    EXPECT_EQ(lengths, (std::vector<int>{5, 10, 15, 20, 25, 30}));

    // 6-frame sequences collapse every requested length to 5 or 6, and each
    // (sequence, effective length) pair is embedded exactly once
    for (const auto& [key, count] : calls) {
        EXPECT_EQ(count, 1) << "sequence embedded twice";
        int t_eff = std::get<2>(key);
        EXPECT_TRUE(t_eff == 5 || t_eff == 6) << t_eff;
    }
    EXPECT_EQ(calls.size(), 16u);  // 8 sequences x {5, 6}
}

TEST(Evaluate, ReportSerializesSchemaAndCsv) {
    const auto& index = fixture_index();
    eval::EvalOptions opts;
    opts.checkpoint_id = "ckpt_0000050.bin";
    eval::MetricsReport report = eval::evaluate_with_embedder(index, 11, one_hot_embedder(8), opts);

    nlohmann::json j = report.to_json();
    for (const char* key :
         {"rank1", "rank5", "map", "subsets", "frames_sweep", "split_seed", "checkpoint_id"})
        EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j.at("split_seed").get<std::uint64_t>(), 11u);
    EXPECT_EQ(j.at("checkpoint_id").get<std::string>(), "ckpt_0000050.bin");
    ASSERT_EQ(j.at("frames_sweep").size(), 6u);
    EXPECT_EQ(j.at("frames_sweep")[0].at("frames").get<int>(), 5);

    std::string csv = report.frames_csv();
    EXPECT_EQ(csv.rfind("frames,rank1\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);  // header + 6 rows
    EXPECT_NE(csv.find("5,100"), std::string::npos);
}

TEST(Evaluate, ModelEmbedderRunsEndToEnd) {
    const auto& index = day_index();
    net::NetConfig cfg;
    cfg.crop = 64;
    cfg.n_points = 16;
    cfg.k_neighbors = 4;
    cfg.c1 = 2;
    cfg.c2 = 4;
    cfg.d_k = 4;
    cfg.c_strip = 8;
    cfg.c_embed = 4;
    cfg.reduction = 4;
    cfg.n_classes = 4;
    net::Model model(cfg, 13);

    eval::EvalOptions opts;
    opts.checkpoint_id = "random-init";
    eval::MetricsReport report = eval::evaluate(model, index, 7, opts);
    for (double v : {report.rank1, report.rank5, report.map}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 100.0);
    }
    ASSERT_EQ(report.frames_sweep.size(), 6u);
    for (const auto& [frames, r1] : report.frames_sweep) {
        EXPECT_GE(r1, 0.0);
        EXPECT_LE(r1, 100.0);
    }
}

TEST(Evaluate, EmbedSequenceDefaultsToFullLengthAndCapsOverruns) {
    const auto& index = day_index();
    net::NetConfig cfg;
    cfg.crop = 64;
    cfg.n_points = 16;
    cfg.k_neighbors = 4;
    cfg.c1 = 2;
    cfg.c2 = 4;
    cfg.d_k = 4;
    cfg.c_strip = 8;
    cfg.c_embed = 4;
    cfg.reduction = 4;
    cfg.n_classes = 4;
    net::Model model(cfg, 17);

    const auto& entry = index.subjects.front();
    auto raw = data::load_sequence(index.root, entry.subject_id,
                                   entry.sequences.front().sequence_id,
                                   entry.sequences.front().num_frames);
    Tensor full = eval::embed_sequence(model, raw, {});
    Tensor capped = eval::embed_sequence(model, raw, {}, 99);
    Tensor six = eval::embed_sequence(model, raw, {}, 6);
    Tensor three = eval::embed_sequence(model, raw, {}, 3);

    EXPECT_EQ(full.data, capped.data);  // n > length falls back to full
    EXPECT_EQ(full.data, six.data);     // explicit full length matches default
    ASSERT_TRUE(three.same_shape(full));
    for (double v : three.data) EXPECT_TRUE(std::isfinite(v));
}
