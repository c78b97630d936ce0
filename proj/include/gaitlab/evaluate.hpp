#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gaitlab/dataset.hpp"
#include "gaitlab/geometry.hpp"
#include "gaitlab/model.hpp"
#include "gaitlab/rng.hpp"
#include "gaitlab/tensor.hpp"

namespace gaitlab::eval {

// ---------------------------------------------------------------------------
// Gallery / probe split
// ---------------------------------------------------------------------------

struct SeqRef {
    int subject_id = -1;
    int sequence_id = -1;
    int num_frames = 0;
    double view_angle_deg = 0.0;
    bool night = false;
};

struct GalleryProbeSplit {
    std::vector<SeqRef> gallery;  // exactly one entry per subject
    std::vector<SeqRef> probes;   // every remaining sequence
    std::uint64_t seed = 0;
    int gallery_only_warnings = 0;  // subjects contributing zero probes
};

enum class SplitRole { test, train };

// One uniformly chosen gallery sequence per subject, keyed by (seed, subject).
inline GalleryProbeSplit build_split(const data::DatasetIndex& index, std::uint64_t seed,
                                     SplitRole role = SplitRole::test) {
    const std::vector<int>& ids =
        role == SplitRole::test ? index.test_subjects : index.train_subjects;
    if (ids.empty()) throw std::invalid_argument("build_split: empty subject list");
    GalleryProbeSplit split;
    split.seed = seed;
    for (int sid : ids) {
        const data::SubjectEntry& entry = index.subject(sid);
        const int m = static_cast<int>(entry.sequences.size());
        if (m == 0) throw std::runtime_error("build_split: subject has no sequences");
        int pick = static_cast<int>(Rng(seed).fork(static_cast<std::uint64_t>(sid))
                                        .uniform_int(static_cast<std::uint64_t>(m)));
        if (m == 1) ++split.gallery_only_warnings;
        for (int i = 0; i < m; ++i) {
            const data::SequenceInfo& info = entry.sequences[static_cast<std::size_t>(i)];
            SeqRef ref{sid, info.sequence_id, info.num_frames, info.view_angle_deg, info.night};
            if (i == pick)
                split.gallery.push_back(ref);
            else
                split.probes.push_back(ref);
        }
    }
    return split;
}

// ---------------------------------------------------------------------------
// Embedding and distance
// ---------------------------------------------------------------------------

// n_frames = 0 asks for the full sequence; n > length falls back to the
// full sequence (truncation to the first n frames is all the sweep needs).
using EmbedFn = std::function<Tensor(const SeqRef&, int n_frames)>;

inline Tensor embed_sequence(const net::Model& model,
                             const std::vector<geometry::PointCloudFrame>& raw,
                             const geometry::SensorIntrinsics& intr, int n_frames = 0) {
    int t = static_cast<int>(raw.size());
    if (n_frames > 0) t = std::min(n_frames, t);
    geometry::GaitSequence seq = geometry::preprocess_sequence(
        raw, intr, t, model.cfg.n_points, geometry::FramePolicy::kEval, 0);
    net::SequenceTensors in = net::make_input(seq, model.cfg);
    ad::Tape tape(false);
    net::Model::Bound bound = model.bind(tape);
    return tape.value(net::forward_sequence(bound, model.cfg, in, false).embedding);
}

inline EmbedFn make_model_embedder(const net::Model& model, const data::DatasetIndex& index,
                                   const geometry::SensorIntrinsics& intr = {}) {
    auto cache = std::make_shared<std::map<std::pair<int, int>,
                                           std::vector<geometry::PointCloudFrame>>>();
    return [&model, &index, intr, cache](const SeqRef& ref, int n_frames) {
        auto key = std::make_pair(ref.subject_id, ref.sequence_id);
        auto it = cache->find(key);
        if (it == cache->end())
            it = cache->emplace(key, data::load_sequence(index.root, ref.subject_id,
                                                         ref.sequence_id, ref.num_frames))
                     .first;
        return embed_sequence(model, it->second, intr, n_frames);
    };
}

// mean over strips of the Euclidean distance between matching strip rows
inline double distance(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b) || a.rank() != 2)
        throw std::invalid_argument("distance: embeddings must share a p x c shape");
    const int p = a.dim(0), c = a.dim(1);
    double total = 0;
    for (int s = 0; s < p; ++s) {
        double sq = 0;
        for (int j = 0; j < c; ++j) {
            double d = a.at(s, j) - b.at(s, j);
            sq += d * d;
        }
        total += std::sqrt(sq);
    }
    return total / p;
}

struct DistanceMatrix {
    Tensor d;  // probes x gallery
    std::vector<int> probe_subject;
    std::vector<int> gallery_subject;

    void validate() const {
        if (d.rank() != 2 || d.dim(0) != static_cast<int>(probe_subject.size()) ||
            d.dim(1) != static_cast<int>(gallery_subject.size()))
            throw std::invalid_argument("distance matrix: label/shape mismatch");
        for (double v : d.data)
            if (!(v >= 0) || !std::isfinite(v))
                throw std::invalid_argument("distance matrix: entries must be finite and >= 0");
    }
};

namespace detail {

// gallery indices of row r ordered by (distance, index)
inline std::vector<int> ranked_row(const DistanceMatrix& dm, int r) {
    std::vector<int> order(static_cast<std::size_t>(dm.d.dim(1)));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dm.d.at(r, a) < dm.d.at(r, b); });
    return order;
}

}  // namespace detail

inline double rank_k(const DistanceMatrix& dm, int k) {
    dm.validate();
    const int rows = dm.d.dim(0);
    if (rows == 0) throw std::invalid_argument("rank_k: no probes");
    int hits = 0;
    for (int r = 0; r < rows; ++r) {
        std::vector<int> order = detail::ranked_row(dm, r);
        const int top = std::min<int>(k, static_cast<int>(order.size()));
        for (int i = 0; i < top; ++i)
            if (dm.gallery_subject[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] ==
                dm.probe_subject[static_cast<std::size_t>(r)]) {
                ++hits;
                break;
            }
    }
    return 100.0 * hits / rows;
}

// single-positive protocol: AP of a probe is 1 / rank of its true match
inline double mean_average_precision(const DistanceMatrix& dm) {
    dm.validate();
    const int rows = dm.d.dim(0);
    if (rows == 0) throw std::invalid_argument("mean_average_precision: no probes");
    double sum = 0;
    for (int r = 0; r < rows; ++r) {
        std::vector<int> order = detail::ranked_row(dm, r);
        for (std::size_t i = 0; i < order.size(); ++i)
            if (dm.gallery_subject[static_cast<std::size_t>(order[i])] ==
                dm.probe_subject[static_cast<std::size_t>(r)]) {
                sum += 1.0 / static_cast<double>(i + 1);
                break;
            }
    }
    return 100.0 * sum / rows;
}

// ---------------------------------------------------------------------------
// Full evaluation
// ---------------------------------------------------------------------------

struct SubsetMetrics {
    double rank1 = 0, rank5 = 0, map = 0;
    int count = 0;
};

struct MetricsReport {
    double rank1 = 0, rank5 = 0, map = 0;
    std::optional<SubsetMetrics> cross_view;
    std::optional<SubsetMetrics> night;
    std::vector<std::pair<int, double>> frames_sweep;  // (frames, rank1)
    std::uint64_t split_seed = 0;
    std::string checkpoint_id;

    nlohmann::json to_json() const {
        nlohmann::json subsets = nlohmann::json::object();
        auto put = [&subsets](const char* key, const std::optional<SubsetMetrics>& m) {
            if (!m) return;
            subsets[key] = {{"rank1", m->rank1},
                            {"rank5", m->rank5},
                            {"map", m->map},
                            {"count", m->count}};
        };
        put("cross_view", cross_view);
        put("night", night);
        nlohmann::json sweep = nlohmann::json::array();
        for (const auto& [frames, r1] : frames_sweep)
            sweep.push_back({{"frames", frames}, {"rank1", r1}});
        return {{"rank1", rank1},       {"rank5", rank5},
                {"map", map},           {"subsets", subsets},
                {"frames_sweep", sweep}, {"split_seed", split_seed},
                {"checkpoint_id", checkpoint_id}};
    }

    std::string frames_csv() const {
        std::string csv = "frames,rank1\n";
        char line[64];
        for (const auto& [frames, r1] : frames_sweep) {
            std::snprintf(line, sizeof line, "%d,%.6g\n", frames, r1);
            csv += line;
        }
        return csv;
    }
};

enum class SubsetFilter { all, cross_view, night };

struct EvalOptions {
    SplitRole role = SplitRole::test;
    SubsetFilter subset = SubsetFilter::all;
    std::string checkpoint_id;
    bool frames_sweep = true;
    int n_frames = 0;  // 0 = full sequences for the headline metrics
};

inline const std::vector<int>& sweep_lengths() {
    static const std::vector<int> lengths{5, 10, 15, 20, 25, 30};
    return lengths;
}

inline MetricsReport evaluate_with_embedder(const data::DatasetIndex& index, std::uint64_t seed,
                                            const EmbedFn& embed, const EvalOptions& opts = {}) {
    GalleryProbeSplit split = build_split(index, seed, opts.role);
    if (split.probes.empty()) throw std::runtime_error("evaluate: split produced no probes");

    // embeddings are cached per (sequence, effective frame count)
    std::map<std::tuple<int, int, int>, Tensor> cache;
    auto embed_at = [&](const SeqRef& ref, int n_frames) -> const Tensor& {
        int t_eff = n_frames > 0 ? std::min(n_frames, ref.num_frames) : ref.num_frames;
        auto key = std::make_tuple(ref.subject_id, ref.sequence_id, t_eff);
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, embed(ref, t_eff)).first;
        return it->second;
    };

    auto matrix_at = [&](const std::vector<SeqRef>& probes, int n_frames) {
        DistanceMatrix dm;
        dm.d = Tensor({static_cast<int>(probes.size()), static_cast<int>(split.gallery.size())});
        for (std::size_t r = 0; r < probes.size(); ++r) {
            dm.probe_subject.push_back(probes[r].subject_id);
            const Tensor& pe = embed_at(probes[r], n_frames);
            for (std::size_t c = 0; c < split.gallery.size(); ++c)
                dm.d.at(static_cast<int>(r), static_cast<int>(c)) =
                    distance(pe, embed_at(split.gallery[c], n_frames));
        }
        for (const SeqRef& g : split.gallery) dm.gallery_subject.push_back(g.subject_id);
        return dm;
    };

    MetricsReport report;
    report.split_seed = seed;
    report.checkpoint_id = opts.checkpoint_id;

    DistanceMatrix dm = matrix_at(split.probes, opts.n_frames);
    report.rank1 = rank_k(dm, 1);
    report.rank5 = rank_k(dm, 5);
    report.map = mean_average_precision(dm);

    auto subset_metrics = [&](const std::vector<SeqRef>& subset) -> std::optional<SubsetMetrics> {
        if (subset.empty()) return std::nullopt;  // absent, never reported as 0
        DistanceMatrix sub = matrix_at(subset, opts.n_frames);
        SubsetMetrics m;
        m.rank1 = rank_k(sub, 1);
        m.rank5 = rank_k(sub, 5);
        m.map = mean_average_precision(sub);
        m.count = static_cast<int>(subset.size());
        return m;
    };

    if (opts.subset == SubsetFilter::all || opts.subset == SubsetFilter::cross_view) {
        std::map<int, double> gallery_view;
        for (const SeqRef& g : split.gallery) gallery_view[g.subject_id] = g.view_angle_deg;
        std::vector<SeqRef> cross;
        for (const SeqRef& p : split.probes) {
            double diff = std::fmod(std::abs(p.view_angle_deg - gallery_view[p.subject_id]), 360.0);
            diff = std::min(diff, 360.0 - diff);
            if (diff >= 75.0 && diff <= 105.0) cross.push_back(p);
        }
        report.cross_view = subset_metrics(cross);
    }
    if (opts.subset == SubsetFilter::all || opts.subset == SubsetFilter::night) {
        std::vector<SeqRef> night;
        for (const SeqRef& p : split.probes)
            if (p.night) night.push_back(p);
        report.night = subset_metrics(night);
    }

    if (opts.frames_sweep)
        for (int n : sweep_lengths())
            report.frames_sweep.emplace_back(n, rank_k(matrix_at(split.probes, n), 1));
    return report;
}

inline MetricsReport evaluate(const net::Model& model, const data::DatasetIndex& index,
                              std::uint64_t seed, const EvalOptions& opts = {},
                              const geometry::SensorIntrinsics& intr = {}) {
    return evaluate_with_embedder(index, seed, make_model_embedder(model, index, intr), opts);
}

}  // namespace gaitlab::eval
