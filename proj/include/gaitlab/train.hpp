#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gaitlab/autodiff.hpp"
#include "gaitlab/dataset.hpp"
#include "gaitlab/geometry.hpp"
#include "gaitlab/model.hpp"
#include "gaitlab/rng.hpp"
#include "gaitlab/tensor.hpp"

namespace gaitlab::trainer {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    double alpha = 1.0;                 // triplet weight
    double beta = 0.1;                  // cross-entropy weight
    double margin = 0.2;
    int batch_subjects = 4;             // P_b
    int sequences_per_subject = 2;      // K_b
    int frames = 10;                    // T
    double lr = 1e-3;
    std::vector<int> milestones;        // iterations after which lr drops x0.1
    double weight_decay = 5e-4;
    int total_iterations = 100;
    std::uint64_t seed = 1;

    void validate() const {
        if (alpha < 0 || beta < 0) throw std::invalid_argument("train: alpha, beta must be >= 0");
        if (batch_subjects < 2) throw std::invalid_argument("train: batch_subjects must be >= 2");
        if (sequences_per_subject < 2)
            throw std::invalid_argument("train: sequences_per_subject must be >= 2");
        if (frames < 1) throw std::invalid_argument("train: frames must be >= 1");
        if (lr <= 0) throw std::invalid_argument("train: lr must be > 0");
        if (weight_decay < 0) throw std::invalid_argument("train: weight_decay must be >= 0");
        if (total_iterations < 1) throw std::invalid_argument("train: total_iterations must be >= 1");
        if (!std::is_sorted(milestones.begin(), milestones.end()))
            throw std::invalid_argument("train: milestones must be sorted ascending");
        for (int m : milestones)
            if (m < 1 || m > total_iterations)
                throw std::invalid_argument("train: milestones must lie in [1, total_iterations]");
    }
};

// lr for a 1-based iteration: each milestone m decays iterations > m by x0.1
inline double lr_at(const TrainConfig& cfg, int iteration) {
    double lr = cfg.lr;
    for (int m : cfg.milestones)
        if (iteration > m) lr *= 0.1;
    return lr;
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

struct BatchItem {
    int subject_id = -1;
    int sequence_id = -1;
    int label = -1;  // class index = position in the train-subject list
    geometry::GaitSequence seq;
};

// in-memory cache of raw frames, keyed by (subject, sequence)
class SequenceCache {
public:
    const std::vector<geometry::PointCloudFrame>& fetch(const data::DatasetIndex& index,
                                                        int subject_id, int sequence_id,
                                                        int num_frames) {
        auto key = std::make_pair(subject_id, sequence_id);
        auto it = cache_.find(key);
        if (it == cache_.end())
            it = cache_.emplace(key, data::load_sequence(index.root, subject_id, sequence_id,
                                                         num_frames))
                     .first;
        return it->second;
    }

private:
    std::map<std::pair<int, int>, std::vector<geometry::PointCloudFrame>> cache_;
};

// P_b distinct training subjects x K_b sequences each (with replacement only
// when a subject has fewer than K_b), preprocessed to T frames; deterministic
// in (seed, iteration).
inline std::vector<BatchItem> sample_batch(const data::DatasetIndex& index, int p_b, int k_b,
                                           int t, int n_points,
                                           const geometry::SensorIntrinsics& intr,
                                           std::uint64_t seed, int iteration,
                                           SequenceCache* cache = nullptr) {
    const std::vector<int>& train = index.train_subjects;
    if (static_cast<int>(train.size()) < p_b)
        throw std::invalid_argument("sample_batch: fewer training subjects than batch_subjects");
    Rng rng = Rng(seed).fork(0xba7c4u).fork(static_cast<std::uint64_t>(iteration));

    std::vector<int> subject_pos = rng.sample_without_replacement(static_cast<int>(train.size()),
                                                                  p_b);
    struct Pick {
        int subject_id, sequence_id, num_frames, label;
    };
    std::vector<Pick> picks;
    for (int pos : subject_pos) {
        int sid = train[static_cast<std::size_t>(pos)];
        const data::SubjectEntry& entry = index.subject(sid);
        const int m = static_cast<int>(entry.sequences.size());
        if (m == 0) throw std::runtime_error("sample_batch: subject has no sequences");
        std::vector<int> seq_idx;
        if (m >= k_b) {
            seq_idx = rng.sample_without_replacement(m, k_b);
        } else {
            for (int j = 0; j < k_b; ++j)
                seq_idx.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m))));
        }
        for (int si : seq_idx) {
            const data::SequenceInfo& info = entry.sequences[static_cast<std::size_t>(si)];
            picks.push_back({sid, info.sequence_id, info.num_frames, pos});
        }
    }

    SequenceCache local;
    SequenceCache& store = cache ? *cache : local;
    std::vector<BatchItem> batch;
    for (const Pick& p : picks) {
        const auto& raw = store.fetch(index, p.subject_id, p.sequence_id, p.num_frames);
        BatchItem item;
        item.subject_id = p.subject_id;
        item.sequence_id = p.sequence_id;
        item.label = p.label;
        item.seq = geometry::preprocess_sequence(raw, intr, t, n_points,
                                                 geometry::FramePolicy::kTrain, rng.next_u64());
        item.seq.subject_id = p.subject_id;
        item.seq.sequence_id = p.sequence_id;
        batch.push_back(std::move(item));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Optimizer: adaptive moments with decoupled weight decay.
// The decay is applied independently of lr, so a zero-lr step still shrinks
// parameters by (1 - wd) while a zero-decay zero-lr step is a bitwise no-op.
// ---------------------------------------------------------------------------

struct Adam {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::map<std::string, Tensor> m, v;

    void step(net::Model& model, const std::map<std::string, Tensor>& grads, double lr,
              double weight_decay) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (const std::string& name : model.params.names()) {
            Tensor& theta = model.params.at(name);
            auto git = grads.find(name);
            if (m.find(name) == m.end()) {
                Tensor zero(theta.shape);
                m.emplace(name, zero);
                v.emplace(name, zero);
            }
            Tensor& mi = m.at(name);
            Tensor& vi = v.at(name);
            for (std::size_t i = 0; i < theta.data.size(); ++i) {
                const double g = git == grads.end() ? 0.0 : git->second.data[i];
                mi.data[i] = beta1 * mi.data[i] + (1.0 - beta1) * g;
                vi.data[i] = beta2 * vi.data[i] + (1.0 - beta2) * g * g;
                const double update = (mi.data[i] / bc1) / (std::sqrt(vi.data[i] / bc2) + eps);
                theta.data[i] = (1.0 - weight_decay) * theta.data[i] - lr * update;
            }
        }
    }
};

inline constexpr char kOptMagic[8] = {'G', 'L', 'O', 'P', '0', '0', '0', '1'};

inline void save_optimizer(const std::string& path, const Adam& opt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write optimizer state: " + path);
    out.write(kOptMagic, 8);
    auto write_u32 = [&out](std::uint32_t x) {
        out.write(reinterpret_cast<const char*>(&x), sizeof x);
    };
    std::int64_t t = opt.t;
    out.write(reinterpret_cast<const char*>(&t), sizeof t);
    write_u32(static_cast<std::uint32_t>(opt.m.size()));
    for (const auto& [name, mt] : opt.m) {
        const Tensor& vt = opt.v.at(name);
        write_u32(static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(static_cast<std::uint32_t>(mt.rank()));
        for (int d = 0; d < mt.rank(); ++d) write_u32(static_cast<std::uint32_t>(mt.dim(d)));
        out.write(reinterpret_cast<const char*>(mt.data.data()),
                  static_cast<std::streamsize>(mt.data.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(vt.data.data()),
                  static_cast<std::streamsize>(vt.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("optimizer state write failed: " + path);
}

inline Adam load_optimizer(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read optimizer state: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kOptMagic))
        throw std::runtime_error("not an optimizer state file: " + path);
    auto read_u32 = [&in, &path]() {
        std::uint32_t x = 0;
        in.read(reinterpret_cast<char*>(&x), sizeof x);
        if (!in) throw std::runtime_error("truncated optimizer state: " + path);
        return x;
    };
    Adam opt;
    in.read(reinterpret_cast<char*>(&opt.t), sizeof opt.t);
    std::uint32_t count = read_u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = read_u32();
        std::string name(len, '\0');
        in.read(name.data(), len);
        std::uint32_t rank = read_u32();
        std::vector<int> dims(rank);
        for (auto& d : dims) d = static_cast<int>(read_u32());
        Tensor mt(dims), vt(dims);
        in.read(reinterpret_cast<char*>(mt.data.data()),
                static_cast<std::streamsize>(mt.data.size() * sizeof(double)));
        in.read(reinterpret_cast<char*>(vt.data.data()),
                static_cast<std::streamsize>(vt.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated optimizer state: " + path);
        opt.m.emplace(name, std::move(mt));
        opt.v.emplace(name, std::move(vt));
    }
    return opt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossRecord {
    int iteration = 0;
    double lr = 0, triplet = 0, ce = 0, total = 0;
};

struct TrainResult {
    int iterations_run = 0;
    std::string final_checkpoint;
    std::vector<LossRecord> history;  // every logged record
    int no_triplet_warnings = 0;
    bool stopped_early = false;
};

// Optional early-stop probe: called every `stop_check_every` iterations with
// the current model; returning true ends training at that iteration.
using StopCheck = std::function<bool(int iteration, const net::Model& model)>;

namespace detail {

inline std::string ckpt_name(int iteration) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%07d.bin", iteration);
    return buf;
}

inline void write_latest(const std::filesystem::path& out_dir, const std::string& name) {
    std::ofstream f(out_dir / "latest");
    f << name << "\n";
}

inline void dump_batch(const std::filesystem::path& out_dir, int iteration,
                       const std::vector<BatchItem>& batch) {
    std::ofstream f(out_dir / "abort_batch.txt");
    f << "non-finite loss at iteration " << iteration << "\n";
    for (const BatchItem& b : batch)
        f << "subject " << b.subject_id << " sequence " << b.sequence_id << "\n";
}

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, const net::NetConfig& net_cfg,
                         const data::DatasetIndex& index, const std::string& out_dir,
                         const geometry::SensorIntrinsics& intr = {},
                         const StopCheck& stop_check = nullptr, int stop_check_every = 50) {
    namespace fs = std::filesystem;
    cfg.validate();
    net_cfg.validate();
    if (net_cfg.n_classes != static_cast<int>(index.train_subjects.size()))
        throw std::invalid_argument("train: n_classes must equal the training subject count");

    fs::create_directories(out_dir);
    const fs::path out(out_dir);

    // resume from the latest checkpoint when present, else fresh init
    net::Model model(net_cfg, cfg.seed);
    Adam opt;
    int start_iteration = 0;
    if (fs::exists(out / "latest")) {
        std::ifstream f(out / "latest");
        std::string name;
        f >> name;
        model = net::load_checkpoint((out / name).string());
        if (model.cfg.fingerprint() != net_cfg.fingerprint())
            throw std::runtime_error("train: checkpoint configuration mismatch on resume");
        int it = 0;
        if (std::sscanf(name.c_str(), "ckpt_%d.bin", &it) != 1)
            throw std::runtime_error("train: unrecognized checkpoint name: " + name);
        start_iteration = it;
        fs::path opt_path = out / (name + ".opt");
        if (fs::exists(opt_path)) opt = load_optimizer(opt_path.string());
    }

    std::ofstream log(out / "train.log", std::ios::app);
    if (!log) throw std::runtime_error("train: cannot open log file in " + out_dir);

    SequenceCache cache;
    TrainResult result;
    auto save_at = [&](int iteration) {
        std::string name = detail::ckpt_name(iteration);
        net::save_checkpoint((out / name).string(), model);
        save_optimizer((out / (name + ".opt")).string(), opt);
        detail::write_latest(out, name);
        result.final_checkpoint = (out / name).string();
    };

    int it = start_iteration;
    for (it = start_iteration + 1; it <= cfg.total_iterations; ++it) {
        std::vector<BatchItem> batch =
            sample_batch(index, cfg.batch_subjects, cfg.sequences_per_subject, cfg.frames,
                         net_cfg.n_points, intr, cfg.seed, it, &cache);

        ad::Tape tape(true);
        net::Model::Bound bound = model.bind(tape);
        std::vector<ad::Var> embeddings, logits;
        std::vector<int> labels;
        for (const BatchItem& b : batch) {
            net::SequenceTensors in = net::make_input(b.seq, net_cfg);
            net::NetOutput o = net::forward_sequence(bound, net_cfg, in, true);
            embeddings.push_back(o.embedding);
            logits.push_back(o.logits);
            labels.push_back(b.label);
        }
        int warn = 0;
        ad::Var triplet = ad::triplet_loss_ba(embeddings, labels, cfg.margin, &warn);
        result.no_triplet_warnings += warn;
        ad::Var ce = ad::ce_loss(logits, labels);
        ad::Var total = ad::add(ad::scale(triplet, cfg.alpha), ad::scale(ce, cfg.beta));

        const double tri_v = tape.value(triplet).data[0];
        const double ce_v = tape.value(ce).data[0];
        const double total_v = tape.value(total).data[0];
        if (!std::isfinite(total_v)) {
            detail::dump_batch(out, it, batch);
            std::string ids;
            for (const BatchItem& b : batch)
                ids += " (" + std::to_string(b.subject_id) + "," + std::to_string(b.sequence_id) +
                       ")";
            throw std::runtime_error("train: non-finite loss at iteration " + std::to_string(it) +
                                     "; batch" + ids);
        }

        tape.backward(total);
        std::map<std::string, Tensor> grads;
        for (const std::string& name : model.params.names()) {
            const Tensor& g = tape.grad(bound(name));
            if (!g.all_finite())
                throw std::runtime_error("train: non-finite gradient for " + name +
                                         " at iteration " + std::to_string(it));
            grads.emplace(name, g);
        }
        opt.step(model, grads, lr_at(cfg, it), cfg.weight_decay);

        if (it % 10 == 0) {
            char line[160];
            std::snprintf(line, sizeof line, "%d,%.10g,%.10g,%.10g,%.10g", it, lr_at(cfg, it),
                          tri_v, ce_v, total_v);
            log << line << "\n";
            log.flush();
            result.history.push_back({it, lr_at(cfg, it), tri_v, ce_v, total_v});
        }
        if (std::binary_search(cfg.milestones.begin(), cfg.milestones.end(), it)) save_at(it);
        if (stop_check && stop_check_every > 0 && it % stop_check_every == 0 &&
            stop_check(it, model)) {
            result.stopped_early = true;
            break;
        }
    }
    result.iterations_run = std::min(it, cfg.total_iterations);
    save_at(result.iterations_run);
    return result;
}

}  // namespace gaitlab::trainer
