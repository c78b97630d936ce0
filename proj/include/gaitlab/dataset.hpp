#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "gaitlab/geometry.hpp"
#include "gaitlab/rng.hpp"
#include "gaitlab/synthetic.hpp"

// Canonical dataset layout:
//   root/index.json
//   root/subjects/<subject_id %04d>/<sequence_id %04d>/meta.json
//   root/subjects/<subject_id %04d>/<sequence_id %04d>/frame_%04d.xyz
// Frame files are UTF-8 text, one "x y z" line per point, LF-terminated.
namespace gaitlab::data {

namespace fs = std::filesystem;
using nlohmann::json;

struct SequenceInfo {
    int sequence_id = -1;
    int num_frames = 0;
    double view_angle_deg = 0;
    bool night = false;
};

struct SubjectEntry {
    int subject_id = -1;
    std::vector<SequenceInfo> sequences;
};

struct DatasetIndex {
    std::string root;
    std::vector<SubjectEntry> subjects;
    std::vector<int> train_subjects;
    std::vector<int> test_subjects;

    const SubjectEntry& subject(int id) const {
        for (const auto& s : subjects)
            if (s.subject_id == id) return s;
        throw std::out_of_range("dataset index: unknown subject " + std::to_string(id));
    }
};

inline std::string id4(int v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", v);
    return buf;
}

inline fs::path sequence_dir(const std::string& root, int subject_id, int sequence_id) {
    return fs::path(root) / "subjects" / id4(subject_id) / id4(sequence_id);
}

inline void write_xyz(const fs::path& path, const std::vector<geometry::Vec3>& pts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    char line[128];
    for (const auto& p : pts) {
        int n = std::snprintf(line, sizeof line, "%.6f %.6f %.6f\n", p.x, p.y, p.z);
        out.write(line, n);
    }
}

inline std::vector<geometry::Vec3> read_xyz(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<geometry::Vec3> pts;
    double x, y, z;
    while (in >> x >> y >> z) pts.push_back({x, y, z});
    return pts;
}

inline json index_to_json(const DatasetIndex& idx) {
    json subjects = json::array();
    for (const auto& s : idx.subjects) {
        json seqs = json::array();
        for (const auto& q : s.sequences)
            seqs.push_back({{"sequence_id", q.sequence_id},
                            {"num_frames", q.num_frames},
                            {"view_angle_deg", q.view_angle_deg},
                            {"night", q.night}});
        subjects.push_back({{"subject_id", s.subject_id}, {"sequences", seqs}});
    }
    return json{{"format_version", 1},
                {"root", "."},
                {"subjects", subjects},
                {"split", {{"train", idx.train_subjects}, {"test", idx.test_subjects}}}};
}

inline DatasetIndex index_from_json(const json& j, const std::string& root) {
    DatasetIndex idx;
    idx.root = root;
    if (j.at("format_version").get<int>() != 1)
        throw std::runtime_error("dataset index: unsupported format_version");
    for (const auto& s : j.at("subjects")) {
        SubjectEntry e;
        e.subject_id = s.at("subject_id").get<int>();
        for (const auto& q : s.at("sequences"))
            e.sequences.push_back({q.at("sequence_id").get<int>(), q.at("num_frames").get<int>(),
                                   q.at("view_angle_deg").get<double>(),
                                   q.at("night").get<bool>()});
        idx.subjects.push_back(std::move(e));
    }
    idx.train_subjects = j.at("split").at("train").get<std::vector<int>>();
    idx.test_subjects = j.at("split").at("test").get<std::vector<int>>();
    return idx;
}

inline void save_index(const DatasetIndex& idx) {
    std::ofstream out(fs::path(idx.root) / "index.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write index.json under " + idx.root);
    out << index_to_json(idx).dump(2) << '\n';
}

inline DatasetIndex load_index(const std::string& root) {
    std::ifstream in(fs::path(root) / "index.json");
    if (!in) throw std::runtime_error("no index.json under " + root);
    json j;
    in >> j;
    DatasetIndex idx = index_from_json(j, root);
    std::vector<int> ids;
    for (const auto& s : idx.subjects) {
        ids.push_back(s.subject_id);
        for (const auto& q : s.sequences) {
            fs::path dir = sequence_dir(root, s.subject_id, q.sequence_id);
            if (!fs::exists(dir)) throw std::runtime_error("missing sequence dir " + dir.string());
        }
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw std::runtime_error("dataset index: duplicate subject ids");
    for (int t : idx.train_subjects)
        if (std::find(idx.test_subjects.begin(), idx.test_subjects.end(), t) !=
            idx.test_subjects.end())
            throw std::runtime_error("dataset index: train/test overlap");
    return idx;
}

inline std::vector<geometry::PointCloudFrame> load_sequence(const std::string& root,
                                                            int subject_id, int sequence_id,
                                                            int num_frames) {
    std::vector<geometry::PointCloudFrame> frames;
    fs::path dir = sequence_dir(root, subject_id, sequence_id);
    for (int i = 1; i <= num_frames; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04d.xyz", i);
        geometry::PointCloudFrame f;
        f.points = read_xyz(dir / name);
        f.frame_index = i;
        frames.push_back(std::move(f));
    }
    return frames;
}

// How generate_dataset fills the explicit train/test lists. The default
// parity rule keeps subjects disjoint between splits; all_train / all_test
// make single-role datasets (e.g. a held-out probe set of known subjects).
enum class SplitRule { parity, all_train, all_test };

struct GenOptions {
    std::string out_dir;
    int n_subjects = 8;
    int seqs_per_subject = 4;
    int frames_per_sequence = 12;
    std::uint64_t seed = 1;
    SplitRule split = SplitRule::parity;
    // Subjects are keyed by subject_seed so a second dataset can host
    // held-out sequences of the same identities: pass the same subject_seed
    // with a different seed and first_sequence_id.
    std::uint64_t subject_seed = 0;  // 0 -> use seed
    int first_sequence_id = 0;
    double frame_rate = 10.0;
    double noise_sigma = 0.01;
    double occlusion_rate = 0.15;
    double clutter_rate = 0.15;
    double night_fraction = 0.2;
};

/// Generates the full on-disk dataset. Deterministic per options; sequences
/// derive their streams from (seed, subject_id, sequence_id) so generation
/// order cannot change the output.
inline DatasetIndex generate_dataset(const GenOptions& opt) {
    if (opt.n_subjects < 1 || opt.seqs_per_subject < 1 || opt.frames_per_sequence < 1)
        throw std::invalid_argument("generate_dataset: counts must be >= 1");
    std::uint64_t subject_seed = opt.subject_seed ? opt.subject_seed : opt.seed;

    DatasetIndex idx;
    idx.root = opt.out_dir;
    fs::create_directories(fs::path(opt.out_dir) / "subjects");

    for (int sid = 0; sid < opt.n_subjects; ++sid) {
        synth::SubjectModel model = synth::generate_subject(sid, subject_seed);
        SubjectEntry entry;
        entry.subject_id = sid;
        for (int k = 0; k < opt.seqs_per_subject; ++k) {
            int seq_id = opt.first_sequence_id + k;
            Rng srng = Rng(opt.seed).fork(static_cast<std::uint64_t>(sid))
                           .fork(static_cast<std::uint64_t>(seq_id));

            // stratified view angle: k-th sequence looks from a new quadrant
            double view_deg = std::fmod(90.0 * k + srng.uniform(-15.0, 15.0) + 360.0, 360.0);
            double mid_dist = srng.uniform(4.5, 9.0);
            double los_az = srng.uniform(0.0, 2.0 * geometry::kPi);
            double phase0 = srng.uniform(0.0, 2.0 * geometry::kPi);
            bool night = srng.bernoulli(opt.night_fraction);

            synth::SceneSpec scene;
            scene.frame_rate = opt.frame_rate;
            scene.noise_sigma = night ? 1.5 * opt.noise_sigma : opt.noise_sigma;
            scene.occlusion_rate = opt.occlusion_rate;
            scene.clutter_rate = opt.clutter_rate;
            scene.night_flag = night;

            double heading = los_az + view_deg * geometry::kDegToRad;
            double mid_x = scene.sensor_position.x + mid_dist * std::cos(los_az);
            double mid_y = scene.sensor_position.y + mid_dist * std::sin(los_az);
            double speed = model.stride_length * model.cadence;
            double t_mid = 0.5 * (opt.frames_per_sequence - 1) / opt.frame_rate;
            scene.trajectory = {
                {mid_x - speed * t_mid * std::cos(heading), mid_y - speed * t_mid * std::sin(heading)},
                {mid_x + speed * t_mid * std::cos(heading), mid_y + speed * t_mid * std::sin(heading)}};

            fs::path dir = sequence_dir(opt.out_dir, sid, seq_id);
            fs::create_directories(dir);
            Rng frame_seeds = srng.fork(0xf5a3e5u);
            for (int i = 0; i < opt.frames_per_sequence; ++i) {
                double t = i / opt.frame_rate;
                synth::Pose2D pose;
                pose.x = mid_x + speed * (t - t_mid) * std::cos(heading);
                pose.y = mid_y + speed * (t - t_mid) * std::sin(heading);
                pose.heading = heading;
                double phase = phase0 + 2.0 * geometry::kPi * (model.cadence / 2.0) * t;
                synth::SceneSpec frame_scene = scene;
                frame_scene.seed = frame_seeds.fork(static_cast<std::uint64_t>(i)).next_u64();
                geometry::PointCloudFrame f = synth::render_frame(model, phase, pose, frame_scene);
                char name[32];
                std::snprintf(name, sizeof name, "frame_%04d.xyz", i + 1);
                write_xyz(dir / name, f.points);
            }

            json meta{{"subject_id", sid},
                      {"sequence_id", seq_id},
                      {"view_angle_deg", view_deg},
                      {"night", night},
                      {"num_frames", opt.frames_per_sequence}};
            std::ofstream mout(dir / "meta.json", std::ios::binary);
            mout << meta.dump(2) << '\n';

            entry.sequences.push_back({seq_id, opt.frames_per_sequence, view_deg, night});
        }
        idx.subjects.push_back(std::move(entry));
        bool train = opt.split == SplitRule::all_train ||
                     (opt.split == SplitRule::parity && sid % 2 == 0);
        (train ? idx.train_subjects : idx.test_subjects).push_back(sid);
    }
    save_index(idx);
    return idx;
}

}  // namespace gaitlab::data
