#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "gaitlab/geometry.hpp"
#include "gaitlab/train.hpp"

namespace gaitlab::config {

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
    if (!j.is_object()) throw std::runtime_error("config: " + where + " must be an object");
    for (const auto& [key, value] : j.items())
        if (allowed.find(key) == allowed.end())
            throw std::runtime_error("config: unknown key \"" + key + "\" in " + where);
}

}  // namespace detail

// One file drives a whole run: dataset paths, sensor geometry, network width,
// and the training schedule.
struct RunConfig {
    std::uint64_t seed = 1;
    double width_scale = 1.0;
    geometry::SensorIntrinsics sensor{};
    trainer::TrainConfig train{};
    std::string data_dir;
    std::string out_dir;

    void validate() const {
        if (width_scale <= 0 || width_scale > 4)
            throw std::runtime_error("config: width_scale must lie in (0, 4]");
        sensor.validate();
        train.validate();
    }

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"width_scale", width_scale},
                {"sensor",
                 {{"f_up_deg", sensor.f_up_deg},
                  {"f_down_deg", sensor.f_down_deg},
                  {"rows", sensor.rows},
                  {"cols", sensor.cols}}},
                {"train",
                 {{"alpha", train.alpha},
                  {"beta", train.beta},
                  {"margin", train.margin},
                  {"batch_subjects", train.batch_subjects},
                  {"sequences_per_subject", train.sequences_per_subject},
                  {"frames", train.frames},
                  {"lr", train.lr},
                  {"milestones", train.milestones},
                  {"weight_decay", train.weight_decay},
                  {"total_iterations", train.total_iterations},
                  {"seed", train.seed}}},
                {"data_dir", data_dir},
                {"out_dir", out_dir}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        detail::reject_unknown(
            j, {"seed", "width_scale", "sensor", "train", "data_dir", "out_dir"}, "config root");
        RunConfig cfg;
        if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("width_scale")) cfg.width_scale = j.at("width_scale").get<double>();
        if (j.contains("sensor")) {
            const nlohmann::json& s = j.at("sensor");
            detail::reject_unknown(s, {"f_up_deg", "f_down_deg", "rows", "cols"}, "sensor");
            if (s.contains("f_up_deg")) cfg.sensor.f_up_deg = s.at("f_up_deg").get<double>();
            if (s.contains("f_down_deg")) cfg.sensor.f_down_deg = s.at("f_down_deg").get<double>();
            if (s.contains("rows")) cfg.sensor.rows = s.at("rows").get<int>();
            if (s.contains("cols")) cfg.sensor.cols = s.at("cols").get<int>();
        }
        if (j.contains("train")) {
            const nlohmann::json& t = j.at("train");
            detail::reject_unknown(t,
                                   {"alpha", "beta", "margin", "batch_subjects",
                                    "sequences_per_subject", "frames", "lr", "milestones",
                                    "weight_decay", "total_iterations", "seed"},
                                   "train");
            if (t.contains("alpha")) cfg.train.alpha = t.at("alpha").get<double>();
            if (t.contains("beta")) cfg.train.beta = t.at("beta").get<double>();
            if (t.contains("margin")) cfg.train.margin = t.at("margin").get<double>();
            if (t.contains("batch_subjects"))
                cfg.train.batch_subjects = t.at("batch_subjects").get<int>();
            if (t.contains("sequences_per_subject"))
                cfg.train.sequences_per_subject = t.at("sequences_per_subject").get<int>();
            if (t.contains("frames")) cfg.train.frames = t.at("frames").get<int>();
            if (t.contains("lr")) cfg.train.lr = t.at("lr").get<double>();
            if (t.contains("milestones"))
                cfg.train.milestones = t.at("milestones").get<std::vector<int>>();
            if (t.contains("weight_decay"))
                cfg.train.weight_decay = t.at("weight_decay").get<double>();
            if (t.contains("total_iterations"))
                cfg.train.total_iterations = t.at("total_iterations").get<int>();
            if (t.contains("seed")) cfg.train.seed = t.at("seed").get<std::uint64_t>();
        }
        if (j.contains("data_dir")) cfg.data_dir = j.at("data_dir").get<std::string>();
        if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
        cfg.validate();
        return cfg;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("config: cannot open " + path);
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("config: cannot write " + path);
        out << to_json().dump(2) << "\n";
    }
};

}  // namespace gaitlab::config
