#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "gaitlab/geometry.hpp"
#include "gaitlab/rng.hpp"

// Deterministic articulated-walker generator. Each identity is a set of
// capsule limbs with its own proportions and gait signature; frames are
// surface-sampled with LiDAR-like range falloff and visibility culling.
namespace gaitlab::synth {

using geometry::Vec3;

struct SubjectModel {
    int subject_id = -1;
    // torso, thigh, shin, upper-arm, forearm, head radius (meters)
    double torso = 0, thigh = 0, shin = 0, upper_arm = 0, forearm = 0, head_radius = 0;
    double height = 0;                // meters
    double stride_length = 0;         // meters per step
    double cadence = 0;               // steps per second
    double arm_swing_amplitude = 0;   // radians

    void validate() const {
        for (double v : {torso, thigh, shin, upper_arm, forearm, head_radius})
            if (v <= 0) throw std::invalid_argument("subject model: non-positive length");
        if (height < 1.4 || height > 2.0) throw std::invalid_argument("subject model: height range");
        if (cadence < 1.2 || cadence > 2.4) throw std::invalid_argument("subject model: cadence range");
    }
};

struct SceneSpec {
    std::vector<std::pair<double, double>> trajectory;  // piecewise-linear 2D path
    Vec3 sensor_position{0, 0, 1.0};
    double frame_rate = 10.0;
    double noise_sigma = 0.01;
    double occlusion_rate = 0.15;
    double clutter_rate = 0.15;
    bool night_flag = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (frame_rate <= 0) throw std::invalid_argument("scene: frame_rate must be > 0");
        if (occlusion_rate < 0 || occlusion_rate > 1 || clutter_rate < 0 || clutter_rate > 1)
            throw std::invalid_argument("scene: rates must be in [0,1]");
        if (noise_sigma < 0) throw std::invalid_argument("scene: negative noise");
    }
};

struct Pose2D {
    double x = 0, y = 0;
    double heading = 0;  // radians, world frame; walking direction
};

/// Deterministic subject parameters keyed by (subject_id, seed).
/// Proportions are tied to height so taller subjects have larger bodies.
inline SubjectModel generate_subject(int subject_id, std::uint64_t seed) {
    Rng rng = Rng(seed).fork(0x5b6a7u).fork(static_cast<std::uint64_t>(subject_id));
    SubjectModel m;
    m.subject_id = subject_id;
    m.height = rng.uniform(1.50, 1.95);
    double s = m.height / 1.70;  // proportional scaling
    m.head_radius = rng.uniform(0.085, 0.115);
    double leg = (0.475 + rng.uniform(-0.02, 0.02)) * m.height;
    double thigh_frac = rng.uniform(0.50, 0.54);
    m.thigh = leg * thigh_frac;
    m.shin = leg - m.thigh;
    m.torso = m.height - leg - 2.0 * m.head_radius;
    m.upper_arm = (0.155 + rng.uniform(-0.01, 0.01)) * m.height;
    m.forearm = (0.135 + rng.uniform(-0.01, 0.01)) * m.height;
    // stride and swing grow with stature (small jitter): keeps the body
    // envelope ordered by height while cadence and proportions stay free
    double u = (m.height - 1.50) / 0.45;
    m.stride_length = (0.55 + 0.25 * u + rng.uniform(-0.03, 0.03)) * s;
    m.cadence = rng.uniform(1.40, 2.20);
    m.arm_swing_amplitude = 0.35 + 0.35 * u + rng.uniform(-0.05, 0.05);
    m.validate();
    return m;
}

namespace detail {

struct Capsule {
    Vec3 a, b;      // segment endpoints (world frame)
    double radius;
};

inline double capsule_area(const Capsule& c) {
    double len = norm(c.b - c.a);
    return 2.0 * geometry::kPi * c.radius * len + 4.0 * geometry::kPi * c.radius * c.radius;
}

// Orthonormal frame with w along the axis (or +z for degenerate spheres).
inline void axis_frame(const Capsule& c, Vec3& u, Vec3& v, Vec3& w) {
    Vec3 d = c.b - c.a;
    double len = norm(d);
    w = len > 1e-12 ? (1.0 / len) * d : Vec3{0, 0, 1};
    Vec3 pick = std::abs(w.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    // u = normalize(pick x w)
    Vec3 cx{pick.y * w.z - pick.z * w.y, pick.z * w.x - pick.x * w.z, pick.x * w.y - pick.y * w.x};
    u = (1.0 / norm(cx)) * cx;
    v = Vec3{w.y * u.z - w.z * u.y, w.z * u.x - w.x * u.z, w.x * u.y - w.y * u.x};
}

// Uniform sample on the capsule surface; returns position and outward normal.
inline void sample_capsule(const Capsule& c, Rng& rng, Vec3& p, Vec3& n) {
    Vec3 u, v, w;
    axis_frame(c, u, v, w);
    double len = norm(c.b - c.a);
    double side_area = 2.0 * geometry::kPi * c.radius * len;
    double cap_area = 4.0 * geometry::kPi * c.radius * c.radius;
    double pick = rng.uniform() * (side_area + cap_area);
    double ang = rng.uniform(0.0, 2.0 * geometry::kPi);
    Vec3 radial = std::cos(ang) * u + std::sin(ang) * v;
    if (pick < side_area) {
        double t = rng.uniform();
        p = c.a + t * len * w + c.radius * radial;
        n = radial;
    } else {
        // spherical cap: uniform on the full sphere, assign hemisphere by sign
        double z = rng.uniform(-1.0, 1.0);
        double rr = std::sqrt(std::max(0.0, 1.0 - z * z));
        Vec3 dir = rr * radial + z * w;
        Vec3 center = z >= 0 ? c.b : c.a;
        p = center + c.radius * dir;
        n = dir;
    }
}

}  // namespace detail

/// Capsule skeleton of the subject at a reduced gait phase, in world frame.
/// Body frame: +x is the walking direction before heading is applied, feet
/// at z = 0. Exposed for geometric tests.
inline std::vector<detail::Capsule> pose_body(const SubjectModel& m, double gait_phase,
                                              const Pose2D& pose) {
    const double phase = std::fmod(gait_phase, 2.0 * geometry::kPi);
    const double s = m.height / 1.70;
    const double leg = m.thigh + m.shin;
    const double amp = std::asin(std::clamp(m.stride_length / (2.0 * leg), 0.0, 0.95));

    const double th_l = amp * std::sin(phase);
    const double th_r = amp * std::sin(phase + geometry::kPi);
    // stance leg stays near-straight; pelvis rides on the straighter leg
    const double hip_z = leg * std::max(std::cos(th_l), std::cos(th_r)) + 0.02;
    // swing-phase knee flexion (leg swings forward while thigh angle rises)
    const double flex_l = 0.6 * amp * std::max(0.0, std::cos(phase));
    const double flex_r = 0.6 * amp * std::max(0.0, -std::cos(phase));
    const double arm_l = m.arm_swing_amplitude * std::sin(phase + geometry::kPi);
    const double arm_r = m.arm_swing_amplitude * std::sin(phase);

    auto swing = [](const Vec3& from, double length, double angle) {
        return from + Vec3{length * std::sin(angle), 0, -length * std::cos(angle)};
    };

    std::vector<detail::Capsule> caps;
    const double hip_off = 0.10 * s, shoulder_off = 0.19 * s;
    for (int side = 0; side < 2; ++side) {
        double sign = side == 0 ? 1.0 : -1.0;
        double th = side == 0 ? th_l : th_r;
        double flex = side == 0 ? flex_l : flex_r;
        Vec3 hip{0, sign * hip_off, hip_z};
        Vec3 knee = swing(hip, m.thigh, th);
        Vec3 ankle = swing(knee, m.shin, th - flex);
        caps.push_back({hip, knee, 0.070 * s});
        caps.push_back({knee, ankle, 0.055 * s});
    }
    Vec3 pelvis{0, 0, hip_z};
    Vec3 neck{0, 0, hip_z + m.torso};
    caps.push_back({pelvis, neck, 0.130 * s});
    Vec3 head_c{0, 0, hip_z + m.torso + 1.1 * m.head_radius};
    caps.push_back({head_c, head_c, m.head_radius});
    for (int side = 0; side < 2; ++side) {
        double sign = side == 0 ? 1.0 : -1.0;
        double th = side == 0 ? arm_l : arm_r;
        Vec3 shoulder{0, sign * shoulder_off, hip_z + 0.95 * m.torso};
        Vec3 elbow = swing(shoulder, m.upper_arm, th);
        Vec3 wrist = swing(elbow, m.forearm, th + 0.35);
        caps.push_back({shoulder, elbow, 0.045 * s});
        caps.push_back({elbow, wrist, 0.040 * s});
    }

    // body -> world: rotate by heading about z, translate to pose
    const double ch = std::cos(pose.heading), sh = std::sin(pose.heading);
    for (auto& c : caps) {
        auto rot = [&](const Vec3& p) {
            return Vec3{ch * p.x - sh * p.y + pose.x, sh * p.x + ch * p.y + pose.y, p.z};
        };
        c.a = rot(c.a);
        c.b = rot(c.b);
    }
    return caps;
}

// Point sampling density: points per square meter at 1 m range.
inline constexpr double kSampleDensity = 30000.0;
inline constexpr double kMaxRange = 25.0;

/// Renders one LiDAR frame of the subject: capsule surfaces sampled with
/// 1/d² density, back-face culled against the sensor, Gaussian noise, a
/// seeded occlusion sector, and an optional clutter cluster. Output points
/// are in the sensor frame (sensor at origin).
inline geometry::PointCloudFrame render_frame(const SubjectModel& m, double gait_phase,
                                              const Pose2D& pose, const SceneSpec& scene) {
    m.validate();
    scene.validate();
    double dx = pose.x - scene.sensor_position.x, dy = pose.y - scene.sensor_position.y;
    if (std::sqrt(dx * dx + dy * dy) > kMaxRange)
        throw std::out_of_range("render_frame: subject beyond sensor range");

    std::vector<detail::Capsule> caps = pose_body(m, gait_phase, pose);
    Rng rng(scene.seed);
    geometry::PointCloudFrame frame;
    frame.frame_index = 1;

    for (std::size_t ci = 0; ci < caps.size(); ++ci) {
        const detail::Capsule& c = caps[ci];
        Vec3 mid = 0.5 * (c.a + c.b);
        double d = norm(mid - scene.sensor_position);
        int count = static_cast<int>(std::floor(kSampleDensity * detail::capsule_area(c) / (d * d) + 0.5));
        Rng crng = rng.fork(100 + ci);
        for (int i = 0; i < count; ++i) {
            Vec3 p, n;
            detail::sample_capsule(c, crng, p, n);
            if (dot(n, scene.sensor_position - p) <= 0) continue;  // back face
            frame.points.push_back(p);
        }
    }

    // measurement noise
    if (scene.noise_sigma > 0) {
        Rng nrng = rng.fork(7);
        for (Vec3& p : frame.points) {
            p.x += nrng.gaussian(0, scene.noise_sigma);
            p.y += nrng.gaussian(0, scene.noise_sigma);
            p.z += nrng.gaussian(0, scene.noise_sigma);
        }
    }

    // occlusion: drop a contiguous azimuth sector across the subject
    Rng orng = rng.fork(11);
    if (orng.bernoulli(scene.occlusion_rate)) {
        double subject_az = std::atan2(pose.y - scene.sensor_position.y,
                                       pose.x - scene.sensor_position.x);
        double center = subject_az + orng.uniform(-0.05, 0.05);
        double half_width = orng.uniform(0.005, 0.02);
        std::vector<Vec3> kept;
        kept.reserve(frame.points.size());
        for (const Vec3& p : frame.points) {
            double az = std::atan2(p.y - scene.sensor_position.y, p.x - scene.sensor_position.x);
            double delta = std::remainder(az - center, 2.0 * geometry::kPi);
            if (std::abs(delta) > half_width) kept.push_back(p);
        }
        frame.points.swap(kept);
    }

    // clutter: a small off-body cluster (a carried object or passer-by)
    Rng clrng = rng.fork(13);
    if (clrng.bernoulli(scene.clutter_rate)) {
        double ang = clrng.uniform(0.0, 2.0 * geometry::kPi);
        double off = clrng.uniform(0.5, 1.5);
        Vec3 center{pose.x + off * std::cos(ang), pose.y + off * std::sin(ang),
                    clrng.uniform(0.2, 1.2)};
        int n = 10 + static_cast<int>(clrng.uniform_int(31));
        for (int i = 0; i < n; ++i)
            frame.points.push_back({center.x + clrng.gaussian(0, 0.08),
                                    center.y + clrng.gaussian(0, 0.08),
                                    center.z + clrng.gaussian(0, 0.08)});
    }

    // world -> sensor frame
    for (Vec3& p : frame.points) p = p - scene.sensor_position;
    if (frame.points.empty())
        frame.points.push_back(Vec3{pose.x, pose.y, 0.5} - scene.sensor_position);
    return frame;
}

}  // namespace gaitlab::synth
