#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gaitlab/rng.hpp"
#include "gaitlab/tensor.hpp"

namespace gaitlab::geometry {

inline constexpr double kPi = 3.141592653589793238462643383279502884;
inline constexpr double kDegToRad = kPi / 180.0;

// Crop pixel values are normalised by the capture range of the sensor.
inline constexpr double kRangeMaxMeters = 25.0;
inline constexpr int kCropSize = 64;

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a.x, s * a.y, s * a.z}; }
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

// One LiDAR frame of a single subject, coordinates in meters in the sensor frame.
struct PointCloudFrame {
    std::vector<Vec3> points;
    int frame_index = 1;  // 1-based

    void validate() const {
        if (points.empty()) throw std::invalid_argument("point cloud frame: no points");
        if (frame_index < 1) throw std::invalid_argument("point cloud frame: frame_index < 1");
        for (const Vec3& p : points)
            if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
                throw std::invalid_argument("point cloud frame: non-finite coordinate");
    }
};

struct SensorIntrinsics {
    double f_up_deg = 22.5;
    double f_down_deg = 22.5;
    int rows = 128;
    int cols = 1024;

    void validate() const {
        if (f_up_deg <= 0 || f_down_deg <= 0)
            throw std::invalid_argument("sensor intrinsics: field of view halves must be > 0");
        if (rows < 2 || cols < 2)
            throw std::invalid_argument("sensor intrinsics: image must be at least 2x2");
    }
    double fov_deg() const { return f_up_deg + f_down_deg; }
};

// Spherical range projection of one frame. Zero encodes an empty pixel.
struct RangeImage {
    Tensor ranges;  // [rows, cols]
    SensorIntrinsics intrinsics;
    int dropped_points = 0;  // points whose elevation fell outside the vertical FOV
};

struct PixelRect {
    int row = 0, col = 0, height = 0, width = 0;
};

struct RangeCrop {
    Tensor pixels;  // [kCropSize, kCropSize], values in [0,1]
    PixelRect source_bbox;
};

struct SampledPoints {
    std::vector<Vec3> points;  // centered: centroid subtracted
    std::vector<int> source_indices;
};

struct empty_subject_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Maps a point to continuous range-view coordinates:
//   u = 1/2 (1 - atan2(y,x)/pi) w,   v = (1 - (asin(z/r) + f_up)/f) h.
// Pixel index is floor(u), floor(v) clamped into the image.
inline void project_point(const Vec3& p, const SensorIntrinsics& intr, double& u, double& v,
                          double& r, double& elevation) {
    r = norm(p);
    elevation = std::asin(p.z / r);
    u = 0.5 * (1.0 - std::atan2(p.y, p.x) / kPi) * intr.cols;
    v = (1.0 - (elevation + intr.f_up_deg * kDegToRad) / (intr.fov_deg() * kDegToRad)) * intr.rows;
}

/// Spherical projection of a subject frame into a range image.
/// Multiple points falling into the same pixel keep the smallest range
/// (nearest surface). Points whose elevation is outside [-f_down, f_up]
/// are dropped and counted; a point exactly at the origin is an error.
inline RangeImage project_to_range(const PointCloudFrame& frame, const SensorIntrinsics& intr) {
    frame.validate();
    intr.validate();
    RangeImage img;
    img.intrinsics = intr;
    img.ranges = Tensor({intr.rows, intr.cols});

    const double f_up = intr.f_up_deg * kDegToRad;
    const double f_down = intr.f_down_deg * kDegToRad;
    for (const Vec3& p : frame.points) {
        double u, v, r, elevation;
        project_point(p, intr, u, v, r, elevation);
        if (r == 0.0) throw std::invalid_argument("project_to_range: point at sensor origin");
        if (elevation > f_up || elevation < -f_down) {
            ++img.dropped_points;
            continue;
        }
        int ui = std::clamp(static_cast<int>(std::floor(u)), 0, intr.cols - 1);
        int vi = std::clamp(static_cast<int>(std::floor(v)), 0, intr.rows - 1);
        double& cell = img.ranges.at(vi, ui);
        if (cell == 0.0 || r < cell) cell = r;
    }
    return img;
}

namespace detail {

// Bilinear sample with clamp-to-edge, pixel-center alignment.
inline double bilinear(const std::vector<double>& src, int side, double sy, double sx) {
    sy = std::clamp(sy, 0.0, static_cast<double>(side - 1));
    sx = std::clamp(sx, 0.0, static_cast<double>(side - 1));
    int y0 = static_cast<int>(std::floor(sy));
    int x0 = static_cast<int>(std::floor(sx));
    int y1 = std::min(y0 + 1, side - 1);
    int x1 = std::min(x0 + 1, side - 1);
    double wy = sy - y0, wx = sx - x0;
    double a = src[static_cast<std::size_t>(y0) * side + x0];
    double b = src[static_cast<std::size_t>(y0) * side + x1];
    double c = src[static_cast<std::size_t>(y1) * side + x0];
    double d = src[static_cast<std::size_t>(y1) * side + x1];
    return a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + c * wy * (1 - wx) + d * wy * wx;
}

}  // namespace detail

/// Extracts the tight bounding box of nonzero pixels, zero-pads it to a
/// square, resizes bilinearly to kCropSize and normalises ranges by
/// kRangeMaxMeters (clipped to [0,1]).
inline RangeCrop crop_subject(const RangeImage& img) {
    const Tensor& rg = img.ranges;
    int r0 = rg.dim(0), r1 = -1, c0 = rg.dim(1), c1 = -1;
    for (int r = 0; r < rg.dim(0); ++r)
        for (int c = 0; c < rg.dim(1); ++c)
            if (rg.at(r, c) != 0.0) {
                r0 = std::min(r0, r);
                r1 = std::max(r1, r);
                c0 = std::min(c0, c);
                c1 = std::max(c1, c);
            }
    if (r1 < 0) throw empty_subject_error("crop_subject: range image has no nonzero pixel");

    int bh = r1 - r0 + 1, bw = c1 - c0 + 1;
    int side = std::max(bh, bw);
    int pad_top = (side - bh) / 2;
    int pad_left = (side - bw) / 2;

    std::vector<double> square(static_cast<std::size_t>(side) * side, 0.0);
    for (int r = 0; r < bh; ++r)
        for (int c = 0; c < bw; ++c)
            square[static_cast<std::size_t>(r + pad_top) * side + (c + pad_left)] =
                rg.at(r0 + r, c0 + c);

    RangeCrop crop;
    crop.source_bbox = {r0, c0, bh, bw};
    crop.pixels = Tensor({kCropSize, kCropSize});
    const double scale = static_cast<double>(side) / kCropSize;
    for (int y = 0; y < kCropSize; ++y)
        for (int x = 0; x < kCropSize; ++x) {
            double sy = (y + 0.5) * scale - 0.5;
            double sx = (x + 0.5) * scale - 0.5;
            double v = detail::bilinear(square, side, sy, sx) / kRangeMaxMeters;
            crop.pixels.at(y, x) = std::clamp(v, 0.0, 1.0);
        }
    return crop;
}

/// Greedy farthest point sampling over the frame, returning indices only.
/// Seed = lowest-index point farthest from the centroid; each later pick
/// maximises the minimum squared distance to the selected set, ties broken
/// by lowest index. If the frame has fewer than n points the selection is
/// extended by cycling through it in order.
inline std::vector<int> farthest_point_sample(const PointCloudFrame& frame, int n) {
    if (n < 1) throw std::invalid_argument("farthest_point_sample: n must be >= 1");
    frame.validate();
    const auto& pts = frame.points;
    const int count = static_cast<int>(pts.size());

    Vec3 centroid{0, 0, 0};
    for (const Vec3& p : pts) centroid = centroid + p;
    centroid = (1.0 / count) * centroid;

    auto sqdist = [](const Vec3& a, const Vec3& b) {
        double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
        return dx * dx + dy * dy + dz * dz;
    };

    int seed = 0;
    double best = -1.0;
    for (int i = 0; i < count; ++i) {
        double d = sqdist(pts[static_cast<std::size_t>(i)], centroid);
        if (d > best) {
            best = d;
            seed = i;
        }
    }

    const int unique = std::min(n, count);
    std::vector<int> selected;
    selected.reserve(static_cast<std::size_t>(n));
    selected.push_back(seed);
    std::vector<char> taken(static_cast<std::size_t>(count), 0);
    taken[static_cast<std::size_t>(seed)] = 1;
    std::vector<double> min_d(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        min_d[static_cast<std::size_t>(i)] = sqdist(pts[static_cast<std::size_t>(i)], pts[static_cast<std::size_t>(seed)]);

    while (static_cast<int>(selected.size()) < unique) {
        int pick = -1;
        double far = -1.0;
        for (int i = 0; i < count; ++i) {
            if (!taken[static_cast<std::size_t>(i)] && min_d[static_cast<std::size_t>(i)] > far) {
                far = min_d[static_cast<std::size_t>(i)];
                pick = i;
            }
        }
        selected.push_back(pick);
        taken[static_cast<std::size_t>(pick)] = 1;
        for (int i = 0; i < count; ++i) {
            double d = sqdist(pts[static_cast<std::size_t>(i)], pts[static_cast<std::size_t>(pick)]);
            if (d < min_d[static_cast<std::size_t>(i)]) min_d[static_cast<std::size_t>(i)] = d;
        }
    }
    for (int i = 0; static_cast<int>(selected.size()) < n; ++i)
        selected.push_back(selected[static_cast<std::size_t>(i % unique)]);
    return selected;
}

/// Translates the point set so its centroid is the origin. No rotation or scaling.
inline std::vector<Vec3> normalize_frame(const std::vector<Vec3>& pts) {
    if (pts.empty()) throw std::invalid_argument("normalize_frame: empty point set");
    Vec3 c{0, 0, 0};
    for (const Vec3& p : pts) c = c + p;
    c = (1.0 / static_cast<double>(pts.size())) * c;
    std::vector<Vec3> out;
    out.reserve(pts.size());
    for (const Vec3& p : pts) out.push_back(p - c);
    return out;
}

/// FPS to n indices, then gather and center. The centered coordinates feed
/// the point branch; the indices keep provenance into the parent frame.
inline SampledPoints sample_and_center(const PointCloudFrame& frame, int n) {
    SampledPoints sp;
    sp.source_indices = farthest_point_sample(frame, n);
    std::vector<Vec3> gathered;
    gathered.reserve(sp.source_indices.size());
    for (int idx : sp.source_indices) gathered.push_back(frame.points[static_cast<std::size_t>(idx)]);
    sp.points = normalize_frame(gathered);
    return sp;
}

// Per-frame preprocessed pair: range crop + centered sampled points.
struct FrameData {
    RangeCrop crop;
    SampledPoints points;
    int frame_index = 1;
};

struct GaitSequence {
    int subject_id = -1;
    int sequence_id = -1;
    double view_angle_deg = 0.0;
    bool night = false;
    std::vector<FrameData> frames;
};

enum class FramePolicy { kTrain, kEval };

/// Frame selection used by both training and evaluation:
/// training picks a uniformly random contiguous window (seeded); evaluation
/// takes the first T frames; sequences shorter than T are cycled.
inline std::vector<int> select_frame_window(int available, int t, FramePolicy policy,
                                            std::uint64_t seed) {
    if (available < 1) throw std::invalid_argument("select_frame_window: no frames");
    std::vector<int> order;
    order.reserve(static_cast<std::size_t>(t));
    if (available >= t) {
        int start = 0;
        if (policy == FramePolicy::kTrain) {
            Rng rng(seed);
            start = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(available - t + 1)));
        }
        for (int i = 0; i < t; ++i) order.push_back(start + i);
    } else {
        for (int i = 0; i < t; ++i) order.push_back(i % available);
    }
    return order;
}

/// Full per-sequence preprocessing: drops frames that are empty after subject
/// extraction, selects T frames per the policy, and produces index-aligned
/// range crops and centered point samples of size n_points.
inline GaitSequence preprocess_sequence(const std::vector<PointCloudFrame>& raw,
                                        const SensorIntrinsics& intr, int t, int n_points,
                                        FramePolicy policy, std::uint64_t seed) {
    if (raw.empty()) throw std::invalid_argument("preprocess_sequence: no raw frames");
    struct Good {
        const PointCloudFrame* frame;
        RangeCrop crop;
    };
    std::vector<Good> good;
    for (const PointCloudFrame& f : raw) {
        try {
            RangeImage img = project_to_range(f, intr);
            good.push_back({&f, crop_subject(img)});
        } catch (const empty_subject_error&) {
            continue;  // dropped
        }
    }
    if (good.empty()) throw empty_subject_error("preprocess_sequence: all frames empty");

    GaitSequence seq;
    std::vector<int> order = select_frame_window(static_cast<int>(good.size()), t, policy, seed);
    seq.frames.reserve(order.size());
    for (int gi : order) {
        const Good& g = good[static_cast<std::size_t>(gi)];
        FrameData fd;
        fd.crop = g.crop;
        fd.points = sample_and_center(*g.frame, n_points);
        fd.frame_index = g.frame->frame_index;
        seq.frames.push_back(std::move(fd));
    }
    return seq;
}

}  // namespace gaitlab::geometry
