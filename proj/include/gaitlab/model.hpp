#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gaitlab/autodiff.hpp"
#include "gaitlab/geometry.hpp"
#include "gaitlab/rng.hpp"
#include "gaitlab/tensor.hpp"

// The recognition network: a residual range-view CNN and a hierarchical
// point branch with motion-aware feature embedding, fused per level by
// cross-attention, temporally max-pooled, strip-pooled and projected to
// per-strip embeddings with optional per-strip classifiers.
namespace gaitlab::net {

using ad::Tape;
using ad::Var;
using geometry::Vec3;

struct NetConfig {
    int crop = 64;       // input crop side; each level halves it
    int n_points = 256;  // sampled points per frame
    int k_neighbors = 16;
    int c1 = 32, c2 = 64;  // level channel widths (both branches)
    int d_k = 64;          // attention dimension
    int c_strip = 512;     // strip feature width after HPP projection
    int c_embed = 256;     // per-strip embedding width
    int reduction = 16;    // squeeze-excite reduction
    int n_classes = 0;     // classifier width; 0 disables the classifier
    bool use_acm = true, use_mafe = true, use_gsfe = true;

    int level1_side() const { return crop / 2; }
    int level2_side() const { return crop / 4; }
    int strips() const { return crop / 4; }  // one spatial row per strip
    int gsfe_hidden() const { return std::max(1, c_strip / reduction); }

    void validate() const {
        if (crop < 8 || crop % 4 != 0) throw std::invalid_argument("config: crop must be a multiple of 4, >= 8");
        if (n_points < 4 * k_neighbors) throw std::invalid_argument("config: n_points must be >= 4k");
        if (n_points % 4 != 0) throw std::invalid_argument("config: n_points must be a multiple of 4");
        if (k_neighbors < 1) throw std::invalid_argument("config: k_neighbors must be >= 1");
        for (int v : {c1, c2, d_k, c_strip, c_embed, reduction})
            if (v < 1) throw std::invalid_argument("config: widths must be >= 1");
        if (n_classes < 0) throw std::invalid_argument("config: negative n_classes");
    }

    std::string fingerprint() const {
        std::ostringstream os;
        os << "v1 crop=" << crop << " n_points=" << n_points << " k=" << k_neighbors
           << " c1=" << c1 << " c2=" << c2 << " d_k=" << d_k << " c_strip=" << c_strip
           << " c_embed=" << c_embed << " reduction=" << reduction << " n_classes=" << n_classes
           << " acm=" << use_acm << " mafe=" << use_mafe << " gsfe=" << use_gsfe;
        return os.str();
    }

    static NetConfig from_fingerprint(const std::string& fp) {
        NetConfig c;
        int acm = 1, mafe = 1, gsfe = 1;
        int got = std::sscanf(fp.c_str(),
                              "v1 crop=%d n_points=%d k=%d c1=%d c2=%d d_k=%d c_strip=%d "
                              "c_embed=%d reduction=%d n_classes=%d acm=%d mafe=%d gsfe=%d",
                              &c.crop, &c.n_points, &c.k_neighbors, &c.c1, &c.c2, &c.d_k,
                              &c.c_strip, &c.c_embed, &c.reduction, &c.n_classes, &acm, &mafe,
                              &gsfe);
        if (got != 13) throw std::runtime_error("checkpoint: unsupported config fingerprint");
        c.use_acm = acm != 0;
        c.use_mafe = mafe != 0;
        c.use_gsfe = gsfe != 0;
        c.validate();
        return c;
    }
};

/// Default widths multiplied by width_scale (minimum 2 per dimension);
/// spatial sizes and k are untouched.
inline NetConfig scaled_config(double width_scale) {
    if (width_scale <= 0) throw std::invalid_argument("width_scale must be > 0");
    NetConfig c;
    auto sc = [width_scale](int v) {
        return std::max(2, static_cast<int>(std::lround(v * width_scale)));
    };
    c.c1 = sc(c.c1);
    c.c2 = sc(c.c2);
    c.d_k = sc(c.d_k);
    c.c_strip = sc(c.c_strip);
    c.c_embed = sc(c.c_embed);
    return c;
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Flat named-parameter registry with stable insertion order.
class ParamStore {
  public:
    Tensor& add(const std::string& name, std::vector<int> shape) {
        if (map_.count(name)) throw std::logic_error("duplicate parameter " + name);
        order_.push_back(name);
        return map_.emplace(name, Tensor(std::move(shape))).first->second;
    }
    Tensor& at(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::out_of_range("no parameter " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::out_of_range("no parameter " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return map_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto& kv : map_) n += kv.second.size();
        return n;
    }

  private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor> map_;
};

class Model {
  public:
    NetConfig cfg;
    ParamStore params;

    Model(NetConfig config, std::uint64_t seed) : cfg(config) {
        cfg.validate();
        register_params();
        initialize(seed);
    }

    // All parameters bound as leaves of one tape; build one per forward pass.
    struct Bound {
        Tape* tape = nullptr;
        std::map<std::string, Var> vars;
        Var operator()(const std::string& name) const {
            auto it = vars.find(name);
            if (it == vars.end()) throw std::out_of_range("unbound parameter " + name);
            return it->second;
        }
    };

    Bound bind(Tape& tape) const {
        Bound b;
        b.tape = &tape;
        for (const std::string& n : params.names()) b.vars.emplace(n, tape.input(params.at(n), true));
        return b;
    }

  private:
    enum class Init { he, xavier, zero, one };

    void reg(const std::string& name, std::vector<int> shape, Init init) {
        Tensor& t = params.add(name, std::move(shape));
        pending_.push_back({&t, init});
    }

    void linear_pair(const std::string& prefix, int out, int in, Init init) {
        reg(prefix + ".w", {out, in}, init);
        reg(prefix + ".b", {out}, Init::zero);
    }

    void conv_pair(const std::string& prefix, int cout, int cin) {
        reg(prefix + ".w", {cout, cin, 3, 3}, Init::he);
        reg(prefix + ".b", {cout}, Init::zero);
    }

    void acm_block(const std::string& p, int channels) {
        linear_pair(p + ".q", cfg.d_k, channels, Init::xavier);
        linear_pair(p + ".k", cfg.d_k, channels, Init::xavier);
        linear_pair(p + ".v", cfg.d_k, channels, Init::xavier);
        linear_pair(p + ".ffn1", cfg.d_k, cfg.d_k, Init::he);
        linear_pair(p + ".ffn2", cfg.d_k, cfg.d_k, Init::xavier);
        reg(p + ".ln.g", {cfg.d_k}, Init::one);
        reg(p + ".ln.b", {cfg.d_k}, Init::zero);
        linear_pair(p + ".out", channels, cfg.d_k, Init::xavier);
    }

    void register_params() {
        conv_pair("range.stem", cfg.c1, 1);
        conv_pair("range.l1.down", cfg.c1, cfg.c1);
        conv_pair("range.l1.c1", cfg.c1, cfg.c1);
        conv_pair("range.l1.c2", cfg.c1, cfg.c1);
        conv_pair("range.l2.down", cfg.c2, cfg.c1);
        conv_pair("range.l2.c1", cfg.c2, cfg.c2);
        conv_pair("range.l2.c2", cfg.c2, cfg.c2);

        linear_pair("point.s1.lift1", cfg.c1, 3, Init::he);
        linear_pair("point.s1.lift2", cfg.c1, cfg.c1, Init::he);
        linear_pair("point.s1.zeta1", cfg.c1, 3, Init::he);
        linear_pair("point.s1.zeta2", cfg.c1, cfg.c1, Init::xavier);
        linear_pair("point.s2.lift1", cfg.c2, cfg.c1, Init::he);
        linear_pair("point.s2.lift2", cfg.c2, cfg.c2, Init::he);
        linear_pair("point.s2.zeta1", cfg.c2, 3, Init::he);
        linear_pair("point.s2.zeta2", cfg.c2, cfg.c2, Init::xavier);

        acm_block("acm1", cfg.c1);
        acm_block("acm2", cfg.c2);

        linear_pair("hpp.proj", cfg.c_strip, cfg.c2, Init::xavier);
        linear_pair("gsfe.fc1", cfg.gsfe_hidden(), cfg.c_strip, Init::he);
        linear_pair("gsfe.fc2", cfg.c_strip, cfg.gsfe_hidden(), Init::xavier);

        char buf[64];
        for (int s = 0; s < cfg.strips(); ++s) {
            std::snprintf(buf, sizeof buf, "head.s%02d", s);
            linear_pair(buf, cfg.c_embed, cfg.c_strip, Init::xavier);
            if (cfg.n_classes > 0) {
                std::snprintf(buf, sizeof buf, "head.cls%02d", s);
                linear_pair(buf, cfg.n_classes, cfg.c_embed, Init::xavier);
            }
        }
    }

    void initialize(std::uint64_t seed) {
        Rng root(seed);
        std::size_t i = 0;
        for (const std::string& name : params.names()) {
            auto [tensor, init] = pending_.at(i++);
            Rng rng = root.fork(fnv1a(name));
            switch (init) {
                case Init::zero:
                    break;
                case Init::one:
                    tensor->fill(1.0);
                    break;
                case Init::he:
                case Init::xavier: {
                    // fan-in: product of all dims but the first (out) dim
                    std::int64_t fan_in = tensor->size() / tensor->dim(0);
                    double std_dev = std::sqrt((init == Init::he ? 2.0 : 1.0) /
                                               static_cast<double>(fan_in));
                    for (double& v : tensor->data) v = rng.gaussian(0.0, std_dev);
                    break;
                }
            }
        }
        pending_.clear();
    }

    std::vector<std::pair<Tensor*, Init>> pending_;
};

// ---- point-branch sampling plans (pure index/displacement precomputation) ----

struct PointStagePlan {
    std::vector<int> anchors;       // indices into the stage's input pool
    std::vector<int> neighbors;     // anchors.size()*k flat indices into the pool
    Tensor disp;                    // {anchors*k, 3} rank-paired displacements
    std::vector<Vec3> anchor_coords;
};

struct FramePlan {
    PointStagePlan s1, s2;
};

namespace detail {

// k nearest pool points to `query`, ascending (squared distance, index).
inline std::vector<int> knn(const std::vector<Vec3>& pool, const Vec3& query, int k) {
    if (k > static_cast<int>(pool.size()))
        throw std::invalid_argument("mafe: k exceeds frame point count");
    std::vector<std::pair<double, int>> d;
    d.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        Vec3 r = pool[i] - query;
        d.emplace_back(dot(r, r), static_cast<int>(i));
    }
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    std::vector<int> out(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(i)].second;
    return out;
}

inline std::vector<int> fps_indices(const std::vector<Vec3>& pts, int n) {
    geometry::PointCloudFrame f;
    f.points = pts;
    return geometry::farthest_point_sample(f, n);
}

// One MAFE stage plan: FPS anchors over the current pool, rank-paired kNN
// displacements against the previous frame's pool.
inline PointStagePlan stage_plan(const std::vector<Vec3>& cur_pool,
                                 const std::vector<Vec3>& prev_pool, int n_anchors, int k) {
    PointStagePlan plan;
    plan.anchors = fps_indices(cur_pool, n_anchors);
    plan.neighbors.reserve(static_cast<std::size_t>(n_anchors) * k);
    plan.disp = Tensor({n_anchors * k, 3});
    plan.anchor_coords.reserve(static_cast<std::size_t>(n_anchors));
    std::size_t row = 0;
    for (int a : plan.anchors) {
        const Vec3& anchor = cur_pool[static_cast<std::size_t>(a)];
        plan.anchor_coords.push_back(anchor);
        std::vector<int> cur_nn = knn(cur_pool, anchor, k);
        std::vector<int> prev_nn = knn(prev_pool, anchor, k);
        for (int j = 0; j < k; ++j) {
            plan.neighbors.push_back(cur_nn[static_cast<std::size_t>(j)]);
            Vec3 d = cur_pool[static_cast<std::size_t>(cur_nn[static_cast<std::size_t>(j)])] -
                     prev_pool[static_cast<std::size_t>(prev_nn[static_cast<std::size_t>(j)])];
            plan.disp.data[row * 3 + 0] = d.x;
            plan.disp.data[row * 3 + 1] = d.y;
            plan.disp.data[row * 3 + 2] = d.z;
            ++row;
        }
    }
    return plan;
}

}  // namespace detail

/// Per-frame anchor/neighbor/displacement plans for both point stages.
/// The first frame uses itself as predecessor (zero displacement).
inline std::vector<FramePlan> build_point_plans(const std::vector<std::vector<Vec3>>& frames,
                                                int k) {
    if (frames.empty()) throw std::invalid_argument("point plans: no frames");
    std::vector<FramePlan> plans(frames.size());
    std::vector<std::vector<Vec3>> a1_coords(frames.size());
    for (std::size_t t = 0; t < frames.size(); ++t) {
        const int n = static_cast<int>(frames[t].size());
        if (n < 4 * k) throw std::invalid_argument("point branch: frame must have >= 4k points");
        const std::vector<Vec3>& prev = frames[t > 0 ? t - 1 : t];
        plans[t].s1 = detail::stage_plan(frames[t], prev, n / 2, k);
        a1_coords[t] = plans[t].s1.anchor_coords;
        const std::vector<Vec3>& prev1 = a1_coords[t > 0 ? t - 1 : t];
        plans[t].s2 = detail::stage_plan(a1_coords[t], prev1, n / 4, k);
    }
    return plans;
}

// ---- forward building blocks ----

namespace blocks {

inline Var conv(const Model::Bound& B, const std::string& p, Var x, int stride) {
    return ad::conv2d(x, B(p + ".w"), B(p + ".b"), stride, 1);
}

// stride-2 downsample conv + a two-conv residual block
inline Var range_level(const Model::Bound& B, const std::string& p, Var x) {
    Var h = ad::relu(conv(B, p + ".down", x, 2));
    Var r = ad::relu(conv(B, p + ".c1", h, 1));
    r = conv(B, p + ".c2", r, 1);
    return ad::relu(ad::add(h, r));
}

inline Var mlp2_relu(const Model::Bound& B, const std::string& p, Var x) {
    Var h = ad::relu(ad::linear(x, B(p + ".lift1.w"), B(p + ".lift1.b")));
    return ad::relu(ad::linear(h, B(p + ".lift2.w"), B(p + ".lift2.b")));
}

inline Var zeta(const Model::Bound& B, const std::string& p, Var d) {
    Var h = ad::relu(ad::linear(d, B(p + ".zeta1.w"), B(p + ".zeta1.b")));
    return ad::linear(h, B(p + ".zeta2.w"), B(p + ".zeta2.b"));
}

}  // namespace blocks

/// Range stem + level-1 stack on one {1,S,S} crop: -> {c1, S/2, S/2}.
inline Var range_stage1(const Model::Bound& B, const NetConfig& cfg, Var crop) {
    const Tensor& v = B.tape->value(crop);
    if (v.rank() != 3 || v.dim(0) != 1 || v.dim(1) != cfg.crop || v.dim(2) != cfg.crop)
        throw std::invalid_argument("range branch: expected {1," + std::to_string(cfg.crop) +
                                    "," + std::to_string(cfg.crop) + "}, got " + v.shape_str());
    Var h = ad::relu(blocks::conv(B, "range.stem", crop, 1));
    return blocks::range_level(B, "range.l1", h);
}

/// Level-2 stack on the (possibly fused) level-1 map: -> {c2, S/4, S/4}.
inline Var range_stage2(const Model::Bound& B, const NetConfig&, Var fused1) {
    return blocks::range_level(B, "range.l2", fused1);
}

/// Motion-aware aggregation: gather each anchor's k current-frame neighbor
/// features, add the motion embedding zeta(displacement) and max-pool over
/// the k neighbors. With MAFE disabled the motion term is identically zero.
inline Var mafe_stage(const Model::Bound& B, const std::string& stage_prefix, Var pool_features,
                      const PointStagePlan& plan, int k, bool use_mafe) {
    Var gathered = ad::gather_rows(pool_features, plan.neighbors);
    if (use_mafe) {
        Var disp = B.tape->constant(plan.disp);
        gathered = ad::add(gathered, blocks::zeta(B, stage_prefix, disp));
    }
    return ad::rowblock_max(gathered, k);
}

/// Both point-branch stages for one frame.
/// Returns {level-1 features {N/2, c1}, level-2 features {N/4, c2}}.
inline std::pair<Var, Var> point_branch_frame(const Model::Bound& B, const NetConfig& cfg,
                                              const std::vector<Vec3>& pts,
                                              const FramePlan& plan) {
    const int n = static_cast<int>(pts.size());
    Tensor coords({n, 3});
    for (int i = 0; i < n; ++i) {
        coords.data[static_cast<std::size_t>(i) * 3 + 0] = pts[static_cast<std::size_t>(i)].x;
        coords.data[static_cast<std::size_t>(i) * 3 + 1] = pts[static_cast<std::size_t>(i)].y;
        coords.data[static_cast<std::size_t>(i) * 3 + 2] = pts[static_cast<std::size_t>(i)].z;
    }
    Var x = B.tape->constant(std::move(coords));
    Var pool1 = blocks::mlp2_relu(B, "point.s1", x);
    Var h1 = mafe_stage(B, "point.s1", pool1, plan.s1, cfg.k_neighbors, cfg.use_mafe);
    Var pool2 = blocks::mlp2_relu(B, "point.s2", h1);
    Var h2 = mafe_stage(B, "point.s2", pool2, plan.s2, cfg.k_neighbors, cfg.use_mafe);
    return {h1, h2};
}

/// Cross-representation fusion (Eqs. 2-3): range pixels query the point
/// features, the attended value stream passes through FFN + LayerNorm, is
/// projected back to the range channel width and added residually.
inline Var acm_fuse(const Model::Bound& B, const NetConfig& cfg, const std::string& p,
                    Var range_map, Var point_features) {
    const Tensor& rv = B.tape->value(range_map);
    if (rv.rank() != 3) throw std::invalid_argument("acm: range map must be {C,H,W}");
    const int C = rv.dim(0), H = rv.dim(1), W = rv.dim(2);
    Var tokens = ad::transpose(ad::reshape(range_map, {C, H * W}));  // {HW, C}
    Var q = ad::linear(tokens, B(p + ".q.w"), B(p + ".q.b"));
    Var k = ad::linear(point_features, B(p + ".k.w"), B(p + ".k.b"));
    Var v = ad::linear(point_features, B(p + ".v.w"), B(p + ".v.b"));
    Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(cfg.d_k)));
    Var f_att = ad::matmul(att, v);  // {HW, d_k}
    Var ffn = ad::linear(ad::relu(ad::linear(f_att, B(p + ".ffn1.w"), B(p + ".ffn1.b"))),
                         B(p + ".ffn2.w"), B(p + ".ffn2.b"));
    Var y = ad::layernorm_rows(ad::add(f_att, ffn), B(p + ".ln.g"), B(p + ".ln.b"));
    Var o = ad::linear(y, B(p + ".out.w"), B(p + ".out.b"));  // {HW, C}
    return ad::add(range_map, ad::reshape(ad::transpose(o), {C, H, W}));
}

/// The attention matrix alone (row-stochastic), exposed for property tests.
inline Var acm_attention(const Model::Bound& B, const NetConfig& cfg, const std::string& p,
                         Var range_map, Var point_features) {
    const Tensor& rv = B.tape->value(range_map);
    const int C = rv.dim(0), H = rv.dim(1), W = rv.dim(2);
    Var tokens = ad::transpose(ad::reshape(range_map, {C, H * W}));
    Var q = ad::linear(tokens, B(p + ".q.w"), B(p + ".q.b"));
    Var k = ad::linear(point_features, B(p + ".k.w"), B(p + ".k.b"));
    return ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(cfg.d_k)));
}

struct SequenceTensors {
    Tensor crops;                          // {T, crop, crop}, values in [0,1]
    std::vector<std::vector<Vec3>> points; // T frames of centered coordinates
    std::vector<FramePlan> plans;
};

/// Packs preprocessed sequence data and builds the point plans.
inline SequenceTensors make_input(const geometry::GaitSequence& seq, const NetConfig& cfg) {
    if (seq.frames.empty()) throw std::invalid_argument("make_input: empty sequence");
    const int t = static_cast<int>(seq.frames.size());
    SequenceTensors st;
    st.crops = Tensor({t, cfg.crop, cfg.crop});
    for (int i = 0; i < t; ++i) {
        const Tensor& px = seq.frames[static_cast<std::size_t>(i)].crop.pixels;
        if (px.dim(0) != cfg.crop || px.dim(1) != cfg.crop)
            throw std::invalid_argument("make_input: crop size mismatch");
        std::copy(px.data.begin(), px.data.end(),
                  st.crops.data.begin() + static_cast<std::ptrdiff_t>(i) * cfg.crop * cfg.crop);
        st.points.push_back(seq.frames[static_cast<std::size_t>(i)].points.points);
    }
    for (double v : st.crops.data)
        if (v < 0.0 || v > 1.0) throw std::invalid_argument("make_input: crop values outside [0,1]");
    st.plans = build_point_plans(st.points, cfg.k_neighbors);
    return st;
}

/// Two-level fused forward for a whole sequence; returns per-frame level-2
/// maps {c2, S/4, S/4}. Stage-1 fusion feeds the stage-2 range computation.
inline std::vector<Var> hierarchical_forward(const Model::Bound& B, const NetConfig& cfg,
                                             const SequenceTensors& in) {
    const int t = in.crops.dim(0);
    if (static_cast<int>(in.points.size()) != t || static_cast<int>(in.plans.size()) != t)
        throw std::invalid_argument("hierarchical_forward: frame count mismatch");
    const int side = cfg.crop;
    std::vector<Var> fused;
    fused.reserve(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) {
        Tensor crop({1, side, side});
        std::copy_n(in.crops.data.begin() + static_cast<std::ptrdiff_t>(i) * side * side,
                    static_cast<std::size_t>(side) * side, crop.data.begin());
        Var r1 = range_stage1(B, cfg, B.tape->constant(std::move(crop)));
        auto [p1, p2] = point_branch_frame(B, cfg, in.points[static_cast<std::size_t>(i)],
                                           in.plans[static_cast<std::size_t>(i)]);
        Var f1 = cfg.use_acm ? acm_fuse(B, cfg, "acm1", r1, p1) : r1;
        Var r2 = range_stage2(B, cfg, f1);
        fused.push_back(cfg.use_acm ? acm_fuse(B, cfg, "acm2", r2, p2) : r2);
    }
    return fused;
}

/// Elementwise max over per-frame maps.
inline Var temporal_pool(const std::vector<Var>& frames) {
    if (frames.empty()) throw std::invalid_argument("temporal_pool: no frames");
    Var acc = frames[0];
    for (std::size_t i = 1; i < frames.size(); ++i) acc = ad::pairwise_max(acc, frames[i]);
    return acc;
}

/// Horizontal pyramid pooling: one row per strip, (max + mean) over the
/// strip's pixels per channel, then a shared linear projection to c_strip.
inline Var hpp(const Model::Bound& B, const NetConfig&, Var pooled_map) {
    Var strips = ad::strip_pool(pooled_map);  // {H, C}
    return ad::linear(strips, B("hpp.proj.w"), B("hpp.proj.b"));
}

/// Gait-saliency enhancement: squeeze-excite gate shared across strips.
inline Var gsfe(const Model::Bound& B, const NetConfig& cfg, Var strips) {
    Var z = ad::reshape(ad::reduce_mean_rows(strips), {1, cfg.c_strip});
    Var h = ad::relu(ad::linear(z, B("gsfe.fc1.w"), B("gsfe.fc1.b")));
    Var gate = ad::sigmoid(ad::linear(h, B("gsfe.fc2.w"), B("gsfe.fc2.b")));
    return ad::mul_rowvec(strips, ad::reshape(gate, {cfg.c_strip}));
}

struct NetOutput {
    Var embedding;  // {p, c_embed}
    Var logits;     // {p, n_classes}; only valid when produced
    bool has_logits = false;
};

/// Per-strip embedding head (independent weights per strip) plus the
/// training-time per-strip classifiers.
inline NetOutput head(const Model::Bound& B, const NetConfig& cfg, Var strips, bool training) {
    NetOutput out;
    std::vector<Var> embs, logits;
    char buf[64];
    for (int s = 0; s < cfg.strips(); ++s) {
        Var row = ad::gather_rows(strips, {s});
        std::snprintf(buf, sizeof buf, "head.s%02d", s);
        Var e = ad::linear(row, B(std::string(buf) + ".w"), B(std::string(buf) + ".b"));
        embs.push_back(e);
        if (training && cfg.n_classes > 0) {
            std::snprintf(buf, sizeof buf, "head.cls%02d", s);
            logits.push_back(ad::linear(e, B(std::string(buf) + ".w"), B(std::string(buf) + ".b")));
        }
    }
    out.embedding = ad::stack_rows(embs);
    if (!logits.empty()) {
        out.logits = ad::stack_rows(logits);
        out.has_logits = true;
    }
    return out;
}

/// Complete network: fused maps -> temporal max -> HPP -> (GSFE) -> head.
inline NetOutput forward_sequence(const Model::Bound& B, const NetConfig& cfg,
                                  const SequenceTensors& in, bool training) {
    Var pooled = temporal_pool(hierarchical_forward(B, cfg, in));
    Var strips = hpp(B, cfg, pooled);
    if (cfg.use_gsfe) strips = gsfe(B, cfg, strips);
    return head(B, cfg, strips, training);
}

// ---- checkpoint container ----

inline constexpr char kCkptMagic[8] = {'G', 'L', 'C', 'P', '0', '0', '0', '1'};

inline void save_checkpoint(const std::string& path, const Model& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(kCkptMagic, 8);
    std::string fp = model.cfg.fingerprint();
    auto write_u32 = [&out](std::uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), 4);
    };
    write_u32(static_cast<std::uint32_t>(fp.size()));
    out.write(fp.data(), static_cast<std::streamsize>(fp.size()));
    write_u32(static_cast<std::uint32_t>(model.params.names().size()));
    for (const std::string& name : model.params.names()) {
        const Tensor& t = model.params.at(name);
        write_u32(static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) write_u32(static_cast<std::uint32_t>(t.dim(d)));
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("short write on checkpoint " + path);
}

/// Rebuilds the model from the stored config fingerprint, then verifies the
/// stored parameter names and shapes against the fresh registry.
inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kCkptMagic))
        throw std::runtime_error("not a checkpoint file: " + path);
    auto read_u32 = [&in, &path]() {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        if (!in) throw std::runtime_error("truncated checkpoint " + path);
        return v;
    };
    auto read_str = [&](std::uint32_t len) {
        std::string s(len, '\0');
        in.read(s.data(), len);
        if (!in) throw std::runtime_error("truncated checkpoint " + path);
        return s;
    };
    NetConfig cfg = NetConfig::from_fingerprint(read_str(read_u32()));
    Model model(cfg, 0);
    std::uint32_t count = read_u32();
    if (count != model.params.names().size())
        throw std::runtime_error("checkpoint: parameter count mismatch");
    std::size_t seen = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = read_str(read_u32());
        if (!model.params.has(name)) throw std::runtime_error("checkpoint: unknown parameter " + name);
        Tensor& t = model.params.at(name);
        std::uint32_t rank = read_u32();
        std::vector<int> dims(rank);
        for (auto& d : dims) d = static_cast<int>(read_u32());
        if (static_cast<int>(rank) != t.rank() || dims != t.shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint " + path);
        ++seen;
    }
    if (seen != model.params.names().size())
        throw std::runtime_error("checkpoint: missing parameters");
    return model;
}

}  // namespace gaitlab::net
