#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gaitlab/autodiff.hpp"
#include "gaitlab/model.hpp"
#include "gaitlab/rng.hpp"
#include "gaitlab/tensor.hpp"

namespace gaitlab::gradcheck {

// End-to-end finite-difference check on a shrunken model (T=2, N=64, 8x8
// crops). Full element-wise sweeps are far too slow at double precision, so
// each parameter group is probed along 2 random unit directions plus its 4
// largest-gradient elements; the relative error denominator is floored at
// 1e-5, above the central-difference noise floor (~1e-10) by a margin that
// keeps a healthy pass two orders below the 1e-4 gate. Probes that land on
// relu/max kinks are detected by step-halving disagreement and resampled,
// and any probe still failing is re-verified at jittered base points before
// it may fail the run (see the comments at each stage).

struct GroupResult {
    std::string name;
    double max_rel_err = 0;
};

struct Report {
    std::vector<GroupResult> groups;
    double max_rel_err = 0;
    bool pass = false;
};

namespace detail {

struct Fixture {
    net::NetConfig cfg;
    std::vector<net::SequenceTensors> batch;
    std::vector<int> labels;
};

inline Fixture make_fixture(std::uint64_t seed) {
    Fixture fx;
    fx.cfg.crop = 8;
    fx.cfg.n_points = 64;
    fx.cfg.k_neighbors = 16;
    fx.cfg.n_classes = 4;
    Rng rng = Rng(seed).fork(0x66dc3u);
    const int t = 2, b = 4;
    for (int i = 0; i < b; ++i) {
        net::SequenceTensors in;
        in.crops = Tensor({t, fx.cfg.crop, fx.cfg.crop});
        for (double& v : in.crops.data) v = rng.uniform();
        for (int f = 0; f < t; ++f) {
            std::vector<geometry::Vec3> pts;
            for (int p = 0; p < fx.cfg.n_points; ++p)
                pts.push_back({rng.gaussian(0, 0.5), rng.gaussian(0, 0.5), rng.gaussian(0, 0.5)});
            in.points.push_back(std::move(pts));
        }
        in.plans = net::build_point_plans(in.points, fx.cfg.k_neighbors);
        fx.batch.push_back(std::move(in));
    }
    fx.labels = {0, 0, 1, 1};
    return fx;
}

inline double loss_value(const net::Model& model, const Fixture& fx, bool grad,
                         ad::Tape* grad_tape = nullptr, net::Model::Bound* bound_out = nullptr) {
    ad::Tape local(false);
    ad::Tape& tape = grad ? *grad_tape : local;
    net::Model::Bound bound = model.bind(tape);
    std::vector<ad::Var> embeddings, logits;
    for (const net::SequenceTensors& in : fx.batch) {
        net::NetOutput o = net::forward_sequence(bound, fx.cfg, in, true);
        embeddings.push_back(o.embedding);
        logits.push_back(o.logits);
    }
    int warn = 0;
    ad::Var triplet = ad::triplet_loss_ba(embeddings, fx.labels, 0.2, &warn);
    ad::Var ce = ad::ce_loss(logits, fx.labels);
    ad::Var total = ad::add(triplet, ad::scale(ce, 0.1));
    if (grad) {
        tape.backward(total);
        *bound_out = bound;
    }
    return tape.value(total).data[0];
}

}  // namespace detail

inline Report run(std::uint64_t seed, bool inject_fault = false) {
    detail::Fixture fx = detail::make_fixture(seed);
    net::Model model(fx.cfg, seed);
    // jitter every parameter so the check runs at a generic point: fresh
    // zero biases put relu pre-activations exactly on their kink (zero
    // displacements feed the motion MLP), where finite differences straddle
    // the non-differentiable point and disagree with any subgradient
    Rng jitter = Rng(seed).fork(0x71a2bu);
    for (const std::string& name : model.params.names())
        for (double& v : model.params.at(name).data) v += jitter.uniform(-0.05, 0.05);

    std::string fault_group;
    auto compute_grads = [&](const net::Model& m) {
        ad::Tape tape(true);
        net::Model::Bound bound;
        detail::loss_value(m, fx, true, &tape, &bound);
        std::map<std::string, Tensor> out;
        for (const std::string& name : m.params.names()) out.emplace(name, tape.grad(bound(name)));
        if (inject_fault) {
            if (fault_group.empty())
                for (const std::string& name : m.params.names()) {
                    bool nonzero = false;
                    for (double v : out.at(name).data) nonzero |= v != 0.0;
                    if (nonzero) {
                        fault_group = name;
                        break;
                    }
                }
            for (double& v : out.at(fault_group).data) v *= 1.01;
        }
        return out;
    };
    std::map<std::string, Tensor> grads = compute_grads(model);

    const double h = 1e-5;
    auto central = [&](net::Model& m, const std::string& name, const Tensor& dir, double step) {
        Tensor& theta = m.params.at(name);
        const Tensor keep = theta;
        for (std::size_t i = 0; i < theta.data.size(); ++i) theta.data[i] += step * dir.data[i];
        double fp = detail::loss_value(m, fx, false);
        theta = keep;
        for (std::size_t i = 0; i < theta.data.size(); ++i) theta.data[i] -= step * dir.data[i];
        double fm = detail::loss_value(m, fx, false);
        theta = keep;
        return (fp - fm) / (2 * step);
    };
    // a probe whose +-h interval sweeps a relu/max kink yields a finite
    // difference no subgradient matches; at smooth points central differences
    // at h and h/2 agree to O(h^2), so disagreement flags the contaminated
    // probe for resampling (the gate never looks at the analytic value, so
    // a wrong gradient cannot hide behind it)
    auto smooth_fd = [&](net::Model& m, const std::string& name, const Tensor& dir, double* fd) {
        double f1 = central(m, name, dir, h);
        double f2 = central(m, name, dir, h / 2);
        *fd = f2;
        return std::abs(f1 - f2) <= std::max(1e-9, 2e-5 * std::abs(f2));
    };
    // relative error floored at 1e-5; when analytic and measured values are
    // both below 1e-6 the parameter is numerically dead at this point (e.g.
    // the key bias, which cancels inside softmax) and the quotient would
    // compare pure roundoff against roundoff, so such pairs count as exact
    auto rel_err = [](double analytic, double fd) {
        if (std::max(std::abs(analytic), std::abs(fd)) < 1e-6) return 0.0;
        return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-5});
    };

    Rng prng = Rng(seed).fork(0x9d0fbu);
    // the step-halving gate is blind to a kink lying within h of the base
    // point itself (both step sizes agree on the same contaminated slope), so
    // a failing probe is retried at freshly jittered base points with the
    // gradient recomputed there: a kink artifact vanishes once the kink moves
    // away, while a genuine backward-pass bug mismatches at every base point,
    // so keeping the smallest clean verdict preserves detection power
    auto verify = [&](const std::string& name, const Tensor& dir, double first_err) {
        double best = first_err;
        for (int attempt = 0; attempt < 3 && best > 1e-4; ++attempt) {
            net::Model shifted = model;
            for (const std::string& pname : shifted.params.names())
                for (double& v : shifted.params.at(pname).data) v += prng.uniform(-1e-3, 1e-3);
            std::map<std::string, Tensor> regrads = compute_grads(shifted);
            double fd = 0;
            if (!smooth_fd(shifted, name, dir, &fd)) continue;
            const Tensor& g = regrads.at(name);
            double analytic = 0;
            for (std::size_t i = 0; i < g.data.size(); ++i) analytic += g.data[i] * dir.data[i];
            best = std::min(best, rel_err(analytic, fd));
        }
        return best;
    };

    Report report;
    for (const std::string& name : model.params.names()) {
        const Tensor& g = grads.at(name);
        const auto n = g.data.size();
        GroupResult res{name, 0};
        auto record = [&](const Tensor& dir, double analytic, double fd) {
            double err = rel_err(analytic, fd);
            if (err > 1e-4) err = verify(name, dir, err);
            res.max_rel_err = std::max(res.max_rel_err, err);
        };

        int smooth_hits = 0;
        double contaminated = -1;  // fallback if every attempt sweeps a kink
        Tensor contaminated_dir;
        double contaminated_fd = 0;
        for (int attempt = 0; attempt < 10 && smooth_hits < 2; ++attempt) {
            Tensor dir(g.shape);
            double norm = 0;
            for (double& v : dir.data) {
                v = prng.gaussian(0, 1);
                norm += v * v;
            }
            norm = std::sqrt(norm);
            for (double& v : dir.data) v /= norm;
            double fd = 0;
            const bool smooth = smooth_fd(model, name, dir, &fd);
            double analytic = 0;
            for (std::size_t i = 0; i < n; ++i) analytic += g.data[i] * dir.data[i];
            if (smooth) {
                ++smooth_hits;
                record(dir, analytic, fd);
            } else if (rel_err(analytic, fd) > contaminated) {
                contaminated = rel_err(analytic, fd);
                contaminated_dir = dir;
                contaminated_fd = fd;
            }
        }
        if (smooth_hits == 0 && contaminated >= 0) {
            double analytic = 0;
            for (std::size_t i = 0; i < n; ++i) analytic += grads.at(name).data[i] * contaminated_dir.data[i];
            record(contaminated_dir, analytic, contaminated_fd);
        }

        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return std::abs(g.data[a]) > std::abs(g.data[b]); });
        int element_hits = 0;
        contaminated = -1;
        std::size_t contaminated_idx = 0;
        for (std::size_t p = 0; p < std::min<std::size_t>(16, n) && element_hits < 4; ++p) {
            Tensor dir(g.shape);
            dir.data[order[p]] = 1.0;
            double fd = 0;
            if (smooth_fd(model, name, dir, &fd)) {
                ++element_hits;
                record(dir, g.data[order[p]], fd);
            } else if (rel_err(g.data[order[p]], fd) > contaminated) {
                contaminated = rel_err(g.data[order[p]], fd);
                contaminated_idx = order[p];
                contaminated_fd = fd;
            }
        }
        if (element_hits == 0 && contaminated >= 0) {
            Tensor dir(g.shape);
            dir.data[contaminated_idx] = 1.0;
            record(dir, g.data[contaminated_idx], contaminated_fd);
        }
        report.max_rel_err = std::max(report.max_rel_err, res.max_rel_err);
        report.groups.push_back(std::move(res));
    }
    report.pass = report.max_rel_err <= 1e-4;
    return report;
}

}  // namespace gaitlab::gradcheck
