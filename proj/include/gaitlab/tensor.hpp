#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gaitlab {

// Dense row-major double tensor. Shapes are small (rank <= 4); all math in
// this project runs in double precision so analytic gradients can be checked
// against finite differences.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::size_t>(count(shape)) != data.size())
            throw std::invalid_argument("tensor: shape/data size mismatch");
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    bool empty() const { return data.empty(); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }

    double& at(int i) { return data[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data[static_cast<std::size_t>(i)]; }
    // 2-d accessors; row-major.
    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline void check_shape(const Tensor& t, const std::vector<int>& want, const char* what) {
    if (t.shape != want)
        throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(want) +
                                    ", got " + t.shape_str());
}

}  // namespace gaitlab
