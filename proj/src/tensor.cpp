#include "nd/tensor.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace nd {

std::int64_t numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("tensor: negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    s += ")";
    return s;
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (nd::numel(shape) != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                                    std::to_string(data.size()) + " elements");
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(nd::numel(shape)), 0.0);
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = v;
    return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::from_vector(const std::vector<double>& v) {
    return Tensor({static_cast<int>(v.size())}, v);
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data.size()); }

double& Tensor::at4(int b, int c, int h, int w) {
    const int C = shape[1], H = shape[2], W = shape[3];
    return data[static_cast<size_t>(((static_cast<std::int64_t>(b) * C + c) * H + h) * W + w)];
}

const double& Tensor::at4(int b, int c, int h, int w) const {
    const int C = shape[1], H = shape[2], W = shape[3];
    return data[static_cast<size_t>(((static_cast<std::int64_t>(b) * C + c) * H + h) * W + w)];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::rms() const {
    if (data.empty()) return 0.0;
    double s = 0.0;
    for (double v : data) s += v * v;
    return std::sqrt(s / static_cast<double>(data.size()));
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::uint64_t checksum(const Tensor& t) {
    // FNV-1a over the raw bytes, shape included.
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (int d : t.shape) mix(&d, sizeof(d));
    if (!t.data.empty()) mix(t.data.data(), t.data.size() * sizeof(double));
    return h;
}

}  // namespace nd
