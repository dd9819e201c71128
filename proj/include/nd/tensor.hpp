#pragma once

#include <cstdint>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace nd {

struct Tensor;
// Named parameter collections; the transparent comparator allows
// allocation-free string_view lookups.
using NamedTensors = std::map<std::string, Tensor, std::less<>>;

// Dense row-major f64 tensor. The unit of all computation and gradients.
// Invariant: numel(shape) == data.size().
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d);
    explicit Tensor(std::vector<int> s);  // zero-filled

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);
    static Tensor scalar(double v);
    static Tensor from_vector(const std::vector<double>& v);  // shape {n}

    std::int64_t numel() const;
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& at(std::int64_t i) { return data[static_cast<size_t>(i)]; }
    double at(std::int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 4-d accessor for (B,C,H,W) tensors.
    double& at4(int b, int c, int h, int w);
    const double& at4(int b, int c, int h, int w) const;

    bool all_finite() const;
    double rms() const;  // sqrt(mean of squares), 0 for empty
};

std::int64_t numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Shortest round-trip decimal text for a double (locale-free, deterministic).
std::string format_double(double v);

// Order-sensitive content checksum, used to assert state purity around steps.
std::uint64_t checksum(const Tensor& t);

}  // namespace nd
