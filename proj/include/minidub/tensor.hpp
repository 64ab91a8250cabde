#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace minidub {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major double tensor. All model math runs in double so the
// oracle tolerances (1e-10 .. 1e-12) and bit-exact determinism checks are
// meaningful without mixed-precision bookkeeping.
struct Tensor {
    Shape shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(numel_of(shape), 0.0) {}
    Tensor(Shape s, double fill) : shape(std::move(s)), v(numel_of(shape), fill) {}
    Tensor(Shape s, std::vector<double> data);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double x) { return Tensor(std::move(s), x); }

    int64_t numel() const { return (int64_t)v.size(); }
    int rank() const { return (int)shape.size(); }
    int dim(int i) const { return shape[i]; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    double& operator[](int64_t i) { return v[i]; }
    double operator[](int64_t i) const { return v[i]; }

    // 2d/3d/4d accessors for row-major layouts
    double& at2(int i, int j) { return v[(int64_t)i * shape[1] + j]; }
    double at2(int i, int j) const { return v[(int64_t)i * shape[1] + j]; }
    double& at3(int i, int j, int k) { return v[((int64_t)i * shape[1] + j) * shape[2] + k]; }
    double at3(int i, int j, int k) const { return v[((int64_t)i * shape[1] + j) * shape[2] + k]; }
    double& at4(int i, int j, int k, int l) {
        return v[(((int64_t)i * shape[1] + j) * (int64_t)shape[2] + k) * shape[3] + l];
    }
    double at4(int i, int j, int k, int l) const {
        return v[(((int64_t)i * shape[1] + j) * (int64_t)shape[2] + k) * shape[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

// Arithmetic-op accounting used by the complexity checks. Kernels add the
// exact multiply/add counts of the loops they execute when enabled; this
// measures work without per-instruction instrumentation.
struct OpCounter {
    bool enabled = false;
    uint64_t ops = 0;

    void add(uint64_t n) {
        if (enabled) ops += n;
    }
    void reset() { ops = 0; }
};

OpCounter& op_counter();

// Error taxonomy shared by the CLI (exit 2 vs 3) and the library.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingFailure : std::runtime_error {
    double final_loss;
    TrainingFailure(const std::string& msg, double loss)
        : std::runtime_error(msg), final_loss(loss) {}
};

}  // namespace minidub
