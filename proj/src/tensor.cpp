#include "minidub/tensor.hpp"

#include <cmath>
#include <cstring>

namespace minidub {

int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

Tensor::Tensor(Shape s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
    if ((int64_t)v.size() != numel_of(shape))
        throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return INFINITY;
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
    return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

OpCounter& op_counter() {
    static OpCounter counter;
    return counter;
}

}  // namespace minidub
