#include "tokencd/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace tokencd {

std::int64_t shape_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("tensor dimension must be nonnegative");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != static_cast<std::int64_t>(data_.size()))
        throw std::invalid_argument("tensor shape does not match data length");
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

std::int64_t Tensor::offset_of(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim()) throw std::invalid_argument("tensor index rank mismatch");
    std::int64_t off = 0;
    auto it = idx.begin();
    for (int d = 0; d < ndim(); ++d, ++it) {
        if (*it < 0 || *it >= shape_[static_cast<std::size_t>(d)]) throw std::out_of_range("tensor index out of range");
        off = off * shape_[static_cast<std::size_t>(d)] + *it;
    }
    return off;
}

double& Tensor::at(std::initializer_list<int> idx) { return data_[static_cast<std::size_t>(offset_of(idx))]; }

double Tensor::at(std::initializer_list<int> idx) const { return data_[static_cast<std::size_t>(offset_of(idx))]; }

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::fill(double v) {
    for (auto& x : data_) x = v;
}

}  // namespace tokencd
