#include "muldef/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <type_traits>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace muldef {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

namespace {

void check_dims(const Shape& shape) {
    for (auto d : shape)
        if (d == 0) throw ShapeError("tensor dimension must be positive: " + shape_str(shape));
}

}  // namespace

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
    check_dims(shape_);
    data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims(shape_);
    if (shape_size(shape_) != data_.size())
        throw ShapeError("tensor shape " + shape_str(shape_) + " needs " + std::to_string(shape_size(shape_)) +
                         " scalars, got " + std::to_string(data_.size()));
}

std::size_t Tensor::row_size() const {
    if (shape_.empty()) return data_.size();
    return data_.size() / shape_[0];
}

std::span<Scalar> Tensor::row(std::size_t i) {
    const auto n = row_size();
    return std::span<Scalar>(data_).subspan(i * n, n);
}

std::span<const Scalar> Tensor::row(std::size_t i) const {
    const auto n = row_size();
    return std::span<const Scalar>(data_).subspan(i * n, n);
}

void Tensor::reshape(Shape shape) {
    check_dims(shape);
    if (shape_size(shape) != data_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
}

Tensor Tensor::reshaped(Shape shape) const {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
}

void Tensor::fill(Scalar value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
    // Exponent bits all set means inf or nan; the integer form vectorizes.
    using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exponent = sizeof(Scalar) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
    const Scalar* p = data_.data();
    bool bad = false;
    for (std::size_t i = 0; i < data_.size(); ++i) {
        Bits b;
        std::memcpy(&b, p + i, sizeof b);
        bad |= (b & exponent) == exponent;
    }
    return !bad;
}

}  // namespace muldef
