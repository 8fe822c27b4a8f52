#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "muldef/error.hpp"

namespace muldef {

// Storage precision is fixed per build. The f64 library variant is used by
// the finite-difference gradient checks.
#ifdef MULDEF_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array with an explicit shape.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Scalar fill = Scalar(0));
    Tensor(Shape shape, std::vector<Scalar> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<Scalar> data() noexcept { return data_; }
    std::span<const Scalar> data() const noexcept { return data_; }
    Scalar* ptr() noexcept { return data_.data(); }
    const Scalar* ptr() const noexcept { return data_.data(); }
    std::vector<Scalar>& storage() noexcept { return data_; }
    const std::vector<Scalar>& storage() const noexcept { return data_; }

    Scalar& operator[](std::size_t i) { return data_[i]; }
    Scalar operator[](std::size_t i) const { return data_[i]; }

    /// Number of scalars in one slice along axis 0.
    std::size_t row_size() const;
    std::span<Scalar> row(std::size_t i);
    std::span<const Scalar> row(std::size_t i) const;

    /// Reinterprets the data under a new shape of identical element count.
    void reshape(Shape shape);
    Tensor reshaped(Shape shape) const;

    void fill(Scalar value);
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<Scalar> data_;
};

}  // namespace muldef
