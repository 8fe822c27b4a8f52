#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "muldef/tensor.hpp"

namespace muldef {

enum class Split { train, val, test };

std::string split_name(Split split);

/// Immutable labelled image collection. All samples share one shape, pixels
/// lie in [0,1] and labels in [0, num_classes).
class Dataset {
public:
    Dataset() = default;
    Dataset(std::string name, Split split, std::size_t num_classes, Shape sample_shape, std::vector<Scalar> pixels,
            std::vector<int> labels);

    const std::string& name() const noexcept { return name_; }
    Split split() const noexcept { return split_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    const Shape& sample_shape() const noexcept { return sample_shape_; }
    std::size_t sample_size() const noexcept { return sample_size_; }
    std::size_t size() const noexcept { return labels_.size(); }
    bool empty() const noexcept { return labels_.empty(); }

    std::span<const Scalar> pixels(std::size_t i) const {
        return std::span<const Scalar>(pixels_).subspan(i * sample_size_, sample_size_);
    }
    int label(std::size_t i) const { return labels_[i]; }
    const std::vector<int>& labels() const noexcept { return labels_; }
    const std::vector<Scalar>& all_pixels() const noexcept { return pixels_; }

    /// [count] + sample_shape tensor of consecutive samples starting at `first`.
    Tensor batch(std::size_t first, std::size_t count) const;
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

    Dataset subset(std::span<const std::size_t> indices, std::string name) const;
    Dataset subset(std::span<const std::size_t> indices) const { return subset(indices, name_); }
    Dataset with_name(std::string name, Split split) const;

    /// Concatenation in argument order. Shapes and class counts must agree.
    static Dataset concat(std::span<const Dataset* const> parts, std::string name, Split split);

    friend bool operator==(const Dataset&, const Dataset&) = default;

private:
    std::string name_;
    Split split_ = Split::train;
    std::size_t num_classes_ = 0;
    Shape sample_shape_;
    std::size_t sample_size_ = 0;
    std::vector<Scalar> pixels_;
    std::vector<int> labels_;
};

/// Whole file contents; gzip streams are inflated transparently.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

/// IDX images (magic 0x00000803, [n,rows,cols]) and labels (0x00000801)
/// from raw bytes. Pixels are scaled by 1/255.
Dataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                  std::string name = "idx", Split split = Split::train);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::string name = "idx", Split split = Split::train);

/// Standard MNIST file names under `dir`, raw or with a .gz suffix.
Dataset load_mnist(const std::filesystem::path& dir, Split split);

/// CIFAR-10 binary records: 1 label byte + 3072 channel-major pixel bytes.
Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, std::string name = "cifar10",
                           Split split = Split::train);
Dataset load_cifar_binary(std::span<const std::filesystem::path> paths, std::string name = "cifar10",
                          Split split = Split::train);

/// Gaussian clusters at seeded centres, clipped to [0,1]^dim.
Dataset synth_blobs(std::size_t num_classes, std::size_t n_per_class, std::size_t dim, double spread,
                    std::uint64_t seed);

/// Seeded sample without replacement whose per-class counts differ by at
/// most one wherever class sizes allow it. The result is in shuffled order.
std::vector<std::size_t> sample_indices(const Dataset& set, std::size_t n, std::uint64_t seed);
Dataset sample_subset(const Dataset& set, std::size_t n, std::uint64_t seed);

/// Seeded split into (train, validation); validation has round(n*fraction)
/// samples, at least one, and the training part keeps at least one.
std::pair<Dataset, Dataset> split_validation(const Dataset& set, double fraction, std::uint64_t seed);

}  // namespace muldef
