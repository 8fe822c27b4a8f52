#include "muldef/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "muldef/rng.hpp"

namespace muldef {

std::string split_name(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Dataset::Dataset(std::string name, Split split, std::size_t num_classes, Shape sample_shape,
                 std::vector<Scalar> pixels, std::vector<int> labels)
    : name_(std::move(name)),
      split_(split),
      num_classes_(num_classes),
      sample_shape_(std::move(sample_shape)),
      sample_size_(shape_size(sample_shape_)),
      pixels_(std::move(pixels)),
      labels_(std::move(labels)) {
    if (num_classes_ == 0) throw ArgumentError("dataset " + name_ + ": num_classes must be positive");
    if (sample_shape_.empty() || sample_size_ == 0) throw ShapeError("dataset " + name_ + ": empty sample shape");
    if (pixels_.size() != labels_.size() * sample_size_)
        throw ShapeError("dataset " + name_ + ": " + std::to_string(pixels_.size()) + " pixels for " +
                         std::to_string(labels_.size()) + " samples of shape " + shape_str(sample_shape_));
    for (int y : labels_)
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes_)
            throw ArgumentError("dataset " + name_ + ": label " + std::to_string(y) + " outside [0," +
                                std::to_string(num_classes_) + ")");
    for (Scalar v : pixels_)
        if (!(v >= Scalar(0) && v <= Scalar(1)))
            throw ArgumentError("dataset " + name_ + ": pixel value outside [0,1]");
}

Tensor Dataset::batch(std::size_t first, std::size_t count) const {
    Shape shape{count};
    shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
    auto begin = pixels_.begin() + static_cast<std::ptrdiff_t>(first * sample_size_);
    return Tensor(std::move(shape), std::vector<Scalar>(begin, begin + static_cast<std::ptrdiff_t>(count * sample_size_)));
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
    Shape shape{indices.size()};
    shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
    Tensor out(std::move(shape));
    for (std::size_t r = 0; r < indices.size(); ++r) {
        auto src = pixels(indices[r]);
        std::copy(src.begin(), src.end(), out.ptr() + r * sample_size_);
    }
    return out;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) out[r] = labels_[indices[r]];
    return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string name) const {
    Dataset out = *this;
    out.name_ = std::move(name);
    out.pixels_.resize(indices.size() * sample_size_);
    out.labels_.resize(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= size()) throw ArgumentError("subset index out of range");
        auto src = pixels(indices[r]);
        std::copy(src.begin(), src.end(), out.pixels_.begin() + static_cast<std::ptrdiff_t>(r * sample_size_));
        out.labels_[r] = labels_[indices[r]];
    }
    return out;
}

Dataset Dataset::with_name(std::string name, Split split) const {
    Dataset out = *this;
    out.name_ = std::move(name);
    out.split_ = split;
    return out;
}

Dataset Dataset::concat(std::span<const Dataset* const> parts, std::string name, Split split) {
    if (parts.empty()) throw ArgumentError("concat: no datasets");
    const Dataset& first = *parts.front();
    Dataset out = first.with_name(std::move(name), split);
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const Dataset& p = *parts[i];
        if (p.sample_shape_ != first.sample_shape_ || p.num_classes_ != first.num_classes_)
            throw ShapeError("concat: dataset " + p.name_ + " has shape " + shape_str(p.sample_shape_) +
                             ", expected " + shape_str(first.sample_shape_));
        out.pixels_.insert(out.pixels_.end(), p.pixels_.begin(), p.pixels_.end());
        out.labels_.insert(out.labels_.end(), p.labels_.begin(), p.labels_.end());
    }
    return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw FormatError("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::vector<std::uint8_t> buf(1 << 20);
    for (;;) {
        const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
        if (got < 0) {
            gzclose(f);
            throw FormatError("read error in " + path.string());
        }
        if (got == 0) break;
        out.insert(out.end(), buf.begin(), buf.begin() + got);
    }
    gzclose(f);
    return out;
}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, const char* what) {
    if (bytes.size() < offset + 4) throw FormatError(std::string(what) + ": truncated header");
    return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
           (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

}  // namespace

Dataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                  std::string name, Split split) {
    if (read_be32(image_bytes, 0, "idx images") != 0x00000803u) throw FormatError("idx images: bad magic");
    if (read_be32(label_bytes, 0, "idx labels") != 0x00000801u) throw FormatError("idx labels: bad magic");
    const std::size_t n = read_be32(image_bytes, 4, "idx images");
    const std::size_t rows = read_be32(image_bytes, 8, "idx images");
    const std::size_t cols = read_be32(image_bytes, 12, "idx images");
    const std::size_t n_labels = read_be32(label_bytes, 4, "idx labels");
    if (n != n_labels)
        throw FormatError("idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
    if (rows == 0 || cols == 0) throw FormatError("idx images: zero image dimension");
    if (image_bytes.size() < 16 + n * rows * cols) throw FormatError("idx images: truncated payload");
    if (label_bytes.size() < 8 + n) throw FormatError("idx labels: truncated payload");

    std::vector<Scalar> pixels(n * rows * cols);
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<Scalar>(image_bytes[16 + i]) / Scalar(255);
    std::vector<int> labels(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = label_bytes[8 + i];
        max_label = std::max(max_label, labels[i]);
    }
    const std::size_t classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
    return Dataset(std::move(name), split, classes, Shape{1, rows, cols}, std::move(pixels), std::move(labels));
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::string name,
                 Split split) {
    const auto ib = read_file_bytes(images);
    const auto lb = read_file_bytes(labels);
    return parse_idx(ib, lb, std::move(name), split);
}

Dataset load_mnist(const std::filesystem::path& dir, Split split) {
    const std::string prefix = split == Split::test ? "t10k" : "train";
    const auto locate = [&](const std::string& stem) {
        for (const auto& candidate : {dir / stem, dir / (stem + ".gz")})
            if (std::filesystem::exists(candidate)) return candidate;
        throw FormatError("missing MNIST file " + (dir / stem).string() + "[.gz]");
    };
    return load_idx(locate(prefix + "-images-idx3-ubyte"), locate(prefix + "-labels-idx1-ubyte"), "mnist-" + prefix,
                    split);
}

Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, std::string name, Split split) {
    constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
    if (bytes.size() % kRecord != 0)
        throw FormatError("cifar: " + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                          std::to_string(kRecord));
    const std::size_t n = bytes.size() / kRecord;
    std::vector<Scalar> pixels(n * (kRecord - 1));
    std::vector<int> labels(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::uint8_t* rec = bytes.data() + r * kRecord;
        if (rec[0] > 9) throw FormatError("cifar: label byte " + std::to_string(rec[0]) + " out of range");
        labels[r] = rec[0];
        for (std::size_t j = 0; j + 1 < kRecord; ++j)
            pixels[r * (kRecord - 1) + j] = static_cast<Scalar>(rec[1 + j]) / Scalar(255);
    }
    return Dataset(std::move(name), split, 10, Shape{3, 32, 32}, std::move(pixels), std::move(labels));
}

Dataset load_cifar_binary(std::span<const std::filesystem::path> paths, std::string name, Split split) {
    std::vector<Dataset> parts;
    for (const auto& p : paths) parts.push_back(parse_cifar_binary(read_file_bytes(p), name, split));
    std::vector<const Dataset*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    return Dataset::concat(ptrs, std::move(name), split);
}

Dataset synth_blobs(std::size_t num_classes, std::size_t n_per_class, std::size_t dim, double spread,
                    std::uint64_t seed) {
    if (!(spread > 0.0)) throw ArgumentError("synth_blobs: spread must be positive");
    if (num_classes == 0 || n_per_class == 0 || dim == 0) throw ArgumentError("synth_blobs: empty request");
    Rng centre_rng = make_rng(seed, 0);
    Rng noise_rng = make_rng(seed, 1);
    const auto u01 = [](Rng& r) { return static_cast<double>(r() >> 11) * 0x1.0p-53; };
    // Box-Muller keeps the stream independent of the standard library.
    const auto normal = [&](Rng& r) {
        const double u1 = 1.0 - u01(r), u2 = u01(r);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    };

    std::vector<double> centres(num_classes * dim);
    for (auto& c : centres) c = 0.15 + 0.7 * u01(centre_rng);

    const std::size_t n = num_classes * n_per_class;
    std::vector<Scalar> pixels(n * dim);
    std::vector<int> labels(n);
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t s = 0; s < n_per_class; ++s) {
            const std::size_t row = c * n_per_class + s;
            labels[row] = static_cast<int>(c);
            for (std::size_t d = 0; d < dim; ++d) {
                const double v = centres[c * dim + d] + spread * normal(noise_rng);
                pixels[row * dim + d] = static_cast<Scalar>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    Dataset ordered("blobs", Split::train, num_classes, Shape{dim}, std::move(pixels), std::move(labels));
    Rng shuffle_rng = make_rng(seed, 2);
    const auto perm = random_permutation(n, shuffle_rng);
    return ordered.subset(perm, "blobs");
}

std::vector<std::size_t> sample_indices(const Dataset& set, std::size_t n, std::uint64_t seed) {
    if (n > set.size())
        throw ArgumentError("sample_subset: requested " + std::to_string(n) + " of " + std::to_string(set.size()));
    Rng rng = make_rng(seed, 0);
    std::vector<std::vector<std::size_t>> by_class(set.num_classes());
    for (auto i : random_permutation(set.size(), rng)) by_class[static_cast<std::size_t>(set.label(i))].push_back(i);
    const auto class_order = random_permutation(set.num_classes(), rng);

    // Round-robin over classes keeps counts within one of each other until a
    // class runs out.
    std::vector<std::size_t> taken(set.num_classes(), 0);
    std::vector<std::size_t> out;
    out.reserve(n);
    while (out.size() < n) {
        for (auto c : class_order) {
            if (out.size() == n) break;
            if (taken[c] < by_class[c].size()) out.push_back(by_class[c][taken[c]++]);
        }
    }
    const auto perm = random_permutation(out.size(), rng);
    std::vector<std::size_t> shuffled(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) shuffled[i] = out[perm[i]];
    return shuffled;
}

Dataset sample_subset(const Dataset& set, std::size_t n, std::uint64_t seed) {
    return set.subset(sample_indices(set, n, seed));
}

std::pair<Dataset, Dataset> split_validation(const Dataset& set, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ArgumentError("validation fraction must be in (0,1)");
    if (set.size() < 2) throw ArgumentError("validation split needs at least two samples");
    std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(set.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, set.size() - 1);
    Rng rng = make_rng(seed, 0x7a11);
    const auto perm = random_permutation(set.size(), rng);
    std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    return {set.subset(train).with_name(set.name() + "/train", Split::train),
            set.subset(val).with_name(set.name() + "/val", Split::val)};
}

}  // namespace muldef
