#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include <zlib.h>

#include "muldef/data.hpp"
#include "muldef/error.hpp"

using namespace muldef;

namespace {

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
    std::vector<std::uint8_t> b;
    put_u32(b, 0x803);
    put_u32(b, n);
    put_u32(b, rows);
    put_u32(b, cols);
    for (std::uint32_t i = 0; i < n * rows * cols; ++i) b.push_back(static_cast<std::uint8_t>((i * 37) % 256));
    return b;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t n) {
    std::vector<std::uint8_t> b;
    put_u32(b, 0x801);
    put_u32(b, n);
    for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(i % 10));
    return b;
}

}  // namespace

TEST_CASE("IDX parsing scales pixels and keeps labels") {
    const auto d = parse_idx(idx_images(3, 2, 2), idx_labels(3));
    CHECK(d.size() == 3);
    CHECK(d.sample_shape() == Shape{1, 2, 2});
    CHECK(d.num_classes() == 10);
    CHECK(d.label(2) == 2);
    CHECK(d.pixels(1)[0] == doctest::Approx(static_cast<double>((4 * 37) % 256) / 255.0));
}

TEST_CASE("IDX parsing rejects bad magic, truncation and count mismatch") {
    auto img = idx_images(2, 2, 2);
    auto lab = idx_labels(2);
    auto bad = img;
    bad[3] = 0x01;
    CHECK_THROWS_AS(parse_idx(bad, lab), FormatError);
    auto cut = img;
    cut.pop_back();
    CHECK_THROWS_AS(parse_idx(cut, lab), FormatError);
    CHECK_THROWS_AS(parse_idx(img, idx_labels(3)), FormatError);
}

TEST_CASE("gzip files are inflated transparently") {
    const auto dir = std::filesystem::temp_directory_path() / "muldef_data_test";
    std::filesystem::create_directories(dir);
    const auto img = idx_images(4, 3, 3);
    const auto lab = idx_labels(4);
    const auto write_gz = [](const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
        gzFile f = gzopen(p.c_str(), "wb");
        REQUIRE(f != nullptr);
        gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(f);
    };
    write_gz(dir / "img.gz", img);
    write_gz(dir / "lab.gz", lab);
    CHECK(read_file_bytes(dir / "img.gz") == img);
    CHECK(load_idx(dir / "img.gz", dir / "lab.gz") == parse_idx(img, lab));
    std::filesystem::remove_all(dir);
}

TEST_CASE("CIFAR records are channel-major") {
    std::vector<std::uint8_t> bytes;
    for (int r = 0; r < 2; ++r) {
        bytes.push_back(static_cast<std::uint8_t>(r + 3));
        for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<std::uint8_t>(i / 1024 * 100 + r));
    }
    const auto d = parse_cifar_binary(bytes);
    CHECK(d.size() == 2);
    CHECK(d.sample_shape() == Shape{3, 32, 32});
    CHECK(d.label(1) == 4);
    CHECK(d.pixels(1)[2048] == doctest::Approx(201.0 / 255.0));
    bytes.pop_back();
    CHECK_THROWS_AS(parse_cifar_binary(bytes), FormatError);
}

TEST_CASE("balanced sampling is seeded, without replacement and class balanced") {
    const auto blobs = synth_blobs(4, 50, 3, 0.1, 7);
    const auto a = sample_indices(blobs, 41, 11);
    CHECK(a == sample_indices(blobs, 41, 11));
    CHECK(a != sample_indices(blobs, 41, 12));
    CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == a.size());
    std::map<int, int> counts;
    for (auto i : a) ++counts[blobs.label(i)];
    int lo = 1000, hi = 0;
    for (auto [c, n] : counts) lo = std::min(lo, n), hi = std::max(hi, n);
    CHECK(hi - lo <= 1);
    CHECK_THROWS_AS(sample_indices(blobs, 201, 1), ArgumentError);
}

TEST_CASE("validation split sizes") {
    const auto blobs = synth_blobs(3, 10, 2, 0.1, 1);
    auto [tr, va] = split_validation(blobs, 0.1, 5);
    CHECK(va.size() == 3);
    CHECK(tr.size() == 27);
    auto [tr2, va2] = split_validation(blobs, 0.001, 5);
    CHECK(va2.size() == 1);
}

TEST_CASE("concat keeps order and checks shapes") {
    const auto a = synth_blobs(2, 3, 4, 0.1, 1);
    const auto b = synth_blobs(2, 2, 4, 0.1, 2);
    const Dataset* parts[] = {&a, &b};
    const auto c = Dataset::concat(parts, "ab", Split::train);
    REQUIRE(c.size() == 10);
    CHECK(c.label(6) == b.label(0));
    CHECK(std::equal(b.pixels(1).begin(), b.pixels(1).end(), c.pixels(7).begin()));
    const auto other = synth_blobs(2, 2, 5, 0.1, 2);
    const Dataset* bad[] = {&a, &other};
    CHECK_THROWS_AS(Dataset::concat(bad, "x", Split::train), ShapeError);
}
