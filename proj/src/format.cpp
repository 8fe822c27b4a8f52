#include "muldef/format.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace muldef {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(std::span<const std::uint8_t> bytes, std::size_t& pos, const char* what) {
    if (bytes.size() - pos < sizeof(T)) throw FormatError(std::string("truncated ") + what);
    T value;
    std::memcpy(&value, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

}  // namespace

std::vector<std::uint8_t> write_container(std::string_view magic, const json& header,
                                          std::span<const std::span<const Scalar>> blocks) {
    if (magic.size() != 8) throw ArgumentError("container magic must be 8 bytes");
    std::size_t floats = 0;
    for (const auto& b : blocks) floats += b.size();
    json h = header;
    h["payload_floats"] = floats;
    const std::string text = h.dump();

    std::vector<std::uint8_t> out(magic.begin(), magic.end());
    put<std::uint32_t>(out, kFormatVersion);
    put<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + floats * 4);
    for (const auto& b : blocks)
        for (Scalar v : b) put<float>(out, static_cast<float>(v));
    return out;
}

Container read_container(std::span<const std::uint8_t> bytes, std::string_view magic) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), magic.data(), 8) != 0)
        throw FormatError("bad magic: expected " + std::string(magic));
    std::size_t pos = 8;
    const auto version = get<std::uint32_t>(bytes, pos, "version");
    if (version != kFormatVersion)
        throw FormatError("unsupported format version " + std::to_string(version) + " (expected " +
                          std::to_string(kFormatVersion) + ")");
    const auto header_len = get<std::uint64_t>(bytes, pos, "header length");
    if (bytes.size() - pos < header_len) throw FormatError("truncated header");
    Container c;
    try {
        c.header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                               bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed header: ") + e.what());
    }
    pos += header_len;
    if (!c.header.contains("payload_floats")) throw FormatError("header lacks payload_floats");
    const auto floats = c.header["payload_floats"].get<std::uint64_t>();
    const std::size_t available = (bytes.size() - pos) / 4;
    if (available < floats || (bytes.size() - pos) % 4 != 0)
        throw FormatError("truncated payload: header declares " + std::to_string(floats) + " floats, file holds " +
                          std::to_string(available));
    if (available > floats) throw FormatError("trailing bytes after payload");
    c.payload.resize(floats);
    std::memcpy(c.payload.data(), bytes.data() + pos, floats * 4);
    return c;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_text(const std::filesystem::path& path, std::string_view text) {
    write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json spec_to_json(const NetworkSpec& spec) {
    json layers = json::array();
    for (const auto& layer : spec.layers) {
        json l = {{"kind", layer_kind(layer)}};
        std::visit(
            [&](const auto& s) {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, DenseSpec>) {
                    l["in"] = s.in;
                    l["out"] = s.out;
                    if (s.l2 != 0.0) l["l2"] = s.l2;
                } else if constexpr (std::is_same_v<S, Conv2dSpec>) {
                    l["in_channels"] = s.in_channels;
                    l["out_channels"] = s.out_channels;
                    l["kernel"] = s.kernel;
                    l["stride"] = s.stride;
                    l["padding"] = s.padding;
                } else if constexpr (std::is_same_v<S, MaxPool2dSpec>) {
                    l["window"] = s.window;
                    l["stride"] = s.stride;
                } else if constexpr (std::is_same_v<S, DropoutSpec>) {
                    l["keep_prob"] = s.keep_prob;
                }
            },
            layer);
        layers.push_back(std::move(l));
    }
    return {{"input_shape", spec.input_shape}, {"layers", layers}};
}

NetworkSpec spec_from_json(const json& j) {
    NetworkSpec spec;
    try {
        spec.input_shape = j.at("input_shape").get<Shape>();
        for (const auto& l : j.at("layers")) {
            const auto kind = l.at("kind").get<std::string>();
            if (kind == "dense")
                spec.layers.push_back(DenseSpec{l.at("in"), l.at("out"), l.value("l2", 0.0)});
            else if (kind == "conv2d")
                spec.layers.push_back(Conv2dSpec{l.at("in_channels"), l.at("out_channels"), l.value("kernel", 3u),
                                                 l.value("stride", 1u), l.value("padding", 0u)});
            else if (kind == "relu")
                spec.layers.push_back(ReluSpec{});
            else if (kind == "maxpool2d")
                spec.layers.push_back(MaxPool2dSpec{l.value("window", 2u), l.value("stride", 2u)});
            else if (kind == "dropout")
                spec.layers.push_back(DropoutSpec{l.value("keep_prob", 1.0)});
            else if (kind == "flatten")
                spec.layers.push_back(FlattenSpec{});
            else if (kind == "softmax")
                spec.layers.push_back(SoftmaxSpec{});
            else
                throw FormatError("unknown layer kind '" + kind + "'");
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed network spec: ") + e.what());
    }
    return spec;
}

json train_config_to_json(const TrainConfig& cfg) {
    return {{"optimizer",
             {{"kind", cfg.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd"},
              {"learning_rate", cfg.optimizer.learning_rate},
              {"beta1", cfg.optimizer.beta1},
              {"beta2", cfg.optimizer.beta2},
              {"epsilon", cfg.optimizer.epsilon}}},
            {"batch_size", cfg.batch_size},
            {"max_epochs", cfg.max_epochs},
            {"early_stop_min_delta", cfg.early_stop_min_delta},
            {"early_stop_patience", cfg.early_stop_patience},
            {"rng_seed", cfg.rng_seed},
            {"validation_fraction", cfg.validation_fraction}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig cfg;
    try {
        const json& o = j.at("optimizer");
        cfg.optimizer.kind = o.at("kind").get<std::string>() == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
        cfg.optimizer.learning_rate = o.at("learning_rate");
        cfg.optimizer.beta1 = o.at("beta1");
        cfg.optimizer.beta2 = o.at("beta2");
        cfg.optimizer.epsilon = o.at("epsilon");
        cfg.batch_size = j.at("batch_size");
        cfg.max_epochs = j.at("max_epochs");
        cfg.early_stop_min_delta = j.at("early_stop_min_delta");
        cfg.early_stop_patience = j.at("early_stop_patience");
        cfg.rng_seed = j.at("rng_seed");
        cfg.validation_fraction = j.at("validation_fraction");
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed train config: ") + e.what());
    }
    return cfg;
}

std::vector<std::uint8_t> save_network(const Network& net) {
    json params = json::array();
    std::vector<std::span<const Scalar>> blocks;
    for (const auto& p : net.params()) {
        params.push_back(p.shape());
        blocks.push_back(p.data());
    }
    const json header = {{"kind", "network"}, {"id", net.id()}, {"spec", spec_to_json(net.spec())}, {"params", params}};
    return write_container("MULDEFNN", header, blocks);
}

Network load_network(std::span<const std::uint8_t> bytes) {
    Container c = read_container(bytes, "MULDEFNN");
    Network net(spec_from_json(c.header.at("spec")), c.header.value("id", std::string("model")));
    const auto& declared = c.header.at("params");
    if (declared.size() != net.params().size())
        throw ShapeError("model file lists " + std::to_string(declared.size()) + " parameter blocks, spec needs " +
                         std::to_string(net.params().size()));
    std::size_t needed = 0;
    for (std::size_t i = 0; i < net.params().size(); ++i) {
        const Tensor& p = net.params()[i];
        if (declared[i].get<Shape>() != p.shape())
            throw ShapeError("parameter block " + std::to_string(i) + " has shape " +
                             shape_str(declared[i].get<Shape>()) + ", spec needs " + shape_str(p.shape()));
        needed += p.size();
    }
    if (needed != c.payload.size())
        throw ShapeError("spec requires " + std::to_string(needed) + " parameter floats, payload holds " +
                         std::to_string(c.payload.size()));
    std::size_t pos = 0;
    for (auto& p : net.params())
        for (auto& v : p.data()) v = static_cast<Scalar>(c.payload[pos++]);
    return net;
}

void save_network_file(const Network& net, const std::filesystem::path& path) { write_bytes(path, save_network(net)); }

Network load_network_file(const std::filesystem::path& path) { return load_network(read_bytes(path)); }

}  // namespace muldef
