#include "tokenhalt/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace tokenhalt {

void ModelConfig::validate() const {
    layers.validate();
    if (halt_layers.empty()) throw std::invalid_argument("model.halt_layers must name at least one layer");
    for (std::size_t i = 0; i < halt_layers.size(); ++i) {
        if (halt_layers[i] < 1 || halt_layers[i] > layers.n_layers)
            throw std::invalid_argument("model.halt_layers entry " + std::to_string(halt_layers[i]) + " is out of range");
        if (i > 0 && halt_layers[i] <= halt_layers[i - 1])
            throw std::invalid_argument("model.halt_layers must be strictly increasing");
    }
    if (module1_channels == 0 || head_hidden == 0) throw std::invalid_argument("channel counts must be >= 1");
    grid.cells_per_side();
}

int ModelConfig::module_at(int layer) const {
    for (std::size_t i = 0; i < halt_layers.size(); ++i)
        if (halt_layers[i] == layer) return static_cast<int>(i);
    return -1;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    config.validate();
    Rng rng = Rng::stream(seed, "init");
    const auto D = static_cast<std::size_t>(config.layers.d_model);
    embed_w = params.add("embed.w", init_normal({kRawFeatures, D}, kRawFeatures, rng));
    embed_b = params.add("embed.b", Tensor(Shape{D}));
    for (int l = 1; l <= config.layers.n_layers; ++l)
        layers.push_back(AttentionLayerWeights::create(params, "layer" + std::to_string(l), config.layers, rng));
    dense_halt = DenseHaltWeights::create(params, "halt1", D, config.module1_channels, rng);
    for (std::size_t m = 1; m < config.halt_layers.size(); ++m)
        mlp_halts.push_back(MlpHaltWeights::create(params, "halt" + std::to_string(m + 1), D, rng));
    head = HeadWeights::create(params, "head", D, config.head_hidden, rng);
}

Model Model::clone() const {
    Model copy(config, 0);
    copy.assign(*this);
    return copy;
}

void Model::assign(const Model& other) {
    const auto& src = other.params.entries();
    auto& dst = params.entries();
    if (src.size() != dst.size()) throw std::invalid_argument("assign: parameter count differs");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].name != dst[i].name || src[i].var.shape() != dst[i].var.shape())
            throw std::invalid_argument("assign: parameter " + src[i].name + " does not match");
        dst[i].var.mutable_value() = src[i].var.value();
        dst[i].var.zero_grad();
    }
}

namespace {

constexpr const char* kMagic = "tokenhalt-checkpoint 1";

std::uint64_t fnv1a(const char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::vector<char> encode_values(const Model& model) {
    std::vector<char> bytes;
    bytes.reserve(model.params.total_size() * 8);
    for (const auto& e : model.params.entries())
        for (double v : e.var.value().vec()) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
    return bytes;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec != std::errc() || r.ptr != text.data() + text.size())
        throw CheckpointError("checkpoint meta " + key + ": bad value '" + text + "'");
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    const auto& c = model.config;
    const std::vector<char> bytes = encode_values(model);
    std::ostringstream head;
    head << kMagic << '\n';
    head << "meta d_model " << c.layers.d_model << '\n';
    head << "meta heads " << c.layers.heads << '\n';
    head << "meta d_ff " << c.layers.d_ff << '\n';
    head << "meta pe_hidden " << c.layers.pe_hidden << '\n';
    head << "meta layers " << c.layers.n_layers << '\n';
    head << "meta region_size " << c.layers.region_size << '\n';
    head << "meta halt_layers " << join_ints(c.halt_layers) << '\n';
    head << "meta module1_channels " << c.module1_channels << '\n';
    head << "meta head_hidden " << c.head_hidden << '\n';
    head << "meta extent_m " << format_double(c.grid.extent_m) << '\n';
    head << "meta voxel_m " << format_double(c.grid.voxel_m) << '\n';
    head << "tensors " << model.params.entries().size() << '\n';
    for (const auto& e : model.params.entries()) {
        head << e.name << ' ' << e.var.shape().size();
        for (auto d : e.var.shape()) head << ' ' << d;
        head << '\n';
    }
    head << "checksum " << fnv1a(bytes.data(), bytes.size()) << '\n';
    head << "end\n";
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
    const std::string text = head.str();
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != kMagic) throw CheckpointError("not a checkpoint: " + path.string());

    std::map<std::string, std::string> meta;
    std::size_t n_tensors = 0;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "meta") {
            std::string key, value;
            if (!(ls >> key >> value)) throw CheckpointError("malformed meta line: " + line);
            meta[key] = value;
        } else if (tag == "tensors") {
            if (!(ls >> n_tensors)) throw CheckpointError("malformed tensors line: " + line);
            break;
        } else {
            throw CheckpointError("unexpected manifest line: " + line);
        }
    }

    auto need = [&](const std::string& key) -> const std::string& {
        const auto it = meta.find(key);
        if (it == meta.end()) throw CheckpointError("checkpoint meta missing " + key);
        return it->second;
    };
    ModelConfig cfg;
    cfg.layers.d_model = parse_number<int>("d_model", need("d_model"));
    cfg.layers.heads = parse_number<int>("heads", need("heads"));
    cfg.layers.d_ff = parse_number<int>("d_ff", need("d_ff"));
    cfg.layers.pe_hidden = parse_number<int>("pe_hidden", need("pe_hidden"));
    cfg.layers.n_layers = parse_number<int>("layers", need("layers"));
    cfg.layers.region_size = parse_number<int>("region_size", need("region_size"));
    cfg.halt_layers.clear();
    {
        std::istringstream hs(need("halt_layers"));
        std::string part;
        while (std::getline(hs, part, ',')) cfg.halt_layers.push_back(parse_number<int>("halt_layers", part));
    }
    cfg.module1_channels = parse_number<std::size_t>("module1_channels", need("module1_channels"));
    cfg.head_hidden = parse_number<std::size_t>("head_hidden", need("head_hidden"));
    cfg.grid.extent_m = parse_number<double>("extent_m", need("extent_m"));
    cfg.grid.voxel_m = parse_number<double>("voxel_m", need("voxel_m"));

    std::optional<Model> model;
    try {
        model.emplace(cfg, 0);
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }
    auto& entries = model->params.entries();
    if (n_tensors != entries.size())
        throw CheckpointError("checkpoint lists " + std::to_string(n_tensors) + " tensors, model has " +
                              std::to_string(entries.size()));
    for (const auto& e : entries) {
        if (!std::getline(is, line)) throw CheckpointError("manifest truncated at " + e.name);
        std::istringstream ls(line);
        std::string name;
        std::size_t rank = 0;
        ls >> name >> rank;
        Shape shape(rank);
        for (auto& d : shape) ls >> d;
        if (!ls || name != e.name || shape != e.var.shape())
            throw CheckpointError("manifest entry '" + line + "' does not match " + e.name + " " + shape_str(e.var.shape()));
    }
    std::uint64_t checksum = 0;
    if (!std::getline(is, line) || line.rfind("checksum ", 0) != 0) throw CheckpointError("manifest missing checksum");
    checksum = parse_number<std::uint64_t>("checksum", line.substr(9));
    if (!std::getline(is, line) || line != "end") throw CheckpointError("manifest missing end marker");

    std::vector<char> bytes(model->params.total_size() * 8);
    is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(is.gcount()) != bytes.size()) throw CheckpointError("checkpoint values truncated");
    if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint values");
    if (fnv1a(bytes.data(), bytes.size()) != checksum) throw CheckpointError("checkpoint checksum mismatch");

    std::size_t at = 0;
    for (auto& e : entries)
        for (auto& v : e.var.mutable_value().vec()) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at++])) << (8 * b);
            v = std::bit_cast<double>(bits);
            if (!std::isfinite(v)) throw CheckpointError("non-finite value in " + e.name);
        }
    return std::move(*model);
}

}  // namespace tokenhalt
