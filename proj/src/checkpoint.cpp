#include <algorithm>

#include "ccr/binary_io.hpp"
#include "ccr/errors.hpp"
#include "ccr/training.hpp"

namespace ccr {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "CCRM";
constexpr std::uint32_t kVersion = 1;

void write_tensor(io::Writer& w, const std::string& name, const Shape& shape, std::span<const double> values) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) w.u64(d);
    w.f64s(values);
}

struct RawTensor {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

RawTensor read_tensor(io::Reader& r) {
    RawTensor t;
    t.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: tensor " + t.name + " has rank " + std::to_string(rank));
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint64_t d = r.u64();
        if (d == 0 || d > (1ULL << 32)) throw FormatError("checkpoint: tensor " + t.name + " has a bad dimension");
        t.shape.push_back(static_cast<std::size_t>(d));
        numel *= d;
        if (numel > r.remaining()) throw FormatError("checkpoint: truncated tensor " + t.name);
    }
    if (numel * 8 > r.remaining()) throw FormatError("checkpoint: truncated tensor " + t.name);
    t.values.resize(static_cast<std::size_t>(numel));
    for (double& v : t.values) v = r.f64();
    return t;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
    json header{{"train", train_config_to_json(ck.train_config)},
                {"model", model_config_to_json(ck.model.config)},
                {"schema", schema_to_json(ck.schema)},
                {"num_classes", ck.model.num_classes},
                {"epochs_completed", ck.epochs_completed},
                {"adam",
                 {{"beta1", ck.adam.beta1}, {"beta2", ck.adam.beta2}, {"eps", ck.adam.eps}, {"step", ck.adam.step}}}};

    io::Writer w;
    w.bytes(kMagic);
    w.u32(kVersion);
    w.str(header.dump());

    const auto named = ck.model.params.named();
    w.u32(static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) write_tensor(w, name, t.shape(), t.data());

    // optimizer moments, same layout, keyed "m/<param>" and "v/<param>"
    std::vector<std::pair<std::string, const std::vector<double>*>> moments;
    for (const auto& [name, values] : ck.adam.m) moments.emplace_back("m/" + name, &values);
    for (const auto& [name, values] : ck.adam.v) moments.emplace_back("v/" + name, &values);
    std::sort(moments.begin(), moments.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    w.u32(static_cast<std::uint32_t>(moments.size()));
    for (const auto& [name, values] : moments) {
        const std::string param = name.substr(2);
        auto it = std::find_if(named.begin(), named.end(), [&](const auto& p) { return p.first == param; });
        if (it == named.end()) throw ContractError("optimizer state for unknown parameter " + param);
        write_tensor(w, name, it->second.shape(), *values);
    }

    w.u32(1);
    w.u64(ck.rng_state);
    return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    io::Reader r(bytes, "checkpoint");
    if (r.bytes(4) != kMagic) throw FormatError("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint ck;
    try {
        const json header = json::parse(r.str());
        ck.train_config = train_config_from_json(header.at("train"));
        ck.schema = schema_from_json(header.at("schema"));
        ck.epochs_completed = header.at("epochs_completed").get<std::size_t>();
        const json& adam = header.at("adam");
        ck.adam.beta1 = adam.at("beta1").get<double>();
        ck.adam.beta2 = adam.at("beta2").get<double>();
        ck.adam.eps = adam.at("eps").get<double>();
        ck.adam.step = adam.at("step").get<std::uint64_t>();
        ck.model = build_model(model_config_from_json(header.at("model")), FeatureLayout::from_schema(ck.schema),
                               header.at("num_classes").get<std::size_t>());
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what());
    } catch (const SchemaError& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what());
    }

    auto named = ck.model.params.named();
    const std::uint32_t count = r.u32();
    if (count != named.size())
        throw FormatError("checkpoint: holds " + std::to_string(count) + " tensors, model needs " +
                          std::to_string(named.size()));
    for (auto& [name, t] : named) {
        RawTensor raw = read_tensor(r);
        if (raw.name != name || raw.shape != t.shape())
            throw FormatError("checkpoint: expected " + name + " " + shape_str(t.shape()) + ", found " + raw.name +
                              " " + shape_str(raw.shape));
        std::copy(raw.values.begin(), raw.values.end(), t.mutable_data().begin());
    }

    const std::uint32_t moments = r.u32();
    for (std::uint32_t i = 0; i < moments; ++i) {
        RawTensor raw = read_tensor(r);
        if (raw.name.size() < 3 || (raw.name.compare(0, 2, "m/") != 0 && raw.name.compare(0, 2, "v/") != 0))
            throw FormatError("checkpoint: unexpected optimizer entry " + raw.name);
        const std::string param = raw.name.substr(2);
        auto it = std::find_if(named.begin(), named.end(), [&](const auto& p) { return p.first == param; });
        if (it == named.end() || it->second.shape() != raw.shape)
            throw FormatError("checkpoint: optimizer entry " + raw.name + " matches no parameter");
        (raw.name[0] == 'm' ? ck.adam.m : ck.adam.v)[param] = std::move(raw.values);
    }

    const std::uint32_t words = r.u32();
    if (words != 1) throw FormatError("checkpoint: expected 1 RNG state word, found " + std::to_string(words));
    ck.rng_state = r.u64();
    r.expect_end();
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    io::write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace ccr
