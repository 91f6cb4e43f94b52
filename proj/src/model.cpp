#include "ccr/model.hpp"

#include <algorithm>
#include <cmath>

#include "ccr/binary_io.hpp"
#include "ccr/errors.hpp"

namespace ccr {

using nlohmann::json;

std::vector<LayerSpec> alexnet_stack() {
    using K = LayerSpec::Kind;
    return {
        {K::conv, "L1", 11, 96, 4, 2},  {K::maxpool, "L2", 3, 0, 2, 0}, {K::conv, "L3", 5, 256, 1, 2},
        {K::maxpool, "L4", 3, 0, 2, 0}, {K::conv, "L5", 3, 384, 1, 1},  {K::conv, "L6", 3, 384, 1, 1},
        {K::conv, "L7", 3, 256, 1, 1},  {K::maxpool, "L8", 3, 0, 2, 0},
    };
}

// ---- config JSON ------------------------------------------------------------------

namespace {

json stack_to_json(const std::vector<LayerSpec>& stack) {
    json out = json::array();
    for (const LayerSpec& l : stack) {
        if (l.kind == LayerSpec::Kind::conv)
            out.push_back({{"kind", "conv"},
                           {"name", l.name},
                           {"kernel", l.kernel},
                           {"out_channels", l.out_channels},
                           {"stride", l.stride},
                           {"padding", l.padding}});
        else
            out.push_back({{"kind", "maxpool"}, {"name", l.name}, {"kernel", l.kernel}, {"stride", l.stride}});
    }
    return out;
}

std::vector<LayerSpec> stack_from_json(const json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "alexnet") return alexnet_stack();
        throw ConfigError("unknown stack preset '" + j.get<std::string>() + "'");
    }
    std::vector<LayerSpec> out;
    if (!j.is_array()) throw ConfigError("stack must be \"alexnet\" or an array of layers");
    for (const json& l : j) {
        LayerSpec s;
        const std::string kind = l.at("kind").get<std::string>();
        for (const auto& [key, _] : l.items())
            if (key != "kind" && key != "name" && key != "kernel" && key != "stride" &&
                !(kind == "conv" && (key == "out_channels" || key == "padding")))
                throw ConfigError("unknown key '" + key + "' in " + kind + " layer");
        if (kind == "conv") {
            s.kind = LayerSpec::Kind::conv;
            s.out_channels = l.at("out_channels").get<std::size_t>();
            s.padding = l.value("padding", std::size_t{0});
        } else if (kind == "maxpool") {
            s.kind = LayerSpec::Kind::maxpool;
        } else {
            throw ConfigError("unknown layer kind '" + kind + "'");
        }
        s.name = l.at("name").get<std::string>();
        s.kernel = l.at("kernel").get<std::size_t>();
        s.stride = l.value("stride", std::size_t{1});
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"image_size", cfg.image_size},
                {"embed_dim", cfg.embed_dim},
                {"cat_embed", cfg.cat_embed},
                {"fc_hidden", cfg.fc_hidden},
                {"project", cfg.project},
                {"stack", stack_to_json(cfg.stack)},
                {"rescale_grad", cfg.rescale == RescaleGrad::exact ? "exact" : "straight_through"},
                {"quantize_train_path", cfg.quantize_train_path}};
}

ModelConfig model_config_from_json(const json& j) {
    try {
        ModelConfig cfg;
        cfg.image_size = j.at("image_size").get<std::size_t>();
        cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
        cfg.cat_embed = j.at("cat_embed").get<std::size_t>();
        cfg.fc_hidden = j.at("fc_hidden").get<std::size_t>();
        cfg.project = j.at("project").get<bool>();
        cfg.stack = stack_from_json(j.at("stack"));
        const std::string mode = j.at("rescale_grad").get<std::string>();
        if (mode == "exact")
            cfg.rescale = RescaleGrad::exact;
        else if (mode == "straight_through")
            cfg.rescale = RescaleGrad::straight_through;
        else
            throw ConfigError("unknown rescale_grad '" + mode + "'");
        cfg.quantize_train_path = j.at("quantize_train_path").get<bool>();
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
}

// ---- layout -----------------------------------------------------------------------------

FeatureLayout FeatureLayout::from_schema(const FeatureSchema& schema) {
    FeatureLayout layout;
    for (const ColumnSpec& c : schema.columns) {
        const std::size_t w = c.kind == ColumnKind::numeric ? 1 : c.vocab.size();
        layout.blocks.push_back({c.name, c.kind, layout.width, w});
        layout.width += w;
    }
    return layout;
}

std::size_t FeatureLayout::embedded_width(std::size_t cat_embed) const {
    std::size_t w = 0;
    for (const FeatureBlock& b : blocks) w += b.kind == ColumnKind::numeric ? 1 : cat_embed;
    return w;
}

// ---- shapes ---------------------------------------------------------------------------------

std::vector<StageShape> stack_shapes(std::size_t image_size, const std::vector<LayerSpec>& stack) {
    if (image_size == 0) throw ConfigError("image size must be positive");
    std::vector<StageShape> out;
    StageShape cur{"image", 3, image_size, image_size};
    for (const LayerSpec& l : stack) {
        const bool conv = l.kind == LayerSpec::Kind::conv;
        const std::size_t pad = conv ? l.padding : 0;
        if (l.stride == 0) throw ConfigError("layer " + l.name + ": stride must be positive");
        if (conv && l.out_channels == 0) throw ConfigError("layer " + l.name + ": needs at least one filter");
        if (l.kernel == 0 || l.kernel > cur.height + 2 * pad || l.kernel > cur.width + 2 * pad)
            throw ConfigError("layer " + l.name + ": " + std::to_string(l.kernel) + "×" + std::to_string(l.kernel) +
                              " window does not fit " + std::to_string(cur.height) + "×" + std::to_string(cur.width) +
                              " input at image size " + std::to_string(image_size));
        StageShape next{l.name, conv ? l.out_channels : cur.channels,
                        conv_out_size(cur.height, l.kernel, l.stride, pad),
                        conv_out_size(cur.width, l.kernel, l.stride, pad)};
        out.push_back(next);
        cur = next;
    }
    return out;
}

std::size_t flatten_width(std::size_t image_size, const std::vector<LayerSpec>& stack) {
    const auto shapes = stack_shapes(image_size, stack);
    if (shapes.empty()) return 3 * image_size * image_size;
    const StageShape& last = shapes.back();
    return last.channels * last.height * last.width;
}

// ---- parameters ------------------------------------------------------------------------------

bool is_bias_name(const std::string& name) {
    return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [col, table] : cel.tables) out.emplace_back("cel.emb." + col, table);
    if (cel.proj_weight.defined()) {
        out.emplace_back("cel.proj.weight", cel.proj_weight);
        out.emplace_back("cel.proj.bias", cel.proj_bias);
    }
    static const char* kChannel[3] = {"r", "g", "b"};
    for (int c = 0; c < 3; ++c) {
        out.emplace_back(std::string("ctil.") + kChannel[c] + ".weight", ctil.weight[c]);
        out.emplace_back(std::string("ctil.") + kChannel[c] + ".bias", ctil.bias[c]);
    }
    for (const ConvParams& cp : ccrl.convs) {
        out.emplace_back("ccrl." + cp.name + ".weight", cp.weight);
        out.emplace_back("ccrl." + cp.name + ".bias", cp.bias);
    }
    out.emplace_back("ccrl.fc1.weight", ccrl.fc1_weight);
    out.emplace_back("ccrl.fc1.bias", ccrl.fc1_bias);
    out.emplace_back("ccrl.fc2.weight", ccrl.fc2_weight);
    out.emplace_back("ccrl.fc2.bias", ccrl.fc2_bias);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

std::size_t ModelParams::count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : named()) n += t.numel();
    return n;
}

Model build_model(const ModelConfig& cfg, const FeatureLayout& layout, std::size_t num_classes) {
    if (cfg.embed_dim == 0 || cfg.cat_embed == 0 || cfg.fc_hidden == 0)
        throw ConfigError("embed_dim, cat_embed and fc_hidden must be positive");
    if (num_classes == 0) throw ConfigError("model needs at least one class");
    if (layout.blocks.empty()) throw ConfigError("model needs at least one feature column");
    const std::size_t concat_width = layout.embedded_width(cfg.cat_embed);
    if (!cfg.project && concat_width != cfg.embed_dim)
        throw ConfigError("without projection embed_dim must equal the embedded width " + std::to_string(concat_width));
    const std::size_t flat = flatten_width(cfg.image_size, cfg.stack);

    Model model;
    model.config = cfg;
    model.layout = layout;
    model.num_classes = num_classes;
    ModelParams& p = model.params;

    for (const FeatureBlock& b : layout.blocks)
        if (b.kind == ColumnKind::categorical) p.cel.tables[b.name] = Tensor::zeros({b.width, cfg.cat_embed}, true);
    if (cfg.project) {
        p.cel.proj_weight = Tensor::zeros({cfg.embed_dim, concat_width}, true);
        p.cel.proj_bias = Tensor::zeros({cfg.embed_dim}, true);
    }
    const std::size_t pixels = cfg.image_size * cfg.image_size;
    for (int c = 0; c < 3; ++c) {
        p.ctil.weight[c] = Tensor::zeros({pixels, cfg.embed_dim}, true);
        p.ctil.bias[c] = Tensor::zeros({pixels}, true);
    }
    std::size_t channels = 3;
    for (const LayerSpec& l : cfg.stack) {
        if (l.kind != LayerSpec::Kind::conv) continue;
        p.ccrl.convs.push_back({l.name, Tensor::zeros({l.out_channels, channels, l.kernel, l.kernel}, true),
                                Tensor::zeros({l.out_channels}, true)});
        channels = l.out_channels;
    }
    p.ccrl.fc1_weight = Tensor::zeros({cfg.fc_hidden, flat}, true);
    p.ccrl.fc1_bias = Tensor::zeros({cfg.fc_hidden}, true);
    p.ccrl.fc2_weight = Tensor::zeros({num_classes, cfg.fc_hidden}, true);
    p.ccrl.fc2_bias = Tensor::zeros({num_classes}, true);

    const auto names = p.named();
    for (std::size_t i = 1; i < names.size(); ++i)
        if (names[i].first == names[i - 1].first) throw ConfigError("duplicate parameter name " + names[i].first);
    return model;
}

Model clone_model(const Model& model) {
    Model out = model;
    ModelParams& p = out.params;
    for (auto& [_, t] : p.cel.tables) t = t.clone();
    if (p.cel.proj_weight.defined()) {
        p.cel.proj_weight = p.cel.proj_weight.clone();
        p.cel.proj_bias = p.cel.proj_bias.clone();
    }
    for (int c = 0; c < 3; ++c) {
        p.ctil.weight[c] = p.ctil.weight[c].clone();
        p.ctil.bias[c] = p.ctil.bias[c].clone();
    }
    for (ConvParams& cp : p.ccrl.convs) {
        cp.weight = cp.weight.clone();
        cp.bias = cp.bias.clone();
    }
    p.ccrl.fc1_weight = p.ccrl.fc1_weight.clone();
    p.ccrl.fc1_bias = p.ccrl.fc1_bias.clone();
    p.ccrl.fc2_weight = p.ccrl.fc2_weight.clone();
    p.ccrl.fc2_bias = p.ccrl.fc2_bias.clone();
    return out;
}

// ---- forward -----------------------------------------------------------------------------------

namespace {

// Concatenated per-column embedding of one record, before projection.
Tensor cel_concat(std::span<const double> record, const FeatureLayout& layout, const CelParams& params) {
    if (record.size() != layout.width)
        throw DimensionError("record has " + std::to_string(record.size()) + " values, schema expects " +
                             std::to_string(layout.width));
    std::vector<Tensor> parts;
    std::vector<double> numeric_run;
    auto flush = [&] {
        if (numeric_run.empty()) return;
        parts.push_back(Tensor::vector(std::move(numeric_run)));
        numeric_run.clear();
    };
    for (const FeatureBlock& b : layout.blocks) {
        if (b.kind == ColumnKind::numeric) {
            numeric_run.push_back(record[b.offset]);
            continue;
        }
        flush();
        const Tensor& table = params.tables.at(b.name);
        auto block = record.subspan(b.offset, b.width);
        const auto ones = std::count(block.begin(), block.end(), 1.0);
        const auto zeros = std::count(block.begin(), block.end(), 0.0);
        if (ones == 1 && ones + zeros == static_cast<std::ptrdiff_t>(b.width)) {
            const std::size_t hot = static_cast<std::size_t>(std::find(block.begin(), block.end(), 1.0) - block.begin());
            parts.push_back(flatten(row_select(table, std::span<const std::size_t>(&hot, 1))));
        } else {
            Tensor weights = Tensor::from({1, b.width}, {block.begin(), block.end()});
            parts.push_back(flatten(matmul(weights, table)));
        }
    }
    flush();
    return parts.size() == 1 ? parts.front() : concat(parts);
}

}  // namespace

Tensor cel_forward(std::span<const double> record, const FeatureLayout& layout, const CelParams& params,
                   bool project) {
    Tensor x = cel_concat(record, layout, params);
    return project ? linear(x, params.proj_weight, params.proj_bias) : x;
}

Tensor cel_forward_batch(std::span<const double> records, std::size_t count, const FeatureLayout& layout,
                         const CelParams& params, bool project) {
    if (count == 0 || records.size() != count * layout.width)
        throw DimensionError(std::to_string(records.size()) + " values do not form " + std::to_string(count) +
                             " records of width " + std::to_string(layout.width));
    std::vector<Tensor> rows;
    rows.reserve(count);
    for (std::size_t n = 0; n < count; ++n)
        rows.push_back(cel_concat(records.subspan(n * layout.width, layout.width), layout, params));
    const std::size_t width = rows.front().numel();
    Tensor x = reshape(count == 1 ? rows.front() : concat(rows), {count, width});
    return project ? linear(x, params.proj_weight, params.proj_bias) : x;
}

Tensor ctil_forward(const Tensor& x, const CtilParams& params) {
    const std::size_t d = params.weight[0].dim(1);
    if ((x.rank() != 1 && x.rank() != 2) || x.dim(x.rank() - 1) != d)
        throw DimensionError("corporate embedding " + shape_str(x.shape()) + " does not match CTIL weight " +
                             shape_str(params.weight[0].shape()));
    const std::size_t pixels = params.weight[0].dim(0);
    const std::size_t n = x.rank() == 1 ? 1 : x.dim(0);
    // rows of the stacked weight are r pixels, then g, then b
    Tensor weight = concat({params.weight[0], params.weight[1], params.weight[2]});
    Tensor bias = concat({params.bias[0], params.bias[1], params.bias[2]});
    return reshape(linear(x, weight, bias), {3 * n, pixels});
}

Tensor ctil_image(const Tensor& channels, const ModelConfig& cfg, const std::vector<RowRange>* pinned) {
    if (channels.rank() != 2 || channels.dim(0) % 3 != 0 || channels.dim(1) != cfg.image_size * cfg.image_size)
        throw DimensionError("CTIL channels " + shape_str(channels.shape()) + " do not form " +
                             std::to_string(cfg.image_size) + "×" + std::to_string(cfg.image_size) + " images");
    Tensor scaled = minmax_rescale_rows(channels, 255.0, cfg.rescale, pinned);
    if (cfg.quantize_train_path) scaled = round_straight_through(scaled);
    return reshape(scaled, {channels.dim(0) / 3, 3, cfg.image_size, cfg.image_size});
}

Tensor ccrl_forward(const Tensor& image, const CcrlParams& params, const std::vector<LayerSpec>& stack) {
    Tensor h = image;
    std::size_t conv_index = 0;
    for (const LayerSpec& l : stack) {
        if (l.kind == LayerSpec::Kind::conv) {
            const ConvParams& cp = params.convs.at(conv_index++);
            h = relu(conv2d(h, cp.weight, cp.bias, l.stride, l.padding));
        } else {
            h = maxpool2d(h, l.kernel, l.stride);
        }
    }
    h = image.rank() == 4 ? reshape(h, {h.dim(0), h.numel() / h.dim(0)}) : flatten(h);
    h = relu(linear(h, params.fc1_weight, params.fc1_bias));
    return linear(h, params.fc2_weight, params.fc2_bias);
}

Tensor model_forward_batch(std::span<const double> records, std::size_t count, const Model& model) {
    const ModelParams& p = model.params;
    Tensor x = cel_forward_batch(records, count, model.layout, p.cel, model.config.project);
    Tensor image = ctil_image(ctil_forward(x, p.ctil), model.config);
    return log_softmax(ccrl_forward(image, p.ccrl, model.config.stack));
}

Tensor model_forward(std::span<const double> record, const Model& model) {
    return reshape(model_forward_batch(record, 1, model), {model.num_classes});
}

std::size_t argmax(std::span<const double> values) {
    return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::size_t predict(std::span<const double> record, const Model& model) {
    NoGradGuard guard;
    return argmax(model_forward(record, model).data());
}

// ---- images ---------------------------------------------------------------------------------------

std::vector<std::uint8_t> quantize_channel(std::span<const double> values) {
    std::vector<std::uint8_t> out(values.size(), 0);
    if (values.empty()) return out;
    auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) return out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = std::round((values[i] - lo) / (hi - lo) * 255.0);
        out[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    return out;
}

CorporateImage quantize_image(const Tensor& channels) {
    if (channels.rank() != 2 || channels.dim(0) != 3)
        throw DimensionError("quantize_image: expected 3×M², got " + shape_str(channels.shape()));
    const std::size_t pixels = channels.dim(1);
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(pixels))));
    if (side * side != pixels)
        throw DimensionError("quantize_image: " + std::to_string(pixels) + " pixels is not a square image");
    CorporateImage img;
    img.size = side;
    img.pixels.reserve(3 * pixels);
    for (std::size_t c = 0; c < 3; ++c) {
        auto q = quantize_channel(channels.data().subspan(c * pixels, pixels));
        img.pixels.insert(img.pixels.end(), q.begin(), q.end());
    }
    return img;
}

CorporateImage render_image(std::span<const double> record, const Model& model) {
    NoGradGuard guard;
    Tensor x = cel_forward(record, model.layout, model.params.cel, model.config.project);
    return quantize_image(ctil_forward(x, model.params.ctil));
}

std::string encode_ppm(const CorporateImage& image) {
    const std::size_t m = image.size;
    std::string out = "P6\n" + std::to_string(m) + " " + std::to_string(m) + "\n255\n";
    out.reserve(out.size() + 3 * m * m);
    for (std::size_t row = 0; row < m; ++row)
        for (std::size_t col = 0; col < m; ++col)
            for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(image.at(c, row, col)));
    return out;
}

void write_ppm(const std::filesystem::path& path, const CorporateImage& image) {
    io::write_file_atomic(path, encode_ppm(image));
}

}  // namespace ccr
