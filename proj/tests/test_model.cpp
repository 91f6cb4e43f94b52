#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "ccr/errors.hpp"
#include "ccr/gradcheck.hpp"
#include "ccr/model.hpp"
#include "ccr/training.hpp"
#include "oracles.hpp"

using namespace ccr;

namespace {

FeatureSchema numeric_schema(std::size_t n) {
    FeatureSchema s;
    for (std::size_t j = 0; j < n; ++j) s.columns.push_back({"v" + std::to_string(j), ColumnKind::numeric, {}});
    s.label_column = "y";
    return s;
}

std::vector<double> random_records(std::size_t count, std::uint64_t seed) {
    // rows shaped like the reduced model's schema: profit, leverage, 3-way one-hot, growth
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> out;
    for (std::size_t n = 0; n < count; ++n) {
        const std::size_t hot = gen() % 3;
        out.insert(out.end(), {u(gen), u(gen), hot == 0 ? 1.0 : 0.0, hot == 1 ? 1.0 : 0.0, hot == 2 ? 1.0 : 0.0, u(gen)});
    }
    return out;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("canonical stack shapes at 64") {
    const auto shapes = stack_shapes(64, alexnet_stack());
    const std::vector<std::size_t> sizes{15, 7, 7, 3, 3, 3, 3, 1};
    const std::vector<std::size_t> channels{96, 96, 256, 256, 384, 384, 256, 256};
    REQUIRE(shapes.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(shapes[i].height == sizes[i]);
        CHECK(shapes[i].width == sizes[i]);
        CHECK(shapes[i].channels == channels[i]);
    }
    CHECK(flatten_width(64, alexnet_stack()) == 256);
}

TEST_CASE("image size 32 leaves no room for the last pool") {
    CHECK_THROWS_AS(stack_shapes(32, alexnet_stack()), ConfigError);
    ModelConfig cfg;
    cfg.image_size = 32;
    CHECK_THROWS_AS(build_model(cfg, FeatureLayout::from_schema(numeric_schema(3)), 9), ConfigError);
}

TEST_CASE("stack shapes agree with the closed form and with the real ops") {
    for (std::size_t m : {64u, 67u, 75u, 96u}) {
        const auto shapes = stack_shapes(m, alexnet_stack());
        std::size_t side = m;
        Tensor h = Tensor::zeros({3, m, m});
        std::size_t channels = 3, i = 0;
        for (const LayerSpec& l : alexnet_stack()) {
            if (l.kind == LayerSpec::Kind::conv) {
                side = oracle::out_size(side, l.kernel, l.stride, l.padding);
                h = conv2d(h, Tensor::zeros({l.out_channels, channels, l.kernel, l.kernel}),
                           Tensor::zeros({l.out_channels}), l.stride, l.padding);
                channels = l.out_channels;
            } else {
                side = oracle::out_size(side, l.kernel, l.stride, 0);
                h = maxpool2d(h, l.kernel, l.stride);
            }
            CHECK(shapes[i].height == side);
            CHECK(h.shape() == Shape{channels, side, side});
            ++i;
        }
    }
}

TEST_CASE("canonical parameter shapes") {
    FeatureSchema s = numeric_schema(38);
    s.columns.push_back({"tax_credit_rating", ColumnKind::categorical, {"A", "B", "C", "D"}});
    const Model model = build_model(ModelConfig{}, FeatureLayout::from_schema(s), 9);
    const CcrlParams& c = model.params.ccrl;
    REQUIRE(c.convs.size() == 5);
    CHECK(c.convs[0].weight.shape() == Shape{96, 3, 11, 11});
    CHECK(c.convs[1].weight.shape() == Shape{256, 96, 5, 5});
    CHECK(c.convs[2].weight.shape() == Shape{384, 256, 3, 3});
    CHECK(c.convs[3].weight.shape() == Shape{384, 384, 3, 3});
    CHECK(c.convs[4].weight.shape() == Shape{256, 384, 3, 3});
    CHECK(c.fc1_weight.shape() == Shape{512, 256});
    CHECK(c.fc2_weight.shape() == Shape{9, 512});
    CHECK(model.params.cel.tables.at("tax_credit_rating").shape() == Shape{4, 4});
    CHECK(model.params.cel.proj_weight.shape() == Shape{64, 42});
    for (int ch = 0; ch < 3; ++ch) CHECK(model.params.ctil.weight[ch].shape() == Shape{4096, 64});
}

TEST_CASE("embedding: identity projection passes numerics through") {
    ModelConfig cfg;
    cfg.embed_dim = 3;
    const FeatureLayout layout = FeatureLayout::from_schema(numeric_schema(3));
    Model model = build_model(cfg, layout, 2);
    auto w = model.params.cel.proj_weight.mutable_data();
    for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
    const std::vector<double> v{0.25, -1.5, 7.0};
    const Tensor x = cel_forward(v, layout, model.params.cel, true);
    CHECK(std::vector<double>(x.data().begin(), x.data().end()) == v);
    CHECK_THROWS_AS(cel_forward(std::vector<double>{1.0, 2.0}, layout, model.params.cel, true), DimensionError);
}

TEST_CASE("embedding: one-hot picks a row, fractional blocks mix rows") {
    FeatureSchema s;
    s.columns = {{"sector", ColumnKind::categorical, {"p", "q"}}};
    s.label_column = "y";
    const FeatureLayout layout = FeatureLayout::from_schema(s);
    ModelConfig cfg;
    cfg.project = false;
    cfg.cat_embed = 3;
    cfg.embed_dim = 3;
    Model model = build_model(cfg, layout, 2);
    Tensor table = model.params.cel.tables.at("sector");
    const std::vector<double> r0{1.0, 2.0, 3.0}, r1{-4.0, 0.5, 8.0};
    std::copy(r0.begin(), r0.end(), table.mutable_data().begin());
    std::copy(r1.begin(), r1.end(), table.mutable_data().begin() + 3);

    const Tensor hot = cel_forward(std::vector<double>{0.0, 1.0}, layout, model.params.cel, false);
    CHECK(std::vector<double>(hot.data().begin(), hot.data().end()) == r1);
    const Tensor mixed = cel_forward(std::vector<double>{0.5, 0.5}, layout, model.params.cel, false);
    for (std::size_t i = 0; i < 3; ++i) CHECK(mixed[i] == doctest::Approx(0.5 * r0[i] + 0.5 * r1[i]).epsilon(1e-15));
}

TEST_CASE("quantization worked example and degenerate channel") {
    CHECK(quantize_channel(std::vector<double>{2, 4, 6, 8}) == std::vector<std::uint8_t>{0, 85, 170, 255});
    CHECK(quantize_channel(std::vector<double>{3, 3, 3, 3}) == std::vector<std::uint8_t>{0, 0, 0, 0});
    // half-way values round away from zero: 1/2·255 = 127.5 → 128
    CHECK(quantize_channel(std::vector<double>{0, 1, 2}) == std::vector<std::uint8_t>{0, 128, 255});

    const Tensor l = Tensor::from({3, 4}, {2, 4, 6, 8, 5, 5, 5, 5, -1, 1, 0, 0});
    const CorporateImage img = quantize_image(l);
    CHECK(img.size == 2);
    CHECK(img.pixels == std::vector<std::uint8_t>{0, 85, 170, 255, 0, 0, 0, 0, 0, 255, 128, 128});
    CHECK(img.at(2, 0, 1) == 255);
    CHECK_THROWS_AS(quantize_image(Tensor::zeros({3, 5})), DimensionError);
}

TEST_CASE("ppm layout") {
    const CorporateImage img = quantize_image(Tensor::from({3, 4}, {2, 4, 6, 8, 8, 6, 4, 2, 0, 0, 1, 1}));
    const std::string ppm = encode_ppm(img);
    const std::string header = "P6\n2 2\n255\n";
    REQUIRE(ppm.size() == header.size() + 12);
    CHECK(ppm.substr(0, header.size()) == header);
    const std::vector<std::uint8_t> body(ppm.begin() + long(header.size()), ppm.end());
    // interleaved r,g,b per pixel in row-major order
    CHECK(body == std::vector<std::uint8_t>{0, 255, 0, 85, 170, 0, 170, 85, 255, 255, 0, 255});
}

TEST_CASE("zero image and zero weights give the fc2 bias") {
    Model model = reduced_model(0);
    for (auto [_, t] : model.params.named()) {
        auto v = t.mutable_data();
        std::fill(v.begin(), v.end(), 0.0);
    }
    const std::vector<double> b{0.5, -2.0, 3.25};
    std::copy(b.begin(), b.end(), model.params.ccrl.fc2_bias.mutable_data().begin());
    const Tensor z = ccrl_forward(Tensor::zeros({3, 8, 8}), model.params.ccrl, model.config.stack);
    CHECK(std::vector<double>(z.data().begin(), z.data().end()) == b);
}

TEST_CASE("log-probabilities are normalised and pure") {
    const Model model = reduced_model(4);
    const auto records = random_records(20, 9);
    for (std::size_t n = 0; n < 20; ++n) {
        const auto rec = std::span<const double>(records).subspan(n * 6, 6);
        const Tensor y = model_forward(rec, model);
        REQUIRE(y.shape() == Shape{3});
        double total = 0.0;
        for (double v : y.data()) total += std::exp(v);
        CHECK(std::abs(total - 1.0) <= 1e-12);
        CHECK(bitwise_equal(y.data(), model_forward(rec, model).data()));
    }
}

TEST_CASE("a record gives the same output alone or in a batch") {
    const Model model = reduced_model(2);
    const auto records = random_records(13, 1);
    const Tensor batch = model_forward_batch(records, 13, model);
    REQUIRE(batch.shape() == Shape{13, 3});
    for (std::size_t n = 0; n < 13; ++n) {
        const Tensor one = model_forward(std::span<const double>(records).subspan(n * 6, 6), model);
        CHECK(bitwise_equal(one.data(), batch.data().subspan(n * 3, 3)));
    }
}

TEST_CASE("shifting every fc2 bias by a constant keeps the prediction") {
    Model model = reduced_model(6);
    const auto records = random_records(10, 3);
    std::vector<std::size_t> before;
    for (std::size_t n = 0; n < 10; ++n) before.push_back(predict(std::span<const double>(records).subspan(n * 6, 6), model));
    for (double& v : model.params.ccrl.fc2_bias.mutable_data()) v += 17.0;
    for (std::size_t n = 0; n < 10; ++n)
        CHECK(predict(std::span<const double>(records).subspan(n * 6, 6), model) == before[n]);
}

TEST_CASE("rendered pixels span the full range per channel") {
    const Model model = reduced_model(8);
    const auto records = random_records(5, 5);
    for (std::size_t n = 0; n < 5; ++n) {
        const CorporateImage img = render_image(std::span<const double>(records).subspan(n * 6, 6), model);
        REQUIRE(img.pixels.size() == 3 * 64);
        for (std::size_t c = 0; c < 3; ++c) {
            const auto first = img.pixels.begin() + long(c * 64);
            CHECK(*std::min_element(first, first + 64) == 0);
            CHECK(*std::max_element(first, first + 64) == 255);
        }
        CHECK(encode_ppm(img).size() == 3 * 64 + std::string("P6\n8 8\n255\n").size());
    }
}

TEST_CASE("clones share no storage") {
    const Model a = reduced_model(1);
    Model b = clone_model(a);
    const auto na = a.params.named(), nb = b.params.named();
    REQUIRE(na.size() == nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
        CHECK_FALSE(na[i].second.same_storage(nb[i].second));
        CHECK(bitwise_equal(na[i].second.data(), nb[i].second.data()));
    }
    b.params.ccrl.fc2_bias.mutable_data()[0] += 1.0;
    CHECK(a.params.ccrl.fc2_bias[0] != b.params.ccrl.fc2_bias[0]);
}

TEST_CASE("model config json round trip") {
    ModelConfig cfg = reduced_model(0).config;
    cfg.quantize_train_path = true;
    cfg.rescale = RescaleGrad::exact;
    const auto j = model_config_to_json(cfg);
    CHECK(model_config_to_json(model_config_from_json(j)) == j);
}

}  // TEST_SUITE
