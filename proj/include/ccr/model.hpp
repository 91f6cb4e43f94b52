#pragma once

// The rating network: corporate embedding (CEL) → corporate-to-image
// conversion (CTIL) → AlexNet-style convolutional classifier (CCRL).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccr/data.hpp"
#include "ccr/rng.hpp"
#include "ccr/tensor.hpp"

namespace ccr {

// ---- configuration -----------------------------------------------------------

struct LayerSpec {
    enum class Kind { conv, maxpool };
    Kind kind = Kind::conv;
    std::string name;
    std::size_t kernel = 3;
    std::size_t out_channels = 0;  // conv only
    std::size_t stride = 1;
    std::size_t padding = 0;       // conv only
};

// L1..L8 of the canonical CCRL stack.
std::vector<LayerSpec> alexnet_stack();

struct ModelConfig {
    std::size_t image_size = 64;  // M
    std::size_t embed_dim = 64;   // d
    std::size_t cat_embed = 4;    // e, per categorical column
    std::size_t fc_hidden = 512;  // h
    bool project = true;          // learned affine map of the CEL concat to d
    std::vector<LayerSpec> stack = alexnet_stack();
    RescaleGrad rescale = RescaleGrad::straight_through;
    // Feed rounded pixels (straight-through) to the classifier instead of
    // the continuous rescale.
    bool quantize_train_path = false;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Where each schema column lives inside an encoded record.
struct FeatureBlock {
    std::string name;
    ColumnKind kind = ColumnKind::numeric;
    std::size_t offset = 0;
    std::size_t width = 1;
};

struct FeatureLayout {
    std::vector<FeatureBlock> blocks;
    std::size_t width = 0;  // encoded record width p

    static FeatureLayout from_schema(const FeatureSchema& schema);
    std::size_t embedded_width(std::size_t cat_embed) const;
};

// ---- shapes ----------------------------------------------------------------------

struct StageShape {
    std::string name;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
};

// Output shape after every stack layer, by floor((in+2p−k)/s)+1.
// Throws ConfigError when a window no longer fits or nothing is left.
std::vector<StageShape> stack_shapes(std::size_t image_size, const std::vector<LayerSpec>& stack);
std::size_t flatten_width(std::size_t image_size, const std::vector<LayerSpec>& stack);

// ---- parameters ----------------------------------------------------------------------

struct CelParams {
    std::map<std::string, Tensor> tables;  // column name → vocab × e
    Tensor proj_weight;                    // d × embedded width (when projecting)
    Tensor proj_bias;                      // d
};

struct CtilParams {
    Tensor weight[3];  // r, g, b: M² × d
    Tensor bias[3];    // M²
};

struct ConvParams {
    std::string name;
    Tensor weight;  // F × C × k × k
    Tensor bias;    // F
};

struct CcrlParams {
    std::vector<ConvParams> convs;  // stack order
    Tensor fc1_weight, fc1_bias;    // h × flatten, h
    Tensor fc2_weight, fc2_bias;    // m × h, m
};

struct ModelParams {
    CelParams cel;
    CtilParams ctil;
    CcrlParams ccrl;

    // Every learnable tensor under a stable name, sorted by name.
    std::vector<std::pair<std::string, Tensor>> named() const;
    std::size_t count() const;
};

bool is_bias_name(const std::string& name);

struct Model {
    ModelConfig config;
    FeatureLayout layout;
    std::size_t num_classes = 0;
    ModelParams params;
};

// Deep copy: the returned parameters share no storage with `model`.
Model clone_model(const Model& model);

// Allocates all parameters with the right shapes (zero-filled) after
// validating the configuration against the stack.
Model build_model(const ModelConfig& cfg, const FeatureLayout& layout, std::size_t num_classes);

// ---- forward ---------------------------------------------------------------------------

// x ∈ R^d. Numeric values pass through; each categorical block is
// multiplied into its table (exact row pick for a true one-hot row).
Tensor cel_forward(std::span<const double> record, const FeatureLayout& layout, const CelParams& params,
                   bool project);
// `count` records laid out back to back → [count × d].
Tensor cel_forward_batch(std::span<const double> records, std::size_t count, const FeatureLayout& layout,
                         const CelParams& params, bool project);

// L ∈ R^{3×M²}: the three affine channel maps stacked row-wise. For a batch
// x [N×d] the result is [3N × M²], three rows per record.
Tensor ctil_forward(const Tensor& x, const CtilParams& params);

// Continuous classifier input [N×3×M×M]: per-row min-max rescale to [0,255].
Tensor ctil_image(const Tensor& channels, const ModelConfig& cfg, const std::vector<RowRange>* pinned = nullptr);

// Logits, [m] for a 3×M×M image or [N×m] for a batch.
Tensor ccrl_forward(const Tensor& image, const CcrlParams& params, const std::vector<LayerSpec>& stack);

// Log-probabilities ŷ, [m] for one record, [count × m] for a batch. A
// record gets bitwise the same output alone or inside any batch.
Tensor model_forward(std::span<const double> record, const Model& model);
Tensor model_forward_batch(std::span<const double> records, std::size_t count, const Model& model);
std::size_t predict(std::span<const double> record, const Model& model);
std::size_t argmax(std::span<const double> values);

// ---- images -------------------------------------------------------------------------------

struct CorporateImage {
    std::size_t size = 0;               // M
    std::vector<std::uint8_t> pixels;   // 3 × M × M, channel-major

    std::uint8_t at(std::size_t channel, std::size_t row, std::size_t col) const {
        return pixels[(channel * size + row) * size + col];
    }
};

// Integer pixel strengths: round-half-away(255·(v−min)/(max−min)) per
// channel; a constant channel becomes all zeros.
CorporateImage quantize_image(const Tensor& channels);
std::vector<std::uint8_t> quantize_channel(std::span<const double> values);

CorporateImage render_image(std::span<const double> record, const Model& model);

// Binary PPM (P6), pixels interleaved r,g,b in row-major order.
std::string encode_ppm(const CorporateImage& image);
void write_ppm(const std::filesystem::path& path, const CorporateImage& image);

}  // namespace ccr
