#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccr/data.hpp"
#include "ccr/model.hpp"
#include "ccr/rng.hpp"
#include "ccr/tensor.hpp"

namespace ccr {

enum class LossMode {
    nll,           // −ŷ_y
    literal_bce,   // −Σ_i [y_i ln p_i + (1−y_i) ln(1−p_i)], p = exp(ŷ)
};

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr0 = 0.001;
    double lr_decay = 0.0001;
    std::size_t decay_every = 3;
    double l2_lambda = 0.00001;
    std::size_t image_size = 64;
    std::size_t embed_dim = 64;
    std::size_t cat_embed = 4;
    std::size_t fc_hidden = 512;
    std::uint64_t seed = 0;
    double init_std = 0.1;
    LossMode loss_mode = LossMode::nll;
    bool quantize_train_path = false;
    RescaleGrad rescale = RescaleGrad::straight_through;
    std::vector<LayerSpec> stack = alexnet_stack();

    void validate() const;
    ModelConfig model_config() const;
};

constexpr double kMinLearningRate = 1e-6;

// Rejects unknown keys; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);

// Subtractive step schedule: max(lr0 − decay·floor(epoch/every), 1e-6).
double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg);

// ---- init / optimizer ----------------------------------------------------------

// i.i.d. Uniform(−√3·std, √3·std): mean 0, standard deviation `std`.
Tensor xavier_init(const Shape& shape, std::uint64_t seed, double std = 0.1);

// Fills every parameter in name order from one seeded stream.
void init_params(ModelParams& params, std::uint64_t seed, double std);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

// One bias-corrected Adam update over all named parameters, using their
// accumulated grads. Parameters without a grad are treated as g = 0.
void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr);

// ---- loss -------------------------------------------------------------------------

// Data term for one record, from log-probabilities.
Tensor sample_loss(const Tensor& log_probs, std::size_t label, LossMode mode);

// Mean data term over a batch of log-probabilities [N×m].
Tensor batch_loss(const Tensor& log_probs, std::span<const std::size_t> labels, LossMode mode);

// λ·Σ‖W‖² over weight tensors (names not ending in ".bias").
Tensor l2_penalty(const std::vector<std::pair<std::string, Tensor>>& params, double lambda);

// Full single-record objective: data term + L2 penalty.
Tensor loss(const Tensor& log_probs, std::size_t label, const ModelParams& params, double lambda,
            LossMode mode = LossMode::nll);

// ---- metrics ----------------------------------------------------------------------

struct Metrics {
    double accuracy = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

// Confusion matrix of (label, prediction) pairs, then accuracy, macro
// recall and macro F1. Classes with no true samples are left out of both
// macro means.
Metrics metrics_from_confusion(std::vector<std::vector<std::size_t>> confusion);
Metrics score_predictions(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                          std::size_t num_classes);

std::vector<std::size_t> predict_all(const Model& model, const RecordSet& rs);
Metrics evaluate(const Model& model, const RecordSet& test_set);

nlohmann::json metrics_to_json(const Metrics& m);

// ---- training loop ------------------------------------------------------------

struct EpochLog {
    std::size_t epoch = 0;  // 0-based, the argument given to lr_at_epoch
    double lr = 0.0;
    double loss = 0.0;       // mean over batches of (mean data loss + penalty)
    double train_acc = 0.0;  // fraction of records predicted right during the epoch

    nlohmann::json to_json() const;
};

struct Checkpoint;

class Trainer {
public:
    // Builds the model for this data and initialises parameters from cfg.seed.
    Trainer(const RecordSet& train_set, TrainConfig cfg);

    static Trainer resume(const RecordSet& train_set, Checkpoint checkpoint);

    EpochLog run_epoch();
    // Runs the remaining epochs up to cfg.epochs.
    std::vector<EpochLog> run();

    std::size_t epochs_completed() const { return epochs_done_; }
    const Model& model() const { return model_; }
    const AdamState& optimizer() const { return adam_; }
    const TrainConfig& config() const { return cfg_; }
    const Rng& rng() const { return rng_; }

    Checkpoint checkpoint() const;

private:
    Trainer(const RecordSet& train_set, TrainConfig cfg, Model model);

    const RecordSet* data_;
    TrainConfig cfg_;
    Model model_;
    AdamState adam_;
    Rng rng_;
    std::size_t epochs_done_ = 0;
};

struct TrainResult {
    Model model;
    AdamState optimizer;
    std::vector<EpochLog> log;
};

TrainResult train(const RecordSet& train_set, const TrainConfig& cfg);

// ---- checkpoints -------------------------------------------------------------------

struct Checkpoint {
    TrainConfig train_config;
    FeatureSchema schema;  // fitted schema the model was built for
    std::size_t epochs_completed = 0;
    Model model;
    AdamState adam;
    std::uint64_t rng_state = 0;
};

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ccr
