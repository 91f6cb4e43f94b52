#include "ccr/training.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ccr/errors.hpp"

namespace ccr {

using nlohmann::json;

// ---- config ---------------------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
    if (lr_decay < 0.0) throw ConfigError("lr_decay must be non-negative");
    if (decay_every == 0) throw ConfigError("decay_every must be positive");
    if (l2_lambda < 0.0) throw ConfigError("l2_lambda must be non-negative");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
    if (image_size == 0 || embed_dim == 0 || cat_embed == 0 || fc_hidden == 0)
        throw ConfigError("image_size, embed_dim, cat_embed and fc_hidden must be positive");
    flatten_width(image_size, stack);  // throws ConfigError for an unusable stack
}

ModelConfig TrainConfig::model_config() const {
    ModelConfig m;
    m.image_size = image_size;
    m.embed_dim = embed_dim;
    m.cat_embed = cat_embed;
    m.fc_hidden = fc_hidden;
    m.stack = stack;
    m.rescale = rescale;
    m.quantize_train_path = quantize_train_path;
    return m;
}

namespace {

const std::set<std::string>& train_keys() {
    static const std::set<std::string> keys{
        "epochs",  "batch_size", "lr0",      "lr_decay",  "decay_every",         "l2_lambda",
        "image_size", "embed_dim", "cat_embed", "fc_hidden", "seed",               "init_std",
        "loss_mode",  "quantize_train_path", "rescale_grad", "stack"};
    return keys;
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("training config must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!train_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
    TrainConfig c;
    try {
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr0 = j.value("lr0", c.lr0);
        c.lr_decay = j.value("lr_decay", c.lr_decay);
        c.decay_every = j.value("decay_every", c.decay_every);
        c.l2_lambda = j.value("l2_lambda", c.l2_lambda);
        c.image_size = j.value("image_size", c.image_size);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.cat_embed = j.value("cat_embed", c.cat_embed);
        c.fc_hidden = j.value("fc_hidden", c.fc_hidden);
        c.seed = j.value("seed", c.seed);
        c.init_std = j.value("init_std", c.init_std);
        c.quantize_train_path = j.value("quantize_train_path", c.quantize_train_path);
        if (j.contains("loss_mode")) {
            const std::string mode = j.at("loss_mode").get<std::string>();
            if (mode == "nll")
                c.loss_mode = LossMode::nll;
            else if (mode == "literal_bce")
                c.loss_mode = LossMode::literal_bce;
            else
                throw ConfigError("loss_mode must be \"nll\" or \"literal_bce\", got \"" + mode + "\"");
        }
        if (j.contains("rescale_grad")) {
            const std::string mode = j.at("rescale_grad").get<std::string>();
            if (mode == "straight_through")
                c.rescale = RescaleGrad::straight_through;
            else if (mode == "exact")
                c.rescale = RescaleGrad::exact;
            else
                throw ConfigError("rescale_grad must be \"straight_through\" or \"exact\", got \"" + mode + "\"");
        }
        if (j.contains("stack")) {
            ModelConfig probe;
            json mj = model_config_to_json(probe);
            mj["stack"] = j.at("stack");
            c.stack = model_config_from_json(mj).stack;
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad training config: ") + e.what());
    }
    c.validate();
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    json mj = model_config_to_json(c.model_config());
    return json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"lr0", c.lr0},
                {"lr_decay", c.lr_decay},
                {"decay_every", c.decay_every},
                {"l2_lambda", c.l2_lambda},
                {"image_size", c.image_size},
                {"embed_dim", c.embed_dim},
                {"cat_embed", c.cat_embed},
                {"fc_hidden", c.fc_hidden},
                {"seed", c.seed},
                {"init_std", c.init_std},
                {"loss_mode", c.loss_mode == LossMode::nll ? "nll" : "literal_bce"},
                {"quantize_train_path", c.quantize_train_path},
                {"rescale_grad", c.rescale == RescaleGrad::exact ? "exact" : "straight_through"},
                {"stack", mj.at("stack")}};
}

double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg) {
    const double steps = static_cast<double>(epoch / cfg.decay_every);
    return std::max(cfg.lr0 - cfg.lr_decay * steps, kMinLearningRate);
}

// ---- init / Adam --------------------------------------------------------------------

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : s) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

Tensor xavier_init(const Shape& shape, std::uint64_t seed, double std) {
    if (shape.empty()) throw DimensionError("xavier_init: empty shape");
    Rng rng(seed);
    const double a = std::sqrt(3.0) * std;
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng.uniform(-a, a);
    return Tensor::from(shape, std::move(values), true);
}

void init_params(ModelParams& params, std::uint64_t seed, double std) {
    for (auto& [name, t] : params.named()) {
        Tensor fresh = xavier_init(t.shape(), derive_seed(seed, fnv1a(name)), std);
        std::copy(fresh.data().begin(), fresh.data().end(), t.mutable_data().begin());
    }
}

void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr) {
    if (!(lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (auto [name, param] : params) {
        auto theta = param.mutable_data();
        auto grad = param.grad();
        if (!grad.empty() && grad.size() != theta.size())
            throw DimensionError("adam_step: gradient of " + name + " has the wrong size");
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(theta.size(), 0.0);
        if (v.empty()) v.assign(theta.size(), 0.0);
        if (m.size() != theta.size() || v.size() != theta.size())
            throw DimensionError("adam_step: optimizer state of " + name + " does not match its parameter");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = grad.empty() ? 0.0 : grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

// ---- loss ---------------------------------------------------------------------------------

Tensor sample_loss(const Tensor& log_probs, std::size_t label, LossMode mode) {
    if (label >= log_probs.numel())
        throw DataError("label " + std::to_string(label) + " outside " + std::to_string(log_probs.numel()) +
                        " classes");
    Tensor picked = select(log_probs, label);
    if (mode == LossMode::nll) return scale(picked, -1.0);
    std::vector<double> others(log_probs.numel(), 1.0);
    others[label] = 0.0;
    Tensor rest = sum(mul(log1m_exp(log_probs), Tensor::from(log_probs.shape(), std::move(others))));
    return scale(add(picked, rest), -1.0);
}

Tensor batch_loss(const Tensor& log_probs, std::span<const std::size_t> labels, LossMode mode) {
    if (log_probs.rank() != 2 || log_probs.dim(0) != labels.size() || labels.empty())
        throw DimensionError("batch_loss: " + std::to_string(labels.size()) + " labels for " +
                             shape_str(log_probs.shape()));
    const std::size_t n = labels.size(), m = log_probs.dim(1);
    for (std::size_t label : labels)
        if (label >= m) throw DataError("label " + std::to_string(label) + " outside " + std::to_string(m) + " classes");
    Tensor total = sum(pick(log_probs, labels));
    if (mode == LossMode::literal_bce) {
        std::vector<double> others(n * m, 1.0);
        for (std::size_t r = 0; r < n; ++r) others[r * m + labels[r]] = 0.0;
        total = add(total, sum(mul(log1m_exp(log_probs), Tensor::from({n, m}, std::move(others)))));
    }
    return scale(total, -1.0 / static_cast<double>(n));
}

Tensor l2_penalty(const std::vector<std::pair<std::string, Tensor>>& params, double lambda) {
    std::vector<Tensor> terms;
    for (const auto& [name, t] : params)
        if (!is_bias_name(name)) terms.push_back(sum_squares(t));
    if (terms.empty()) return Tensor::scalar(0.0);
    Tensor total = terms.size() == 1 ? terms.front() : sum(concat(terms));
    return scale(total, lambda);
}

Tensor loss(const Tensor& log_probs, std::size_t label, const ModelParams& params, double lambda, LossMode mode) {
    return add(sample_loss(log_probs, label, mode), l2_penalty(params.named(), lambda));
}

// ---- metrics --------------------------------------------------------------------------------

Metrics metrics_from_confusion(std::vector<std::vector<std::size_t>> confusion) {
    Metrics out;
    const std::size_t m = confusion.size();
    std::size_t total = 0, correct = 0;
    std::vector<std::size_t> predicted(m, 0);
    for (std::size_t t = 0; t < m; ++t) {
        if (confusion[t].size() != m) throw DimensionError("confusion matrix must be square");
        for (std::size_t p = 0; p < m; ++p) {
            total += confusion[t][p];
            predicted[p] += confusion[t][p];
        }
        correct += confusion[t][t];
    }
    out.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    double recall_sum = 0.0, f1_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < m; ++c) {
        std::size_t support = 0;
        for (std::size_t p = 0; p < m; ++p) support += confusion[c][p];
        if (support == 0) continue;
        ++present;
        const double tp = static_cast<double>(confusion[c][c]);
        const double recall = tp / static_cast<double>(support);
        const double precision = predicted[c] ? tp / static_cast<double>(predicted[c]) : 0.0;
        recall_sum += recall;
        f1_sum += (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    if (present) {
        out.macro_recall = recall_sum / static_cast<double>(present);
        out.macro_f1 = f1_sum / static_cast<double>(present);
    }
    out.confusion = std::move(confusion);
    return out;
}

Metrics score_predictions(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                          std::size_t num_classes) {
    if (labels.size() != predictions.size()) throw DimensionError("labels and predictions differ in length");
    std::vector<std::vector<std::size_t>> confusion(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes || predictions[i] >= num_classes)
            throw DataError("class index outside " + std::to_string(num_classes) + " classes");
        ++confusion[labels[i]][predictions[i]];
    }
    return metrics_from_confusion(std::move(confusion));
}

std::vector<std::size_t> predict_all(const Model& model, const RecordSet& rs) {
    constexpr std::size_t kChunk = 64;
    NoGradGuard guard;
    std::vector<std::size_t> out;
    out.reserve(rs.size());
    const std::size_t width = rs.width();
    for (std::size_t start = 0; start < rs.size(); start += kChunk) {
        const std::size_t count = std::min(kChunk, rs.size() - start);
        Tensor log_probs = model_forward_batch(std::span<const double>(rs.features).subspan(start * width, count * width),
                                               count, model);
        for (std::size_t r = 0; r < count; ++r) out.push_back(argmax(log_probs.data().subspan(r * model.num_classes, model.num_classes)));
    }
    return out;
}

Metrics evaluate(const Model& model, const RecordSet& test_set) {
    if (test_set.size() == 0) throw DataError("evaluation set is empty");
    if (test_set.num_classes() != model.num_classes)
        throw DataError("evaluation set has " + std::to_string(test_set.num_classes()) + " classes, model has " +
                        std::to_string(model.num_classes));
    const auto predictions = predict_all(model, test_set);
    std::vector<std::size_t> labels(test_set.labels.begin(), test_set.labels.end());
    return score_predictions(labels, predictions, model.num_classes);
}

json metrics_to_json(const Metrics& m) {
    return json{{"accuracy", m.accuracy}, {"recall", m.macro_recall}, {"f1", m.macro_f1}, {"confusion", m.confusion}};
}

// ---- trainer ----------------------------------------------------------------------------------

json EpochLog::to_json() const {
    return json{{"epoch", epoch}, {"lr", lr}, {"loss", loss}, {"train_acc", train_acc}};
}

namespace {

Model model_for(const RecordSet& data, const TrainConfig& cfg) {
    if (data.size() == 0) throw DataError("training set is empty");
    cfg.validate();
    return build_model(cfg.model_config(), FeatureLayout::from_schema(data.schema), data.num_classes());
}

}  // namespace

Trainer::Trainer(const RecordSet& train_set, TrainConfig cfg) : Trainer(train_set, cfg, model_for(train_set, cfg)) {
    init_params(model_.params, derive_seed(cfg_.seed, 1), cfg_.init_std);
}

Trainer::Trainer(const RecordSet& train_set, TrainConfig cfg, Model model)
    : data_(&train_set), cfg_(std::move(cfg)), model_(std::move(model)), rng_(derive_seed(cfg_.seed, 2)) {}

Trainer Trainer::resume(const RecordSet& train_set, Checkpoint ck) {
    if (train_set.size() == 0) throw DataError("training set is empty");
    if (FeatureLayout::from_schema(train_set.schema).width != ck.model.layout.width ||
        train_set.num_classes() != ck.model.num_classes)
        throw DataError("training data does not match the checkpoint's schema");
    Trainer t(train_set, ck.train_config, std::move(ck.model));
    t.adam_ = std::move(ck.adam);
    t.rng_.set_state(ck.rng_state);
    t.epochs_done_ = ck.epochs_completed;
    return t;
}

EpochLog Trainer::run_epoch() {
    const RecordSet& data = *data_;
    const std::size_t n = data.size();
    EpochLog log;
    log.epoch = epochs_done_;
    log.lr = lr_at_epoch(epochs_done_, cfg_);

    const auto order = rng_.permutation(n);
    const auto named = model_.params.named();
    double loss_sum = 0.0;
    std::size_t batches = 0, correct = 0;
    const std::size_t m = model_.num_classes;
    std::vector<double> rows;
    std::vector<std::size_t> labels;
    for (std::size_t start = 0; start < n; start += cfg_.batch_size) {
        const std::size_t count = std::min(cfg_.batch_size, n - start);
        rows.clear();
        labels.clear();
        for (std::size_t b = 0; b < count; ++b) {
            const std::size_t row = order[start + b];
            rows.insert(rows.end(), data.row(row).begin(), data.row(row).end());
            labels.push_back(data.labels[row]);
        }
        for (auto [_, t] : named) t.zero_grad();
        Tensor log_probs = model_forward_batch(rows, count, model_);
        for (std::size_t b = 0; b < count; ++b)
            if (argmax(log_probs.data().subspan(b * m, m)) == labels[b]) ++correct;
        Tensor objective = batch_loss(log_probs, labels, cfg_.loss_mode);
        if (cfg_.l2_lambda > 0.0) objective = add(objective, l2_penalty(named, cfg_.l2_lambda));
        loss_sum += objective.item();
        objective.backward();
        adam_step(named, adam_, log.lr);
        ++batches;
    }
    log.loss = loss_sum / static_cast<double>(batches);
    log.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    ++epochs_done_;
    return log;
}

std::vector<EpochLog> Trainer::run() {
    std::vector<EpochLog> logs;
    while (epochs_done_ < cfg_.epochs) logs.push_back(run_epoch());
    return logs;
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint ck;
    ck.train_config = cfg_;
    ck.schema = data_->schema;
    ck.epochs_completed = epochs_done_;
    ck.model = clone_model(model_);
    ck.adam = adam_;
    ck.rng_state = rng_.state();
    return ck;
}

TrainResult train(const RecordSet& train_set, const TrainConfig& cfg) {
    Trainer trainer(train_set, cfg);
    auto log = trainer.run();
    return {clone_model(trainer.model()), trainer.optimizer(), std::move(log)};
}

}  // namespace ccr
