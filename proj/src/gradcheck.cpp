#include "ccr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ccr/rng.hpp"
#include "ccr/training.hpp"

namespace ccr {

double GradcheckReport::max_rel_error() const {
    double worst = 0.0;
    for (const GradcheckGroup& g : groups) worst = std::max(worst, g.max_rel_error);
    return worst;
}

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

std::vector<GradcheckGroup> finite_difference_check(const std::function<Tensor()>& objective,
                                                    const std::vector<std::pair<std::string, Tensor>>& params,
                                                    double h) {
    for (auto [_, p] : params) p.zero_grad();
    objective().backward();

    std::vector<GradcheckGroup> out;
    NoGradGuard no_grad;
    for (auto [name, p] : params) {
        GradcheckGroup group{name, 0, 0.0};
        std::vector<double> analytic(p.numel(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = objective().item();
            values[i] = saved - h;
            const double down = objective().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            group.max_rel_error = std::max(group.max_rel_error, relative_error(analytic[i], numeric));
            ++group.checked;
        }
        out.push_back(std::move(group));
    }
    return out;
}

// ---- whole model -----------------------------------------------------------------

Model reduced_model(std::uint64_t seed) {
    FeatureSchema schema;
    schema.columns = {{"profit", ColumnKind::numeric, {}},
                      {"leverage", ColumnKind::numeric, {}},
                      {"tax_credit", ColumnKind::categorical, {"A", "B", "C"}},
                      {"growth", ColumnKind::numeric, {}}};
    schema.label_column = "rating";
    schema.classes = {"A", "B", "C"};

    using K = LayerSpec::Kind;
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.embed_dim = 4;
    cfg.cat_embed = 2;
    cfg.fc_hidden = 8;
    cfg.stack = {{K::conv, "C1", 3, 4, 1, 1},
                 {K::maxpool, "P2", 2, 0, 2, 0},
                 {K::conv, "C3", 3, 6, 2, 1},
                 {K::maxpool, "P4", 2, 0, 1, 0}};
    Model model = build_model(cfg, FeatureLayout::from_schema(schema), 3);
    init_params(model.params, seed, 0.1);
    return model;
}

GradcheckReport check_model_gradients(std::uint64_t seed, RescaleGrad mode, double h) {
    Model model = reduced_model(seed);
    model.config.rescale = mode;

    Rng rng(derive_seed(seed, 17));
    // one exact one-hot record (row pick) and one SMOTE-style fractional one
    const double mix = rng.uniform(0.2, 0.8);
    const std::vector<double> records{
        rng.uniform(), rng.uniform(), 0.0, 1.0, 0.0, rng.uniform(),
        rng.uniform(), rng.uniform(), mix, 0.0, 1.0 - mix, rng.uniform(),
    };
    const std::vector<std::size_t> labels{0, 2};
    constexpr double kLambda = 1e-3;

    const ModelParams& p = model.params;
    auto channels = [&] {
        return ctil_forward(cel_forward_batch(records, labels.size(), model.layout, p.cel, model.config.project),
                            p.ctil);
    };

    std::vector<RowRange> pinned;
    if (mode == RescaleGrad::straight_through) {
        NoGradGuard guard;
        pinned = row_ranges(channels());
    }

    bool pin = false;
    auto objective = [&]() {
        Tensor image = ctil_image(channels(), model.config, pin ? &pinned : nullptr);
        Tensor logp = log_softmax(ccrl_forward(image, p.ccrl, model.config.stack));
        return add(batch_loss(logp, labels, LossMode::nll), l2_penalty(p.named(), kLambda));
    };

    GradcheckReport report;
    report.suite = mode == RescaleGrad::exact ? "model/exact" : "model/straight_through";
    // analytic pass on the real (unpinned) path, numeric passes on the function it differentiates
    for (auto [_, t] : p.named()) t.zero_grad();
    objective().backward();
    std::vector<std::vector<double>> analytic;
    for (const auto& [_, t] : p.named()) analytic.emplace_back(t.grad().begin(), t.grad().end());
    pin = mode == RescaleGrad::straight_through;

    NoGradGuard no_grad;
    std::size_t k = 0;
    for (auto [name, t] : p.named()) {
        GradcheckGroup group{name, 0, 0.0};
        auto values = t.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = objective().item();
            values[i] = saved - h;
            const double down = objective().item();
            values[i] = saved;
            group.max_rel_error =
                std::max(group.max_rel_error, relative_error(analytic[k][i], (up - down) / (2.0 * h)));
            ++group.checked;
        }
        report.groups.push_back(std::move(group));
        ++k;
    }
    return report;
}

// ---- individual ops ----------------------------------------------------------------

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v), true);
}

void append(GradcheckReport& report, const std::string& prefix, const std::vector<GradcheckGroup>& groups) {
    for (GradcheckGroup g : groups) {
        g.name = prefix + "/" + g.name;
        report.groups.push_back(std::move(g));
    }
}

}  // namespace

GradcheckReport check_op_gradients(std::uint64_t seed, double h) {
    Rng rng(seed);
    GradcheckReport report;
    report.suite = "ops";

    {
        Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2}), v = random_tensor(rng, {4});
        append(report, "matmul", finite_difference_check([&] {
                   return add(sum_squares(matmul(a, b)), sum(mul(matmul(a, v), matmul(a, v))));
               }, {{"a", a}, {"b", b}, {"v", v}}, h));
    }
    {
        Tensor x = random_tensor(rng, {2, 5, 6}), k = random_tensor(rng, {3, 2, 3, 3}), b = random_tensor(rng, {3});
        Tensor w = random_tensor(rng, {3, 3, 3});
        append(report, "conv2d", finite_difference_check([&] {
                   return sum(mul(conv2d(x, k, b, 2, 1), w));
               }, {{"input", x}, {"kernel", k}, {"bias", b}}, h));
    }
    {
        Tensor x = random_tensor(rng, {2, 5, 5}), w = random_tensor(rng, {2, 2, 2});
        append(report, "maxpool2d", finite_difference_check([&] {
                   return sum(mul(maxpool2d(x, 3, 2), w));
               }, {{"input", x}}, h));
    }
    {
        Tensor x = random_tensor(rng, {2, 2, 5, 4}), k = random_tensor(rng, {3, 2, 2, 2}), b = random_tensor(rng, {3});
        Tensor w = random_tensor(rng, {2, 3, 2, 2});
        append(report, "conv2d_batched", finite_difference_check([&] {
                   return sum(mul(maxpool2d(conv2d(x, k, b, 1, 1), 3, 2), w));
               }, {{"input", x}, {"kernel", k}, {"bias", b}}, h));
    }
    {
        Tensor x = random_tensor(rng, {3, 4}), wt = random_tensor(rng, {5, 4}), b = random_tensor(rng, {5});
        Tensor v = random_tensor(rng, {4});
        const std::size_t cols[] = {4, 0, 2};
        append(report, "linear", finite_difference_check([&] {
                   Tensor rows = log_softmax(linear(x, wt, b));
                   return add(sum(pick(rows, cols)), sum_squares(linear(v, wt, b)));
               }, {{"x", x}, {"weight", wt}, {"bias", b}, {"v", v}}, h));
    }
    {
        Tensor z = random_tensor(rng, {5}, -3.0, 3.0), w = random_tensor(rng, {5});
        append(report, "log_softmax", finite_difference_check([&] {
                   return sum(mul(log_softmax(z), w));
               }, {{"z", z}}, h));
        Tensor a = random_tensor(rng, {4}, -4.0, -0.1);
        append(report, "log1m_exp", finite_difference_check([&] { return sum(log1m_exp(a)); }, {{"a", a}}, h));
    }
    {
        Tensor a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {1, 3}), t = random_tensor(rng, {4, 3});
        const std::size_t rows[] = {2, 0, 2};
        Tensor w = random_tensor(rng, {18});
        append(report, "structural", finite_difference_check([&] {
                   Tensor c = concat({a, b, row_select(t, rows)});
                   Tensor r = relu(sub(flatten(c), scale(w, 0.5)));
                   return add(sum(mul(reshape(r, {3, 6}), reshape(w, {3, 6}))), select(r, 5));
               }, {{"a", a}, {"b", b}, {"table", t}, {"w", w}}, h));
    }
    {
        Tensor l = random_tensor(rng, {3, 7}), w = random_tensor(rng, {3, 7});
        append(report, "minmax_exact", finite_difference_check([&] {
                   return sum(mul(minmax_rescale_rows(l, 255.0, RescaleGrad::exact), w));
               }, {{"rows", l}}, h));
    }
    return report;
}

}  // namespace ccr
