// ccrcnn: preprocess, balance, split, train, evaluate, render, gradcheck.
// Machine-readable results go to stdout as JSON, tables and notes to stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "ccr/binary_io.hpp"
#include "ccr/data.hpp"
#include "ccr/errors.hpp"
#include "ccr/gradcheck.hpp"
#include "ccr/model.hpp"
#include "ccr/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ccr;

namespace {

constexpr int kExitIo = 1;
constexpr int kExitInput = 2;
constexpr int kExitGradcheck = 3;

void emit(const json& j) { std::cout << j.dump() << std::endl; }

json histogram_json(const FeatureSchema& schema, const std::vector<std::size_t>& counts) {
    json out = json::object();
    for (std::size_t c = 0; c < counts.size(); ++c) out[schema.classes[c]] = counts[c];
    return out;
}

void print_histogram(const char* title, const FeatureSchema& schema, const std::vector<std::size_t>& counts) {
    std::fprintf(stderr, "%s\n", title);
    std::size_t peak = 1;
    for (std::size_t v : counts) peak = std::max(peak, v);
    for (std::size_t c = 0; c < counts.size(); ++c) {
        const int bar = static_cast<int>(40 * counts[c] / peak);
        std::fprintf(stderr, "  %-5s %7zu %s\n", schema.classes[c].c_str(), counts[c], std::string(bar, '#').c_str());
    }
}

// Inputs must exist and output directories must be reachable before any work.
void require_file(const fs::path& p, const char* what) {
    if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

void require_out_dir(const fs::path& p) {
    const fs::path parent = p.has_parent_path() ? p.parent_path() : fs::path(".");
    if (!fs::is_directory(parent)) throw IoError("output directory does not exist: " + parent.string());
}

json dataset_summary(const RecordSet& rs, std::size_t dropped) {
    return json{{"n", rs.size()}, {"p", rs.width()}, {"dropped", dropped},
                {"histogram", histogram_json(rs.schema, rs.class_counts())}};
}

// ---- commands ---------------------------------------------------------------------------

struct PrepArgs {
    std::string csv, schema, out, test_csv, test_out;
};

int cmd_prep(const PrepArgs& a) {
    require_file(a.csv, "CSV");
    require_file(a.schema, "schema");
    require_out_dir(a.out);
    if (a.test_csv.empty() != a.test_out.empty()) throw ConfigError("--test-csv and --test-out go together");
    if (!a.test_csv.empty()) {
        require_file(a.test_csv, "test CSV");
        require_out_dir(a.test_out);
    }

    const IngestResult train = ingest_csv(a.csv, load_schema(a.schema));
    json out = dataset_summary(train.records, train.dropped);
    std::fprintf(stderr, "%s: n=%zu p=%zu dropped=%zu\n", a.csv.c_str(), train.records.size(), train.records.width(),
                 train.dropped);
    print_histogram("class histogram", train.records.schema, train.records.class_counts());

    // a held-out file is encoded with the statistics fitted above
    std::optional<IngestResult> test;
    if (!a.test_csv.empty()) {
        test = ingest_csv_frozen(a.test_csv, train.records);
        out["test"] = dataset_summary(test->records, test->dropped);
        std::fprintf(stderr, "%s: n=%zu dropped=%zu\n", a.test_csv.c_str(), test->records.size(), test->dropped);
    }
    save_dataset(a.out, train.records);
    if (test) save_dataset(a.test_out, test->records);
    emit(out);
    return 0;
}

int cmd_smote(const std::string& in, const std::string& out, std::size_t k, std::uint64_t seed) {
    require_file(in, "dataset");
    require_out_dir(out);
    const RecordSet rs = load_dataset(in);
    SmoteReport report;
    const RecordSet balanced = smote(rs, k, seed, &report);
    if (report.capped) {
        std::fprintf(stderr, "warning: k=%zu exceeds some class size - 1; capped per class:", k);
        for (std::size_t c = 0; c < report.k_used.size(); ++c)
            if (report.before[c] > 0) std::fprintf(stderr, " %s=%zu", rs.schema.classes[c].c_str(), report.k_used[c]);
        std::fprintf(stderr, "\n");
    }
    print_histogram("before SMOTE", rs.schema, report.before);
    print_histogram("after SMOTE", rs.schema, report.after);
    save_dataset(out, balanced);
    emit(json{{"n_before", rs.size()},
              {"n_after", balanced.size()},
              {"k", k},
              {"k_used", report.k_used},
              {"before", histogram_json(rs.schema, report.before)},
              {"after", histogram_json(rs.schema, report.after)}});
    return 0;
}

int cmd_split(const std::string& in, const std::string& train_out, const std::string& test_out, double fraction,
              std::uint64_t seed) {
    require_file(in, "dataset");
    require_out_dir(train_out);
    require_out_dir(test_out);
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("--test-fraction must lie in (0, 1)");
    const Split s = split(load_dataset(in), fraction, seed);
    save_dataset(train_out, s.train);
    save_dataset(test_out, s.test);
    std::fprintf(stderr, "train %zu, test %zu\n", s.train.size(), s.test.size());
    emit(json{{"train", dataset_summary(s.train, 0)}, {"test", dataset_summary(s.test, 0)}});
    return 0;
}

TrainConfig read_train_config(const std::string& path) {
    require_file(path, "config");
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return train_config_from_json(j);
}

int cmd_train(const std::string& data_path, const std::string& config_path, const std::string& out,
              const std::string& resume) {
    require_file(data_path, "dataset");
    require_out_dir(out);
    if (!resume.empty()) require_file(resume, "checkpoint");
    const RecordSet data = load_dataset(data_path);

    std::optional<Trainer> trainer;
    if (resume.empty()) {
        trainer.emplace(data, read_train_config(config_path));
    } else {
        Checkpoint ck = load_checkpoint(resume);
        // only the epoch budget may change on resume
        if (!config_path.empty()) {
            const TrainConfig cfg = read_train_config(config_path);
            TrainConfig same = ck.train_config;
            same.epochs = cfg.epochs;
            if (train_config_to_json(same) != train_config_to_json(cfg))
                throw ConfigError("--config differs from the checkpoint's configuration beyond \"epochs\"");
            ck.train_config.epochs = cfg.epochs;
        }
        trainer.emplace(Trainer::resume(data, std::move(ck)));
    }

    const fs::path log_path = out + ".log.jsonl";
    std::string log_text;
    if (!resume.empty() && fs::exists(resume + ".log.jsonl")) log_text = io::read_file(resume + ".log.jsonl");

    const TrainConfig& cfg = trainer->config();
    std::fprintf(stderr, "training on %zu records, %zu epochs from epoch %zu\n", data.size(), cfg.epochs,
                 trainer->epochs_completed());
    std::fprintf(stderr, "%6s %10s %14s %10s\n", "epoch", "lr", "loss", "train_acc");
    while (trainer->epochs_completed() < cfg.epochs) {
        const EpochLog e = trainer->run_epoch();
        log_text += e.to_json().dump() + "\n";
        std::fprintf(stderr, "%6zu %10.3g %14.6g %10.4f\n", e.epoch, e.lr, e.loss, e.train_acc);
        // checkpoint and log stay consistent at every epoch boundary
        save_checkpoint(out, trainer->checkpoint());
        io::write_file_atomic(log_path, log_text);
    }
    if (trainer->epochs_completed() == 0 || !fs::exists(out)) {
        save_checkpoint(out, trainer->checkpoint());
        io::write_file_atomic(log_path, log_text);
    }
    emit(json{{"checkpoint", out},
              {"log", log_path.string()},
              {"epochs_completed", trainer->epochs_completed()},
              {"parameters", trainer->model().params.count()}});
    return 0;
}

void check_compatible(const Checkpoint& ck, const RecordSet& data) {
    if (schema_to_json(ck.schema) != schema_to_json(data.schema))
        throw SchemaError("dataset schema differs from the one the checkpoint was trained on");
}

int cmd_eval(const std::string& ckpt, const std::string& data_path) {
    require_file(ckpt, "checkpoint");
    require_file(data_path, "dataset");
    const Checkpoint ck = load_checkpoint(ckpt);
    const RecordSet data = load_dataset(data_path);
    check_compatible(ck, data);
    const Metrics m = evaluate(ck.model, data);

    std::fprintf(stderr, "%-10s %10s %10s %10s\n", "Model", "Accuracy", "Recall", "F1");
    std::fprintf(stderr, "%-10s %10.4f %10.4f %10.4f\n", "CCR-CNN", m.accuracy, m.macro_recall, m.macro_f1);
    std::fprintf(stderr, "\nconfusion (rows true, columns predicted)\n%6s", "");
    for (const std::string& c : data.schema.classes) std::fprintf(stderr, " %5s", c.c_str());
    std::fprintf(stderr, "\n");
    for (std::size_t t = 0; t < m.confusion.size(); ++t) {
        std::fprintf(stderr, "%6s", data.schema.classes[t].c_str());
        for (std::size_t v : m.confusion[t]) std::fprintf(stderr, " %5zu", v);
        std::fprintf(stderr, "\n");
    }
    emit(metrics_to_json(m));
    return 0;
}

int cmd_render(const std::string& ckpt, const std::string& data_path, const std::string& outdir, std::size_t limit) {
    require_file(ckpt, "checkpoint");
    require_file(data_path, "dataset");
    const Checkpoint ck = load_checkpoint(ckpt);
    const RecordSet data = load_dataset(data_path);
    check_compatible(ck, data);
    fs::create_directories(outdir);

    const std::size_t count = std::min(limit, data.size());
    json files = json::array();
    NoGradGuard guard;
    for (std::size_t i = 0; i < count; ++i) {
        const fs::path path =
            fs::path(outdir) / (std::to_string(i) + "_" + data.schema.classes[data.labels[i]] + ".ppm");
        write_ppm(path, render_image(data.row(i), ck.model));
        files.push_back(path.string());
    }
    std::fprintf(stderr, "wrote %zu images of %zux%zu to %s\n", count, ck.model.config.image_size,
                 ck.model.config.image_size, outdir.c_str());
    emit(json{{"files", files}});
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    const GradcheckReport reports[] = {check_op_gradients(seed), check_model_gradients(seed, RescaleGrad::exact),
                                       check_model_gradients(seed, RescaleGrad::straight_through)};
    bool ok = true;
    json out = json::object();
    for (const GradcheckReport& r : reports) {
        std::fprintf(stderr, "%s\n", r.suite.c_str());
        json groups = json::object();
        for (const GradcheckGroup& g : r.groups) {
            const bool pass = g.max_rel_error < r.tolerance;
            std::fprintf(stderr, "  %-4s %-28s %6zu  %.3e\n", pass ? "ok" : "FAIL", g.name.c_str(), g.checked,
                         g.max_rel_error);
            groups[g.name] = g.max_rel_error;
        }
        ok = ok && r.passed();
        out[r.suite] = json{{"passed", r.passed()}, {"max_rel_error", r.max_rel_error()}, {"groups", groups}};
    }
    out["passed"] = ok;
    out["tolerance"] = reports[0].tolerance;
    emit(out);
    return ok ? 0 : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CCR-CNN corporate credit rating"};
    app.require_subcommand(1);

    PrepArgs prep;
    auto* c_prep = app.add_subcommand("prep", "clean, normalize and encode a CSV into a dataset container");
    c_prep->add_option("--csv", prep.csv, "input CSV")->required();
    c_prep->add_option("--schema", prep.schema, "feature schema JSON")->required();
    c_prep->add_option("--out", prep.out, "output container")->required();
    c_prep->add_option("--test-csv", prep.test_csv, "held-out CSV encoded with the fitted statistics");
    c_prep->add_option("--test-out", prep.test_out, "container for --test-csv");

    std::string in, out, data, config, ckpt, outdir, resume, train_out, test_out;
    std::size_t k = 5, limit = 8;
    std::uint64_t seed = 0;
    double fraction = 0.2;

    auto* c_smote = app.add_subcommand("smote", "oversample minority classes to the majority count");
    c_smote->add_option("--in", in, "input container")->required();
    c_smote->add_option("--out", out, "output container")->required();
    c_smote->add_option("--k", k, "nearest neighbours")->capture_default_str()->check(CLI::PositiveNumber);
    c_smote->add_option("--seed", seed, "random seed")->capture_default_str();

    auto* c_split = app.add_subcommand("split", "stratified train/test split");
    c_split->add_option("--in", in, "input container")->required();
    c_split->add_option("--train-out", train_out, "train container")->required();
    c_split->add_option("--test-out", test_out, "test container")->required();
    c_split->add_option("--test-fraction", fraction, "share of rows held out")->capture_default_str();
    c_split->add_option("--seed", seed, "random seed")->capture_default_str();

    auto* c_train = app.add_subcommand("train", "train and write a checkpoint plus <out>.log.jsonl");
    c_train->add_option("--data", data, "training container")->required();
    c_train->add_option("--config", config, "training config JSON");
    c_train->add_option("--out", out, "checkpoint path")->required();
    c_train->add_option("--resume", resume, "continue from this checkpoint");

    auto* c_eval = app.add_subcommand("eval", "accuracy, macro recall and macro F1 on a container");
    c_eval->add_option("--ckpt", ckpt, "checkpoint")->required();
    c_eval->add_option("--data", data, "evaluation container")->required();

    auto* c_render = app.add_subcommand("render", "write corporate images as PPM files");
    c_render->add_option("--ckpt", ckpt, "checkpoint")->required();
    c_render->add_option("--data", data, "container")->required();
    c_render->add_option("--outdir", outdir, "output directory")->required();
    c_render->add_option("--limit", limit, "number of records, from the first")->capture_default_str();

    auto* c_grad = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
    c_grad->add_option("--seed", seed, "random seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitInput;
    }

    try {
        if (*c_prep) return cmd_prep(prep);
        if (*c_smote) return cmd_smote(in, out, k, seed);
        if (*c_split) return cmd_split(in, train_out, test_out, fraction, seed);
        if (*c_train) {
            if (config.empty() && resume.empty()) throw ConfigError("train needs --config (or --resume)");
            return cmd_train(data, config, out, resume);
        }
        if (*c_eval) return cmd_eval(ckpt, data);
        if (*c_render) return cmd_render(ckpt, data, outdir, limit);
        if (*c_grad) return cmd_gradcheck(seed);
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInput;
    }
    return kExitInput;
}
