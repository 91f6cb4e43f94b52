#pragma once

// Corporate record ingestion: CSV parsing, cleaning, min-max scaling,
// one-hot encoding, SMOTE balancing, stratified splitting and the binary
// dataset container.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccr {

enum class ColumnKind { numeric, categorical };

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::numeric;
    // Categorical only. Empty until fitted unless the schema file fixes it.
    std::vector<std::string> vocab;
};

// The nine agency grades, best to worst. Index order is the label encoding.
const std::vector<std::string>& rating_classes();

struct FeatureSchema {
    std::vector<ColumnSpec> columns;
    std::string label_column;
    std::vector<std::string> classes = rating_classes();

    // Throws SchemaError. With require_vocab, every categorical column must
    // carry a non-empty duplicate-free vocabulary.
    void validate(bool require_vocab) const;

    // Encoded row width: 1 per numeric column, |vocab| per categorical one.
    std::size_t width() const;
    std::size_t num_classes() const { return classes.size(); }
    std::size_t numeric_count() const;
    std::optional<std::size_t> class_index(std::string_view name) const;
};

FeatureSchema schema_from_json(const nlohmann::json& j);
FeatureSchema load_schema(const std::filesystem::path& path);
nlohmann::json schema_to_json(const FeatureSchema& schema);

struct NormRange {
    double min = 0.0;
    double max = 0.0;
};

struct RecordSet {
    FeatureSchema schema;
    std::vector<NormRange> norm_stats;  // one per numeric column, schema order
    std::vector<double> features;       // size() × width(), row-major
    std::vector<std::uint16_t> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t width() const { return schema.width(); }
    std::size_t num_classes() const { return schema.num_classes(); }
    std::span<const double> row(std::size_t i) const {
        return std::span<const double>(features).subspan(i * width(), width());
    }
    std::vector<std::size_t> class_counts() const;
    RecordSet subset(std::span<const std::size_t> rows) const;
};

// ---- CSV --------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

// RFC 4180: quoted fields may hold commas, CR/LF and doubled quotes.
CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);

// ---- cleaning / encoding --------------------------------------------------

struct CleanRow {
    std::vector<double> numeric;           // numeric columns, schema order
    std::vector<std::string> categorical;  // categorical columns, schema order
    std::uint16_t label = 0;
};

struct CleanTable {
    std::vector<CleanRow> rows;
    std::size_t dropped = 0;
};

// Checks the header against the schema, then drops rows with a missing or
// unparseable cell, an unknown label, or (for fixed vocabularies) an
// unknown category. Throws SchemaError on header mismatch.
CleanTable clean(const CsvTable& table, const FeatureSchema& schema);

// Fills missing vocabularies with the sorted distinct observed values.
FeatureSchema fit_vocab(const CleanTable& table, FeatureSchema schema);
std::vector<NormRange> fit_norm(const CleanTable& table, const FeatureSchema& schema);

// Applies scaling and one-hot encoding with the given (frozen) statistics.
RecordSet encode(const CleanTable& table, const FeatureSchema& schema, std::vector<NormRange> stats);

struct IngestResult {
    RecordSet records;
    std::size_t dropped = 0;
};

// Reads, cleans, fits vocabularies and norm stats, encodes.
// Throws DataError when no usable rows remain.
IngestResult ingest_csv(const std::filesystem::path& path, const FeatureSchema& schema);

// Same, but reuses the schema and norm stats of an already-fitted set.
IngestResult ingest_csv_frozen(const std::filesystem::path& path, const RecordSet& fitted);

// ---- SMOTE -----------------------------------------------------------------

struct SmoteReport {
    std::vector<std::size_t> before;
    std::vector<std::size_t> after;
    std::size_t k_requested = 0;
    std::vector<std::size_t> k_used;  // per class; 0 for classes left untouched
    bool capped = false;              // some class had fewer than k+1 samples
};

// Oversamples every present class up to the majority count by interpolating
// between a sample and one of its k nearest same-class neighbours.
// Originals come first, unchanged; synthetic rows follow grouped by class.
// Absent classes stay absent. Throws AugmentationError for a class with a
// single sample.
RecordSet smote(const RecordSet& rs, std::size_t k, std::uint64_t seed, SmoteReport* report = nullptr);

// ---- split -----------------------------------------------------------------

struct Split {
    RecordSet train;
    RecordSet test;
};

// Stratified split; per-class test quotas are apportioned by largest
// remainder so the total test size is round(n·fraction). Rows keep their
// original relative order within each part.
Split split(const RecordSet& rs, double test_fraction, std::uint64_t seed);

// ---- container ------------------------------------------------------------

std::string encode_dataset(const RecordSet& rs);
RecordSet decode_dataset(std::string_view bytes);
void save_dataset(const std::filesystem::path& path, const RecordSet& rs);
RecordSet load_dataset(const std::filesystem::path& path);

}  // namespace ccr
