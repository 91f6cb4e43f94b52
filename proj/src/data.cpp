#include "ccr/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>

#include "ccr/binary_io.hpp"
#include "ccr/errors.hpp"
#include "ccr/rng.hpp"

namespace ccr {

using nlohmann::json;

const std::vector<std::string>& rating_classes() {
    static const std::vector<std::string> kClasses{"AAA", "AA", "A", "BBB", "BB", "B", "CCC", "CC", "C"};
    return kClasses;
}

// ---- schema -------------------------------------------------------------------

void FeatureSchema::validate(bool require_vocab) const {
    if (columns.empty()) throw SchemaError("schema has no feature columns");
    if (label_column.empty()) throw SchemaError("schema has no label column");
    std::set<std::string> names;
    for (const ColumnSpec& c : columns) {
        if (c.name.empty()) throw SchemaError("schema column with empty name");
        if (!names.insert(c.name).second) throw SchemaError("duplicate column name '" + c.name + "'");
        if (c.kind == ColumnKind::numeric && !c.vocab.empty())
            throw SchemaError("numeric column '" + c.name + "' cannot have a vocabulary");
        if (c.kind == ColumnKind::categorical) {
            if (require_vocab && c.vocab.empty())
                throw SchemaError("categorical column '" + c.name + "' has an empty vocabulary");
            std::set<std::string> seen(c.vocab.begin(), c.vocab.end());
            if (seen.size() != c.vocab.size())
                throw SchemaError("categorical column '" + c.name + "' has duplicate vocabulary entries");
        }
    }
    if (names.count(label_column)) throw SchemaError("label column '" + label_column + "' is also a feature");
    if (classes.empty()) throw SchemaError("schema has no classes");
    if (classes.size() > 65535) throw SchemaError("too many classes");
    std::set<std::string> cls(classes.begin(), classes.end());
    if (cls.size() != classes.size()) throw SchemaError("duplicate class names");
}

std::size_t FeatureSchema::width() const {
    std::size_t w = 0;
    for (const ColumnSpec& c : columns) w += c.kind == ColumnKind::numeric ? 1 : c.vocab.size();
    return w;
}

std::size_t FeatureSchema::numeric_count() const {
    return static_cast<std::size_t>(
        std::count_if(columns.begin(), columns.end(), [](const ColumnSpec& c) { return c.kind == ColumnKind::numeric; }));
}

std::optional<std::size_t> FeatureSchema::class_index(std::string_view name) const {
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (classes[i] == name) return i;
    return std::nullopt;
}

FeatureSchema schema_from_json(const json& j) {
    try {
        if (!j.is_object()) throw SchemaError("schema must be a JSON object");
        for (const auto& [key, _] : j.items())
            if (key != "columns" && key != "label" && key != "classes")
                throw SchemaError("unknown schema key '" + key + "'");
        FeatureSchema s;
        for (const json& c : j.at("columns")) {
            ColumnSpec col;
            for (const auto& [key, _] : c.items())
                if (key != "name" && key != "kind" && key != "vocab")
                    throw SchemaError("unknown column key '" + key + "'");
            col.name = c.at("name").get<std::string>();
            const std::string kind = c.at("kind").get<std::string>();
            if (kind == "numeric")
                col.kind = ColumnKind::numeric;
            else if (kind == "categorical")
                col.kind = ColumnKind::categorical;
            else
                throw SchemaError("column '" + col.name + "' has unknown kind '" + kind + "'");
            if (c.contains("vocab")) col.vocab = c.at("vocab").get<std::vector<std::string>>();
            s.columns.push_back(std::move(col));
        }
        s.label_column = j.at("label").get<std::string>();
        if (j.contains("classes")) s.classes = j.at("classes").get<std::vector<std::string>>();
        s.validate(false);
        return s;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("malformed schema: ") + e.what());
    }
}

FeatureSchema load_schema(const std::filesystem::path& path) {
    const std::string text = io::read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaError("schema " + path.string() + " is not valid JSON: " + e.what());
    }
    return schema_from_json(j);
}

json schema_to_json(const FeatureSchema& schema) {
    json cols = json::array();
    for (const ColumnSpec& c : schema.columns) {
        json col{{"name", c.name}, {"kind", c.kind == ColumnKind::numeric ? "numeric" : "categorical"}};
        if (c.kind == ColumnKind::categorical) col["vocab"] = c.vocab;
        cols.push_back(std::move(col));
    }
    return json{{"columns", std::move(cols)}, {"label", schema.label_column}, {"classes", schema.classes}};
}

// ---- RecordSet --------------------------------------------------------------------

std::vector<std::size_t> RecordSet::class_counts() const {
    std::vector<std::size_t> counts(num_classes(), 0);
    for (std::uint16_t y : labels) ++counts[y];
    return counts;
}

RecordSet RecordSet::subset(std::span<const std::size_t> rows) const {
    RecordSet out;
    out.schema = schema;
    out.norm_stats = norm_stats;
    out.features.reserve(rows.size() * width());
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) {
        auto src = row(r);
        out.features.insert(out.features.end(), src.begin(), src.end());
        out.labels.push_back(labels[r]);
    }
    return out;
}

// ---- CSV ---------------------------------------------------------------------------

CsvTable parse_csv(std::string_view text) {
    if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);

    std::vector<std::vector<std::string>> records;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    auto end_field = [&] {
        record.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_record = [&] {
        end_field();
        // a bare empty line is not a record
        if (!(record.size() == 1 && record[0].empty())) records.push_back(std::move(record));
        record.clear();
    };

    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (in_quotes) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(ch);
            }
            continue;
        }
        switch (ch) {
            case '"':
                if (!field_started && field.empty())
                    in_quotes = true;
                else
                    field.push_back(ch);
                field_started = true;
                break;
            case ',': end_field(); break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
                end_record();
                break;
            case '\n': end_record(); break;
            default:
                field.push_back(ch);
                field_started = true;
        }
    }
    if (in_quotes) throw DataError("CSV ends inside a quoted field");
    if (field_started || !field.empty() || !record.empty()) end_record();

    CsvTable table;
    if (records.empty()) return table;
    table.header = std::move(records.front());
    table.rows.assign(std::make_move_iterator(records.begin() + 1), std::make_move_iterator(records.end()));
    return table;
}

CsvTable read_csv(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
    return parse_csv(io::read_file(path));
}

// ---- cleaning ----------------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
}

std::optional<double> parse_number(std::string_view s) {
    s = trim(s);
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

}  // namespace

CleanTable clean(const CsvTable& table, const FeatureSchema& schema) {
    schema.validate(false);

    std::map<std::string, std::size_t> position;
    for (std::size_t i = 0; i < table.header.size(); ++i) position[std::string(trim(table.header[i]))] = i;

    std::vector<std::string> missing, unexpected;
    std::set<std::string> wanted{schema.label_column};
    for (const ColumnSpec& c : schema.columns) wanted.insert(c.name);
    for (const std::string& w : wanted)
        if (!position.count(w)) missing.push_back(w);
    for (const auto& [name, _] : position)
        if (!wanted.count(name)) unexpected.push_back(name);
    if (position.size() != table.header.size()) unexpected.push_back("(duplicate header names)");
    if (!missing.empty() || !unexpected.empty()) {
        std::string msg = "CSV header does not match schema;";
        if (!missing.empty()) {
            msg += " missing:";
            for (const auto& m : missing) msg += " " + m;
        }
        if (!unexpected.empty()) {
            msg += missing.empty() ? " unexpected:" : "; unexpected:";
            for (const auto& u : unexpected) msg += " " + u;
        }
        throw SchemaError(msg);
    }

    const std::size_t label_at = position.at(schema.label_column);
    CleanTable out;
    for (const auto& cells : table.rows) {
        if (cells.size() != table.header.size()) {
            ++out.dropped;
            continue;
        }
        CleanRow row;
        bool ok = true;
        for (const ColumnSpec& c : schema.columns) {
            const std::string_view cell = trim(cells[position.at(c.name)]);
            if (c.kind == ColumnKind::numeric) {
                auto v = parse_number(cell);
                if (!v) {
                    ok = false;
                    break;
                }
                row.numeric.push_back(*v);
            } else {
                if (cell.empty() ||
                    (!c.vocab.empty() && std::find(c.vocab.begin(), c.vocab.end(), cell) == c.vocab.end())) {
                    ok = false;
                    break;
                }
                row.categorical.emplace_back(cell);
            }
        }
        if (ok) {
            auto y = schema.class_index(trim(cells[label_at]));
            if (!y) ok = false;
            else row.label = static_cast<std::uint16_t>(*y);
        }
        if (!ok) {
            ++out.dropped;
            continue;
        }
        out.rows.push_back(std::move(row));
    }
    return out;
}

FeatureSchema fit_vocab(const CleanTable& table, FeatureSchema schema) {
    std::size_t cat = 0;
    for (ColumnSpec& c : schema.columns) {
        if (c.kind != ColumnKind::categorical) continue;
        if (c.vocab.empty()) {
            std::set<std::string> seen;
            for (const CleanRow& r : table.rows) seen.insert(r.categorical[cat]);
            c.vocab.assign(seen.begin(), seen.end());
        }
        ++cat;
    }
    return schema;
}

std::vector<NormRange> fit_norm(const CleanTable& table, const FeatureSchema& schema) {
    const std::size_t count = schema.numeric_count();
    std::vector<NormRange> stats(count);
    if (table.rows.empty()) return stats;
    for (std::size_t k = 0; k < count; ++k) {
        double lo = table.rows[0].numeric[k], hi = lo;
        for (const CleanRow& r : table.rows) {
            lo = std::min(lo, r.numeric[k]);
            hi = std::max(hi, r.numeric[k]);
        }
        stats[k] = {lo, hi};
    }
    return stats;
}

RecordSet encode(const CleanTable& table, const FeatureSchema& schema, std::vector<NormRange> stats) {
    schema.validate(true);
    if (stats.size() != schema.numeric_count())
        throw SchemaError("norm stats cover " + std::to_string(stats.size()) + " columns, schema has " +
                          std::to_string(schema.numeric_count()) + " numeric columns");
    RecordSet rs;
    rs.schema = schema;
    rs.norm_stats = std::move(stats);
    const std::size_t width = schema.width();
    rs.features.reserve(table.rows.size() * width);
    rs.labels.reserve(table.rows.size());
    for (const CleanRow& r : table.rows) {
        std::size_t num = 0, cat = 0;
        for (const ColumnSpec& c : schema.columns) {
            if (c.kind == ColumnKind::numeric) {
                const NormRange& nr = rs.norm_stats[num];
                const double span = nr.max - nr.min;
                rs.features.push_back(span > 0.0 ? (r.numeric[num] - nr.min) / span : 0.0);
                ++num;
            } else {
                const std::string& value = r.categorical[cat++];
                for (const std::string& v : c.vocab) rs.features.push_back(v == value ? 1.0 : 0.0);
            }
        }
        rs.labels.push_back(r.label);
    }
    return rs;
}

IngestResult ingest_csv(const std::filesystem::path& path, const FeatureSchema& schema) {
    CleanTable table = clean(read_csv(path), schema);
    if (table.rows.empty()) throw DataError("no usable rows in " + path.string());
    FeatureSchema fitted = fit_vocab(table, schema);
    auto stats = fit_norm(table, fitted);
    return {encode(table, fitted, std::move(stats)), table.dropped};
}

IngestResult ingest_csv_frozen(const std::filesystem::path& path, const RecordSet& fitted) {
    CleanTable table = clean(read_csv(path), fitted.schema);
    if (table.rows.empty()) throw DataError("no usable rows in " + path.string());
    return {encode(table, fitted.schema, fitted.norm_stats), table.dropped};
}

// ---- split ---------------------------------------------------------------------------

Split split(const RecordSet& rs, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw ConfigError("test fraction must lie in (0,1), got " + std::to_string(test_fraction));
    const std::size_t n = rs.size();
    const std::size_t m = rs.num_classes();
    std::vector<std::vector<std::size_t>> members(m);
    for (std::size_t i = 0; i < n; ++i) members[rs.labels[i]].push_back(i);

    // largest-remainder apportionment of round(n·f) test rows
    const auto total = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
    std::vector<std::size_t> quota(m);
    std::vector<std::pair<double, std::size_t>> remainder;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < m; ++c) {
        const double exact = static_cast<double>(members[c].size()) * test_fraction;
        quota[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += quota[c];
        if (quota[c] < members[c].size()) remainder.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(remainder.begin(), remainder.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < total && r < remainder.size(); ++r, ++assigned) ++quota[remainder[r].second];

    Rng rng(seed);
    std::vector<char> is_test(n, 0);
    for (std::size_t c = 0; c < m; ++c) {
        std::vector<std::size_t> pool = members[c];
        rng.shuffle(std::span<std::size_t>(pool));
        for (std::size_t q = 0; q < quota[c]; ++q) is_test[pool[q]] = 1;
    }
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t i = 0; i < n; ++i) (is_test[i] ? test_rows : train_rows).push_back(i);
    if (train_rows.empty() || test_rows.empty())
        throw ConfigError("split of " + std::to_string(n) + " rows at fraction " + std::to_string(test_fraction) +
                          " leaves an empty part");
    return {rs.subset(train_rows), rs.subset(test_rows)};
}

// ---- container ------------------------------------------------------------------------

namespace {
constexpr std::string_view kDatasetMagic = "CCRD";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

std::string encode_dataset(const RecordSet& rs) {
    io::Writer w;
    w.bytes(kDatasetMagic);
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(rs.size()));
    w.u32(static_cast<std::uint32_t>(rs.width()));
    w.u32(static_cast<std::uint32_t>(rs.num_classes()));
    w.f64s(rs.features);
    for (std::uint16_t y : rs.labels) w.u16(y);
    json meta = schema_to_json(rs.schema);
    json stats = json::array();
    for (const NormRange& r : rs.norm_stats) stats.push_back({r.min, r.max});
    meta["norm_stats"] = std::move(stats);
    w.str(meta.dump());
    return w.take();
}

RecordSet decode_dataset(std::string_view bytes) {
    io::Reader r(bytes, "dataset container");
    if (r.bytes(4) != kDatasetMagic) throw FormatError("dataset container: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kDatasetVersion)
        throw FormatError("dataset container: unsupported version " + std::to_string(version));
    const std::uint32_t n = r.u32(), p = r.u32(), m = r.u32();
    if (static_cast<std::uint64_t>(n) * p * 8 > r.remaining())
        throw FormatError("dataset container: truncated feature block");
    RecordSet rs;
    rs.features.resize(static_cast<std::size_t>(n) * p);
    for (double& v : rs.features) v = r.f64();
    rs.labels.resize(n);
    for (auto& y : rs.labels) y = r.u16();
    const std::string meta_text = r.str();
    r.expect_end();
    try {
        json meta = json::parse(meta_text);
        json stats = meta.at("norm_stats");
        meta.erase("norm_stats");
        rs.schema = schema_from_json(meta);
        for (const json& s : stats) rs.norm_stats.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
    } catch (const json::exception& e) {
        throw FormatError(std::string("dataset container: bad schema block: ") + e.what());
    }
    rs.schema.validate(true);
    if (rs.schema.width() != p || rs.schema.num_classes() != m || rs.norm_stats.size() != rs.schema.numeric_count())
        throw FormatError("dataset container: header disagrees with embedded schema");
    for (std::uint16_t y : rs.labels)
        if (y >= m) throw FormatError("dataset container: label index " + std::to_string(y) + " out of range");
    return rs;
}

void save_dataset(const std::filesystem::path& path, const RecordSet& rs) {
    io::write_file_atomic(path, encode_dataset(rs));
}

RecordSet load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

}  // namespace ccr
