#include "doctest.h"

#include <algorithm>
#include <cstring>
#include <set>

#include "ccr/data.hpp"
#include "ccr/errors.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using namespace ccr;

namespace {

FeatureSchema two_column_schema() {
    FeatureSchema s;
    s.columns = {{"revenue", ColumnKind::numeric, {}}, {"sector", ColumnKind::categorical, {}}};
    s.label_column = "rating";
    return s;
}

RecordSet labelled(std::size_t classes, const std::vector<std::size_t>& labels, std::size_t width = 2) {
    RecordSet rs;
    for (std::size_t j = 0; j < width; ++j) rs.schema.columns.push_back({"f" + std::to_string(j), ColumnKind::numeric, {}});
    rs.schema.label_column = "y";
    rs.schema.classes.clear();
    for (std::size_t c = 0; c < classes; ++c) rs.schema.classes.push_back("c" + std::to_string(c));
    rs.norm_stats.assign(width, {0.0, 1.0});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = 0; j < width; ++j) rs.features.push_back(double(i) + 0.1 * double(j));
        rs.labels.push_back(static_cast<std::uint16_t>(labels[i]));
    }
    return rs;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("csv quoting, line endings and BOM") {
    const CsvTable t = parse_csv("\xEF\xBB\xBF" "a,b,c\r\n\"x,1\",\"say \"\"hi\"\"\",\"two\nlines\"\n\n3,,5");
    REQUIRE(t.header == std::vector<std::string>{"a", "b", "c"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0] == std::vector<std::string>{"x,1", "say \"hi\"", "two\nlines"});
    CHECK(t.rows[1] == std::vector<std::string>{"3", "", "5"});
    CHECK_THROWS_AS(parse_csv("a,b\n\"open,1\n"), DataError);
}

TEST_CASE("rows with a missing cell are dropped and counted") {
    ScratchDir dir("data");
    const auto csv = dir.write("in.csv", "revenue,sector,rating\n10,X,AA\n,Y,A\n30,Y,A\n");
    const IngestResult r = ingest_csv(csv, two_column_schema());
    CHECK(r.records.size() == 2);
    CHECK(r.dropped == 1);
    CHECK(r.records.labels == std::vector<std::uint16_t>{1, 2});
}

TEST_CASE("unparseable numbers, unknown labels and short rows are dropped") {
    FeatureSchema s = two_column_schema();
    s.columns[1].vocab = {"X", "Y"};
    const CsvTable t = parse_csv("revenue,sector,rating\n1,X,AA\nabc,X,AA\n2,X,ZZZ\n3,Z,AA\n4,X\n5,Y,C\n");
    const CleanTable c = clean(t, s);
    CHECK(c.rows.size() == 2);
    CHECK(c.dropped == 4);
}

TEST_CASE("min-max scaling and one-hot blocks") {
    ScratchDir dir("data");
    FeatureSchema s = two_column_schema();
    s.columns[1].vocab = {"X", "Y"};
    const auto csv = dir.write("in.csv", "rating,sector,revenue\nA,X,10\nA,Y,20\nBBB,Y,30\n");
    const RecordSet rs = ingest_csv(csv, s).records;
    REQUIRE(rs.width() == 3);
    CHECK(rs.features == std::vector<double>{0.0, 1.0, 0.0, 0.5, 0.0, 1.0, 1.0, 0.0, 1.0});
    CHECK(rs.norm_stats[0].min == 10.0);
    CHECK(rs.norm_stats[0].max == 30.0);
}

TEST_CASE("fitted vocabularies are the sorted distinct values") {
    const CleanTable c = clean(parse_csv("revenue,sector,rating\n1,Mining,AA\n2,Banks,AA\n3,Mining,B\n"), two_column_schema());
    const FeatureSchema fitted = fit_vocab(c, two_column_schema());
    CHECK(fitted.columns[1].vocab == std::vector<std::string>{"Banks", "Mining"});
}

TEST_CASE("scaling with stored stats reproduces the fitted matrix bitwise") {
    const synth::Table t = synth::corporate({.seed = 3, .counts = {40, 30, 20}, .numeric = 6});
    const RecordSet rs = synth::encode(t);
    const CleanTable c = clean(parse_csv(t.csv), rs.schema);
    const RecordSet again = encode(c, rs.schema, rs.norm_stats);
    REQUIRE(again.features.size() == rs.features.size());
    CHECK(std::memcmp(again.features.data(), rs.features.data(), rs.features.size() * sizeof(double)) == 0);
    for (double v : rs.features) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    // each one-hot block has exactly one 1
    const std::size_t p = rs.width(), vocab = rs.schema.columns.back().vocab.size();
    for (std::size_t i = 0; i < rs.size(); ++i) {
        const auto row = rs.row(i);
        CHECK(std::count(row.end() - long(vocab), row.end(), 1.0) == 1);
        CHECK(row.size() == p);
    }
}

TEST_CASE("header mismatch names the offending columns") {
    ScratchDir dir("data");
    const auto csv = dir.write("in.csv", "revenue,sectr,rating\n1,X,AA\n");
    try {
        ingest_csv(csv, two_column_schema());
        FAIL("expected SchemaError");
    } catch (const SchemaError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("sector") != std::string::npos);
        CHECK(msg.find("sectr") != std::string::npos);
    }
}

TEST_CASE("nothing usable after cleaning") {
    ScratchDir dir("data");
    const auto csv = dir.write("in.csv", "revenue,sector,rating\n,X,AA\nq,Y,B\n");
    CHECK_THROWS_WITH_AS(ingest_csv(csv, two_column_schema()), doctest::Contains("no usable rows"), DataError);
    CHECK_THROWS_AS(ingest_csv(dir / "absent.csv", two_column_schema()), IoError);
}

TEST_CASE("schema files") {
    const auto j = nlohmann::json::parse(R"({"columns":[{"name":"a","kind":"numeric"},
        {"name":"t","kind":"categorical","vocab":["u","v"]}],"label":"y"})");
    const FeatureSchema s = schema_from_json(j);
    CHECK(s.width() == 3);
    CHECK(s.num_classes() == 9);
    CHECK(s.class_index("AAA") == 0u);
    CHECK(s.class_index("C") == 8u);
    CHECK(schema_from_json(schema_to_json(s)).columns[1].vocab == std::vector<std::string>{"u", "v"});

    auto bad = j;
    bad["extra"] = 1;
    CHECK_THROWS_AS(schema_from_json(bad), SchemaError);
    bad = j;
    bad["columns"][0]["units"] = "yuan";
    CHECK_THROWS_AS(schema_from_json(bad), SchemaError);
    bad = j;
    bad["columns"][0]["kind"] = "text";
    CHECK_THROWS_AS(schema_from_json(bad), SchemaError);
    bad = j;
    bad["label"] = "a";
    CHECK_THROWS_AS(schema_from_json(bad), SchemaError);
    bad = j;
    bad["columns"][1]["name"] = "a";
    CHECK_THROWS_AS(schema_from_json(bad), SchemaError);
    bad = j;
    bad["columns"][1]["vocab"] = {"u", "u"};
    CHECK_THROWS_AS(schema_from_json(bad), SchemaError);
    CHECK_THROWS_AS(schema_from_json(nlohmann::json::array()), SchemaError);
}

TEST_CASE("split sizes and determinism") {
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 100; ++i) labels.push_back(i % 3);
    const RecordSet rs = labelled(3, labels);
    const Split a = split(rs, 0.2, 11);
    CHECK(a.train.size() == 80);
    CHECK(a.test.size() == 20);
    const Split b = split(rs, 0.2, 11);
    CHECK(a.train.features == b.train.features);
    CHECK(a.test.features == b.test.features);

    // disjoint and complete: the first feature is the source row index
    std::set<double> seen;
    for (const RecordSet* part : {&a.train, &a.test})
        for (std::size_t i = 0; i < part->size(); ++i) CHECK(seen.insert(part->row(i)[0]).second);
    CHECK(seen.size() == 100);

    CHECK_THROWS_AS(split(rs, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(split(rs, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(split(labelled(1, {0}), 0.5, 1), ConfigError);
}

TEST_CASE("split is stratified") {
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 200; ++i) labels.push_back((i * 7) % 10);
    const RecordSet rs = labelled(10, labels);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto counts = split(rs, 0.2, seed).test.class_counts();
        for (std::size_t c : counts) {
            CHECK(c >= 3);
            CHECK(c <= 5);
        }
    }
}

TEST_CASE("dataset container round trip") {
    const RecordSet rs = synth::encode(synth::corporate({.seed = 5, .counts = {12, 9, 7}, .numeric = 4}));
    const std::string bytes = encode_dataset(rs);
    CHECK(bytes.substr(0, 4) == "CCRD");
    const RecordSet back = decode_dataset(bytes);
    CHECK(encode_dataset(back) == bytes);
    CHECK(back.labels == rs.labels);
    CHECK(std::memcmp(back.features.data(), rs.features.data(), rs.features.size() * sizeof(double)) == 0);

    ScratchDir dir("data");
    save_dataset(dir / "d.ccrd", rs);
    CHECK(slurp(dir / "d.ccrd") == bytes);
    CHECK(encode_dataset(load_dataset(dir / "d.ccrd")) == bytes);

    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_dataset(bad), FormatError);
    for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1})
        CHECK_THROWS_AS(decode_dataset(std::string_view(bytes).substr(0, cut)), FormatError);
    CHECK_THROWS_AS(decode_dataset(bytes + "x"), FormatError);
}

}  // TEST_SUITE
