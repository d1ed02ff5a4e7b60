#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mendkit/eval_report.hpp"
#include "mendkit/rng.hpp"

using namespace mendkit;
namespace fs = std::filesystem;

namespace {

EvalRecord rec(const std::string& id, const std::string& cls, const std::string& method,
               double cd) {
    EvalRecord r;
    r.instance_id = id;
    r.class_name = cls;
    r.method = method;
    r.cd = cd;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("aggregate: single record, outlier pattern, invariance to order") {
    auto single = aggregate({rec("a", "mugs", "with-TTT", 0.5)});
    REQUIRE(single.size() == 1);
    CHECK(single[0].mean_cd == 0.5);
    CHECK(single[0].median_cd == 0.5);
    CHECK(single[0].count == 1);

    // {1,2,3,100}: mean 26.5, median 2.5, mean/median > 3 flags the group
    std::vector<EvalRecord> recs = {rec("a", "mugs", "baseline", 1.0),
                                    rec("b", "mugs", "baseline", 2.0),
                                    rec("c", "mugs", "baseline", 3.0),
                                    rec("d", "mugs", "baseline", 100.0)};
    auto stats = aggregate(recs);
    REQUIRE(stats.size() == 1);
    CHECK(stats[0].mean_cd == doctest::Approx(26.5).epsilon(1e-12));
    CHECK(stats[0].median_cd == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(stats[0].outlier_dominated);

    std::reverse(recs.begin(), recs.end());
    auto stats2 = aggregate(recs);
    CHECK(stats2[0].median_cd == stats[0].median_cd);
    CHECK(stats2[0].mean_cd == stats[0].mean_cd);

    CHECK_THROWS_AS(aggregate({rec("a", "mugs", "wild-method", 1.0)}), ParameterError);
}

TEST_CASE("aggregate: matches an independent recomputation") {
    CounterRng rng(5);
    std::vector<EvalRecord> recs;
    std::vector<double> raw;
    for (int i = 0; i < 37; ++i) {
        double cd = rng.uniform(0.0001, 0.02);
        raw.push_back(cd);
        recs.push_back(rec("i" + std::to_string(i), "boxes", "inference-only", cd));
    }
    auto stats = aggregate(recs);
    REQUIRE(stats.size() == 1);
    double sum = 0.0;
    for (double v : raw)
        sum += v;
    std::sort(raw.begin(), raw.end());
    CHECK(stats[0].mean_cd == doctest::Approx(sum / raw.size()).epsilon(1e-12));
    CHECK(stats[0].median_cd == doctest::Approx(raw[18]).epsilon(1e-12));
}

TEST_CASE("cumulative_curve: steps, bounds and the counting oracle") {
    auto flat = cumulative_curve({0.25, 0.25, 0.25}, 16);
    REQUIRE(flat.thresholds.size() == 1);
    CHECK(flat.thresholds[0] == 0.25);
    CHECK(flat.fractions[0] == 1.0);

    CounterRng rng(9);
    std::vector<double> cds;
    for (int i = 0; i < 101; ++i)
        cds.push_back(rng.uniform(1e-4, 0.2));
    auto curve = cumulative_curve(cds, 24);
    REQUIRE(curve.thresholds.size() == 24);
    CHECK(curve.fractions.back() == 1.0);
    for (std::size_t i = 0; i < curve.thresholds.size(); ++i) {
        if (i)
            CHECK(curve.fractions[i] >= curve.fractions[i - 1]);
        std::size_t count = 0;
        for (double v : cds)
            if (v <= curve.thresholds[i])
                ++count;
        CHECK(curve.fractions[i] ==
              doctest::Approx(static_cast<double>(count) / cds.size()).epsilon(1e-12));
    }
    CHECK_THROWS_AS(cumulative_curve({}, 8), ParameterError);
}

TEST_CASE("render_report: row counts, well-formed SVG, byte-identical re-render") {
    std::vector<EvalRecord> recs;
    CounterRng rng(11);
    for (const char* cls : {"boxes", "mugs"})
        for (const char* method : {"inference-only", "with-TTT"})
            for (int i = 0; i < 5; ++i) {
                EvalRecord r = rec(std::string(cls) + std::to_string(i), cls, method,
                                   rng.uniform(1e-4, 0.05));
                r.cd_restoration = rng.uniform(1e-4, 0.1);
                recs.push_back(r);
            }

    fs::path dir1 = fs::temp_directory_path() / "mendkit_report1";
    fs::path dir2 = fs::temp_directory_path() / "mendkit_report2";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    render_report(recs, dir1, 24);
    render_report(recs, dir2, 24);

    std::string csv = slurp(dir1 / "report.csv");
    std::size_t rows = std::count(csv.begin(), csv.end(), '\n') - 1; // minus header
    CHECK(rows == 2 * 2 * 2); // classes x methods x {mean, median}
    CHECK(csv == slurp(dir2 / "report.csv"));

    for (const char* cls : {"boxes", "mugs"}) {
        std::string svg = slurp(dir1 / ("curves_" + std::string(cls) + ".svg"));
        CHECK(svg == slurp(dir2 / ("curves_" + std::string(cls) + ".svg")));
        CHECK(svg.rfind("<?xml", 0) == 0);
        std::size_t polylines = 0;
        for (std::size_t pos = 0; (pos = svg.find("<polyline", pos)) != std::string::npos;
             ++pos)
            ++polylines;
        CHECK(polylines == 2); // one per method
        CHECK(svg.find("</svg>") != std::string::npos);
    }
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("write_records_csv and read_result_dir round trip through result files") {
    fs::path dir = fs::temp_directory_path() / "mendkit_results_rt";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "x1.json");
        out << R"({"id":"x1","class":"boxes","method":"with-TTT","cd_complete":0.001,)"
            << R"("cd_restoration":0.002,"wall_seconds":1.5})";
    }
    {
        std::ofstream out(dir / "x2.json");
        out << R"({"id":"x2","class":"boxes","method":"with-TTT","cd_complete":0.003})";
    }
    auto records = read_result_dir(dir);
    REQUIRE(records.size() == 2);
    CHECK(records[0].instance_id == "x1");
    CHECK(records[0].cd == 0.001);
    CHECK(records[1].cd_restoration == -1.0); // absent secondary column
    write_records_csv(records, dir / "records.csv");
    std::string csv = slurp(dir / "records.csv");
    CHECK(csv.find("x1,boxes,with-TTT,0.001,0.002,1.5") != std::string::npos);
    CHECK_THROWS_AS(read_result_dir(dir / "missing"), IoError);
    fs::remove_all(dir);
}
