#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mendkit/common.hpp"

namespace mendkit {

struct EvalRecord {
    std::string instance_id;
    std::string class_name;
    std::string method; // inference-only | with-TTT | baseline
    double cd = 0.0;    // complete-shape CD, unit-cube scale
    double cd_restoration = -1.0; // secondary column, < 0 means absent
    double wall_seconds = 0.0;
};

bool is_known_method(const std::string& method);

struct MethodStats {
    std::string class_name;
    std::string method;
    std::size_t count = 0;
    double mean_cd = 0.0;
    double median_cd = 0.0;
    double mean_cd_restoration = -1.0;
    double median_cd_restoration = -1.0;
    bool outlier_dominated = false; // mean/median > 3
};

// Per (class, method): exact mean and midpoint-rule median, plus the
// outlier-domination flag. Order of records does not matter.
std::vector<MethodStats> aggregate(const std::vector<EvalRecord>& records,
                                   std::ostream* warn = nullptr);

struct CumulativeCurve {
    std::vector<double> thresholds; // ascending
    std::vector<double> fractions;  // fraction of records with cd <= threshold
};

// Log-spaced thresholds between min and max CD; fractions are inclusive.
CumulativeCurve cumulative_curve(const std::vector<double>& cds, std::size_t n_thresholds);

// Parse every *.json result file in a directory.
std::vector<EvalRecord> read_result_dir(const std::filesystem::path& dir);

// report.csv (one row per class x method x statistic, CDs scaled x1e4) and
// one curves_<class>.svg per class with a log-x polyline per method.
// Byte-deterministic for fixed inputs.
void render_report(const std::vector<EvalRecord>& records,
                   const std::filesystem::path& out_dir, std::size_t n_thresholds = 48,
                   std::ostream* warn = nullptr);

// Merge records into a flat CSV (one row per record).
void write_records_csv(const std::vector<EvalRecord>& records,
                       const std::filesystem::path& path);

} // namespace mendkit
