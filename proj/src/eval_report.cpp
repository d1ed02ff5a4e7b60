#include "mendkit/eval_report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include <json.hpp>

namespace mendkit {

using nlohmann::json;

bool is_known_method(const std::string& method) {
    return method == "inference-only" || method == "with-TTT" || method == "baseline";
}

namespace {

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    if (n % 2 == 1)
        return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

} // namespace

std::vector<MethodStats> aggregate(const std::vector<EvalRecord>& records,
                                   std::ostream* warn) {
    std::map<std::pair<std::string, std::string>, std::vector<const EvalRecord*>> groups;
    for (const auto& r : records) {
        if (!is_known_method(r.method))
            throw ParameterError("aggregate: unknown method tag '" + r.method + "'");
        if (r.cd < 0.0)
            throw ParameterError("aggregate: negative CD for instance " + r.instance_id);
        groups[{r.class_name, r.method}].push_back(&r);
    }
    // warn about method tags that are missing for some class but present in others
    std::set<std::string> all_methods;
    for (const auto& [key, g] : groups)
        all_methods.insert(key.second);
    std::set<std::string> all_classes;
    for (const auto& [key, g] : groups)
        all_classes.insert(key.first);
    if (warn) {
        for (const auto& cls : all_classes)
            for (const auto& m : all_methods)
                if (!groups.count({cls, m}))
                    *warn << "warning: no records for class '" << cls << "' method '" << m
                          << "'; group omitted\n";
    }

    std::vector<MethodStats> stats;
    for (const auto& [key, g] : groups) {
        MethodStats s;
        s.class_name = key.first;
        s.method = key.second;
        s.count = g.size();
        std::vector<double> cds, rcds;
        for (const EvalRecord* r : g) {
            cds.push_back(r->cd);
            if (r->cd_restoration >= 0.0)
                rcds.push_back(r->cd_restoration);
        }
        double sum = 0.0;
        for (double v : cds)
            sum += v;
        s.mean_cd = sum / static_cast<double>(cds.size());
        s.median_cd = median_of(cds);
        if (!rcds.empty()) {
            double rs = 0.0;
            for (double v : rcds)
                rs += v;
            s.mean_cd_restoration = rs / static_cast<double>(rcds.size());
            s.median_cd_restoration = median_of(rcds);
        }
        s.outlier_dominated = s.median_cd > 0.0 && s.mean_cd / s.median_cd > 3.0;
        stats.push_back(std::move(s));
    }
    return stats;
}

CumulativeCurve cumulative_curve(const std::vector<double>& cds, std::size_t n_thresholds) {
    if (cds.empty())
        throw ParameterError("cumulative_curve: no records");
    if (n_thresholds < 1)
        throw ParameterError("cumulative_curve: need at least one threshold");
    double lo = *std::min_element(cds.begin(), cds.end());
    double hi = *std::max_element(cds.begin(), cds.end());
    lo = std::max(lo, 1e-12);
    hi = std::max(hi, lo);
    CumulativeCurve curve;
    if (lo == hi || n_thresholds == 1) {
        curve.thresholds = {hi};
        curve.fractions = {1.0};
        return curve;
    }
    double log_lo = std::log(lo), log_hi = std::log(hi);
    for (std::size_t i = 0; i < n_thresholds; ++i) {
        double t = std::exp(log_lo + (log_hi - log_lo) * static_cast<double>(i) /
                                         static_cast<double>(n_thresholds - 1));
        std::size_t covered = 0;
        for (double v : cds)
            if (v <= t)
                ++covered;
        curve.thresholds.push_back(t);
        curve.fractions.push_back(static_cast<double>(covered) /
                                  static_cast<double>(cds.size()));
    }
    curve.fractions.back() = 1.0; // max threshold covers everything
    return curve;
}

std::vector<EvalRecord> read_result_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
        throw IoError("read_result_dir: " + dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".json" &&
            entry.path().filename().string().front() != '.')
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::vector<EvalRecord> records;
    for (const auto& f : files) {
        std::ifstream in(f);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw IoError("read_result_dir: invalid JSON in " + f.string() + ": " + e.what());
        }
        EvalRecord r;
        r.instance_id = j.at("id").get<std::string>();
        r.class_name = j.at("class").get<std::string>();
        r.method = j.at("method").get<std::string>();
        r.cd = j.at("cd_complete").get<double>();
        r.cd_restoration = j.value("cd_restoration", -1.0);
        r.wall_seconds = j.value("wall_seconds", 0.0);
        records.push_back(std::move(r));
    }
    return records;
}

void write_records_csv(const std::vector<EvalRecord>& records,
                       const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("write_records_csv: cannot open " + path.string());
    out << "instance,class,method,cd,cd_restoration,wall_seconds\n";
    for (const auto& r : records)
        out << r.instance_id << ',' << r.class_name << ',' << r.method << ',' << fmt(r.cd)
            << ',' << fmt(r.cd_restoration) << ',' << fmt(r.wall_seconds) << "\n";
}

namespace {

const char* method_color(const std::string& method) {
    if (method == "with-TTT")
        return "#d62728";
    if (method == "inference-only")
        return "#1f77b4";
    return "#2ca02c";
}

void write_class_svg(const std::filesystem::path& path, const std::string& class_name,
                     const std::map<std::string, std::vector<double>>& by_method,
                     std::size_t n_thresholds) {
    const double width = 640, height = 420;
    const double ml = 70, mr = 20, mt = 34, mb = 50;
    double lo = 1e300, hi = -1e300;
    for (const auto& [m, cds] : by_method) {
        for (double v : cds) {
            lo = std::min(lo, std::max(v, 1e-12));
            hi = std::max(hi, std::max(v, 1e-12));
        }
    }
    if (hi <= lo)
        hi = lo * 10.0;
    double log_lo = std::log10(lo), log_hi = std::log10(hi);

    auto x_of = [&](double cd) {
        double t = (std::log10(std::max(cd, 1e-12)) - log_lo) / (log_hi - log_lo);
        return ml + t * (width - ml - mr);
    };
    auto y_of = [&](double frac) { return height - mb - frac * (height - mt - mb); };

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("render_report: cannot open " + path.string());
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "  <rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    out << "  <text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"14\">cumulative CD, " << class_name
        << " (log x, higher is better)</text>\n";
    // axes
    out << "  <line x1=\"" << ml << "\" y1=\"" << (height - mb) << "\" x2=\"" << (width - mr)
        << "\" y2=\"" << (height - mb) << "\" stroke=\"black\"/>\n";
    out << "  <line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << (height - mb) << "\" stroke=\"black\"/>\n";
    int li = 0;
    for (const auto& [method, cds] : by_method) {
        CumulativeCurve curve = cumulative_curve(cds, n_thresholds);
        out << "  <polyline fill=\"none\" stroke=\"" << method_color(method)
            << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < curve.thresholds.size(); ++i) {
            if (i)
                out << ' ';
            out << fmt(x_of(curve.thresholds[i])) << ',' << fmt(y_of(curve.fractions[i]));
        }
        out << "\"/>\n";
        double ly = mt + 16 + 16 * li++;
        out << "  <line x1=\"" << (width - mr - 150) << "\" y1=\"" << ly << "\" x2=\""
            << (width - mr - 120) << "\" y2=\"" << ly << "\" stroke=\"" << method_color(method)
            << "\" stroke-width=\"2\"/>\n";
        out << "  <text x=\"" << (width - mr - 114) << "\" y=\"" << (ly + 4)
            << "\" font-family=\"sans-serif\" font-size=\"12\">" << method << "</text>\n";
    }
    out << "</svg>\n";
}

} // namespace

void render_report(const std::vector<EvalRecord>& records,
                   const std::filesystem::path& out_dir, std::size_t n_thresholds,
                   std::ostream* warn) {
    if (records.empty())
        throw ParameterError("render_report: no records");
    std::filesystem::create_directories(out_dir);
    std::vector<MethodStats> stats = aggregate(records, warn);

    std::ofstream csv(out_dir / "report.csv", std::ios::binary | std::ios::trunc);
    if (!csv)
        throw IoError("render_report: cannot open " + (out_dir / "report.csv").string());
    csv << "class,method,statistic,cd_x1e4,cd_restoration_x1e4,count,outlier_dominated\n";
    for (const auto& s : stats) {
        csv << s.class_name << ',' << s.method << ",mean," << fmt(s.mean_cd * 1e4) << ','
            << fmt(s.mean_cd_restoration < 0 ? -1.0 : s.mean_cd_restoration * 1e4) << ','
            << s.count << ',' << (s.outlier_dominated ? 1 : 0) << "\n";
        csv << s.class_name << ',' << s.method << ",median," << fmt(s.median_cd * 1e4) << ','
            << fmt(s.median_cd_restoration < 0 ? -1.0 : s.median_cd_restoration * 1e4) << ','
            << s.count << ',' << (s.outlier_dominated ? 1 : 0) << "\n";
        if (warn && s.outlier_dominated)
            *warn << "note: class '" << s.class_name << "' method '" << s.method
                  << "' is outlier-dominated (mean/median = "
                  << fmt(s.mean_cd / s.median_cd) << ")\n";
    }
    csv.close();

    std::map<std::string, std::map<std::string, std::vector<double>>> per_class;
    for (const auto& r : records)
        per_class[r.class_name][r.method].push_back(r.cd);
    for (const auto& [cls, by_method] : per_class)
        write_class_svg(out_dir / ("curves_" + cls + ".svg"), cls, by_method, n_thresholds);
}

} // namespace mendkit
