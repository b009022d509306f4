#ifndef FLASH_DATA_MODEL_HPP
#define FLASH_DATA_MODEL_HPP

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "flash/common.hpp"

namespace flash {

// Irregular time series of one longitudinal marker for one subject.
struct MarkerSeries {
    std::vector<double> times;   // strictly increasing, non-negative
    std::vector<double> values;  // same length as times

    std::size_t size() const { return times.size(); }
    bool empty() const { return times.empty(); }

    void validate() const {
        if (times.size() != values.size())
            throw DataError("MarkerSeries: times/values length mismatch");
        for (std::size_t j = 0; j < times.size(); ++j) {
            if (times[j] < 0.0) throw DataError("MarkerSeries: negative observation time");
            if (j > 0 && times[j] <= times[j - 1])
                throw DataError("MarkerSeries: observation times not strictly increasing");
        }
    }
};

struct SubjectRecord {
    std::string id;
    Vec x;                              // time-independent features, length p
    std::vector<MarkerSeries> markers;  // exactly L entries
    double event_time = 0.0;            // observed time T
    bool event = false;                 // censoring indicator Delta

    void validate() const {
        if (event_time < 0.0) throw DataError("subject " + id + ": negative T");
        for (const auto& s : markers) {
            s.validate();
            if (!s.times.empty() && s.times.back() > event_time)
                throw DataError("subject " + id + ": observation time exceeds T");
        }
    }
};

struct Cohort {
    std::vector<SubjectRecord> subjects;
    int p = 0;
    int L = 0;
    std::vector<double> failure_times;  // sorted unique uncensored T

    std::size_t size() const { return subjects.size(); }

    void compute_failure_times() {
        std::set<double> taus;
        for (const auto& s : subjects)
            if (s.event) taus.insert(s.event_time);
        failure_times.assign(taus.begin(), taus.end());
    }

    void validate() const {
        for (const auto& s : subjects) {
            if (s.x.size() != p) throw DataError("subject " + s.id + ": wrong feature length");
            if (static_cast<int>(s.markers.size()) != L)
                throw DataError("subject " + s.id + ": wrong marker count");
            s.validate();
        }
    }
};

// All estimable parameters of the model.
struct ModelParams {
    std::vector<Vec> xi;     // K vectors of length p
    std::vector<Vec> beta;   // K vectors of length q
    Vec phi;                 // L positive reals
    Mat D;                   // r x r SPD
    Vec lambda0;             // J non-negative masses at failure times
    std::vector<Vec> gamma;  // K vectors of length L*M

    int K() const { return static_cast<int>(xi.size()); }
};

// Materialized block-diagonal design matrices for one subject.
struct DesignPair {
    Mat U;  // n_i x q, blocks U_i^l of shape n_i^l x q_l
    Mat V;  // n_i x r, blocks V_i^l of shape n_i^l x 2
    std::vector<int> rows_per_marker;
};

// Row j of block l is (1, t, ..., t^alpha) for U and (1, t) for V.
inline DesignPair build_designs(const SubjectRecord& subject, int alpha = 1) {
    if (alpha < 1) throw DataError("build_designs: alpha must be >= 1");
    const int L = static_cast<int>(subject.markers.size());
    const int ql = alpha + 1, rl = 2;
    int n_i = 0;
    for (const auto& s : subject.markers) n_i += static_cast<int>(s.size());
    DesignPair d;
    d.U = Mat::Zero(n_i, L * ql);
    d.V = Mat::Zero(n_i, L * rl);
    d.rows_per_marker.resize(L);
    int row = 0;
    for (int l = 0; l < L; ++l) {
        const auto& s = subject.markers[l];
        d.rows_per_marker[l] = static_cast<int>(s.size());
        for (std::size_t j = 0; j < s.size(); ++j, ++row) {
            double t = s.times[j], mono = 1.0;
            for (int a = 0; a <= alpha; ++a) {
                d.U(row, l * ql + a) = mono;
                mono *= t;
            }
            d.V(row, l * rl + 0) = 1.0;
            d.V(row, l * rl + 1) = t;
        }
    }
    return d;
}

// Concatenated observation vector Y_i, marker-major.
inline Vec stacked_values(const SubjectRecord& subject) {
    int n_i = 0;
    for (const auto& s : subject.markers) n_i += static_cast<int>(s.size());
    Vec y(n_i);
    int row = 0;
    for (const auto& s : subject.markers)
        for (double v : s.values) y[row++] = v;
    return y;
}

namespace csv {

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(line);
    while (std::getline(ss, cur, ',')) out.push_back(cur);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw DataError("");
        return v;
    } catch (...) {
        throw DataError("invalid numeric value '" + s + "' in " + what);
    }
}

inline std::vector<std::vector<std::string>> read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        rows.push_back(split_line(line));
    }
    if (rows.empty()) throw DataError(path + ": empty file");
    return rows;
}

}  // namespace csv

struct ColumnSpec {
    std::vector<std::string> marker_names;  // declaration order fixes marker indices
};

// Subjects CSV: id,<x1..xp>,T,delta. Longitudinal CSV: id,marker,time,value.
inline Cohort load_cohort(const std::string& subjects_file, const std::string& longitudinal_file,
                          const ColumnSpec& schema) {
    auto srows = csv::read_file(subjects_file);
    const auto& header = srows[0];
    if (header.size() < 3 || header.front() != "id")
        throw DataError(subjects_file + ": header must be id,<features...>,T,delta");
    if (header[header.size() - 2] != "T" || header.back() != "delta")
        throw DataError(subjects_file + ": last two columns must be T,delta");
    const int p = static_cast<int>(header.size()) - 3;
    const int L = static_cast<int>(schema.marker_names.size());
    if (L == 0) throw DataError("marker manifest is empty");

    Cohort cohort;
    cohort.p = p;
    cohort.L = L;
    std::map<std::string, std::size_t> index_of;
    for (std::size_t row = 1; row < srows.size(); ++row) {
        const auto& r = srows[row];
        if (static_cast<int>(r.size()) != p + 3)
            throw DataError(subjects_file + ": wrong column count on row " + std::to_string(row));
        SubjectRecord s;
        s.id = r[0];
        if (index_of.count(s.id)) throw DataError("duplicate subject id " + s.id);
        s.x.resize(p);
        for (int j = 0; j < p; ++j) s.x[j] = csv::parse_double(r[j + 1], "feature " + header[j + 1]);
        s.event_time = csv::parse_double(r[p + 1], "T");
        if (s.event_time < 0.0) throw DataError("subject " + s.id + ": T < 0");
        double delta = csv::parse_double(r[p + 2], "delta");
        if (delta != 0.0 && delta != 1.0) throw DataError("subject " + s.id + ": delta not in {0,1}");
        s.event = delta == 1.0;
        s.markers.resize(L);
        index_of[s.id] = cohort.subjects.size();
        cohort.subjects.push_back(std::move(s));
    }

    std::map<std::string, int> marker_index;
    for (int l = 0; l < L; ++l) marker_index[schema.marker_names[l]] = l;

    auto lrows = csv::read_file(longitudinal_file);
    if (lrows[0] != std::vector<std::string>{"id", "marker", "time", "value"})
        throw DataError(longitudinal_file + ": header must be id,marker,time,value");
    for (std::size_t row = 1; row < lrows.size(); ++row) {
        const auto& r = lrows[row];
        if (r.size() != 4)
            throw DataError(longitudinal_file + ": wrong column count on row " + std::to_string(row));
        auto it = index_of.find(r[0]);
        if (it == index_of.end()) throw DataError("unknown subject id '" + r[0] + "' in longitudinal file");
        auto mit = marker_index.find(r[1]);
        if (mit == marker_index.end()) throw DataError("unknown marker '" + r[1] + "'");
        double t = csv::parse_double(r[2], "time");
        double v = csv::parse_double(r[3], "value");
        SubjectRecord& s = cohort.subjects[it->second];
        if (t > s.event_time)
            throw DataError("subject " + s.id + ": observation time " + r[2] + " exceeds T");
        MarkerSeries& m = s.markers[mit->second];
        if (!m.times.empty() && t <= m.times.back())
            throw DataError("subject " + s.id + ", marker " + r[1] +
                            ": non-monotone or duplicate observation time");
        m.times.push_back(t);
        m.values.push_back(v);
    }

    cohort.compute_failure_times();
    cohort.validate();
    return cohort;
}

inline void write_cohort_csv(const Cohort& cohort, const ColumnSpec& schema,
                             const std::string& subjects_file, const std::string& longitudinal_file) {
    std::ofstream sf(subjects_file);
    if (!sf) throw DataError("cannot write " + subjects_file);
    sf << "id";
    for (int j = 0; j < cohort.p; ++j) sf << ",x" << (j + 1);
    sf << ",T,delta\n";
    sf.precision(17);
    for (const auto& s : cohort.subjects) {
        sf << s.id;
        for (int j = 0; j < cohort.p; ++j) sf << ',' << s.x[j];
        sf << ',' << s.event_time << ',' << (s.event ? 1 : 0) << '\n';
    }
    std::ofstream lf(longitudinal_file);
    if (!lf) throw DataError("cannot write " + longitudinal_file);
    lf << "id,marker,time,value\n";
    lf.precision(17);
    for (const auto& s : cohort.subjects)
        for (std::size_t l = 0; l < s.markers.size(); ++l)
            for (std::size_t j = 0; j < s.markers[l].size(); ++j)
                lf << s.id << ',' << schema.marker_names[l] << ',' << s.markers[l].times[j] << ','
                   << s.markers[l].values[j] << '\n';
}

}  // namespace flash

#endif  // FLASH_DATA_MODEL_HPP
