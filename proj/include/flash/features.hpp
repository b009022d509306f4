#ifndef FLASH_FEATURES_HPP
#define FLASH_FEATURES_HPP

#include <numeric>
#include <span>

#include "flash/data_model.hpp"

namespace flash {

// Built-in summary statistics of a marker history. Every extractor maps the
// observations strictly before t to a real, with value 0 on an empty history.
namespace extractors {

inline double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double ext_max(std::span<const double> v) { return *std::max_element(v.begin(), v.end()); }
inline double ext_min(std::span<const double> v) { return *std::min_element(v.begin(), v.end()); }
inline double ext_mean(std::span<const double> v) { return mean_of(v); }
inline double ext_sum(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }
inline double ext_last(std::span<const double> v) { return v.back(); }

inline double ext_std(std::span<const double> v) {
    double m = mean_of(v), s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

inline double ext_abs_energy(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

// Least-squares slope of value against observation index; 0 for < 2 points.
inline double ext_trend_slope(std::span<const double> v) {
    const auto n = static_cast<double>(v.size());
    if (v.size() < 2) return 0.0;
    double tm = (n - 1.0) / 2.0, ym = mean_of(v), num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
        num += (static_cast<double>(j) - tm) * (v[j] - ym);
        den += (static_cast<double>(j) - tm) * (static_cast<double>(j) - tm);
    }
    return num / den;
}

// Bias-uncorrected sample excess kurtosis; histories with < 4 points give 0.
inline double ext_kurtosis(std::span<const double> v) {
    if (v.size() < 4) return 0.0;
    double m = mean_of(v), m2 = 0.0, m4 = 0.0;
    for (double x : v) {
        double d = x - m;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= static_cast<double>(v.size());
    m4 /= static_cast<double>(v.size());
    if (m2 <= 0.0) return 0.0;
    return m4 / (m2 * m2) - 3.0;
}

inline double ext_autocorr_lag1(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v), num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) den += (v[j] - m) * (v[j] - m);
    if (den <= 0.0) return 0.0;
    for (std::size_t j = 0; j + 1 < v.size(); ++j) num += (v[j] - m) * (v[j + 1] - m);
    return num / den;
}

}  // namespace extractors

struct FeatureCatalog {
    std::vector<std::string> names;

    static const std::vector<std::string>& builtin_names() {
        static const std::vector<std::string> all = {
            "max",         "min",  "mean",     "sum",           "last_value",
            "std_dev",     "absolute_energy", "linear_trend_slope", "kurtosis",
            "autocorrelation_lag1"};
        return all;
    }

    static FeatureCatalog builtin() { return FeatureCatalog{builtin_names()}; }

    static FeatureCatalog from_names(const std::vector<std::string>& requested) {
        const auto& known = builtin_names();
        std::set<std::string> seen;
        for (const auto& n : requested) {
            if (std::find(known.begin(), known.end(), n) == known.end())
                throw DataError("unknown association feature '" + n + "'");
            if (!seen.insert(n).second) throw DataError("duplicate association feature '" + n + "'");
        }
        if (requested.empty()) throw DataError("association feature catalog is empty");
        return FeatureCatalog{requested};
    }

    int M() const { return static_cast<int>(names.size()); }
};

inline double apply_extractor(const std::string& name, std::span<const double> values) {
    if (values.empty()) return 0.0;  // declared empty-history fallback
    using namespace extractors;
    if (name == "max") return ext_max(values);
    if (name == "min") return ext_min(values);
    if (name == "mean") return ext_mean(values);
    if (name == "sum") return ext_sum(values);
    if (name == "last_value") return ext_last(values);
    if (name == "std_dev") return ext_std(values);
    if (name == "absolute_energy") return ext_abs_energy(values);
    if (name == "linear_trend_slope") return ext_trend_slope(values);
    if (name == "kurtosis") return ext_kurtosis(values);
    if (name == "autocorrelation_lag1") return ext_autocorr_lag1(values);
    throw DataError("unknown association feature '" + name + "'");
}

// Feature of the history strictly before t.
inline double extract(const MarkerSeries& series, double t, const std::string& extractor) {
    std::size_t cut = std::lower_bound(series.times.begin(), series.times.end(), t) -
                      series.times.begin();
    return apply_extractor(extractor, std::span<const double>(series.values.data(), cut));
}

// Rows of extracted features on a time grid, marker-major layout: feature m of
// marker l sits at column l*M + m.
struct AssociationMatrix {
    std::vector<double> grid;  // evaluation times, ascending failure grid + T at the end
    Mat rows;                  // grid.size() x (L*M)
};

inline AssociationMatrix build_association(const SubjectRecord& subject,
                                           const FeatureCatalog& catalog,
                                           const std::vector<double>& failure_times) {
    const int L = static_cast<int>(subject.markers.size());
    const int M = catalog.M();
    AssociationMatrix a;
    a.grid = failure_times;
    a.grid.push_back(subject.event_time);
    a.rows = Mat::Zero(static_cast<Eigen::Index>(a.grid.size()), L * M);
    for (std::size_t g = 0; g < a.grid.size(); ++g) {
        double t = a.grid[g];
        for (int l = 0; l < L; ++l) {
            const auto& s = subject.markers[l];
            std::size_t cut = std::lower_bound(s.times.begin(), s.times.end(), t) - s.times.begin();
            std::span<const double> hist(s.values.data(), cut);
            for (int m = 0; m < M; ++m)
                a.rows(static_cast<Eigen::Index>(g), l * M + m) = apply_extractor(catalog.names[m], hist);
        }
    }
    return a;
}

}  // namespace flash

#endif  // FLASH_FEATURES_HPP
