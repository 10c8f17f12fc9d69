#pragma once

// Result tables and their CSV form (RFC 4180 quoting, LF line ends, numbers
// with 17 significant digits).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <string>
#include <vector>

#include "varprompt/config.hpp"
#include "varprompt/errors.hpp"

#ifndef VARPROMPT_VERSION
#define VARPROMPT_VERSION "0.1.0"
#endif

namespace varprompt {

inline constexpr const char* kVersion = VARPROMPT_VERSION;

struct Column {
    std::string name;
    std::string unit;
};

struct ResultTable {
    std::vector<Column> columns;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row) {
        if (row.size() != columns.size())
            throw RuntimeFailure("row has " + std::to_string(row.size()) + " fields, schema has " +
                                 std::to_string(columns.size()));
        rows.push_back(std::move(row));
    }

    std::vector<std::string> header() const {
        std::vector<std::string> h;
        for (auto& c : columns) h.push_back(c.name);
        return h;
    }
};

inline std::string cell(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return detail::format_double(v);
}
inline std::string cell(std::size_t v) { return std::to_string(v); }
inline std::string cell(bool v) { return v ? "true" : "false"; }
inline std::string cell(const std::string& v) { return v; }
inline std::string cell(const char* v) { return v; }

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

inline std::string csv_line(const std::vector<std::string>& fields) {
    std::string s;
    for (std::size_t i = 0; i < fields.size(); ++i) s += (i ? "," : "") + csv_field(fields[i]);
    return s + "\n";
}

struct Provenance {
    std::string experiment;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string version = kVersion;
    std::string timestamp;
};

inline std::string utc_timestamp() {
    std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Comment lines start with '#'; the timestamp line is the only one that
// varies between identical runs.
inline std::string provenance_lines(const Provenance& p, const ResultTable& t) {
    std::string s;
    s += "# varprompt " + p.version + "\n";
    s += "# experiment: " + p.experiment + "\n";
    s += "# config-hash: " + p.config_hash + "\n";
    s += "# seed: " + std::to_string(p.seed) + "\n";
    s += "# timestamp: " + p.timestamp + "\n";
    s += "# units:";
    for (std::size_t i = 0; i < t.columns.size(); ++i)
        s += (i ? "," : " ") + t.columns[i].name + "=" + t.columns[i].unit;
    return s + "\n";
}

inline std::string to_csv(const ResultTable& t, const Provenance& p) {
    std::string s = provenance_lines(p, t);
    s += csv_line(t.header());
    for (auto& r : t.rows) s += csv_line(r);
    return s;
}

// Header row and data rows only.
inline std::string data_section(const std::string& csv) {
    std::string out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t end = csv.find('\n', pos);
        if (end == std::string::npos) end = csv.size() - 1;
        if (csv[pos] != '#') out.append(csv, pos, end - pos + 1);
        pos = end + 1;
    }
    return out;
}

} // namespace varprompt
