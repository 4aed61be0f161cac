#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace skipseg::tsv {

/// Six significant digits, '.' decimal separator, "NA" for NaN.
inline std::string num(double v) {
    if (std::isnan(v)) return "NA";
    if (v == 0.0) v = 0.0;  // drop negative zero
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += '\t';
        out += fields[i];
    }
    out += '\n';
    return out;
}

inline std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == '\t') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace skipseg::tsv
