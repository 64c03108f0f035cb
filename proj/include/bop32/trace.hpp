#pragma once

// Architectural trace text format, shared by the reference interpreter and
// the instrumented engine so the two outputs diff cleanly:
//   PC=%08X OP=%s\n   (uppercase hex, one line per instruction)

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "bop32/machine.hpp"

namespace bop32 {

inline std::string trace_line(const TraceEntry& e) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "PC=%08X OP=", e.pc);
    return std::string(buf) + std::string(e.op);
}

inline std::string format_trace(const std::vector<TraceEntry>& trace) {
    std::string out;
    for (const TraceEntry& e : trace) {
        out += trace_line(e);
        out += '\n';
    }
    return out;
}

inline void write_trace_file(const std::string& path, const std::vector<TraceEntry>& trace) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << format_trace(trace);
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return lines;
}

struct TraceDivergence {
    size_t line = 0;  // 1-based
    std::string a, b;  // "<end of trace>" when one side ran out
};

inline std::optional<TraceDivergence> diff_lines(const std::vector<std::string>& a,
                                                 const std::vector<std::string>& b) {
    size_t n = std::min(a.size(), b.size());
    for (size_t i = 0; i < n; ++i) {
        if (a[i] != b[i]) return TraceDivergence{i + 1, a[i], b[i]};
    }
    if (a.size() != b.size()) {
        return TraceDivergence{n + 1, n < a.size() ? a[n] : "<end of trace>",
                               n < b.size() ? b[n] : "<end of trace>"};
    }
    return std::nullopt;
}

}  // namespace bop32
