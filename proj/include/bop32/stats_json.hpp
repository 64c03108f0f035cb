#pragma once

// Flat JSON stats report: the EngineStats counters under their exact field
// names plus run identification (method, strategy, image, verdict, oep).

#include <optional>
#include <string>

#include <json.hpp>

#include "bop32/dbi.hpp"

namespace bop32 {

struct StatsReport {
    EngineStats stats;
    std::string method;
    std::string strategy;
    std::string image;
    std::string verdict;
    std::optional<uint32_t> oep;

    bool operator==(const StatsReport&) const = default;
};

inline std::string_view method_name(SelfModMethod m) {
    return m == SelfModMethod::WriteRangeCheck ? "write-check" : "adler32";
}

inline std::string_view strategy_name(OepStrategy s) {
    switch (s) {
    case OepStrategy::SectionRange: return "range";
    case OepStrategy::WrittenThenExecuted: return "wx";
    case OepStrategy::FirstLibraryCall: return "api";
    }
    return "?";
}

inline std::string hex_addr(uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", v);
    return buf;
}

inline nlohmann::json to_json(const StatsReport& r) {
    nlohmann::json j;
    j["image"] = r.image;
    j["method"] = r.method;
    j["strategy"] = r.strategy;
    j["verdict"] = r.verdict;
    if (r.oep) j["oep"] = hex_addr(*r.oep);
    else j["oep"] = nullptr;
    j["block_builds"] = r.stats.block_builds;
    j["transfers"] = r.stats.transfers;
    j["selfmod_breaks"] = r.stats.selfmod_breaks;
    j["checksum_recomputes"] = r.stats.checksum_recomputes;
    j["writes_checked"] = r.stats.writes_checked;
    j["exceptions_fixed"] = r.stats.exceptions_fixed;
    j["continues_intercepted"] = r.stats.continues_intercepted;
    j["singlesteps_delivered"] = r.stats.singlesteps_delivered;
    j["wall_time"] = r.stats.wall_time;
    return j;
}

inline StatsReport stats_report_from_json(const nlohmann::json& j) {
    StatsReport r;
    r.image = j.at("image").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.verdict = j.at("verdict").get<std::string>();
    if (!j.at("oep").is_null())
        r.oep = static_cast<uint32_t>(std::stoul(j.at("oep").get<std::string>(), nullptr, 16));
    r.stats.block_builds = j.at("block_builds").get<uint64_t>();
    r.stats.transfers = j.at("transfers").get<uint64_t>();
    r.stats.selfmod_breaks = j.at("selfmod_breaks").get<uint64_t>();
    r.stats.checksum_recomputes = j.at("checksum_recomputes").get<uint64_t>();
    r.stats.writes_checked = j.at("writes_checked").get<uint64_t>();
    r.stats.exceptions_fixed = j.at("exceptions_fixed").get<uint64_t>();
    r.stats.continues_intercepted = j.at("continues_intercepted").get<uint64_t>();
    r.stats.singlesteps_delivered = j.at("singlesteps_delivered").get<uint64_t>();
    r.stats.wall_time = j.at("wall_time").get<double>();
    return r;
}

}  // namespace bop32
