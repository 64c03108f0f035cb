#include <catch_amalgamated.hpp>

#include "bop32/dbi.hpp"
#include "bop32/image.hpp"
#include "bop32/packers.hpp"
#include "bop32/stats_json.hpp"

using namespace bop32;

namespace {

const PackedImage& payload() {
    static PackedImage p = make_payload();
    return p;
}

const CorpusSample& sample(PackerId id) {
    static std::map<PackerId, CorpusSample> cache;
    auto it = cache.find(id);
    if (it == cache.end()) it = cache.emplace(id, pack(payload(), id)).first;
    return it->second;
}

constexpr PackerId kAll[] = {PackerId::P1, PackerId::P2, PackerId::P3, PackerId::P4,
                             PackerId::P5};

EngineConfig config_for(PackerId id, SelfModMethod m, OepStrategy s) {
    EngineConfig cfg;
    cfg.selfmod_method = m;
    cfg.oep_strategy = s;
    if (id == PackerId::P5) cfg.oep_range = sample(id).suggested_oep_range;
    return cfg;
}

bool states_agree_outside_cache(const MachineState& dbi, const MachineState& ref) {
    if (dbi.regs != ref.regs) return false;
    if (dbi.z != ref.z || dbi.s != ref.s || dbi.c != ref.c) return false;
    if (dbi.bp != ref.bp || dbi.bctl != ref.bctl) return false;
    for (const auto& [page, bytes] : ref.mem.pages()) {
        const uint8_t* d = dbi.mem.page_data(page);
        if (!d) return false;
        if (std::memcmp(d, bytes.data(), kPageSize) != 0) return false;
    }
    for (const auto& [page, bytes] : dbi.mem.pages()) {
        if (in_cache_region(page)) continue;
        if (!ref.mem.page_data(page)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("corpus: every sample reports the sidecar OEP under both methods and strategies") {
    for (PackerId id : kAll) {
        for (auto m : {SelfModMethod::WriteRangeCheck, SelfModMethod::Adler32Check}) {
            for (auto s : {OepStrategy::SectionRange, OepStrategy::WrittenThenExecuted}) {
                INFO("sample " << packer_name(id) << " method " << method_name(m) << " strategy "
                               << strategy_name(s));
                UnpackReport rep = run_unpack(sample(id).image, config_for(id, m, s));
                CHECK(rep.verdict == UnpackVerdict::OepFound);
                REQUIRE(rep.oep.has_value());
                CHECK(*rep.oep == sample(id).sidecar.true_oep);
            }
        }
    }
}

TEST_CASE("corpus: api strategy candidate equals the true OEP on P1") {
    EngineConfig cfg;
    cfg.oep_strategy = OepStrategy::FirstLibraryCall;
    UnpackReport rep = run_unpack(sample(PackerId::P1).image, cfg);
    CHECK(rep.verdict == UnpackVerdict::OepFound);
    REQUIRE(rep.oep.has_value());
    CHECK(*rep.oep == sample(PackerId::P1).sidecar.true_oep);
    CHECK(rep.oep_candidate);
}

TEST_CASE("corpus: the instrumented trace is a prefix of the reference trace") {
    for (PackerId id : kAll) {
        for (auto m : {SelfModMethod::WriteRangeCheck, SelfModMethod::Adler32Check}) {
            INFO("sample " << packer_name(id) << " method " << method_name(m));
            MachineState ref = load(sample(id).image);
            RunReport refrep = run_native(ref);
            UnpackReport rep = run_unpack(sample(id).image,
                                          config_for(id, m, OepStrategy::SectionRange));
            REQUIRE(rep.trace.size() <= refrep.trace.size());
            for (size_t i = 0; i < rep.trace.size(); ++i) {
                if (!(rep.trace[i] == refrep.trace[i])) {
                    INFO("diverges at " << i);
                    REQUIRE(rep.trace[i] == refrep.trace[i]);
                }
            }
        }
    }
}

TEST_CASE("corpus: methods agree on OEP, trace and single-steps") {
    for (PackerId id : kAll) {
        INFO("sample " << packer_name(id));
        UnpackReport w = run_unpack(sample(id).image,
                                    config_for(id, SelfModMethod::WriteRangeCheck,
                                               OepStrategy::SectionRange));
        UnpackReport c = run_unpack(sample(id).image,
                                    config_for(id, SelfModMethod::Adler32Check,
                                               OepStrategy::SectionRange));
        CHECK(w.oep == c.oep);
        CHECK(w.trace == c.trace);
        CHECK(w.stats.singlesteps_delivered == c.stats.singlesteps_delivered);
        // the checksum method rechecks by recomputation, never in the range test
        CHECK(w.stats.checksum_recomputes == 0);
        if (w.stats.writes_checked > 0) CHECK(c.stats.checksum_recomputes > 0);
    }
}

TEST_CASE("corpus: state transparency at every block exit") {
    for (PackerId id : kAll) {
        INFO("sample " << packer_name(id));
        Engine eng(sample(id).image,
                   config_for(id, SelfModMethod::Adler32Check, OepStrategy::SectionRange));
        MachineState ref = load(sample(id).image);
        size_t consumed = 0;
        while (eng.dispatch_once()) {
            size_t len = eng.trace().size();
            REQUIRE(len >= consumed);
            if (len > consumed) run_native(ref, len - consumed);
            consumed = len;
            REQUIRE(states_agree_outside_cache(eng.state(), ref));
        }
        CHECK(eng.verdict() == UnpackVerdict::OepFound);
    }
}

TEST_CASE("corpus: return addresses on the guest stack are original addresses") {
    for (PackerId id : kAll) {
        INFO("sample " << packer_name(id));
        Engine eng(sample(id).image,
                   config_for(id, SelfModMethod::WriteRangeCheck, OepStrategy::SectionRange));
        uint32_t stack_top = sample(id).image.stack_top;
        while (eng.dispatch_once()) {
            const MachineState& st = eng.state();
            for (uint32_t a = st.sp(); a + 4 <= stack_top; a += 4) {
                auto word = st.mem.host_read32(a);
                if (!word) break;
                INFO("stack word at " << std::hex << a << " = " << *word);
                REQUIRE_FALSE(in_cache_region(*word));
            }
        }
    }
}

TEST_CASE("corpus: delivered exception addresses stay outside the cache") {
    for (PackerId id : kAll) {
        for (auto s : {OepStrategy::SectionRange, OepStrategy::WrittenThenExecuted}) {
            UnpackReport rep =
                run_unpack(sample(id).image, config_for(id, SelfModMethod::Adler32Check, s));
            for (uint32_t a : rep.exception_addresses) {
                INFO("sample " << packer_name(id) << " record address " << std::hex << a);
                CHECK_FALSE(in_cache_region(a));
            }
        }
    }
}

TEST_CASE("corpus: breakpoint parity between engine and reference on P3") {
    MachineState ref = load(sample(PackerId::P3).image);
    RunReport refrep = run_native(ref);
    Engine eng(sample(PackerId::P3).image,
               config_for(PackerId::P3, SelfModMethod::WriteRangeCheck,
                          OepStrategy::SectionRange));
    UnpackReport rep = eng.run();
    CHECK(refrep.singlesteps == 4);
    CHECK(rep.stats.singlesteps_delivered == 4);
    // the final continue-to-OEP carries a context with bctl=0: all disarmed
    CHECK(eng.ledger().enable_mask == 0);
}

TEST_CASE("payload-only image: OEP fires at the entry before anything runs") {
    UnpackReport rep = run_unpack(payload(), EngineConfig{});
    CHECK(rep.verdict == UnpackVerdict::OepFound);
    REQUIRE(rep.oep.has_value());
    CHECK(*rep.oep == payload().entry);
    CHECK(rep.stats.block_builds == 0);
    CHECK(rep.trace.empty());
}

TEST_CASE("sessions share no state: interleaved engines match isolated runs") {
    UnpackReport solo = run_unpack(sample(PackerId::P1).image,
                                   config_for(PackerId::P1, SelfModMethod::Adler32Check,
                                              OepStrategy::SectionRange));
    Engine a(sample(PackerId::P1).image,
             config_for(PackerId::P1, SelfModMethod::Adler32Check, OepStrategy::SectionRange));
    Engine b(sample(PackerId::P2).image,
             config_for(PackerId::P2, SelfModMethod::WriteRangeCheck,
                        OepStrategy::WrittenThenExecuted));
    bool more_a = true, more_b = true;
    while (more_a || more_b) {
        if (more_a) more_a = a.dispatch_once();
        if (more_b) more_b = b.dispatch_once();
    }
    CHECK(a.oep() == solo.oep);
    CHECK(a.trace() == solo.trace);
    REQUIRE(b.oep().has_value());
    CHECK(*b.oep() == sample(PackerId::P2).sidecar.true_oep);
}

TEST_CASE("corpus: resuming from the OEP stop completes the payload") {
    for (PackerId id : kAll) {
        INFO("sample " << packer_name(id));
        Engine eng(sample(id).image,
                   config_for(id, SelfModMethod::Adler32Check, OepStrategy::SectionRange));
        UnpackReport rep = eng.run();
        REQUIRE(rep.verdict == UnpackVerdict::OepFound);
        RunReport tail = run_native(eng.state());
        CHECK(tail.verdict == RunVerdict::Halted);
        CHECK(tail.final_r0 == 55);
    }
}

TEST_CASE("corpus: P4 fails when exception fix-ups are disabled") {
    EngineConfig cfg = config_for(PackerId::P4, SelfModMethod::Adler32Check,
                                  OepStrategy::SectionRange);
    cfg.fixups_enabled = false;
    cfg.fuel = 200'000;
    UnpackReport rep = run_unpack(sample(PackerId::P4).image, cfg);
    CHECK(rep.verdict != UnpackVerdict::OepFound);
    CHECK_FALSE(rep.oep.has_value());
}

TEST_CASE("corpus: P5 without the range override misfires away from the true OEP") {
    EngineConfig cfg;  // default range = whole merged section
    UnpackReport rep = run_unpack(sample(PackerId::P5).image, cfg);
    REQUIRE(rep.oep.has_value());
    CHECK(*rep.oep != sample(PackerId::P5).sidecar.true_oep);
}

TEST_CASE("corpus: single-slot cache rebuilds at the fixed base every transfer") {
    Engine eng(sample(PackerId::P1).image,
               config_for(PackerId::P1, SelfModMethod::Adler32Check, OepStrategy::SectionRange));
    size_t dispatches = 0;
    while (eng.dispatch_once()) {
        CHECK(eng.block().cache_start == kCacheBase);
        ++dispatches;
    }
    CHECK(eng.stats().block_builds == dispatches);
    CHECK(eng.stats().transfers >= eng.stats().block_builds);
}

TEST_CASE("stats report: JSON round-trips with exact field names") {
    UnpackReport rep = run_unpack(sample(PackerId::P3).image,
                                  config_for(PackerId::P3, SelfModMethod::Adler32Check,
                                             OepStrategy::SectionRange));
    StatsReport sr;
    sr.stats = rep.stats;
    sr.method = "adler32";
    sr.strategy = "range";
    sr.image = "p3.bopx";
    sr.verdict = std::string(verdict_name(rep.verdict));
    sr.oep = rep.oep;
    nlohmann::json j = to_json(sr);
    for (const char* key :
         {"block_builds", "transfers", "selfmod_breaks", "checksum_recomputes", "writes_checked",
          "exceptions_fixed", "continues_intercepted", "singlesteps_delivered", "wall_time",
          "method", "strategy", "image", "verdict", "oep"})
        CHECK(j.contains(key));
    StatsReport back = stats_report_from_json(j);
    CHECK(back == sr);
    CHECK(to_json(back) == j);
}
