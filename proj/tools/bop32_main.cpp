// bop32: pack corpus samples, run the reference interpreter, run the
// unpacking engine, and diff architectural traces.
//
// Exit codes: 0 success, 1 usage, 2 verdict failure, 3 I/O or format error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bop32/dbi.hpp"
#include "bop32/image.hpp"
#include "bop32/machine.hpp"
#include "bop32/packers.hpp"
#include "bop32/stats_json.hpp"
#include "bop32/trace.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerdict = 2;
constexpr int kExitIo = 3;

std::string sidecar_path(const std::string& image_path) {
    std::filesystem::path p(image_path);
    p.replace_extension(".sidecar");
    return p.string();
}

std::optional<bop32::Sidecar> try_load_sidecar(const std::string& image_path) {
    std::ifstream f(sidecar_path(image_path));
    if (!f) return std::nullopt;
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bop32::parse_sidecar(text);
}

std::string_view run_verdict_name(bop32::RunVerdict v) {
    switch (v) {
    case bop32::RunVerdict::Halted: return "halted";
    case bop32::RunVerdict::UnhandledException: return "unhandled-exception";
    case bop32::RunVerdict::FuelExhausted: return "fuel-exhausted";
    }
    return "?";
}

int cmd_make_payload(const std::string& out_path) {
    bop32::PackedImage img = bop32::make_payload();
    bop32::write_file(out_path, img.raw);
    std::printf("wrote %s (%zu bytes)\n", out_path.c_str(), img.raw.size());
    return kExitOk;
}

int cmd_pack(const std::string& payload_path, const std::string& packer,
             const std::string& out_path) {
    auto id = bop32::parse_packer_id(packer);
    if (!id) {
        std::fprintf(stderr, "unknown packer id: %s\n", packer.c_str());
        return kExitUsage;
    }
    bop32::PackedImage payload = bop32::parse_image(bop32::read_file(payload_path));
    bop32::CorpusSample sample = bop32::pack(payload, *id);
    bop32::write_file(out_path, sample.image.raw);
    std::string sc = bop32::format_sidecar(sample.sidecar);
    bop32::write_file(sidecar_path(out_path),
                      std::span(reinterpret_cast<const uint8_t*>(sc.data()), sc.size()));
    std::printf("wrote %s and %s (true_oep=%s)\n", out_path.c_str(),
                sidecar_path(out_path).c_str(), bop32::hex_addr(sample.sidecar.true_oep).c_str());
    return kExitOk;
}

int cmd_run(const std::string& image_path, uint64_t fuel, const std::string& trace_path) {
    bop32::PackedImage img = bop32::parse_image(bop32::read_file(image_path));
    bop32::MachineState st = bop32::load(img);
    bop32::RunReport rep = bop32::run_native(st, fuel);
    if (!trace_path.empty()) bop32::write_trace_file(trace_path, rep.trace);
    std::printf("verdict=%s\n", std::string(run_verdict_name(rep.verdict)).c_str());
    std::printf("R0=%u\n", rep.final_r0);
    std::printf("singlesteps=%llu\n", static_cast<unsigned long long>(rep.singlesteps));
    return rep.verdict == bop32::RunVerdict::Halted ? kExitOk : kExitVerdict;
}

int cmd_unpack(const std::string& image_path, const std::string& method,
               const std::string& strategy, const std::string& range, bool no_fixups,
               bool resume, uint64_t fuel, const std::string& trace_path,
               const std::string& stats_path) {
    bop32::EngineConfig cfg;
    cfg.fuel = fuel;
    cfg.fixups_enabled = !no_fixups;
    if (method == "write-check") cfg.selfmod_method = bop32::SelfModMethod::WriteRangeCheck;
    else if (method == "adler32") cfg.selfmod_method = bop32::SelfModMethod::Adler32Check;
    else {
        std::fprintf(stderr, "unknown method: %s\n", method.c_str());
        return kExitUsage;
    }
    if (strategy == "range") cfg.oep_strategy = bop32::OepStrategy::SectionRange;
    else if (strategy == "wx") cfg.oep_strategy = bop32::OepStrategy::WrittenThenExecuted;
    else if (strategy == "api") cfg.oep_strategy = bop32::OepStrategy::FirstLibraryCall;
    else {
        std::fprintf(stderr, "unknown strategy: %s\n", strategy.c_str());
        return kExitUsage;
    }
    if (!range.empty()) {
        auto colon = range.find(':');
        if (colon == std::string::npos) {
            std::fprintf(stderr, "--range expects LO:HI\n");
            return kExitUsage;
        }
        cfg.oep_range = {static_cast<uint32_t>(std::stoul(range.substr(0, colon), nullptr, 0)),
                         static_cast<uint32_t>(std::stoul(range.substr(colon + 1), nullptr, 0))};
    }

    bop32::PackedImage img = bop32::parse_image(bop32::read_file(image_path));
    bop32::Engine engine(img, cfg);
    bop32::UnpackReport rep = engine.run();

    if (!trace_path.empty()) bop32::write_trace_file(trace_path, rep.trace);
    if (!stats_path.empty()) {
        bop32::StatsReport sr;
        sr.stats = rep.stats;
        sr.method = method;
        sr.strategy = strategy;
        sr.image = std::filesystem::path(image_path).filename().string();
        sr.verdict = std::string(bop32::verdict_name(rep.verdict));
        sr.oep = rep.oep;
        std::ofstream f(stats_path);
        if (!f) {
            std::fprintf(stderr, "cannot write %s\n", stats_path.c_str());
            return kExitIo;
        }
        f << bop32::to_json(sr).dump(2) << "\n";
    }

    if (!rep.oep) {
        std::fprintf(stderr, "no OEP found: verdict=%s\n",
                     std::string(bop32::verdict_name(rep.verdict)).c_str());
        return kExitVerdict;
    }
    std::printf("OEP=0x%08X\n", *rep.oep);
    if (rep.oep_candidate)
        std::printf("note: api strategy result is a candidate; confirm manually\n");

    if (resume) {
        bop32::RunReport tail = bop32::run_native(engine.state(), fuel);
        std::printf("R0=%u\n", tail.final_r0);
        if (tail.verdict != bop32::RunVerdict::Halted) {
            std::fprintf(stderr, "resume did not halt: %s\n",
                         std::string(run_verdict_name(tail.verdict)).c_str());
            return kExitVerdict;
        }
        if (auto sc = try_load_sidecar(image_path)) {
            if (tail.final_r0 != sc->expected_r0) {
                std::fprintf(stderr, "R0 mismatch: got %u, sidecar expects %u\n", tail.final_r0,
                             sc->expected_r0);
                return kExitVerdict;
            }
        }
    }
    return kExitOk;
}

int cmd_diff_trace(const std::string& a_path, const std::string& b_path) {
    auto a = bop32::read_lines(a_path);
    auto b = bop32::read_lines(b_path);
    if (auto div = bop32::diff_lines(a, b)) {
        std::printf("traces diverge at line %zu:\n  %s: %s\n  %s: %s\n", div->line,
                    a_path.c_str(), div->a.c_str(), b_path.c_str(), div->b.c_str());
        return kExitVerdict;
    }
    std::printf("traces identical (%zu lines)\n", a.size());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"BOP-32 instrumentation unpacker"};
    app.require_subcommand(1);

    std::string payload_out;
    auto* mk = app.add_subcommand("make-payload", "write the canonical payload image");
    mk->add_option("out", payload_out, "output .bopx path")->required();

    std::string pack_payload, pack_id, pack_out;
    auto* pk = app.add_subcommand("pack", "pack a payload with a corpus packer");
    pk->add_option("payload", pack_payload, "payload .bopx path")->required();
    pk->add_option("--packer", pack_id, "P1..P5")->required();
    pk->add_option("-o,--out", pack_out, "output .bopx path")->required();

    std::string run_image, run_trace;
    uint64_t run_fuel = bop32::kDefaultFuel;
    auto* rn = app.add_subcommand("run", "execute on the reference interpreter");
    rn->add_option("image", run_image)->required();
    rn->add_option("--fuel", run_fuel, "instruction budget");
    rn->add_option("--trace", run_trace, "write the architectural trace here");

    std::string up_image, up_method = "adler32", up_strategy = "range", up_range;
    std::string up_trace, up_stats;
    bool up_no_fixups = false, up_resume = false;
    uint64_t up_fuel = bop32::kDefaultFuel;
    auto* up = app.add_subcommand("unpack", "run the instrumentation engine");
    up->add_option("image", up_image)->required();
    up->add_option("--method", up_method, "write-check|adler32");
    up->add_option("--oep", up_strategy, "range|wx|api");
    up->add_option("--range", up_range, "LO:HI override for the range strategy");
    up->add_flag("--no-fixups", up_no_fixups, "deliver raw cache exception addresses");
    up->add_flag("--resume", up_resume, "continue natively to HALT after the OEP stop");
    up->add_option("--fuel", up_fuel, "instruction budget");
    up->add_option("--trace", up_trace, "write the architectural trace here");
    up->add_option("--stats", up_stats, "write the JSON stats report here");

    std::string diff_a, diff_b;
    auto* df = app.add_subcommand("diff-trace", "compare two trace files");
    df->add_option("a", diff_a)->required();
    df->add_option("b", diff_b)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (mk->parsed()) return cmd_make_payload(payload_out);
        if (pk->parsed()) return cmd_pack(pack_payload, pack_id, pack_out);
        if (rn->parsed()) return cmd_run(run_image, run_fuel, run_trace);
        if (up->parsed())
            return cmd_unpack(up_image, up_method, up_strategy, up_range, up_no_fixups,
                              up_resume, up_fuel, up_trace, up_stats);
        if (df->parsed()) return cmd_diff_trace(diff_a, diff_b);
    } catch (const bop32::MalformedImage& e) {
        std::fprintf(stderr, "malformed image: %s\n", e.what());
        return kExitIo;
    } catch (const bop32::PackError& e) {
        std::fprintf(stderr, "pack error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    }
    return kExitUsage;
}
