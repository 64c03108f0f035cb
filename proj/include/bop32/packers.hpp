#pragma once

// Synthetic packer corpus. Each packer wraps the payload image in a loader
// stub reproducing one adversarial trick class, and derives its sidecar
// ground truth (true OEP, final R0, single-step count) by running the packed
// image on the reference interpreter. Packing is a pure function of
// (payload, id); the emitted bytes are fully deterministic.
//
//   P1 xor-loop:        rolling-XOR decode in place, register hygiene, JMPR
//                       to the entry; also makes one library call from the
//                       stub (ignored by the API OEP heuristic).
//   P2 delta-selfmod:   CALL/POP GetPC, stores that patch garbled bytes
//                       ahead inside the running block into real
//                       instructions, key material derived from the pushed
//                       return address; breaks under a cache that pushes
//                       translated addresses.
//   P3 seh-flow:        SEH handler arms four hardware breakpoints through
//                       the context, counts single-steps into a cell, mixes
//                       the counter into the decode key, and finally
//                       CONTINUEs straight to the entry point.
//   P4 prefix-trap:     control flow advances by 0xF0-prefixed jumps that
//                       fault; the handler accumulates the faulting
//                       addresses into the key and skips past each site, so
//                       unfixed (cache) exception addresses ruin the decode.
//   P5 overwrite-loop:  single merged section; a store loop writes a
//                       trampoline immediately ahead of the executing pc and
//                       falls into it; needs a manual OEP range.

#include <array>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bop32/assembler.hpp"
#include "bop32/image.hpp"
#include "bop32/machine.hpp"

namespace bop32 {

enum class PackerId : uint8_t { P1, P2, P3, P4, P5 };

inline std::string_view packer_name(PackerId id) {
    switch (id) {
    case PackerId::P1: return "P1";
    case PackerId::P2: return "P2";
    case PackerId::P3: return "P3";
    case PackerId::P4: return "P4";
    case PackerId::P5: return "P5";
    }
    return "?";
}

inline std::optional<PackerId> parse_packer_id(std::string_view s) {
    for (PackerId id : {PackerId::P1, PackerId::P2, PackerId::P3, PackerId::P4, PackerId::P5}) {
        if (s == packer_name(id)) return id;
    }
    return std::nullopt;
}

struct PackError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Sidecar {
    uint32_t true_oep = 0;
    uint32_t expected_r0 = 0;
    uint32_t expected_singlesteps = 0;
    std::string notes;
};

struct CorpusSample {
    PackerId id = PackerId::P1;
    PackedImage image;
    Sidecar sidecar;
    // Merged-section samples need a manual range; others use the default.
    std::optional<std::pair<uint32_t, uint32_t>> suggested_oep_range;
};

inline std::string format_sidecar(const Sidecar& sc) {
    char oep[16];
    std::snprintf(oep, sizeof oep, "0x%08X", sc.true_oep);
    std::string out;
    out += "true_oep=" + std::string(oep) + "\n";
    out += "expected_r0=" + std::to_string(sc.expected_r0) + "\n";
    out += "expected_singlesteps=" + std::to_string(sc.expected_singlesteps) + "\n";
    if (!sc.notes.empty()) out += "notes=" + sc.notes + "\n";
    return out;
}

inline Sidecar parse_sidecar(const std::string& text) {
    Sidecar sc;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        if (key == "true_oep") sc.true_oep = static_cast<uint32_t>(std::stoul(val, nullptr, 0));
        else if (key == "expected_r0") sc.expected_r0 = static_cast<uint32_t>(std::stoul(val));
        else if (key == "expected_singlesteps")
            sc.expected_singlesteps = static_cast<uint32_t>(std::stoul(val));
        else if (key == "notes") sc.notes = val;
    }
    return sc;
}

inline constexpr uint32_t kPayloadVa = 0x0040'1000;
inline constexpr uint32_t kStubVa = 0x0040'5000;
inline constexpr uint32_t kDefaultStackTop = 0x0020'0000;
// The merged-section sample keeps the payload at its linked address and puts
// the stub in the page below, so nothing needs relocating.
inline constexpr uint32_t kP5StubRoom = 0x1000;

// Canonical payload: sums 10..1 into R0 (55), makes one library call with
// its own entry address parked on the stack (the tail-jump idiom the API
// heuristic keys on), and halts on re-entry via the R6 visited flag.
inline PackedImage make_payload() {
    Assembler a(kPayloadVa);
    a.cmp(6, 1);
    a.jz_to("done");
    a.mov(6, 1);
    a.mov(0, 0);
    a.mov(1, 10);
    a.label("loop");
    a.add_r(0, 1);
    a.sub(1, 1);
    a.jnz_to("loop");
    a.pushi(kPayloadVa);
    a.jmp_abs(kLibraryBase);  // library returns to the pushed entry address
    a.label("done");
    a.halt();
    a.align4();
    a.finish();

    Section text;
    text.name = Section::make_name(".text");
    text.va = kPayloadVa;
    text.flags = kSectionFlagFirst;
    return build_image(kPayloadVa, kDefaultStackTop, {{text, a.bytes()}});
}

namespace detail {

// Two-pass assembly so stub templates can use label addresses as immediates.
// Instruction lengths are value-independent, so the first pass pins the
// layout and the second emits with resolved addresses.
template <typename F>
inline Assembler assemble_stub(uint32_t base, F emit) {
    Assembler first(base);
    emit(first, [](const std::string&) { return 0u; });
    first.finish();
    Assembler out(base);
    emit(out, [&](const std::string& n) { return first.label_addr(n); });
    out.finish();
    return out;
}

inline std::vector<uint8_t> pad4(std::vector<uint8_t> bytes) {
    while (bytes.size() % 4 != 0) bytes.push_back(0);
    return bytes;
}

// Rolling XOR over little-endian dwords: word i is xored with key0 + i*step.
inline std::vector<uint8_t> xor_rolling(std::vector<uint8_t> bytes, uint32_t key0,
                                        uint32_t step) {
    bytes = pad4(std::move(bytes));
    uint32_t key = key0;
    for (size_t i = 0; i < bytes.size(); i += 4) {
        uint32_t w = read_u32le(bytes, i);
        w ^= key;
        bytes[i] = static_cast<uint8_t>(w);
        bytes[i + 1] = static_cast<uint8_t>(w >> 8);
        bytes[i + 2] = static_cast<uint8_t>(w >> 16);
        bytes[i + 3] = static_cast<uint8_t>(w >> 24);
        key += step;
    }
    return bytes;
}

// Emits the in-place rolling-XOR decode loop over the payload span.
// Clobbers R1,R2,R3; the key register keeps rolling.
inline void emit_decode_loop(Assembler& a, uint32_t payload_va, uint32_t n_words,
                             uint8_t key_reg, uint32_t step, const std::string& tag) {
    a.mov(2, payload_va);
    a.mov(3, n_words);
    a.label("dec" + tag);
    a.load(1, 2, 0);
    a.xor_r(1, key_reg);
    a.store(2, 0, 1);
    a.add(2, 4);
    a.add(key_reg, step);
    a.sub(3, 1);
    a.jnz_to("dec" + tag);
}

inline void emit_hygiene_and_enter(Assembler& a, uint32_t oep) {
    a.mov(3, oep);
    a.mov(0, 0);
    a.mov(6, 0);
    a.jmpr(3);
}

struct PayloadPart {
    uint32_t va = 0;
    uint32_t entry = 0;
    uint32_t stack_top = 0;
    std::vector<uint8_t> bytes;  // padded to a dword boundary
    uint32_t n_words = 0;
};

inline PayloadPart extract_payload(const PackedImage& payload) {
    if (payload.sections.size() != 1)
        throw PackError("packer templates expect a single-section payload");
    const Section& s = payload.sections.front();
    PayloadPart p;
    p.va = s.va;
    p.entry = payload.entry;
    p.stack_top = payload.stack_top;
    p.bytes = pad4(std::vector<uint8_t>(payload.raw.begin() + s.file_off,
                                        payload.raw.begin() + s.file_off + s.file_size));
    p.n_words = static_cast<uint32_t>(p.bytes.size() / 4);
    if (p.entry < s.va || p.entry >= s.va + s.mem_size)
        throw PackError("payload entry outside its section");
    return p;
}

inline CorpusSample finish_sample(PackerId id, PackedImage image, uint32_t true_oep,
                                  std::string notes,
                                  std::optional<std::pair<uint32_t, uint32_t>> range) {
    MachineState st = load(image);
    RunReport rep = run_native(st);
    if (rep.verdict != RunVerdict::Halted)
        throw PackError(std::string("packed image does not halt on the reference interpreter (") +
                        std::string(packer_name(id)) + ")");
    CorpusSample sample;
    sample.id = id;
    sample.image = std::move(image);
    sample.sidecar = {true_oep, rep.final_r0, static_cast<uint32_t>(rep.singlesteps),
                      std::move(notes)};
    sample.suggested_oep_range = range;
    return sample;
}

}  // namespace detail

inline CorpusSample pack_p1(const PackedImage& payload) {
    auto p = detail::extract_payload(payload);
    if (p.va + p.bytes.size() > kStubVa) throw PackError("payload too large for stub layout");
    constexpr uint32_t kKey = 0xB7E1'5163, kStep = 0x9E37'79B9;

    auto stub = detail::assemble_stub(kStubVa, [&](Assembler& a, auto) {
        a.mov(4, kKey);
        detail::emit_decode_loop(a, p.va, p.n_words, 4, kStep, "1");
        a.call_abs(kLibraryBase + kLibraryStubSpacing);  // stub API call, to be ignored
        detail::emit_hygiene_and_enter(a, p.entry);
    }).bytes();

    Section text;
    text.name = Section::make_name(".text");
    text.va = p.va;
    text.flags = kSectionFlagFirst;
    Section sstub;
    sstub.name = Section::make_name(".stub");
    sstub.va = kStubVa;

    PackedImage img = build_image(
        kStubVa, p.stack_top,
        {{text, detail::xor_rolling(p.bytes, kKey, kStep)}, {sstub, stub}});
    return detail::finish_sample(PackerId::P1, std::move(img), p.entry,
                                 "rolling-xor stub, decode in place", std::nullopt);
}

inline CorpusSample pack_p2(const PackedImage& payload) {
    auto p = detail::extract_payload(payload);
    if (p.va + p.bytes.size() > kStubVa) throw PackError("payload too large for stub layout");

    // The two patch slots decode, in order, to:
    //   MOV R5,R4 / ADD R5,R4   and   ADD R5,R2 / MOV R6,R5
    // Keys are chosen so each garbled slot starts with a RET byte, ending
    // block construction right at the patch zone until it is rewritten.
    constexpr uint32_t kPost1 = 0x5421'5411, kSlotKey1 = 0xCE1D'2357;
    constexpr uint32_t kPost2 = 0x6511'5221, kSlotKey2 = 0x64F3'0967;
    static_assert(((kPost1 ^ kSlotKey1) & 0xFF) == 0x46);
    static_assert(((kPost2 ^ kSlotKey2) & 0xFF) == 0x46);
    constexpr uint32_t kKeyBase = 0x1357'9BDF;
    constexpr uint32_t kStep1 = 0x0101'0101, kRekey = 0x0F0F'0F0F, kStep2 = 0x1003'0201;

    Assembler stub = detail::assemble_stub(kStubVa, [&](Assembler& a, auto label_of) {
        uint32_t getpc = label_of("getpc");
        uint32_t patch = label_of("patch");
        a.call_to("getpc");
        a.label("getpc");
        a.pop(2);                 // R2 = pushed return address = getpc
        a.add(2, patch - getpc);  // R2 = patch slot, valid only for original addresses
        a.load(3, 2, 0);
        a.xor_(3, kSlotKey1);
        a.store(2, 0, 3);  // rewrites ahead inside this very block
        a.load(3, 2, 4);
        a.xor_(3, kSlotKey2);
        a.store(2, 4, 3);
        a.mov(4, kKeyBase);
        a.label("patch");
        uint32_t pre1 = kPost1 ^ kSlotKey1, pre2 = kPost2 ^ kSlotKey2;
        a.raw({static_cast<uint8_t>(pre1), static_cast<uint8_t>(pre1 >> 8),
               static_cast<uint8_t>(pre1 >> 16), static_cast<uint8_t>(pre1 >> 24),
               static_cast<uint8_t>(pre2), static_cast<uint8_t>(pre2 >> 8),
               static_cast<uint8_t>(pre2 >> 16), static_cast<uint8_t>(pre2 >> 24)});
        // patched code leaves R5 = 2*kKeyBase + patch, saved in R6
        detail::emit_decode_loop(a, p.va, p.n_words, 5, kStep1, "1");
        a.mov_r(5, 6);
        a.xor_(5, kRekey);
        detail::emit_decode_loop(a, p.va, p.n_words, 5, kStep2, "2");
        detail::emit_hygiene_and_enter(a, p.entry);
    });

    // pack-time key schedule mirrors the stub
    uint32_t key1 = 2 * kKeyBase + stub.label_addr("patch");
    uint32_t key2 = key1 ^ kRekey;
    auto enc = detail::xor_rolling(p.bytes, key1, kStep1);
    enc = detail::xor_rolling(std::move(enc), key2, kStep2);

    Section text;
    text.name = Section::make_name(".text");
    text.va = p.va;
    text.flags = kSectionFlagFirst;
    Section sstub;
    sstub.name = Section::make_name(".stub");
    sstub.va = kStubVa;

    PackedImage img = build_image(kStubVa, p.stack_top, {{text, enc}, {sstub, stub.bytes()}});
    return detail::finish_sample(PackerId::P2, std::move(img), p.entry,
                                 "getpc delta patches ahead of pc, two-pass decode",
                                 std::nullopt);
}

inline CorpusSample pack_p3(const PackedImage& payload) {
    auto p = detail::extract_payload(payload);
    if (p.va + p.bytes.size() > kStubVa) throw PackError("payload too large for stub layout");

    constexpr uint32_t kSeed = 0x5EED'0001, kStep = 0x0107'0F1F;
    constexpr std::array<uint32_t, 4> kBpAdd = {0x0001'0001, 0x0002'0002, 0x0004'0004,
                                                0x0008'0008};
    constexpr uint32_t kSingleSteps = 4;

    auto emit = [&](Assembler& a, auto label_of) {
        a.label("entry");
        a.pushi(label_of("handler"));
        a.pushi(0);
        a.mov_r(3, MachineState::kSp);
        a.mov(2, 0);
        a.store(2, kSehHeadCell, 3);
        a.mov(5, kSeed);
        a.trap(1);  // handler arms B0-B3 and resumes at bp0
        a.label("bp0");
        a.add(5, kBpAdd[0]);
        a.label("bp1");
        a.add(5, kBpAdd[1]);
        a.label("bp2");
        a.add(5, kBpAdd[2]);
        a.label("bp3");
        a.add(5, kBpAdd[3]);
        // fold the single-step counter into the key, amplified by 10 doublings
        a.mov(2, 0);
        a.load(4, 2, label_of("counter"));
        for (int i = 0; i < 10; ++i) a.add_r(4, 4);
        a.xor_r(5, 4);
        detail::emit_decode_loop(a, p.va, p.n_words, 5, kStep, "1");
        a.mov(0, 0);
        a.mov(6, 0);
        a.trap(2);  // handler redirects the context pc to the entry point

        a.label("handler");
        a.load(4, 0, 0);  // record.code
        a.cmp(4, 3);
        a.jz_to("hss");
        a.load(4, 0, 8);  // record.info distinguishes the two traps
        a.cmp(4, 2);
        a.jz_to("hfin");
        for (uint32_t i = 0; i < 4; ++i) {
            a.mov(4, label_of("bp" + std::to_string(i)));
            a.store(1, kCtxOffB0 + 4 * i, 4);
        }
        a.load(4, 1, kCtxOffFlags);
        a.xor_(4, 0x0F00);  // captured enable mask is clear; set all four
        a.store(1, kCtxOffFlags, 4);
        a.mov(4, label_of("bp0"));
        a.store(1, kCtxOffPc, 4);
        a.continue_();

        a.label("hss");  // single step: bump the counter, resume unchanged
        a.mov(2, 0);
        a.load(4, 2, label_of("counter"));
        a.add(4, 1);
        a.store(2, label_of("counter"), 4);
        a.continue_();

        a.label("hfin");  // counter-keyed entry address, breakpoints disarmed
        a.mov(2, 0);
        a.load(4, 2, label_of("counter"));
        for (int i = 0; i < 10; ++i) a.add_r(4, 4);
        a.mov(3, p.entry ^ (kSingleSteps << 10));
        a.xor_r(3, 4);
        a.store(1, kCtxOffPc, 3);
        a.load(4, 1, kCtxOffFlags);
        a.xor_(4, 0x0F00);  // enable bits are set in this context; clear them
        a.store(1, kCtxOffFlags, 4);
        a.continue_();

        a.align4();
        a.label("counter");
        a.raw({0, 0, 0, 0});
    };
    auto stub = detail::assemble_stub(kStubVa, emit).bytes();

    uint32_t key0 = kSeed;
    for (uint32_t add : kBpAdd) key0 += add;
    key0 ^= kSingleSteps << 10;

    Section text;
    text.name = Section::make_name(".text");
    text.va = p.va;
    text.flags = kSectionFlagFirst;
    Section sstub;
    sstub.name = Section::make_name(".stub");
    sstub.va = kStubVa;

    PackedImage img = build_image(kStubVa, p.stack_top,
                                  {{text, detail::xor_rolling(p.bytes, key0, kStep)}, {sstub, stub}});
    return detail::finish_sample(PackerId::P3, std::move(img), p.entry,
                                 "seh + hardware breakpoints, counter-keyed decode, "
                                 "continue-to-oep",
                                 std::nullopt);
}

inline CorpusSample pack_p4(const PackedImage& payload) {
    auto p = detail::extract_payload(payload);
    if (p.va + p.bytes.size() > kStubVa) throw PackError("payload too large for stub layout");

    constexpr uint32_t kSeed = 0xC0DE'0001, kStep = 0x0B00'B135;
    constexpr std::array<uint32_t, 3> kInter = {0x1111, 0x2222, 0x3333};

    auto emit = [&](Assembler& a, auto label_of) {
        a.pushi(label_of("handler"));
        a.pushi(0);
        a.mov_r(3, MachineState::kSp);
        a.mov(2, 0);
        a.store(2, kSehHeadCell, 3);
        a.mov(5, kSeed);
        for (uint32_t i = 0; i < 3; ++i) {
            a.label("site" + std::to_string(i));
            a.jmp_to("sink", /*prefixed=*/true);  // faults; handler skips past
            a.add(5, kInter[i]);
        }
        detail::emit_decode_loop(a, p.va, p.n_words, 5, kStep, "1");
        a.mov(4, 0);  // drop the SEH chain: a bad decode now dies loudly
        a.mov(2, 0);
        a.store(2, kSehHeadCell, 4);
        a.mov(3, label_of("final_mask"));  // placeholder, patched below
        a.xor_r(3, 5);
        a.mov(0, 0);
        a.mov(6, 0);
        a.jmpr(3);
        a.label("sink");

        a.label("handler");  // ctx.R5 += record.address; ctx.pc = address + 6
        a.load(4, 0, 4);
        a.load(3, 1, kCtxOffReg0 + 4 * 5);
        a.add_r(3, 4);
        a.store(1, kCtxOffReg0 + 4 * 5, 3);
        a.add(4, 6);
        a.store(1, kCtxOffPc, 4);
        a.continue_();
        a.label("final_mask");
    };

    // First pass to learn the site addresses, then compute the key schedule
    // and re-emit with the real OEP mask immediate.
    Assembler lay(kStubVa);
    emit(lay, [](const std::string&) { return 0u; });
    lay.finish();
    uint32_t key0 = kSeed;
    for (uint32_t i = 0; i < 3; ++i) {
        key0 += lay.label_addr("site" + std::to_string(i));
        key0 += kInter[i];
    }
    uint32_t final_r5 = key0 + p.n_words * kStep;
    uint32_t mask = p.entry ^ final_r5;

    Assembler real(kStubVa);
    emit(real, [&](const std::string& n) {
        if (n == "final_mask") return mask;
        return lay.label_addr(n);
    });
    real.finish();

    Section text;
    text.name = Section::make_name(".text");
    text.va = p.va;
    text.flags = kSectionFlagFirst;
    Section sstub;
    sstub.name = Section::make_name(".stub");
    sstub.va = kStubVa;

    PackedImage img = build_image(
        kStubVa, p.stack_top,
        {{text, detail::xor_rolling(p.bytes, key0, kStep)}, {sstub, real.bytes()}});
    return detail::finish_sample(PackerId::P4, std::move(img), p.entry,
                                 "prefixed-jump faults, exception-address-keyed decode",
                                 std::nullopt);
}

inline CorpusSample pack_p5(const PackedImage& payload) {
    auto p = detail::extract_payload(payload);
    constexpr uint32_t kKey = 0xFEED'F00D, kStep = 0x0601'1ED5;
    constexpr uint32_t kZoneKey = 0x5A5A'5A5A;
    if (p.va < kP5StubRoom) throw PackError("payload section sits too low for the merged layout");
    const uint32_t section_va = p.va - kP5StubRoom;

    // Trampoline the stub writes over the zone and then falls into.
    Assembler zone_code(0);
    zone_code.mov(0, 0);
    zone_code.mov(3, p.entry);
    zone_code.jmpr(3);
    zone_code.align4();
    std::vector<uint8_t> zone_plain = zone_code.bytes();
    uint32_t zone_words = static_cast<uint32_t>(zone_plain.size() / 4);
    std::vector<uint8_t> blob = detail::xor_rolling(zone_plain, kZoneKey, 0);

    auto stub = detail::assemble_stub(section_va, [&](Assembler& a, auto label_of) {
        a.mov(4, kKey);
        detail::emit_decode_loop(a, p.va, p.n_words, 4, kStep, "1");
        // store loop rewriting the zone just ahead of the executing pc
        a.mov(2, label_of("zone"));
        a.mov(3, label_of("blob"));
        a.mov(4, zone_words);
        a.label("wloop");
        a.load(1, 3, 0);
        a.xor_(1, kZoneKey);
        a.store(2, 0, 1);
        a.add(2, 4);
        a.add(3, 4);
        a.sub(4, 1);
        a.jnz_to("wloop");
        a.mov(6, 0);  // fall-through lands here, never in written bytes
        a.label("zone");
        a.raw(std::vector<uint8_t>(zone_plain.size(), 0));
        a.label("blob");
        a.raw(blob);
        a.align4();
    }).bytes();

    // single merged section: stub page first, payload at its linked address
    if (stub.size() > kP5StubRoom) throw PackError("stub overflows the merged-section layout");
    std::vector<uint8_t> merged(kP5StubRoom, 0);
    std::copy(stub.begin(), stub.end(), merged.begin());
    auto enc = detail::xor_rolling(p.bytes, kKey, kStep);
    merged.insert(merged.end(), enc.begin(), enc.end());

    Section all;
    all.name = Section::make_name(".all");
    all.va = section_va;
    all.flags = kSectionFlagFirst;

    PackedImage img = build_image(section_va, p.stack_top, {{all, merged}});
    uint32_t hi = p.va + static_cast<uint32_t>(enc.size());
    char note[96];
    std::snprintf(note, sizeof note,
                  "merged section; overwrite-ahead trampoline; oep range 0x%08X:0x%08X", p.va, hi);
    return detail::finish_sample(PackerId::P5, std::move(img), p.entry, note,
                                 std::make_pair(p.va, hi));
}

inline CorpusSample pack(const PackedImage& payload, PackerId id) {
    switch (id) {
    case PackerId::P1: return pack_p1(payload);
    case PackerId::P2: return pack_p2(payload);
    case PackerId::P3: return pack_p3(payload);
    case PackerId::P4: return pack_p4(payload);
    case PackerId::P5: return pack_p5(payload);
    }
    throw PackError("unknown packer id");
}

inline std::vector<CorpusSample> pack_all(const PackedImage& payload) {
    std::vector<CorpusSample> out;
    for (PackerId id : {PackerId::P1, PackerId::P2, PackerId::P3, PackerId::P4, PackerId::P5})
        out.push_back(pack(payload, id));
    return out;
}

}  // namespace bop32
