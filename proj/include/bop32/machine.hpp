#pragma once

// Guest machine: architectural state, single-instruction stepping, SEH-style
// exception delivery, context capture/restore, and the reference interpreter
// that serves as the ground-truth oracle for the instrumented engine.

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bop32/isa.hpp"

namespace bop32 {

inline constexpr uint32_t kPageSize = 0x1000;
inline constexpr uint32_t kPageMask = ~(kPageSize - 1);

// Translated-code region. Owned by the engine; guest data accesses into it
// fault, guest fetches are allowed (the engine executes blocks from here).
inline constexpr uint32_t kCacheBase = 0x0090'0000;
inline constexpr uint32_t kCacheLimit = 0x00A0'0000;  // exclusive

inline constexpr bool in_cache_region(uint32_t addr) {
    return addr >= kCacheBase && addr < kCacheLimit;
}

// Well-known cells, initialized by the loader. SEH_HEAD holds the address of
// the current handler frame ([next:4][handler:4]); the two stack cells bound
// the region in which exception frames may be materialized.
inline constexpr uint32_t kSehHeadCell = 0x0000'0F00;
inline constexpr uint32_t kStackTopCell = 0x0000'0F04;
inline constexpr uint32_t kStackBottomCell = 0x0000'0F08;

enum class ExceptionCode : uint32_t {
    AccessViolation = 1,
    InvalidOpcode = 2,
    SingleStep = 3,
    SoftwareTrap = 4,
};

struct ExceptionRecord {
    ExceptionCode code = ExceptionCode::AccessViolation;
    uint32_t address = 0;  // faulting instruction, original-code address
    uint32_t info = 0;     // trap immediate or fault target address

    bool operator==(const ExceptionRecord&) const = default;
};

inline constexpr uint32_t kExceptionRecordSize = 12;

// Serialized guest context: r0..r7 at 0, pc at 32, flags word at 36
// (bit0 Z, bit1 S, bit2 C, bits 8-11 breakpoint enable mask), B0..B3 at 40.
inline constexpr uint32_t kGuestContextSize = 56;
inline constexpr uint32_t kCtxOffReg0 = 0;
inline constexpr uint32_t kCtxOffPc = 32;
inline constexpr uint32_t kCtxOffFlags = 36;
inline constexpr uint32_t kCtxOffB0 = 40;

struct GuestContext {
    std::array<uint32_t, 8> regs{};
    uint32_t pc = 0;
    bool z = false, s = false, c = false;
    std::array<uint32_t, 4> bp{};
    uint8_t bctl = 0;

    std::array<uint8_t, kGuestContextSize> serialize() const {
        std::array<uint8_t, kGuestContextSize> out{};
        auto put = [&](uint32_t off, uint32_t v) {
            out[off] = static_cast<uint8_t>(v);
            out[off + 1] = static_cast<uint8_t>(v >> 8);
            out[off + 2] = static_cast<uint8_t>(v >> 16);
            out[off + 3] = static_cast<uint8_t>(v >> 24);
        };
        for (uint32_t i = 0; i < 8; ++i) put(kCtxOffReg0 + i * 4, regs[i]);
        put(kCtxOffPc, pc);
        uint32_t flags = (z ? 1u : 0) | (s ? 2u : 0) | (c ? 4u : 0) |
                         (static_cast<uint32_t>(bctl & 0x0F) << 8);
        put(kCtxOffFlags, flags);
        for (uint32_t i = 0; i < 4; ++i) put(kCtxOffB0 + i * 4, bp[i]);
        return out;
    }

    static GuestContext deserialize(std::span<const uint8_t> b) {
        GuestContext ctx;
        auto get = [&](uint32_t off) { return read_u32le(b, off); };
        for (uint32_t i = 0; i < 8; ++i) ctx.regs[i] = get(kCtxOffReg0 + i * 4);
        ctx.pc = get(kCtxOffPc);
        uint32_t flags = get(kCtxOffFlags);
        ctx.z = flags & 1;
        ctx.s = flags & 2;
        ctx.c = flags & 4;
        ctx.bctl = static_cast<uint8_t>((flags >> 8) & 0x0F);
        for (uint32_t i = 0; i < 4; ++i) ctx.bp[i] = get(kCtxOffB0 + i * 4);
        return ctx;
    }

    bool operator==(const GuestContext&) const = default;
};

// Sparse paged memory. Guest data accesses check mapping and the cache
// region; host accessors (loader, engine) map on demand and bypass checks.
class GuestMemory {
public:
    using Page = std::array<uint8_t, kPageSize>;

    bool is_mapped(uint32_t addr) const { return pages_.count(addr & kPageMask) != 0; }

    void map_page(uint32_t addr) { pages_.try_emplace(addr & kPageMask); }

    uint8_t* page_data(uint32_t addr) {
        auto it = pages_.find(addr & kPageMask);
        return it == pages_.end() ? nullptr : it->second.data();
    }
    const uint8_t* page_data(uint32_t addr) const {
        auto it = pages_.find(addr & kPageMask);
        return it == pages_.end() ? nullptr : it->second.data();
    }

    // Host view: maps pages on demand.
    void host_write(uint32_t addr, std::span<const uint8_t> bytes) {
        for (uint8_t b : bytes) {
            map_page(addr);
            page_data(addr)[addr & ~kPageMask] = b;
            ++addr;
        }
    }

    std::optional<uint8_t> host_read8(uint32_t addr) const {
        const uint8_t* p = page_data(addr);
        if (!p) return std::nullopt;
        return p[addr & ~kPageMask];
    }

    std::optional<uint32_t> host_read32(uint32_t addr) const {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            auto b = host_read8(addr + i);
            if (!b) return std::nullopt;
            v |= static_cast<uint32_t>(*b) << (8 * i);
        }
        return v;
    }

    // Reads up to `max` contiguous mapped bytes starting at addr (for decode).
    std::vector<uint8_t> host_read_span(uint32_t addr, uint32_t max) const {
        std::vector<uint8_t> out;
        out.reserve(max);
        for (uint32_t i = 0; i < max; ++i) {
            auto b = host_read8(addr + i);
            if (!b) break;
            out.push_back(*b);
        }
        return out;
    }

    void host_write32(uint32_t addr, uint32_t v) {
        uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                        static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
        host_write(addr, b);
    }

    // Guest view: unmapped or cache-region data access fails. The first
    // offending address is reported for the fault's info field.
    std::optional<uint32_t> guest_check_read(uint32_t addr, uint32_t len) const {
        for (uint32_t i = 0; i < len; ++i) {
            uint32_t a = addr + i;
            if (in_cache_region(a) || !is_mapped(a)) return a;
        }
        return std::nullopt;
    }

    std::map<uint32_t, Page>& pages() { return pages_; }
    const std::map<uint32_t, Page>& pages() const { return pages_; }

private:
    std::map<uint32_t, Page> pages_;
};

struct MachineState {
    std::array<uint32_t, 8> regs{};  // R7 is SP
    uint32_t pc = 0;
    bool z = false, s = false, c = false;
    std::array<uint32_t, 4> bp{};
    uint8_t bctl = 0;  // bit i enables bp[i]
    bool halted = false;
    GuestMemory mem;

    static constexpr unsigned kSp = 7;
    uint32_t sp() const { return regs[kSp]; }
    void set_sp(uint32_t v) { regs[kSp] = v; }

    GuestContext capture_context() const {
        return GuestContext{regs, pc, z, s, c, bp, bctl};
    }

    void restore_context(const GuestContext& ctx) {
        regs = ctx.regs;
        pc = ctx.pc;
        z = ctx.z;
        s = ctx.s;
        c = ctx.c;
        bp = ctx.bp;
        bctl = ctx.bctl;
    }

    bool breakpoint_armed_at(uint32_t addr) const {
        for (int i = 0; i < 4; ++i) {
            if ((bctl >> i) & 1 && bp[i] == addr) return true;
        }
        return false;
    }
};

enum class StepKind : uint8_t { Normal, Fault, ContinueRequest, Halted };

struct StepOutcome {
    StepKind kind = StepKind::Normal;
    ExceptionRecord fault{};       // valid when kind == Fault
    uint32_t context_addr = 0;     // valid when kind == ContinueRequest

    static StepOutcome normal() { return {}; }
    static StepOutcome fault_at(ExceptionCode code, uint32_t addr, uint32_t info) {
        return {StepKind::Fault, {code, addr, info}, 0};
    }
};

// Executes exactly one instruction at pc. Faults are outcomes, never host
// errors; pc is left at the faulting instruction. EXIT never reaches this
// interpreter from cached code (the engine consumes it first), so executing
// one here is always an InvalidOpcode fault, as is any 0xF0-prefixed
// instruction. Memory writes are immediately visible to subsequent fetches.
inline StepOutcome step(MachineState& st) {
    const uint32_t at = st.pc;
    auto bytes = st.mem.host_read_span(at, 8);
    if (bytes.empty()) return StepOutcome::fault_at(ExceptionCode::AccessViolation, at, at);

    DecodeResult d = decode(bytes, at);
    if (!d.ok()) {
        if (d.error == DecodeError::UnknownOpcode)
            return StepOutcome::fault_at(ExceptionCode::InvalidOpcode, at, 0);
        return StepOutcome::fault_at(ExceptionCode::AccessViolation, at,
                                     at + static_cast<uint32_t>(bytes.size()));
    }
    const Instruction& in = *d.instr;
    if (in.has_bad_prefix) return StepOutcome::fault_at(ExceptionCode::InvalidOpcode, at, 0);

    const uint32_t next = at + in.length;

    auto guest_read32 = [&](uint32_t addr, uint32_t& out) -> std::optional<StepOutcome> {
        if (auto bad = st.mem.guest_check_read(addr, 4))
            return StepOutcome::fault_at(ExceptionCode::AccessViolation, at, *bad);
        out = *st.mem.host_read32(addr);
        return std::nullopt;
    };
    auto guest_write32 = [&](uint32_t addr, uint32_t v) -> std::optional<StepOutcome> {
        if (auto bad = st.mem.guest_check_read(addr, 4))
            return StepOutcome::fault_at(ExceptionCode::AccessViolation, at, *bad);
        st.mem.host_write32(addr, v);
        return std::nullopt;
    };
    auto push32 = [&](uint32_t v) -> std::optional<StepOutcome> {
        uint32_t nsp = st.sp() - 4;
        if (auto f = guest_write32(nsp, v)) return f;
        st.set_sp(nsp);
        return std::nullopt;
    };
    auto set_zs = [&](uint32_t r) {
        st.z = r == 0;
        st.s = (r >> 31) != 0;
    };

    switch (in.mnemonic) {
    case Mnemonic::MovImm:
        st.regs[in.ra] = in.imm;
        break;
    case Mnemonic::MovReg:
        st.regs[in.ra] = st.regs[in.rb];
        break;
    case Mnemonic::Load: {
        uint32_t v = 0;
        if (auto f = guest_read32(st.regs[in.rb] + in.imm, v)) return *f;
        st.regs[in.ra] = v;
        break;
    }
    case Mnemonic::Store:
        if (auto f = guest_write32(st.regs[in.ra] + in.imm, st.regs[in.rb])) return *f;
        break;
    case Mnemonic::AddImm:
    case Mnemonic::AddReg: {
        uint32_t b = in.mnemonic == Mnemonic::AddImm ? in.imm : st.regs[in.rb];
        uint64_t wide = static_cast<uint64_t>(st.regs[in.ra]) + b;
        st.regs[in.ra] = static_cast<uint32_t>(wide);
        set_zs(st.regs[in.ra]);
        st.c = wide > 0xFFFF'FFFFull;
        break;
    }
    case Mnemonic::SubImm:
    case Mnemonic::SubReg: {
        uint32_t b = in.mnemonic == Mnemonic::SubImm ? in.imm : st.regs[in.rb];
        uint32_t a = st.regs[in.ra];
        st.regs[in.ra] = a - b;
        set_zs(st.regs[in.ra]);
        st.c = a < b;  // borrow
        break;
    }
    case Mnemonic::XorImm:
    case Mnemonic::XorReg: {
        uint32_t b = in.mnemonic == Mnemonic::XorImm ? in.imm : st.regs[in.rb];
        st.regs[in.ra] ^= b;
        set_zs(st.regs[in.ra]);
        break;
    }
    case Mnemonic::CmpImm: {
        uint32_t a = st.regs[in.ra];
        set_zs(a - in.imm);
        st.c = a < in.imm;
        break;
    }
    case Mnemonic::Push:
        if (auto f = push32(st.regs[in.ra])) return *f;
        break;
    case Mnemonic::PushImm:
        if (auto f = push32(in.imm)) return *f;
        break;
    case Mnemonic::Pop: {
        uint32_t v = 0;
        if (auto f = guest_read32(st.sp(), v)) return *f;
        st.set_sp(st.sp() + 4);
        st.regs[in.ra] = v;
        break;
    }
    case Mnemonic::Jmp:
        st.pc = next + in.rel();
        return StepOutcome::normal();
    case Mnemonic::Jz:
        st.pc = st.z ? next + in.rel() : next;
        return StepOutcome::normal();
    case Mnemonic::Jnz:
        st.pc = st.z ? next : next + in.rel();
        return StepOutcome::normal();
    case Mnemonic::JmpReg:
        st.pc = st.regs[in.ra];
        return StepOutcome::normal();
    case Mnemonic::Call:
        if (auto f = push32(next)) return *f;
        st.pc = next + in.rel();
        return StepOutcome::normal();
    case Mnemonic::CallReg: {
        uint32_t target = st.regs[in.ra];
        if (auto f = push32(next)) return *f;
        st.pc = target;
        return StepOutcome::normal();
    }
    case Mnemonic::Ret: {
        uint32_t v = 0;
        if (auto f = guest_read32(st.sp(), v)) return *f;
        st.set_sp(st.sp() + 4);
        st.pc = v;
        return StepOutcome::normal();
    }
    case Mnemonic::Trap:
        return StepOutcome::fault_at(ExceptionCode::SoftwareTrap, at, in.imm);
    case Mnemonic::Continue:
        return {StepKind::ContinueRequest, {}, st.regs[1]};
    case Mnemonic::Halt:
        st.halted = true;
        return {StepKind::Halted, {}, 0};
    case Mnemonic::Exit:
        return StepOutcome::fault_at(ExceptionCode::InvalidOpcode, at, 0);
    }

    st.pc = next;
    return StepOutcome::normal();
}

enum class DeliveryResult : uint8_t { Delivered, Unhandled };

// SEH-analog delivery: refuses when the handler chain is empty or SP lies
// outside the bounds cells (the stack-bounds rule that makes misbehaving
// stubs die loudly). Otherwise materializes record + context on the guest
// stack, points R0/R1 at them and redirects pc to the handler. The handler
// frame is not unlinked; guest code manages the chain itself.
inline DeliveryResult deliver_exception(MachineState& st, const ExceptionRecord& rec) {
    auto head = st.mem.host_read32(kSehHeadCell);
    auto top = st.mem.host_read32(kStackTopCell);
    auto bottom = st.mem.host_read32(kStackBottomCell);
    if (!head || *head == 0 || !top || !bottom) return DeliveryResult::Unhandled;
    if (st.sp() < *bottom || st.sp() > *top) return DeliveryResult::Unhandled;

    auto handler = st.mem.host_read32(*head + 4);
    if (!handler) return DeliveryResult::Unhandled;

    GuestContext ctx = st.capture_context();  // state at the fault, pre-push SP

    uint32_t frame = st.sp() - (kExceptionRecordSize + kGuestContextSize);
    if (st.mem.guest_check_read(frame, kExceptionRecordSize + kGuestContextSize))
        return DeliveryResult::Unhandled;

    st.mem.host_write32(frame + 0, static_cast<uint32_t>(rec.code));
    st.mem.host_write32(frame + 4, rec.address);
    st.mem.host_write32(frame + 8, rec.info);
    auto bytes = ctx.serialize();
    st.mem.host_write(frame + kExceptionRecordSize, bytes);

    st.set_sp(frame);
    st.regs[0] = frame;
    st.regs[1] = frame + kExceptionRecordSize;
    st.pc = *handler;
    return DeliveryResult::Delivered;
}

// Applies the 56-byte context at ctx_addr. This is the only path by which
// guest code can change B0-B3 and the enable mask. Returns the fault target
// address if the context is unreadable.
inline std::optional<uint32_t> apply_context(MachineState& st, uint32_t ctx_addr) {
    if (auto bad = st.mem.guest_check_read(ctx_addr, kGuestContextSize)) return bad;
    std::array<uint8_t, kGuestContextSize> buf;
    for (uint32_t i = 0; i < kGuestContextSize; ++i) buf[i] = *st.mem.host_read8(ctx_addr + i);
    st.restore_context(GuestContext::deserialize(buf));
    return std::nullopt;
}

struct TraceEntry {
    uint32_t pc = 0;
    std::string_view op;

    bool operator==(const TraceEntry&) const = default;
};

enum class RunVerdict : uint8_t {
    Halted,
    UnhandledException,
    FuelExhausted,
};

struct RunReport {
    RunVerdict verdict = RunVerdict::Halted;
    uint32_t final_r0 = 0;
    uint64_t singlesteps = 0;
    std::vector<TraceEntry> trace;
    ExceptionRecord last_unhandled{};
};

inline constexpr uint64_t kDefaultFuel = 10'000'000;

// Uninstrumented run loop from the current state: records each fetched
// instruction, routes faults through the SEH analog, applies contexts from
// CONTINUE, and synthesizes SingleStep after an instruction at an armed
// breakpoint address retires (trap-after-effects timing).
inline RunReport run_native(MachineState& st, uint64_t fuel = kDefaultFuel) {
    RunReport rep;
    auto raise = [&](const ExceptionRecord& rec) -> bool {
        if (deliver_exception(st, rec) == DeliveryResult::Unhandled) {
            rep.verdict = RunVerdict::UnhandledException;
            rep.last_unhandled = rec;
            return false;
        }
        return true;
    };

    while (!st.halted) {
        if (fuel == 0) {
            rep.verdict = RunVerdict::FuelExhausted;
            break;
        }
        --fuel;

        const uint32_t at = st.pc;
        auto bytes = st.mem.host_read_span(at, 8);
        DecodeResult d = decode(bytes, at);
        if (d.ok()) rep.trace.push_back({at, d.instr->name()});

        StepOutcome out = step(st);
        bool ok = true;
        switch (out.kind) {
        case StepKind::Normal:
            if (st.breakpoint_armed_at(at)) {
                ++rep.singlesteps;
                ok = raise({ExceptionCode::SingleStep, at, 0});
            }
            break;
        case StepKind::Fault:
            ok = raise(out.fault);
            break;
        case StepKind::ContinueRequest:
            if (auto bad = apply_context(st, out.context_addr))
                ok = raise({ExceptionCode::AccessViolation, at, *bad});
            break;
        case StepKind::Halted:
            break;
        }
        if (!ok) break;
    }
    if (st.halted) rep.verdict = RunVerdict::Halted;
    rep.final_r0 = st.regs[0];
    return rep;
}

}  // namespace bop32
