#pragma once

// Single-slot-cache instrumentation engine. One basic block at a time is
// rewritten into the cache region and executed on the machine core; every
// control transfer exits back to the dispatcher, which rebuilds at the
// destination. Self-modification is detected after each store by either a
// write-range test or an Adler-32 recheck of the original block bytes.
// Faults raised inside cached code have their addresses mapped back to
// original code before SEH delivery, context restores are intercepted so the
// engine keeps control (and mirrors the debug-breakpoint registers into a
// ledger), and blocks are cut at armed breakpoint addresses so single-step
// traps fire exactly where native execution would raise them.

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bop32/image.hpp"
#include "bop32/isa.hpp"
#include "bop32/machine.hpp"
#include "bop32/oep.hpp"

namespace bop32 {

inline constexpr uint32_t kAdlerMod = 65521;

inline uint32_t adler32(std::span<const uint8_t> data) {
    uint32_t a = 1, b = 0;
    for (uint8_t byte : data) {
        a = (a + byte) % kAdlerMod;
        b = (b + a) % kAdlerMod;
    }
    return b << 16 | a;
}

enum class SelfModMethod : uint8_t { WriteRangeCheck, Adler32Check };
enum class CutReason : uint8_t { ControlTransfer, BreakpointCut, UndecodableGuard };

struct EngineConfig {
    SelfModMethod selfmod_method = SelfModMethod::Adler32Check;
    OepStrategy oep_strategy = OepStrategy::SectionRange;
    std::optional<std::pair<uint32_t, uint32_t>> oep_range;  // SectionRange override
    uint64_t fuel = kDefaultFuel;
    bool fixups_enabled = true;        // exception-address fix-up (negative-test hook)
    bool call_pushes_original = true;  // return-address rule (negative-test hook)
};

struct EngineStats {
    uint64_t block_builds = 0;
    uint64_t transfers = 0;
    uint64_t selfmod_breaks = 0;
    uint64_t checksum_recomputes = 0;
    uint64_t writes_checked = 0;
    uint64_t exceptions_fixed = 0;
    uint64_t continues_intercepted = 0;
    uint64_t singlesteps_delivered = 0;
    double wall_time = 0.0;

    bool operator==(const EngineStats&) const = default;
};

// Mirror of every breakpoint configuration observed passing through the
// continue dispatcher; equals the machine's B0-B3/bctl after each
// intercepted context application.
struct BreakpointLedger {
    std::array<uint32_t, 4> addr{};
    uint8_t enable_mask = 0;

    void record(const std::array<uint32_t, 4>& bps, uint8_t bctl) {
        addr = bps;
        enable_mask = bctl & 0x0F;
    }

    bool armed_at(uint32_t a) const {
        for (int i = 0; i < 4; ++i) {
            if ((enable_mask >> i & 1) && addr[i] == a) return true;
        }
        return false;
    }
};

struct BlockInstr {
    uint32_t orig_addr = 0;
    uint8_t orig_len = 0;
    uint32_t cache_addr = 0;
    uint32_t cache_len = 0;
    std::string_view op;
    bool is_store = false;
    bool pushes_word = false;
    bool has_exit = false;  // rewritten control transfer; retires at its exit
    uint8_t store_base = 0;
    uint32_t store_disp = 0;
};

enum class ExitKind : uint8_t {
    Direct,          // transfer to a fixed original address
    Register,        // target read from a register at exit time
    PopReturn,       // target popped from the guest stack
    GuestExitFault,  // guest code contained EXIT; faults at the original pc
    NativeProbe,     // undecodable at build time: single native step there
};

struct ExitPoint {
    uint32_t cache_addr = 0;
    ExitKind kind = ExitKind::Direct;
    uint32_t target = 0;
    uint8_t reg = 0;
    uint32_t owner_addr = 0;  // original instruction this exit realizes
};

struct CachedBlock {
    uint32_t orig_start = 0;
    uint32_t orig_len = 0;
    uint32_t cache_start = 0;
    uint32_t cache_len = 0;
    CutReason cut_reason = CutReason::ControlTransfer;
    uint32_t checksum = 0;  // adler32 over the original byte span
    bool contains_store = false;
    std::vector<BlockInstr> instrs;
    std::vector<ExitPoint> exits;

    const BlockInstr* instr_starting_at(uint32_t cache_pc) const {
        for (const auto& i : instrs) {
            if (i.cache_addr == cache_pc) return &i;
        }
        return nullptr;
    }

    // Maps a cache address anywhere inside an instruction's rewritten span
    // back to that instruction's original address.
    const BlockInstr* instr_covering(uint32_t cache_pc) const {
        for (const auto& i : instrs) {
            if (cache_pc >= i.cache_addr && cache_pc < i.cache_addr + i.cache_len) return &i;
        }
        return nullptr;
    }

    const ExitPoint* exit_at(uint32_t cache_pc) const {
        for (const auto& e : exits) {
            if (e.cache_addr == cache_pc) return &e;
        }
        return nullptr;
    }

    bool overlaps(uint32_t lo, uint32_t hi) const {
        return lo < orig_start + orig_len && orig_start < hi;
    }
};

struct CacheOverflowError : std::runtime_error {
    CacheOverflowError() : std::runtime_error("rewritten block exceeds cache region") {}
};

enum class UnpackVerdict : uint8_t {
    OepFound,
    Halted,  // ran to HALT without the detector firing
    FuelExhausted,
    UnhandledException,
    CacheOverflow,
};

inline std::string_view verdict_name(UnpackVerdict v) {
    switch (v) {
    case UnpackVerdict::OepFound: return "oep-found";
    case UnpackVerdict::Halted: return "halted";
    case UnpackVerdict::FuelExhausted: return "fuel-exhausted";
    case UnpackVerdict::UnhandledException: return "unhandled-exception";
    case UnpackVerdict::CacheOverflow: return "cache-overflow";
    }
    return "?";
}

struct UnpackReport {
    std::optional<uint32_t> oep;
    bool oep_candidate = false;  // FirstLibraryCall results need confirmation
    UnpackVerdict verdict = UnpackVerdict::Halted;
    EngineStats stats;
    std::vector<TraceEntry> trace;
    std::vector<uint32_t> exception_addresses;  // record.address of every delivery
};

class Engine {
public:
    Engine(const PackedImage& image, EngineConfig config)
        : cfg_(config), st_(load(image)), fuel_(config.fuel) {
        detector_.strategy = cfg_.oep_strategy;
        auto range = cfg_.oep_range ? *cfg_.oep_range : first_section_range(image);
        detector_.range_lo = range.first;
        detector_.range_hi = range.second;
        detector_.lib_lo = kLibraryBase;
        detector_.lib_hi = kLibraryBase + kLibrarySize;
        for (const Section& s : image.sections) {
            if (image.entry >= s.va && image.entry < s.va + s.mem_size) {
                detector_.stub_ignore_lo = s.va;
                detector_.stub_ignore_hi = s.va + s.mem_size;
            }
        }
        ledger_.record(st_.bp, st_.bctl);
        next_target_ = st_.pc;
        source_ = 0;
    }

    MachineState& state() { return st_; }
    const EngineStats& stats() const { return stats_; }
    const std::vector<TraceEntry>& trace() const { return trace_; }
    const CachedBlock& block() const { return block_; }
    const BreakpointLedger& ledger() const { return ledger_; }
    UnpackVerdict verdict() const { return verdict_; }
    std::optional<uint32_t> oep() const { return oep_; }

    // One dispatcher iteration: feed the detector, rebuild at the pending
    // target, execute the block and classify its exit. Returns false once a
    // verdict is reached; the machine then sits at the stop point (for the
    // OEP verdict, before the first instruction of the reported block).
    bool dispatch_once() {
        ++stats_.transfers;
        if (feed_next_) {
            if (auto hit = detector_.on_transfer(next_target_, source_,
                                                 st_.mem.host_read32(st_.sp()))) {
                oep_ = *hit;
                verdict_ = UnpackVerdict::OepFound;
                st_.pc = next_target_;
                return false;
            }
        }
        feed_next_ = true;

        if (fuel_ == 0) {
            verdict_ = UnpackVerdict::FuelExhausted;
            return false;
        }

        try {
            block_ = build_block(next_target_, ledger_);
        } catch (const CacheOverflowError&) {
            verdict_ = UnpackVerdict::CacheOverflow;
            return false;
        }
        ++stats_.block_builds;

        BlockExit exit = execute_block();
        switch (exit.kind) {
        case BlockExit::Kind::Transfer:
            next_target_ = exit.target;
            source_ = exit.source;
            return true;
        case BlockExit::Kind::NativeContinue:
            // sequential fall-through after a native probe, not a transfer
            next_target_ = exit.target;
            source_ = exit.source;
            feed_next_ = false;
            return true;
        case BlockExit::Kind::SelfModBreak:
            next_target_ = exit.target;
            source_ = exit.source;
            return true;
        case BlockExit::Kind::GuestFault:
            return on_guest_fault(exit.rec);
        case BlockExit::Kind::ContinueIntercepted: {
            auto resume = on_continue(exit.target, exit.source);
            if (!resume) return false;  // fault during context read ended the run
            next_target_ = *resume;
            source_ = exit.source;
            return true;
        }
        case BlockExit::Kind::Halted:
            verdict_ = UnpackVerdict::Halted;
            return false;
        case BlockExit::Kind::OutOfFuel:
            verdict_ = UnpackVerdict::FuelExhausted;
            return false;
        }
        return false;
    }

    UnpackReport run() {
        auto t0 = std::chrono::steady_clock::now();
        while (dispatch_once()) {
        }
        auto t1 = std::chrono::steady_clock::now();
        stats_.wall_time = std::chrono::duration<double>(t1 - t0).count();

        UnpackReport rep;
        rep.oep = oep_;
        rep.oep_candidate = detector_.candidate_only;
        rep.verdict = verdict_;
        rep.stats = stats_;
        rep.trace = trace_;
        rep.exception_addresses = exception_addresses_;
        return rep;
    }

    // Decodes forward from org_va, rewriting control transfers into cache
    // exits. Stops after the first control transfer, after an instruction at
    // an armed ledger breakpoint, or at the first undecodable instruction
    // (the block then ends with a native probe so the machine faults at the
    // original address). Non-control instructions are copied verbatim,
    // prefix bytes included.
    CachedBlock build_block(uint32_t org_va, const BreakpointLedger& ledger) {
        CachedBlock blk;
        blk.orig_start = org_va;
        blk.cache_start = kCacheBase;

        uint32_t cursor = org_va;
        uint32_t ccur = kCacheBase;

        auto emit = [&](std::span<const uint8_t> bytes) {
            if (ccur + bytes.size() > kCacheLimit) throw CacheOverflowError();
            st_.mem.host_write(ccur, bytes);
            ccur += static_cast<uint32_t>(bytes.size());
        };
        auto emit_exit = [&](ExitKind kind, uint32_t target, uint8_t reg, uint32_t owner) {
            blk.exits.push_back({ccur, kind, target, reg, owner});
            Instruction e{Mnemonic::Exit, 0, 0, kind == ExitKind::Register ? reg : target};
            emit(encode(e));
        };
        auto emit_pushi = [&](uint32_t value) { emit(encode({Mnemonic::PushImm, 0, 0, value})); };

        bool done = false;
        while (!done) {
            auto raw = st_.mem.host_read_span(cursor, 8);
            DecodeResult d = decode(raw, cursor);
            if (!d.ok()) {
                blk.cut_reason = CutReason::UndecodableGuard;
                emit_exit(ExitKind::NativeProbe, cursor, 0, cursor);
                break;
            }
            const Instruction& in = *d.instr;
            const uint32_t next = cursor + in.length;

            BlockInstr bi;
            bi.orig_addr = cursor;
            bi.orig_len = in.length;
            bi.cache_addr = ccur;
            bi.op = in.name();

            if (in.has_bad_prefix || !in.is_control_transfer()) {
                // verbatim copy; prefixed instructions fault natively
                emit(std::span(raw).first(in.length));
                if (in.mnemonic == Mnemonic::Store) {
                    bi.is_store = true;
                    bi.store_base = in.ra;
                    bi.store_disp = in.imm;
                    blk.contains_store = true;
                }
                bi.pushes_word = in.mnemonic == Mnemonic::Push || in.mnemonic == Mnemonic::PushImm;
                if (in.has_bad_prefix && in.is_control_transfer()) {
                    blk.cut_reason = CutReason::ControlTransfer;
                    done = true;
                }
            } else {
                blk.cut_reason = CutReason::ControlTransfer;
                done = true;
                switch (in.mnemonic) {
                case Mnemonic::Jmp:
                    emit_exit(ExitKind::Direct, next + in.rel(), 0, cursor);
                    break;
                case Mnemonic::Jz:
                case Mnemonic::Jnz: {
                    // [Jcc +5][EXIT fallthrough][EXIT taken]
                    Instruction cc{in.mnemonic, 0, 0, 5};
                    emit(encode(cc));
                    emit_exit(ExitKind::Direct, next, 0, cursor);
                    emit_exit(ExitKind::Direct, next + in.rel(), 0, cursor);
                    break;
                }
                case Mnemonic::JmpReg:
                    emit_exit(ExitKind::Register, 0, in.ra, cursor);
                    break;
                case Mnemonic::Call:
                case Mnemonic::CallReg: {
                    // The pushed return address must be the original next
                    // instruction; GetPC stubs compute on it.
                    uint32_t naive = ccur + 5;  // where the exit lands in cache
                    emit_pushi(cfg_.call_pushes_original ? next : naive);
                    bi.pushes_word = true;
                    if (in.mnemonic == Mnemonic::Call)
                        emit_exit(ExitKind::Direct, next + in.rel(), 0, cursor);
                    else
                        emit_exit(ExitKind::Register, 0, in.ra, cursor);
                    break;
                }
                case Mnemonic::Ret:
                    emit_exit(ExitKind::PopReturn, 0, 0, cursor);
                    break;
                case Mnemonic::Trap:
                case Mnemonic::Continue:
                case Mnemonic::Halt:
                    emit(std::span(raw).first(in.length));
                    break;
                case Mnemonic::Exit:
                    // position-dependent: valid only inside the cache, so a
                    // copy would change meaning; fault at the original pc
                    emit_exit(ExitKind::GuestExitFault, 0, 0, cursor);
                    break;
                default:
                    break;
                }
            }

            bi.cache_len = ccur - bi.cache_addr;
            blk.instrs.push_back(bi);
            cursor = next;

            if (!done && ledger.armed_at(bi.orig_addr)) {
                blk.cut_reason = CutReason::BreakpointCut;
                // normally unreached: the single-step fires at retirement
                emit_exit(ExitKind::Direct, cursor, 0, bi.orig_addr);
                done = true;
            }
        }

        blk.orig_len = cursor - org_va;
        blk.cache_len = ccur - kCacheBase;
        auto orig_bytes = st_.mem.host_read_span(blk.orig_start, blk.orig_len);
        blk.checksum = adler32(orig_bytes);
        return blk;
    }

    // Store retired: decide whether it invalidated the current block. Both
    // methods resume after the writing instruction; re-running a
    // non-idempotent store would corrupt state.
    bool check_selfmod(const CachedBlock& blk, uint32_t target, uint32_t width) {
        ++stats_.writes_checked;
        if (cfg_.selfmod_method == SelfModMethod::WriteRangeCheck)
            return blk.overlaps(target, target + width);
        ++stats_.checksum_recomputes;
        auto bytes = st_.mem.host_read_span(blk.orig_start, blk.orig_len);
        return adler32(bytes) != blk.checksum;
    }

private:
    struct BlockExit {
        enum class Kind {
            Transfer,
            NativeContinue,
            SelfModBreak,
            GuestFault,
            ContinueIntercepted,
            Halted,
            OutOfFuel,
        } kind = Kind::Halted;
        uint32_t target = 0;  // Transfer/NativeContinue/SelfModBreak destination;
                              // context address for ContinueIntercepted
        uint32_t source = 0;  // original address responsible for the exit
        ExceptionRecord rec{};
    };

    // Runs the cached block. Engine bookkeeping never touches guest
    // registers, flags, SP or non-cache memory; the only architectural
    // effects are those of the guest's own instructions (the rewritten
    // CALL/RET stack traffic included).
    BlockExit execute_block() {
        st_.pc = block_.cache_start;

        while (true) {
            // Record before the exit check: a rewritten JMP/RET/JMPR is pure
            // exit and shares its cache address with the exit point.
            const BlockInstr* bi = block_.instr_starting_at(st_.pc);
            if (bi) {
                if (fuel_ == 0) return {BlockExit::Kind::OutOfFuel, 0, 0, {}};
                --fuel_;
                trace_.push_back({bi->orig_addr, bi->op});
            }

            if (const ExitPoint* ep = block_.exit_at(st_.pc)) {
                uint32_t target = 0;
                switch (ep->kind) {
                case ExitKind::Direct:
                    target = ep->target;
                    break;
                case ExitKind::Register:
                    target = st_.regs[ep->reg];
                    break;
                case ExitKind::PopReturn: {
                    if (auto bad = st_.mem.guest_check_read(st_.sp(), 4)) {
                        st_.pc = ep->owner_addr;
                        return {BlockExit::Kind::GuestFault, 0, ep->owner_addr,
                                {ExceptionCode::AccessViolation, ep->owner_addr, *bad}};
                    }
                    target = *st_.mem.host_read32(st_.sp());
                    st_.set_sp(st_.sp() + 4);
                    break;
                }
                case ExitKind::GuestExitFault:
                    st_.pc = ep->owner_addr;
                    return {BlockExit::Kind::GuestFault, 0, ep->owner_addr,
                            {ExceptionCode::InvalidOpcode, ep->owner_addr, 0}};
                case ExitKind::NativeProbe:
                    return native_probe(ep->target);
                }
                st_.pc = target;
                if (ledger_.armed_at(ep->owner_addr)) {
                    ++stats_.singlesteps_delivered;
                    return {BlockExit::Kind::GuestFault, 0, ep->owner_addr,
                            {ExceptionCode::SingleStep, ep->owner_addr, 0}};
                }
                return {BlockExit::Kind::Transfer, target, ep->owner_addr, {}};
            }

            if (!bi) throw std::logic_error("pc escaped the cached block");

            uint32_t store_target = 0;
            if (bi->is_store) store_target = st_.regs[bi->store_base] + bi->store_disp;

            StepOutcome out = step(st_);
            switch (out.kind) {
            case StepKind::Normal:
                break;
            case StepKind::Fault: {
                ExceptionRecord rec = out.fault;
                uint32_t orig = translate_fault(rec.address);
                if (cfg_.fixups_enabled && orig != rec.address) {
                    rec.address = orig;
                    ++stats_.exceptions_fixed;
                }
                st_.pc = rec.address;  // context pc delivered to the handler
                return {BlockExit::Kind::GuestFault, 0, rec.address, rec};
            }
            case StepKind::ContinueRequest:
                return {BlockExit::Kind::ContinueIntercepted, out.context_addr, bi->orig_addr, {}};
            case StepKind::Halted:
                return {BlockExit::Kind::Halted, 0, 0, {}};
            }

            if (bi->is_store) {
                detector_.on_write(store_target, 4);
                if (check_selfmod(block_, store_target, 4)) {
                    ++stats_.selfmod_breaks;
                    uint32_t resume = bi->orig_addr + bi->orig_len;
                    st_.pc = resume;
                    return {BlockExit::Kind::SelfModBreak, resume, bi->orig_addr, {}};
                }
            }
            if (bi->pushes_word) detector_.on_write(st_.sp(), 4);

            if (ledger_.armed_at(bi->orig_addr)) {
                ++stats_.singlesteps_delivered;
                st_.pc = bi->orig_addr + bi->orig_len;  // architectural next
                return {BlockExit::Kind::GuestFault, 0, bi->orig_addr,
                        {ExceptionCode::SingleStep, bi->orig_addr, 0}};
            }
        }
    }

    // Undecodable at build time: run one instruction natively at the
    // original address. Usually this reproduces the authentic fault; if the
    // bytes became decodable in the meantime the instruction simply executes
    // uninstrumented and the dispatcher resumes at the resulting pc.
    BlockExit native_probe(uint32_t at) {
        st_.pc = at;
        auto raw = st_.mem.host_read_span(at, 8);
        DecodeResult d = decode(raw, at);
        if (d.ok()) {
            if (fuel_ == 0) return {BlockExit::Kind::OutOfFuel, 0, 0, {}};
            --fuel_;
            trace_.push_back({at, d.instr->name()});
        }
        StepOutcome out = step(st_);
        switch (out.kind) {
        case StepKind::Normal:
            if (d.ok() && d.instr->mnemonic == Mnemonic::Store)
                detector_.on_write(st_.regs[d.instr->ra] + d.instr->imm, 4);
            if (d.ok() && (d.instr->mnemonic == Mnemonic::Push ||
                           d.instr->mnemonic == Mnemonic::PushImm))
                detector_.on_write(st_.sp(), 4);
            if (ledger_.armed_at(at)) {
                ++stats_.singlesteps_delivered;
                return {BlockExit::Kind::GuestFault, 0, at,
                        {ExceptionCode::SingleStep, at, 0}};
            }
            if (d.ok() && d.instr->is_control_transfer())
                return {BlockExit::Kind::Transfer, st_.pc, at, {}};
            return {BlockExit::Kind::NativeContinue, st_.pc, at, {}};
        case StepKind::Fault:
            return {BlockExit::Kind::GuestFault, 0, at, out.fault};
        case StepKind::ContinueRequest:
            return {BlockExit::Kind::ContinueIntercepted, out.context_addr, at, {}};
        case StepKind::Halted:
            return {BlockExit::Kind::Halted, 0, 0, {}};
        }
        return {BlockExit::Kind::Halted, 0, 0, {}};
    }

    uint32_t translate_fault(uint32_t cache_addr) const {
        if (const BlockInstr* bi = block_.instr_covering(cache_addr)) return bi->orig_addr;
        return cache_addr;
    }

    // Routes a guest-visible fault through the SEH analog. The handler is
    // guest code and gets instrumented like everything else.
    bool on_guest_fault(const ExceptionRecord& rec) {
        exception_addresses_.push_back(rec.address);
        if (deliver_exception(st_, rec) == DeliveryResult::Unhandled) {
            verdict_ = UnpackVerdict::UnhandledException;
            return false;
        }
        next_target_ = st_.pc;  // handler entry
        source_ = rec.address;
        return true;
    }

    // Context restore requested by guest code. Records the breakpoint
    // configuration, applies the context, and resumes under engine control
    // at the context's pc instead of transferring natively.
    std::optional<uint32_t> on_continue(uint32_t ctx_addr, uint32_t orig) {
        if (auto bad = st_.mem.guest_check_read(ctx_addr, kGuestContextSize)) {
            st_.pc = orig;
            if (!on_guest_fault({ExceptionCode::AccessViolation, orig, *bad}))
                return std::nullopt;
            return next_target_;
        }
        std::array<uint8_t, kGuestContextSize> buf;
        for (uint32_t i = 0; i < kGuestContextSize; ++i)
            buf[i] = *st_.mem.host_read8(ctx_addr + i);
        GuestContext ctx = GuestContext::deserialize(buf);
        ledger_.record(ctx.bp, ctx.bctl);
        st_.restore_context(ctx);
        ++stats_.continues_intercepted;
        return ctx.pc;
    }

    EngineConfig cfg_;
    MachineState st_;
    OepDetector detector_;
    BreakpointLedger ledger_;
    EngineStats stats_;
    CachedBlock block_;
    std::vector<TraceEntry> trace_;
    std::vector<uint32_t> exception_addresses_;
    uint64_t fuel_ = 0;
    uint32_t next_target_ = 0;
    uint32_t source_ = 0;
    bool feed_next_ = true;
    std::optional<uint32_t> oep_;
    UnpackVerdict verdict_ = UnpackVerdict::Halted;
};

inline UnpackReport run_unpack(const PackedImage& image, const EngineConfig& config) {
    Engine eng(image, config);
    return eng.run();
}

}  // namespace bop32
