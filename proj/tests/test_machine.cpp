#include <catch_amalgamated.hpp>

#include "bop32/assembler.hpp"
#include "bop32/image.hpp"
#include "bop32/machine.hpp"
#include "bop32/packers.hpp"

using namespace bop32;

namespace {

// Minimal machine: code at `base`, stack and well-known cells wired up the
// same way the loader does it.
MachineState make_machine(uint32_t base, const std::vector<uint8_t>& code,
                          uint32_t stack_top = 0x0002'0000) {
    MachineState st;
    for (uint32_t a = base & kPageMask; a < base + code.size(); a += kPageSize)
        st.mem.map_page(a);
    st.mem.host_write(base, code);
    for (uint32_t a = stack_top - kPageSize; a < stack_top; a += kPageSize) st.mem.map_page(a);
    st.set_sp(stack_top);
    st.mem.map_page(kSehHeadCell);
    st.mem.host_write32(kSehHeadCell, 0);
    st.mem.host_write32(kStackTopCell, stack_top);
    st.mem.host_write32(kStackBottomCell, stack_top - kPageSize);
    st.pc = base;
    return st;
}

}  // namespace

TEST_CASE("step: CALL pushes the next-instruction address") {
    Assembler a(0x2000);
    a.raw({0x44, 0x10, 0x00, 0x00, 0x00});  // CALL rel +0x10
    auto st = make_machine(0x2000, a.bytes());
    auto out = step(st);
    CHECK(out.kind == StepKind::Normal);
    CHECK(st.pc == 0x2015);
    CHECK(*st.mem.host_read32(st.sp()) == 0x2005);
}

TEST_CASE("step: prefixed instruction faults at its own address") {
    auto st = make_machine(0x2000, {0xF0, 0x40, 0x10, 0x00, 0x00, 0x00});
    auto out = step(st);
    REQUIRE(out.kind == StepKind::Fault);
    CHECK(out.fault.code == ExceptionCode::InvalidOpcode);
    CHECK(out.fault.address == 0x2000);
    CHECK(st.pc == 0x2000);
}

TEST_CASE("step: store to unmapped memory faults with the target in info") {
    Assembler a(0x2000);
    a.store(0, 0, 1);  // STORE [R0+0], R1
    auto st = make_machine(0x2000, a.bytes());
    st.regs[0] = 0xDEAD0000;
    auto out = step(st);
    REQUIRE(out.kind == StepKind::Fault);
    CHECK(out.fault.code == ExceptionCode::AccessViolation);
    CHECK(out.fault.address == 0x2000);
    CHECK(out.fault.info == 0xDEAD0000);
}

TEST_CASE("step: flags") {
    Assembler a(0x2000);
    a.sub(0, 5);     // R0 = 3 - 5
    a.cmp(0, 0xFFFFFFFE);
    a.add(1, 1);     // 0xFFFFFFFF + 1 wraps
    auto st = make_machine(0x2000, a.bytes());
    st.regs[0] = 3;
    st.regs[1] = 0xFFFFFFFF;
    REQUIRE(step(st).kind == StepKind::Normal);
    CHECK(st.regs[0] == 0xFFFFFFFE);
    CHECK(st.s);
    CHECK(st.c);  // borrow
    CHECK_FALSE(st.z);
    REQUIRE(step(st).kind == StepKind::Normal);
    CHECK(st.z);  // compare equal
    CHECK_FALSE(st.c);
    REQUIRE(step(st).kind == StepKind::Normal);
    CHECK(st.regs[1] == 0);
    CHECK(st.z);
    CHECK(st.c);  // carry out
}

TEST_CASE("step: TRAP and CONTINUE outcomes") {
    Assembler a(0x2000);
    a.trap(7);
    auto st = make_machine(0x2000, a.bytes());
    auto out = step(st);
    REQUIRE(out.kind == StepKind::Fault);
    CHECK(out.fault.code == ExceptionCode::SoftwareTrap);
    CHECK(out.fault.address == 0x2000);
    CHECK(out.fault.info == 7);

    Assembler b(0x3000);
    b.continue_();
    auto st2 = make_machine(0x3000, b.bytes());
    st2.regs[1] = 0x1234;
    auto out2 = step(st2);
    REQUIRE(out2.kind == StepKind::ContinueRequest);
    CHECK(out2.context_addr == 0x1234);
}

TEST_CASE("step: EXIT in guest code is an invalid opcode") {
    Assembler a(0x2000);
    a.raw({0x5F, 0x00, 0x00, 0x00, 0x00});
    auto st = make_machine(0x2000, a.bytes());
    auto out = step(st);
    REQUIRE(out.kind == StepKind::Fault);
    CHECK(out.fault.code == ExceptionCode::InvalidOpcode);
}

TEST_CASE("step: guest data access into the cache region faults") {
    Assembler a(0x2000);
    a.store(0, 0, 1);
    a.load(2, 0, 0);
    auto st = make_machine(0x2000, a.bytes());
    st.mem.map_page(kCacheBase);  // engine-owned page exists
    st.regs[0] = kCacheBase + 0x10;
    auto out = step(st);
    REQUIRE(out.kind == StepKind::Fault);
    CHECK(out.fault.code == ExceptionCode::AccessViolation);
    CHECK(out.fault.info == kCacheBase + 0x10);
}

TEST_CASE("deliver_exception: empty chain and stack bounds") {
    auto st = make_machine(0x2000, {0x52});
    ExceptionRecord rec{ExceptionCode::SoftwareTrap, 0x2000, 1};
    SECTION("SEH_HEAD = 0") {
        CHECK(deliver_exception(st, rec) == DeliveryResult::Unhandled);
    }
    SECTION("SP below the bottom cell") {
        st.mem.host_write32(kSehHeadCell, 0x1F000);
        st.set_sp(*st.mem.host_read32(kStackBottomCell) - 4);
        CHECK(deliver_exception(st, rec) == DeliveryResult::Unhandled);
    }
    SECTION("SP above the top cell") {
        st.mem.host_write32(kSehHeadCell, 0x1F000);
        st.set_sp(*st.mem.host_read32(kStackTopCell) + 4);
        CHECK(deliver_exception(st, rec) == DeliveryResult::Unhandled);
    }
}

TEST_CASE("deliver_exception: frame layout") {
    auto st = make_machine(0x2000, {0x52});
    // handler frame at 0x1F000: next=0, handler=0x3000
    st.mem.map_page(0x1F000);
    st.mem.host_write32(0x1F000, 0);
    st.mem.host_write32(0x1F004, 0x3000);
    st.mem.host_write32(kSehHeadCell, 0x1F000);
    uint32_t sp0 = st.sp();
    st.regs[2] = 0xAABBCCDD;
    st.z = true;

    ExceptionRecord rec{ExceptionCode::SoftwareTrap, 0x2000, 7};
    REQUIRE(deliver_exception(st, rec) == DeliveryResult::Delivered);
    CHECK(st.pc == 0x3000);
    CHECK(st.sp() == sp0 - 68);
    CHECK(st.regs[0] == st.sp());
    CHECK(st.regs[1] == st.sp() + 12);
    CHECK(*st.mem.host_read32(st.regs[0] + 0) == 4);  // SoftwareTrap
    CHECK(*st.mem.host_read32(st.regs[0] + 4) == 0x2000);
    CHECK(*st.mem.host_read32(st.regs[0] + 8) == 7);
    // context captured the pre-delivery state
    GuestContext ctx;
    {
        std::array<uint8_t, kGuestContextSize> buf;
        for (uint32_t i = 0; i < kGuestContextSize; ++i)
            buf[i] = *st.mem.host_read8(st.regs[1] + i);
        ctx = GuestContext::deserialize(buf);
    }
    CHECK(ctx.regs[2] == 0xAABBCCDD);
    CHECK(ctx.regs[7] == sp0);
    CHECK(ctx.pc == 0x2000);
    CHECK(ctx.z);
}

TEST_CASE("apply_context: examples") {
    auto st = make_machine(0x2000, {0x52});
    GuestContext ctx;
    ctx.pc = 0x4141;
    ctx.bp[0] = 0x5000;
    ctx.bctl = 0b0001;
    auto bytes = ctx.serialize();
    st.mem.host_write(0x1E000, bytes);
    st.mem.map_page(0x1E000);
    REQUIRE_FALSE(apply_context(st, 0x1E000));
    CHECK(st.pc == 0x4141);
    CHECK(st.bp[0] == 0x5000);
    CHECK(st.bctl == 1);
    CHECK(st.breakpoint_armed_at(0x5000));
}

TEST_CASE("apply_context: unreadable context reports the fault target") {
    auto st = make_machine(0x2000, {0x52});
    auto bad = apply_context(st, 0xCAFE0000);
    REQUIRE(bad.has_value());
    CHECK(*bad == 0xCAFE0000);
}

TEST_CASE("property: context capture/apply round-trips bit-exactly") {
    auto st = make_machine(0x2000, {0x52});
    st.regs = {1, 2, 3, 4, 5, 6, 7, 0x1FF00};
    st.z = true;
    st.c = true;
    st.bp = {0xA, 0xB, 0xC, 0xD};
    st.bctl = 0b1010;
    st.pc = 0x2345;
    GuestContext ctx = st.capture_context();
    auto bytes = ctx.serialize();
    CHECK(bytes.size() == 56);
    GuestContext back = GuestContext::deserialize(bytes);
    CHECK(back == ctx);
    CHECK(back.serialize() == bytes);

    MachineState st2 = st;
    st2.regs = {};
    st2.pc = 0;
    st2.bctl = 0;
    st2.restore_context(back);
    CHECK(st2.capture_context().serialize() == bytes);
}

TEST_CASE("run_native: canonical payload halts with R0=55") {
    MachineState st = load(make_payload());
    RunReport rep = run_native(st);
    CHECK(rep.verdict == RunVerdict::Halted);
    CHECK(rep.final_r0 == 55);
    CHECK(rep.trace.size() == 41);
    CHECK(rep.trace.front().pc == kPayloadVa);
    CHECK(rep.trace.front().op == "CMP");
    CHECK(rep.trace.back().op == "HALT");
}

TEST_CASE("run_native: prefixed HALT with no handler is unhandled") {
    auto st = make_machine(0x2000, {0xF0, 0x52});
    RunReport rep = run_native(st);
    CHECK(rep.verdict == RunVerdict::UnhandledException);
    CHECK(rep.last_unhandled.code == ExceptionCode::InvalidOpcode);
}

TEST_CASE("run_native: fuel exhaustion is distinguished from halting") {
    Assembler a(0x2000);
    a.label("spin");
    a.jmp_to("spin");
    a.finish();
    auto st = make_machine(0x2000, a.bytes());
    RunReport rep = run_native(st, 100);
    CHECK(rep.verdict == RunVerdict::FuelExhausted);
}

TEST_CASE("run_native: armed breakpoint raises a single step after effects") {
    constexpr uint32_t kCounter = 0x1E000;
    Assembler a(0x2000);
    a.label("bp");
    a.mov(5, 7);  // breakpointed instruction
    a.halt();
    a.label("handler");
    a.mov(2, 0);
    a.load(4, 2, kCounter);
    a.add(4, 1);
    a.store(2, kCounter, 4);
    a.continue_();
    a.finish();

    auto st = make_machine(0x2000, a.bytes());
    st.mem.map_page(kCounter);
    st.mem.host_write32(kCounter, 0);
    st.set_sp(0x20000 - 8);  // SEH frame: [next=0][handler]
    st.mem.host_write32(st.sp() + 0, 0);
    st.mem.host_write32(st.sp() + 4, a.label_addr("handler"));
    st.mem.host_write32(kSehHeadCell, st.sp());
    st.bp[0] = a.label_addr("bp");
    st.bctl = 1;

    RunReport rep = run_native(st);
    CHECK(rep.verdict == RunVerdict::Halted);
    CHECK(rep.singlesteps == 1);
    CHECK(*st.mem.host_read32(kCounter) == 1);
    CHECK(st.regs[5] == 7);  // the instruction's effects happened first
}

TEST_CASE("property: reference runs are deterministic") {
    auto payload = make_payload();
    MachineState a = load(payload);
    MachineState b = load(payload);
    RunReport ra = run_native(a);
    RunReport rb = run_native(b);
    CHECK(ra.trace == rb.trace);
    CHECK(ra.final_r0 == rb.final_r0);
    CHECK(a.regs == b.regs);
    CHECK(a.pc == b.pc);
    REQUIRE(a.mem.pages().size() == b.mem.pages().size());
    auto ita = a.mem.pages().begin();
    auto itb = b.mem.pages().begin();
    for (; ita != a.mem.pages().end(); ++ita, ++itb) {
        CHECK(ita->first == itb->first);
        CHECK(ita->second == itb->second);
    }
}

TEST_CASE("property: a store is visible to the next fetch") {
    // writes MOV R0,99; HALT over a zeroed slot and falls straight into it
    std::vector<uint8_t> patch = encode({Mnemonic::MovImm, 0, 0, 99});
    patch.push_back(static_cast<uint8_t>(Mnemonic::Halt));
    patch.push_back(0);
    uint32_t w0 = read_u32le(patch, 0);
    uint32_t w1 = read_u32le(patch, 4);

    constexpr uint32_t kBase = 0x5000;
    constexpr uint32_t kSlot = kBase + 6 + 6 + 6 + 7 + 7;  // after two stores
    Assembler a(kBase);
    a.mov(1, w0);
    a.mov(3, w1);
    a.mov(2, kSlot);
    a.store(2, 0, 1);
    a.store(2, 4, 3);
    REQUIRE(a.here() == kSlot);
    a.raw({0, 0, 0, 0, 0, 0, 0, 0});
    a.finish();

    auto st = make_machine(kBase, a.bytes());
    RunReport rep = run_native(st, 100);
    CHECK(rep.verdict == RunVerdict::Halted);
    CHECK(rep.final_r0 == 99);
}
