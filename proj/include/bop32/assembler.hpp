#pragma once

// Small two-pass-free assembler for BOP-32: emits into a byte buffer at a
// fixed base address, with labels and rel32 back-patching. Used by the
// packer stub templates and by tests that need hand-built code.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "bop32/isa.hpp"

namespace bop32 {

class Assembler {
public:
    explicit Assembler(uint32_t base) : base_(base) {}

    uint32_t here() const { return base_ + static_cast<uint32_t>(buf_.size()); }
    const std::vector<uint8_t>& bytes() const { return buf_; }

    void label(const std::string& name) { labels_[name] = here(); }

    uint32_t label_addr(const std::string& name) const {
        auto it = labels_.find(name);
        if (it == labels_.end()) throw std::logic_error("unknown label: " + name);
        return it->second;
    }

    void raw(std::initializer_list<uint8_t> b) { buf_.insert(buf_.end(), b); }
    void raw(const std::vector<uint8_t>& b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

    void align4() {
        while (buf_.size() % 4 != 0) buf_.push_back(0);
    }

    // r, imm forms
    void mov(uint8_t r, uint32_t imm) { emit({Mnemonic::MovImm, r, 0, imm}); }
    void add(uint8_t r, uint32_t imm) { emit({Mnemonic::AddImm, r, 0, imm}); }
    void sub(uint8_t r, uint32_t imm) { emit({Mnemonic::SubImm, r, 0, imm}); }
    void xor_(uint8_t r, uint32_t imm) { emit({Mnemonic::XorImm, r, 0, imm}); }
    void cmp(uint8_t r, uint32_t imm) { emit({Mnemonic::CmpImm, r, 0, imm}); }

    // r, r forms
    void mov_r(uint8_t dst, uint8_t src) { emit({Mnemonic::MovReg, dst, src}); }
    void add_r(uint8_t dst, uint8_t src) { emit({Mnemonic::AddReg, dst, src}); }
    void sub_r(uint8_t dst, uint8_t src) { emit({Mnemonic::SubReg, dst, src}); }
    void xor_r(uint8_t dst, uint8_t src) { emit({Mnemonic::XorReg, dst, src}); }

    void load(uint8_t dst, uint8_t base, uint32_t disp) { emit({Mnemonic::Load, dst, base, disp}); }
    void store(uint8_t base, uint32_t disp, uint8_t src) { emit({Mnemonic::Store, base, src, disp}); }

    void push(uint8_t r) { emit({Mnemonic::Push, r}); }
    void pop(uint8_t r) { emit({Mnemonic::Pop, r}); }
    void pushi(uint32_t imm) { emit({Mnemonic::PushImm, 0, 0, imm}); }

    void jmpr(uint8_t r) { emit({Mnemonic::JmpReg, r}); }
    void callr(uint8_t r) { emit({Mnemonic::CallReg, r}); }
    void ret() { emit({Mnemonic::Ret}); }
    void trap(uint8_t n) { emit({Mnemonic::Trap, 0, 0, n}); }
    void continue_() { emit({Mnemonic::Continue}); }
    void halt() { emit({Mnemonic::Halt}); }

    void jmp_to(const std::string& l, bool prefixed = false) { branch(Mnemonic::Jmp, l, prefixed); }
    void jz_to(const std::string& l) { branch(Mnemonic::Jz, l); }
    void jnz_to(const std::string& l) { branch(Mnemonic::Jnz, l); }
    void call_to(const std::string& l) { branch(Mnemonic::Call, l); }

    void jmp_abs(uint32_t target) { rel_abs(Mnemonic::Jmp, target); }
    void call_abs(uint32_t target) { rel_abs(Mnemonic::Call, target); }

    // Resolves all pending label references; call once after emitting.
    void finish() {
        for (const auto& fx : fixups_) {
            auto it = labels_.find(fx.label);
            if (it == labels_.end()) throw std::logic_error("unresolved label: " + fx.label);
            uint32_t next = base_ + fx.offset + 4;  // rel32 is relative to the next instruction
            patch_u32(fx.offset, it->second - next);
        }
        fixups_.clear();
    }

private:
    struct Fixup {
        uint32_t offset;  // of the rel32 field within buf_
        std::string label;
    };

    void emit(Instruction i) { raw(encode(i)); }

    void branch(Mnemonic m, const std::string& l, bool prefixed = false) {
        if (prefixed) buf_.push_back(kBadPrefix);
        buf_.push_back(static_cast<uint8_t>(m));
        fixups_.push_back({static_cast<uint32_t>(buf_.size()), l});
        append_u32le(buf_, 0);
    }

    void rel_abs(Mnemonic m, uint32_t target) {
        buf_.push_back(static_cast<uint8_t>(m));
        uint32_t next = here() + 4;
        append_u32le(buf_, target - next);
    }

    void patch_u32(uint32_t off, uint32_t v) {
        buf_[off] = static_cast<uint8_t>(v);
        buf_[off + 1] = static_cast<uint8_t>(v >> 8);
        buf_[off + 2] = static_cast<uint8_t>(v >> 16);
        buf_[off + 3] = static_cast<uint8_t>(v >> 24);
    }

    uint32_t base_;
    std::vector<uint8_t> buf_;
    std::map<std::string, uint32_t> labels_;
    std::vector<Fixup> fixups_;
};

}  // namespace bop32
