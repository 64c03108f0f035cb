#pragma once

// BOP-32 instruction set: fixed little-endian encodings, one opcode per
// mnemonic. The only prefix byte is 0xF0; executing a prefixed instruction
// raises InvalidOpcode, so packers use it as a deliberate exception source.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace bop32 {

enum class Mnemonic : uint8_t {
    MovImm   = 0x10,  // MOV r, imm32
    MovReg   = 0x11,  // MOV r, r
    Load     = 0x12,  // LOAD r, [r+disp32]
    Store    = 0x13,  // STORE [r+disp32], r
    AddImm   = 0x20,
    AddReg   = 0x21,
    SubImm   = 0x22,
    SubReg   = 0x23,
    XorImm   = 0x24,
    XorReg   = 0x25,
    CmpImm   = 0x26,
    Push     = 0x30,
    Pop      = 0x31,
    PushImm  = 0x32,
    Jmp      = 0x40,  // rel32 from next-instruction address
    Jz       = 0x41,
    Jnz      = 0x42,
    JmpReg   = 0x43,
    Call     = 0x44,
    CallReg  = 0x45,
    Ret      = 0x46,
    Trap     = 0x50,  // TRAP imm8
    Continue = 0x51,  // context address in R1
    Halt     = 0x52,
    Exit     = 0x5F,  // cache-region only; guest code executing it faults
};

inline constexpr uint8_t kBadPrefix = 0xF0;

enum class OperandLayout : uint8_t {
    None,      // [op]
    Reg,       // [op][r]
    RegReg,    // [op][a<<4|b]
    RegImm32,  // [op][r][imm32]
    RegDisp32, // [op][a][b][disp32] (registers in separate bytes; total 7)
    Imm32,     // [op][imm32]
    Rel32,     // [op][rel32]
    Imm8,      // [op][imm8]
};

struct OpInfo {
    Mnemonic mnemonic;
    OperandLayout layout;
    uint8_t length;          // without prefix
    std::string_view name;   // trace display name
    bool control_transfer;
};

inline constexpr std::array<OpInfo, 25> kEncodingTable = {{
    {Mnemonic::MovImm,   OperandLayout::RegImm32,  6, "MOV",      false},
    {Mnemonic::MovReg,   OperandLayout::RegReg,    2, "MOV",      false},
    {Mnemonic::Load,     OperandLayout::RegDisp32, 7, "LOAD",     false},
    {Mnemonic::Store,    OperandLayout::RegDisp32, 7, "STORE",    false},
    {Mnemonic::AddImm,   OperandLayout::RegImm32,  6, "ADD",      false},
    {Mnemonic::AddReg,   OperandLayout::RegReg,    2, "ADD",      false},
    {Mnemonic::SubImm,   OperandLayout::RegImm32,  6, "SUB",      false},
    {Mnemonic::SubReg,   OperandLayout::RegReg,    2, "SUB",      false},
    {Mnemonic::XorImm,   OperandLayout::RegImm32,  6, "XOR",      false},
    {Mnemonic::XorReg,   OperandLayout::RegReg,    2, "XOR",      false},
    {Mnemonic::CmpImm,   OperandLayout::RegImm32,  6, "CMP",      false},
    {Mnemonic::Push,     OperandLayout::Reg,       2, "PUSH",     false},
    {Mnemonic::Pop,      OperandLayout::Reg,       2, "POP",      false},
    {Mnemonic::PushImm,  OperandLayout::Imm32,     5, "PUSHI",    false},
    {Mnemonic::Jmp,      OperandLayout::Rel32,     5, "JMP",      true},
    {Mnemonic::Jz,       OperandLayout::Rel32,     5, "JZ",       true},
    {Mnemonic::Jnz,      OperandLayout::Rel32,     5, "JNZ",      true},
    {Mnemonic::JmpReg,   OperandLayout::Reg,       2, "JMPR",     true},
    {Mnemonic::Call,     OperandLayout::Rel32,     5, "CALL",     true},
    {Mnemonic::CallReg,  OperandLayout::Reg,       2, "CALLR",    true},
    {Mnemonic::Ret,      OperandLayout::None,      1, "RET",      true},
    {Mnemonic::Trap,     OperandLayout::Imm8,      2, "TRAP",     true},
    {Mnemonic::Continue, OperandLayout::None,      1, "CONTINUE", true},
    {Mnemonic::Halt,     OperandLayout::None,      1, "HALT",     true},
    {Mnemonic::Exit,     OperandLayout::Imm32,     5, "EXIT",     true},
}};

inline const OpInfo* op_info(uint8_t opcode) {
    for (const auto& e : kEncodingTable) {
        if (static_cast<uint8_t>(e.mnemonic) == opcode) return &e;
    }
    return nullptr;
}

inline const OpInfo& op_info(Mnemonic m) {
    return *op_info(static_cast<uint8_t>(m));
}

// Decoded instruction. Operand fields not used by the layout are zero so
// that encode/decode round-trips compare equal field-by-field.
struct Instruction {
    Mnemonic mnemonic = Mnemonic::Halt;
    uint8_t ra = 0;          // dst / single register / base (Store)
    uint8_t rb = 0;          // src register / base (Load)
    uint32_t imm = 0;        // imm32, disp32, rel32 (two's complement), imm8
    uint8_t length = 0;      // encoded byte count, including prefix
    bool has_bad_prefix = false;

    bool is_control_transfer() const { return op_info(mnemonic).control_transfer; }
    std::string_view name() const { return op_info(mnemonic).name; }
    int32_t rel() const { return static_cast<int32_t>(imm); }

    bool operator==(const Instruction&) const = default;
};

enum class DecodeError : uint8_t {
    None,
    UnknownOpcode,
    TruncatedInstruction,
};

struct DecodeResult {
    std::optional<Instruction> instr;
    DecodeError error = DecodeError::None;
    bool ok() const { return instr.has_value(); }
};

inline uint32_t read_u32le(std::span<const uint8_t> b, size_t off) {
    return static_cast<uint32_t>(b[off]) | static_cast<uint32_t>(b[off + 1]) << 8 |
           static_cast<uint32_t>(b[off + 2]) << 16 | static_cast<uint32_t>(b[off + 3]) << 24;
}

// Decodes the instruction starting at bytes[0]. `addr` is carried for
// diagnostics only and does not affect decoding.
inline DecodeResult decode(std::span<const uint8_t> bytes, uint32_t addr = 0) {
    (void)addr;
    if (bytes.empty()) return {std::nullopt, DecodeError::TruncatedInstruction};

    bool prefixed = false;
    size_t pos = 0;
    if (bytes[0] == kBadPrefix) {
        prefixed = true;
        pos = 1;
        if (bytes.size() < 2) return {std::nullopt, DecodeError::TruncatedInstruction};
    }

    const OpInfo* info = op_info(bytes[pos]);
    if (info == nullptr) return {std::nullopt, DecodeError::UnknownOpcode};
    if (bytes.size() - pos < info->length) return {std::nullopt, DecodeError::TruncatedInstruction};

    Instruction out;
    out.mnemonic = info->mnemonic;
    out.has_bad_prefix = prefixed;
    out.length = static_cast<uint8_t>(info->length + (prefixed ? 1 : 0));

    switch (info->layout) {
    case OperandLayout::None:
        break;
    case OperandLayout::Reg:
        out.ra = bytes[pos + 1] & 0x0F;
        break;
    case OperandLayout::RegReg:
        out.ra = bytes[pos + 1] >> 4;
        out.rb = bytes[pos + 1] & 0x0F;
        break;
    case OperandLayout::RegDisp32:
        out.ra = bytes[pos + 1] & 0x0F;
        out.rb = bytes[pos + 2] & 0x0F;
        out.imm = read_u32le(bytes, pos + 3);
        break;
    case OperandLayout::RegImm32:
        out.ra = bytes[pos + 1] & 0x0F;
        out.imm = read_u32le(bytes, pos + 2);
        break;
    case OperandLayout::Imm32:
    case OperandLayout::Rel32:
        out.imm = read_u32le(bytes, pos + 1);
        break;
    case OperandLayout::Imm8:
        out.imm = bytes[pos + 1];
        break;
    }
    return {out, DecodeError::None};
}

inline void append_u32le(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 24));
}

// Encodes to bytes; decode(encode(i)) == i for every valid instruction.
// Throws std::invalid_argument for register indices > 7 or an imm8 overflow.
inline std::vector<uint8_t> encode(const Instruction& in) {
    const OpInfo& info = op_info(in.mnemonic);
    auto check_reg = [](uint8_t r) {
        if (r > 7) throw std::invalid_argument("register index out of range");
    };

    std::vector<uint8_t> out;
    out.reserve(info.length + 1);
    if (in.has_bad_prefix) out.push_back(kBadPrefix);
    out.push_back(static_cast<uint8_t>(in.mnemonic));

    switch (info.layout) {
    case OperandLayout::None:
        break;
    case OperandLayout::Reg:
        check_reg(in.ra);
        out.push_back(in.ra);
        break;
    case OperandLayout::RegReg:
        check_reg(in.ra);
        check_reg(in.rb);
        out.push_back(static_cast<uint8_t>(in.ra << 4 | in.rb));
        break;
    case OperandLayout::RegDisp32:
        check_reg(in.ra);
        check_reg(in.rb);
        out.push_back(in.ra);
        out.push_back(in.rb);
        append_u32le(out, in.imm);
        break;
    case OperandLayout::RegImm32:
        check_reg(in.ra);
        out.push_back(in.ra);
        append_u32le(out, in.imm);
        break;
    case OperandLayout::Imm32:
    case OperandLayout::Rel32:
        append_u32le(out, in.imm);
        break;
    case OperandLayout::Imm8:
        if (in.imm > 0xFF) throw std::invalid_argument("imm8 overflow");
        out.push_back(static_cast<uint8_t>(in.imm));
        break;
    }
    return out;
}

}  // namespace bop32
