#pragma once

// BOPX executable container: parse/serialize (bit-exact, little-endian) and
// the loader that materializes a MachineState. Layout:
//   "BOPX" | version u16 | section_count u16 | entry u32 | stack_top u32 |
//   sections { name[8] | va u32 | file_off u32 | file_size u32 |
//              mem_size u32 | flags u32 } | raw bytes
// file_off is an absolute offset into the file.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bop32/machine.hpp"

namespace bop32 {

inline constexpr uint16_t kImageVersion = 1;
inline constexpr uint32_t kImageHeaderSize = 16;
inline constexpr uint32_t kSectionEntrySize = 28;
inline constexpr uint32_t kSectionFlagFirst = 1;  // marker only, not consumed

// Library analog: a page of RET stubs, one per 16-byte slot. Control
// transfers into this range stand in for API calls.
inline constexpr uint32_t kLibraryBase = 0x0070'0000;
inline constexpr uint32_t kLibrarySize = 0x1000;
inline constexpr uint32_t kLibraryStubSpacing = 16;

inline constexpr uint32_t kStackDepth = 0x1'0000;

struct MalformedImage : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Section {
    std::array<char, 8> name{};
    uint32_t va = 0;
    uint32_t file_off = 0;
    uint32_t file_size = 0;
    uint32_t mem_size = 0;  // >= file_size, zero-filled past file_size
    uint32_t flags = 0;

    static std::array<char, 8> make_name(std::string_view s) {
        std::array<char, 8> n{};
        std::memcpy(n.data(), s.data(), std::min<size_t>(s.size(), 8));
        return n;
    }

    bool operator==(const Section&) const = default;
};

struct PackedImage {
    uint16_t version = kImageVersion;
    uint32_t entry = 0;
    uint32_t stack_top = 0;
    std::vector<Section> sections;
    std::vector<uint8_t> raw;  // whole file image, including headers

    bool operator==(const PackedImage&) const = default;
};

namespace detail {
inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v));
    out.push_back(static_cast<uint8_t>(v >> 8));
}
inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    append_u32le(out, v);
}
}  // namespace detail

// Assembles an image from sections given as (section, bytes) pairs; raw data
// is packed immediately after the headers in section order.
inline PackedImage build_image(uint32_t entry, uint32_t stack_top,
                               std::vector<std::pair<Section, std::vector<uint8_t>>> parts) {
    PackedImage img;
    img.entry = entry;
    img.stack_top = stack_top;

    uint32_t off = kImageHeaderSize + kSectionEntrySize * static_cast<uint32_t>(parts.size());
    for (auto& [sec, bytes] : parts) {
        sec.file_off = off;
        sec.file_size = static_cast<uint32_t>(bytes.size());
        if (sec.mem_size < sec.file_size) sec.mem_size = sec.file_size;
        off += sec.file_size;
        img.sections.push_back(sec);
    }

    std::vector<uint8_t>& out = img.raw;
    out.push_back('B');
    out.push_back('O');
    out.push_back('P');
    out.push_back('X');
    detail::put_u16(out, img.version);
    detail::put_u16(out, static_cast<uint16_t>(img.sections.size()));
    detail::put_u32(out, img.entry);
    detail::put_u32(out, img.stack_top);
    for (const Section& s : img.sections) {
        out.insert(out.end(), s.name.begin(), s.name.end());
        detail::put_u32(out, s.va);
        detail::put_u32(out, s.file_off);
        detail::put_u32(out, s.file_size);
        detail::put_u32(out, s.mem_size);
        detail::put_u32(out, s.flags);
    }
    for (const auto& [sec, bytes] : parts) out.insert(out.end(), bytes.begin(), bytes.end());
    return img;
}

inline void validate(const PackedImage& img) {
    if (img.version != kImageVersion) throw MalformedImage("unsupported version");
    if (img.sections.empty()) throw MalformedImage("no sections");

    bool entry_inside = false;
    for (size_t i = 0; i < img.sections.size(); ++i) {
        const Section& s = img.sections[i];
        if (s.mem_size < s.file_size) throw MalformedImage("mem_size < file_size");
        if (s.mem_size == 0) throw MalformedImage("empty section");
        uint64_t end = static_cast<uint64_t>(s.va) + s.mem_size;
        if (end > 0x1'0000'0000ull) throw MalformedImage("section wraps address space");
        if (static_cast<uint64_t>(s.file_off) + s.file_size > img.raw.size())
            throw MalformedImage("section data out of file bounds");
        if (img.entry >= s.va && img.entry < end) entry_inside = true;
        for (size_t j = i + 1; j < img.sections.size(); ++j) {
            const Section& t = img.sections[j];
            uint64_t tend = static_cast<uint64_t>(t.va) + t.mem_size;
            if (s.va < tend && t.va < end) throw MalformedImage("overlapping sections");
        }
    }
    if (!entry_inside) throw MalformedImage("entry outside all sections");
}

inline PackedImage parse_image(std::vector<uint8_t> bytes) {
    if (bytes.size() < kImageHeaderSize || std::memcmp(bytes.data(), "BOPX", 4) != 0)
        throw MalformedImage("bad magic");
    PackedImage img;
    img.version = static_cast<uint16_t>(bytes[4] | bytes[5] << 8);
    uint16_t count = static_cast<uint16_t>(bytes[6] | bytes[7] << 8);
    img.entry = read_u32le(bytes, 8);
    img.stack_top = read_u32le(bytes, 12);
    if (bytes.size() < kImageHeaderSize + static_cast<size_t>(count) * kSectionEntrySize)
        throw MalformedImage("truncated section table");
    for (uint16_t i = 0; i < count; ++i) {
        size_t off = kImageHeaderSize + static_cast<size_t>(i) * kSectionEntrySize;
        Section s;
        std::memcpy(s.name.data(), bytes.data() + off, 8);
        s.va = read_u32le(bytes, off + 8);
        s.file_off = read_u32le(bytes, off + 12);
        s.file_size = read_u32le(bytes, off + 16);
        s.mem_size = read_u32le(bytes, off + 20);
        s.flags = read_u32le(bytes, off + 24);
        img.sections.push_back(s);
    }
    img.raw = std::move(bytes);
    validate(img);
    return img;
}

// Returns [va, va + mem_size) of the first section in file order. The range
// OEP strategy defaults to this span; merged-section images need an override.
inline std::pair<uint32_t, uint32_t> first_section_range(const PackedImage& img) {
    if (img.sections.empty()) throw MalformedImage("no sections");
    const Section& s = img.sections.front();
    return {s.va, s.va + s.mem_size};
}

// Materializes the guest: section bytes at their va (zero-filled to
// mem_size), stack region and well-known cells mapped, empty SEH chain,
// library stubs mapped, pc at the entry point.
inline MachineState load(const PackedImage& img) {
    validate(img);
    MachineState st;

    for (const Section& s : img.sections) {
        for (uint32_t a = s.va & kPageMask; a < s.va + s.mem_size; a += kPageSize)
            st.mem.map_page(a);
        st.mem.host_write(s.va, std::span(img.raw).subspan(s.file_off, s.file_size));
    }

    for (uint32_t a = (img.stack_top - kStackDepth) & kPageMask; a < img.stack_top;
         a += kPageSize)
        st.mem.map_page(a);
    st.set_sp(img.stack_top);

    st.mem.map_page(kSehHeadCell);
    st.mem.host_write32(kSehHeadCell, 0);
    st.mem.host_write32(kStackTopCell, img.stack_top);
    st.mem.host_write32(kStackBottomCell, img.stack_top - kStackDepth);

    for (uint32_t a = kLibraryBase; a < kLibraryBase + kLibrarySize; a += kPageSize)
        st.mem.map_page(a);
    for (uint32_t a = kLibraryBase; a < kLibraryBase + kLibrarySize; a += kLibraryStubSpacing) {
        uint8_t ret = static_cast<uint8_t>(Mnemonic::Ret);
        st.mem.host_write(a, std::span(&ret, 1));
    }

    st.pc = img.entry;
    return st;
}

inline void write_file(const std::string& path, std::span<const uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<uint8_t> out(static_cast<size_t>(f.tellg()));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("read failed: " + path);
    return out;
}

}  // namespace bop32
