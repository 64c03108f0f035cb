#pragma once

// Original-entry-point detectors. The dispatcher feeds every control-transfer
// and resume target through on_transfer; the engine feeds every architectural
// memory write through on_write. Exactly one strategy runs per session and a
// detector fires at most once.

#include <cstdint>
#include <optional>
#include <unordered_set>

namespace bop32 {

enum class OepStrategy : uint8_t {
    SectionRange,        // first transfer into the watched range
    WrittenThenExecuted, // first transfer into previously written memory
    FirstLibraryCall,    // return address at the first non-stub library call
};

struct OepDetector {
    OepStrategy strategy = OepStrategy::SectionRange;
    uint32_t range_lo = 0, range_hi = 0;          // SectionRange
    uint32_t lib_lo = 0, lib_hi = 0;              // library span
    uint32_t stub_ignore_lo = 0, stub_ignore_hi = 0;
    std::unordered_set<uint32_t> dirty;           // written byte addresses
    std::optional<uint32_t> fired;
    bool candidate_only = false;  // FirstLibraryCall results need confirmation

    void on_write(uint32_t addr, uint32_t width) {
        if (strategy != OepStrategy::WrittenThenExecuted) return;
        for (uint32_t i = 0; i < width; ++i) dirty.insert(addr + i);
    }

    // `target` is the original-code destination; `source` the address of the
    // instruction that caused the transfer. `stack_top_word` is the guest
    // stack top at the transfer (the return address for library calls).
    std::optional<uint32_t> on_transfer(uint32_t target, uint32_t source,
                                        std::optional<uint32_t> stack_top_word) {
        if (fired) return std::nullopt;
        switch (strategy) {
        case OepStrategy::SectionRange:
            if (target >= range_lo && target < range_hi) fired = target;
            break;
        case OepStrategy::WrittenThenExecuted:
            if (dirty.count(target)) fired = target;
            break;
        case OepStrategy::FirstLibraryCall:
            if (target >= lib_lo && target < lib_hi &&
                !(source >= stub_ignore_lo && source < stub_ignore_hi) && stack_top_word) {
                fired = *stack_top_word;
                candidate_only = true;
            }
            break;
        }
        return fired;
    }
};

}  // namespace bop32
