#pragma once

// Per-thread instrumentation: live tensor bytes (via TrackingAllocator) and
// FLOP counts (reported by the kernels themselves).
//
// FLOP convention used throughout the library:
//   gemm M x N x K            -> 2*M*N*K
//   elementwise op            -> 1 per output element (transcendentals included)
//   reduction                 -> 1 per input element
//   softmax over a row        -> 4 per element (max, exp, sum, divide)
//   layer norm over a row     -> 8 per element

#include <cstddef>
#include <cstdint>
#include <map>
#include <new>
#include <string>
#include <vector>

namespace balr::instrument {

struct MemoryStats {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;
  std::size_t largest_allocation = 0;
  std::uint64_t allocations = 0;
};

/// Thread-local allocation statistics.
MemoryStats& memory_stats() noexcept;

void note_allocation(std::size_t bytes) noexcept;
void note_release(std::size_t bytes) noexcept;

/// Resets the peak and largest-allocation marks on entry and reports them
/// relative to the live bytes at entry. Nested scopes fold their peak back
/// into the enclosing one.
class MemoryScope {
 public:
  MemoryScope() noexcept;
  ~MemoryScope();
  MemoryScope(const MemoryScope&) = delete;
  MemoryScope& operator=(const MemoryScope&) = delete;

  std::size_t peak_bytes() const noexcept;
  std::size_t largest_allocation() const noexcept;

 private:
  std::size_t base_live_;
  std::size_t outer_peak_;
  std::size_t outer_largest_;
};

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
    note_allocation(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    note_release(n * sizeof(T));
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

/// Process-wide switch for FLOP counting. Reports built while it is off mark
/// their measured fields as absent.
void set_enabled(bool enabled) noexcept;
bool enabled() noexcept;

/// Adds to the thread-local total and to every label currently on the stack.
void add_flops(std::uint64_t flops) noexcept;

std::uint64_t flops_total() noexcept;
std::uint64_t flops_for(const std::string& label);
void reset_flops();

/// Pushes a label for the lifetime of the object.
class FlopRegion {
 public:
  explicit FlopRegion(std::string label);
  ~FlopRegion();
  FlopRegion(const FlopRegion&) = delete;
  FlopRegion& operator=(const FlopRegion&) = delete;
};

}  // namespace balr::instrument
