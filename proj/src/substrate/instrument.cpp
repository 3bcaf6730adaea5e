#include "balr/instrument.hpp"

#include <algorithm>
#include <atomic>

namespace balr::instrument {
namespace {

struct FlopState {
  std::uint64_t total = 0;
  std::map<std::string, std::uint64_t> by_label;
  std::vector<std::string> stack;
};

thread_local MemoryStats t_memory;
thread_local FlopState t_flops;
std::atomic<bool> g_enabled{true};

}  // namespace

MemoryStats& memory_stats() noexcept { return t_memory; }

void note_allocation(std::size_t bytes) noexcept {
  t_memory.live_bytes += bytes;
  t_memory.peak_bytes = std::max(t_memory.peak_bytes, t_memory.live_bytes);
  t_memory.largest_allocation = std::max(t_memory.largest_allocation, bytes);
  ++t_memory.allocations;
}

void note_release(std::size_t bytes) noexcept {
  // Buffers can migrate between threads; clamp rather than wrap.
  t_memory.live_bytes = bytes > t_memory.live_bytes ? 0 : t_memory.live_bytes - bytes;
}

MemoryScope::MemoryScope() noexcept
    : base_live_(t_memory.live_bytes),
      outer_peak_(t_memory.peak_bytes),
      outer_largest_(t_memory.largest_allocation) {
  t_memory.peak_bytes = t_memory.live_bytes;
  t_memory.largest_allocation = 0;
}

MemoryScope::~MemoryScope() {
  t_memory.peak_bytes = std::max(outer_peak_, t_memory.peak_bytes);
  t_memory.largest_allocation = std::max(outer_largest_, t_memory.largest_allocation);
}

std::size_t MemoryScope::peak_bytes() const noexcept {
  return t_memory.peak_bytes > base_live_ ? t_memory.peak_bytes - base_live_ : 0;
}

std::size_t MemoryScope::largest_allocation() const noexcept { return t_memory.largest_allocation; }

void set_enabled(bool enabled) noexcept { g_enabled.store(enabled); }

bool enabled() noexcept { return g_enabled.load(); }

void add_flops(std::uint64_t flops) noexcept {
  if (!g_enabled.load(std::memory_order_relaxed)) return;
  t_flops.total += flops;
  for (const auto& label : t_flops.stack) t_flops.by_label[label] += flops;
}

std::uint64_t flops_total() noexcept { return t_flops.total; }

std::uint64_t flops_for(const std::string& label) {
  auto it = t_flops.by_label.find(label);
  return it == t_flops.by_label.end() ? 0 : it->second;
}

void reset_flops() {
  t_flops.total = 0;
  t_flops.by_label.clear();
}

FlopRegion::FlopRegion(std::string label) { t_flops.stack.push_back(std::move(label)); }

FlopRegion::~FlopRegion() { t_flops.stack.pop_back(); }

}  // namespace balr::instrument
