#pragma once

#include <cstddef>
#include <functional>
#include <optional>

namespace jetx {

/// Thread count from an explicit request, else JETX_THREADS, else the hardware.
std::size_t resolve_threads(std::optional<std::size_t> requested = std::nullopt);

/// Calls body(i) for i in [0, n) on `threads` workers using fixed contiguous
/// chunks. Results must be written to per-index slots; the first exception
/// (lowest index) is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace jetx
