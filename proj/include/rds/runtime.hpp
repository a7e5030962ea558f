#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>

namespace rds {

/// Sub-seed for a named pipeline stage ("corpus", "lm", "clf", "head", "gen", ...).
/// FNV-1a of the name mixed into the global seed through splitmix64.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage);

/// Worker cap: RDS_THREADS if set to a positive integer, else hardware concurrency.
std::size_t thread_budget();

/// Runs body(i) for i in [0, count) on up to thread_budget() threads. Work is
/// claimed in index order; callers write results into per-index slots so the
/// outcome never depends on scheduling.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace rds
