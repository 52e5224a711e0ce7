#pragma once

#include <cstdint>
#include <functional>
#include <string>

namespace dscm {

// Worker cap from DSCM_THREADS (default: hardware concurrency, at least 1).
std::size_t thread_cap();

// Index-parallel loop over [0, n); work items must be independent and write
// only to their own slots so results stay deterministic under any cap.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

// FNV-1a content hashes for run manifests.
std::uint64_t fnv1a(const void* data, std::size_t len);
std::string hash_file(const std::string& path);
std::string hash_string(const std::string& s);

}  // namespace dscm
