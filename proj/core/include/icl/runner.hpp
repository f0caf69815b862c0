#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace icl {

inline constexpr const char* kCodeVersion = "0.1.0";

// Write via a temp file in the same directory, then rename.
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& content);
std::string read_file(const std::filesystem::path& path);

// Runs fn(0..n-1) on `threads` workers. Work items must be independent and
// deterministic in their index (counter-based RNG streams), so the thread
// count never changes results.
void run_parallel(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn);

struct RunManifest {
  std::uint64_t config_hash = 0;
  std::string code_version = kCodeVersion;
  std::string command;
  std::vector<std::uint64_t> seeds;
  double seconds = 0.0;  // excluded from determinism comparisons
  std::vector<std::string> result_files;
};

std::string manifest_to_json(const RunManifest& m);

}  // namespace icl
