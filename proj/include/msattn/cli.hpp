#pragma once

#include <chrono>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace msattn {

/// Exit codes of every command.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

/// Provenance of one artifact directory, stored as run.txt.
struct RunRecord {
  std::string command_line;
  std::vector<std::pair<std::string, std::string>> config;  // flag snapshot, in order
  std::uint64_t seed = 0;
  std::string dataset_hash;  // 16 hex digits, empty when no dataset is involved
  std::vector<std::string> outputs;
  double duration_s = 0.0;

  std::string to_text() const;
  static RunRecord from_text(const std::string& text);
};

inline constexpr const char* kRunRecordName = "run.txt";

/// Cache directory: MSATTN_CACHE_DIR when set, else $HOME/.cache/msattn, else ./.msattn-cache.
std::filesystem::path default_cache_dir();

/// Runs one command ("gen-data", "train", "eval", "gradcheck", "sweep", "report").
/// args excludes the program name. Returns an ExitCode value.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace msattn
