#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace geoflow::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kRunManifest = "run_manifest.json";

/// Parses argv and runs one subcommand: synth, pairgen, train, eval,
/// register or report. Returns 0 on success, 2 on usage errors and 1 on
/// runtime failures.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Reproducibility record stamped into every output directory.
struct RunManifest {
  std::string subcommand;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;     // path -> sha256
  std::map<std::string, std::string> artifacts;  // path relative to the output dir -> sha256
  std::vector<std::string> argv;
  double wall_clock_seconds = 0.0;
  std::string started_at;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& dir) const;
  static RunManifest read(const std::filesystem::path& dir);
};

std::string tool_version();

}  // namespace geoflow::cli
