#pragma once

#include <CLI11.hpp>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <string_view>

#include "ac3d/error.hpp"

namespace ac3d::cli {

inline constexpr std::uint64_t kDefaultSeed = 20240613;

struct Globals {
  std::uint64_t seed = kDefaultSeed;
};

/// Seed for one stage: FNV-1a of the stage name mixed into the global seed.
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

/// Shortest round-trip decimal; integral values keep a trailing ".0".
std::string fmt(double v);

/// Writes to `path`, or to stdout when the path is empty.
class Output {
 public:
  explicit Output(const std::filesystem::path& path);
  std::ostream& stream() { return file_ ? *file_ : std::cout; }
  /// Flushes and raises DataError when the write failed.
  void close();

 private:
  std::filesystem::path path_;
  std::unique_ptr<std::ofstream> file_;
};

void register_cameras(CLI::App& app, Globals& g);
void register_flow(CLI::App& app, Globals& g);
void register_probe(CLI::App& app, Globals& g);
void register_synth(CLI::App& app, Globals& g);
void register_diffusion(CLI::App& app, Globals& g);

}  // namespace ac3d::cli
