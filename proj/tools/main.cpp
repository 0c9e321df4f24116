#include <charconv>
#include <iostream>

#include "ac3d/parallel.hpp"
#include "cli_common.hpp"

namespace ac3d::cli {

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  // splitmix64 finalizer
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

Output::Output(const std::filesystem::path& path) : path_(path) {
  if (path.empty()) return;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
  if (!*file_) throw DataError("cannot write " + path.string());
}

void Output::close() {
  std::ostream& s = stream();
  s.flush();
  if (!s) throw DataError("failed writing " + (path_.empty() ? std::string("stdout") : path_.string()));
  if (file_) file_->close();
}

}  // namespace ac3d::cli

namespace {

// Innermost subcommand that was selected on the command line.
const CLI::App* active(const CLI::App& app) {
  const CLI::App* cur = &app;
  for (;;) {
    const auto subs = cur->get_subcommands();
    if (subs.empty()) return cur;
    cur = subs.front();
  }
}

}  // namespace

int main(int argc, char** argv) {
  ac3d::tune_allocator();
  using namespace ac3d::cli;
  Globals g;
  CLI::App app{"Camera-control toolkit: geometry, motion spectra, probing, synthetic data and a toy video diffuser.",
               "ac3d"};
  app.fallthrough();
  app.require_subcommand(1);
  app.set_version_flag("--version", "ac3d 1.0");
  app.add_option("--seed", g.seed, "Global seed; stages derive their own seeds from it")->capture_default_str();
  app.footer("--seed (default 20240613) may follow any subcommand. Exit codes: 0 success, 1 usage error, 2 data error. AC3D_THREADS caps worker threads.");

  register_cameras(app, g);
  register_flow(app, g);
  register_probe(app, g);
  register_synth(app, g);
  register_diffusion(app, g);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active(app)->help();
    return 1;
  } catch (const ac3d::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active(app)->help();
    return 1;
  } catch (const ac3d::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
