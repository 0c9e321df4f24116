#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <set>
#include <string>
#include <vector>

#include "acceptance.hpp"
#include "ac3d/parallel.hpp"

namespace {

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  void (*run)(ac3d::acceptance::Checker&);
};

const std::vector<Criterion> kCriteria = {
    {1, "geometry suite", 10.0, ac3d::acceptance::geometry_suite},
    {2, "rescale oracle", 10.0, ac3d::acceptance::rescale_oracle},
    {3, "flow and spectrum", 60.0, ac3d::acceptance::flow_and_spectrum},
    {4, "spectral bias", 300.0, ac3d::acceptance::spectral_bias},
    {5, "probing suite", 120.0, ac3d::acceptance::probing_suite},
    {6, "diffusion core", 300.0, ac3d::acceptance::diffusion_core},
    {7, "noise schedule", 5.0, ac3d::acceptance::noise_schedule},
    {8, "end-to-end steering", 1800.0, ac3d::acceptance::steering},
    {9, "determinism", 600.0, ac3d::acceptance::determinism},
};

}  // namespace

// Usage: acceptance [criterion ids...]; runs all criteria by default.
int main(int argc, char** argv) {
  ac3d::tune_allocator();
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& cr : kCriteria) {
    if (!selected.empty() && !selected.count(cr.id)) continue;
    ac3d::acceptance::Checker c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.run(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(secs <= cr.budget_s, "runtime over budget");
    std::printf("%s criterion %d (%s) %.1fs/%.0fs %s%s%s\n", c.pass() ? "PASS" : "FAIL", cr.id, cr.name, secs,
                cr.budget_s, c.notes().c_str(), c.failures().empty() ? "" : " | failed: ", c.failures().c_str());
    std::fflush(stdout);
    failed += !c.pass();
  }
  return failed == 0 ? 0 : 1;
}
