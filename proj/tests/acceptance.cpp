#include <condmv/verify.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>

// One line per acceptance criterion, in the order of Suite::check_names().
int main(int argc, char** argv)
{
  condmv::verify::SuiteOptions opt;
  opt.work_dir = argc > 1 ? std::filesystem::path(argv[1])
                          : std::filesystem::temp_directory_path() / "condmv_acceptance";
  opt.log = &std::clog;
  std::filesystem::remove_all(opt.work_dir);
  condmv::verify::Suite suite(opt);
  const auto& names = condmv::verify::Suite::check_names();
  std::vector<condmv::verify::CheckResult> results;
  for (const auto& n : names) {
    try {
      results.push_back(suite.run(n));
    } catch (const std::exception& e) {
      condmv::verify::CheckResult r;
      r.name = n;
      r.note = std::string("error: ") + e.what();
      results.push_back(r);
    }
  }
  int failed = 0;
  for (std::size_t k = 0; k < results.size(); ++k) {
    std::printf("criterion %zu %s (%.1f s)\n", k + 1, results[k].summary().c_str(), results[k].seconds);
    failed += results[k].passed() ? 0 : 1;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
  return failed == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
