// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit suites.
#pragma once
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dgod/autograd.hpp"
#include "dgod/toydata.hpp"

namespace dgod::test {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() / ("dgod_" + tag + "_" + std::to_string(stamp));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Small toy spec: 3 source domains, 1 target, `n` images each.
inline ToySpec small_spec(int n = 6, std::uint64_t seed = 7) {
  ToySpec s;
  s.seed = seed;
  s.images_per_domain = n;
  return s;
}

/// Largest |analytic - central difference| over every entry of `x` for the
/// scalar `f`.
inline double max_fd_error(ag::Var x, const std::function<ag::Var(const ag::Var&)>& f, double h = 1e-6) {
  x.zero_grad();
  ag::backward(f(x));
  const std::vector<double> analytic = x.grad();
  double worst = 0.0;
  auto values = x.mutable_value();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = f(x).item();
    values[i] = keep - h;
    const double down = f(x).item();
    values[i] = keep;
    worst = std::max(worst, std::abs(analytic[i] - (up - down) / (2 * h)));
  }
  return worst;
}

}  // namespace dgod::test
