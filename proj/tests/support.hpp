#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "msti/tensor.hpp"

namespace msti::testing {

template <typename T>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<T> t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(d(rng));
    return t;
}

/// Central difference of f with respect to x.
inline double central_difference(const std::function<double()>& f, double& x, double eps = 1e-6) {
    const double saved = x;
    x = saved + eps;
    const double up = f();
    x = saved - eps;
    const double down = f();
    x = saved;
    return (up - down) / (2 * eps);
}

inline bool grad_close(double analytic, double numeric, double rtol = 1e-3, double atol = 1e-6) {
    return std::abs(analytic - numeric) <= atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("msti_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace msti::testing
