#pragma once

#include <chrono>

namespace ems {

// Wall-clock stopwatch in milliseconds.
class Stopwatch {
  public:
    Stopwatch() : start_(clock::now()) {}
    void reset() { start_ = clock::now(); }
    double ms() const {
        return std::chrono::duration<double, std::milli>(clock::now() - start_).count();
    }

  private:
    using clock = std::chrono::steady_clock;
    clock::time_point start_;
};

}  // namespace ems
