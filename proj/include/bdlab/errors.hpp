#pragma once

#include <stdexcept>
#include <string>

namespace bdlab {

// Bad user input: config files, CLI arguments, infeasible attack specs.
// The CLI maps this to exit code 2.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Failures while computing: shape mismatches, NaN divergence, I/O corruption.
// The CLI maps this to exit code 3.
struct ComputeError : std::runtime_error {
  explicit ComputeError(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : ComputeError {
  explicit ShapeError(const std::string& what) : ComputeError(what) {}
};

struct IoError : ComputeError {
  explicit IoError(const std::string& what) : ComputeError(what) {}
};

}  // namespace bdlab
