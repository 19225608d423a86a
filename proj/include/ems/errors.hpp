#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ems {

class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Structural problem in a grid model (dangling reference, missing status, ...).
class ModelError : public Error {
  public:
    explicit ModelError(const std::string& what) : Error(what) {}
};

struct Diagnostic {
    enum class Severity { Error, Warning };
    Severity severity = Severity::Error;
    int line = 0;  // 1-based; 0 = whole-input
    int column = 0;
    std::string message;

    std::string str() const;
};

// Carries every diagnostic collected before parsing gave up.
class ParseError : public Error {
  public:
    ParseError(const std::string& what, std::vector<Diagnostic> diags)
        : Error(what), diagnostics(std::move(diags)) {}
    std::vector<Diagnostic> diagnostics;
};

class SingularMatrixError : public Error {
  public:
    SingularMatrixError(const std::string& what, int vertex)
        : Error(what), vertex(vertex) {}
    int vertex;  // original (pre-permutation) index of the failing pivot
};

class EstimationError : public Error {
  public:
    explicit EstimationError(const std::string& what, int island = -1)
        : Error(what), island(island) {}
    int island;
};

class IoError : public Error {
  public:
    explicit IoError(const std::string& what) : Error(what) {}
};

}  // namespace ems
