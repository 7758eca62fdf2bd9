#pragma once

#include <stdexcept>
#include <string>

namespace vitae {

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& msg) : std::runtime_error("ShapeMismatch: " + msg) {}
};

// Any op produced a NaN or Inf. The training loop treats this as divergence.
struct NonFinite : std::runtime_error {
    explicit NonFinite(const std::string& msg) : std::runtime_error("NonFinite: " + msg) {}
};

struct NotScalar : std::runtime_error {
    explicit NotScalar(const std::string& msg) : std::runtime_error("NotScalar: " + msg) {}
};

struct NonPositiveScale : std::runtime_error {
    explicit NonPositiveScale(const std::string& msg) : std::runtime_error("NonPositiveScale: " + msg) {}
};

struct NonPositiveVariance : std::runtime_error {
    explicit NonPositiveVariance(const std::string& msg) : std::runtime_error("NonPositiveVariance: " + msg) {}
};

struct DegenerateBasis : std::runtime_error {
    explicit DegenerateBasis(const std::string& msg) : std::runtime_error("DegenerateBasis: " + msg) {}
};

struct OutOfDomain : std::runtime_error {
    explicit OutOfDomain(const std::string& msg) : std::runtime_error("OutOfDomain: " + msg) {}
};

struct UnsupportedInverse : std::runtime_error {
    explicit UnsupportedInverse(const std::string& msg) : std::runtime_error("UnsupportedInverse: " + msg) {}
};

struct BadMagic : std::runtime_error {
    explicit BadMagic(const std::string& msg) : std::runtime_error("BadMagic: " + msg) {}
};

struct TruncatedFile : std::runtime_error {
    explicit TruncatedFile(const std::string& msg) : std::runtime_error("TruncatedFile: " + msg) {}
};

struct EmptyTrainSet : std::runtime_error {
    explicit EmptyTrainSet(const std::string& msg) : std::runtime_error("EmptyTrainSet: " + msg) {}
};

struct DegenerateFactor : std::runtime_error {
    explicit DegenerateFactor(const std::string& msg) : std::runtime_error("DegenerateFactor: " + msg) {}
};

struct AllZeroImportance : std::runtime_error {
    explicit AllZeroImportance(const std::string& msg) : std::runtime_error("AllZeroImportance: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("IoError: " + msg) {}
};

// training hit a non-finite loss or gradient; the partial log is kept
struct Diverged : std::runtime_error {
    explicit Diverged(const std::string& msg) : std::runtime_error("Diverged: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("ConfigError: " + msg) {}
};

}  // namespace vitae
