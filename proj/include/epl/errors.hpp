#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace epl {

// Base class for every error raised by the library. The CLI maps subclasses
// to exit codes (see tools/epl_cli.cpp).
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
   public:
    using Error::Error;
};

class NumericError : public Error {
   public:
    using Error::Error;
};

class EmptyReductionError : public Error {
   public:
    using Error::Error;
};

class DomainError : public Error {
   public:
    using Error::Error;
};

class FormatError : public Error {
   public:
    using Error::Error;
};

class IoError : public Error {
   public:
    using Error::Error;
};

class SpecError : public Error {
   public:
    using Error::Error;
};

class ConfigError : public Error {
   public:
    using Error::Error;
};

class UndefinedMetric : public Error {
   public:
    using Error::Error;
};

// Total conflict between two mass assignments at one voxel.
class ConflictError : public Error {
   public:
    ConflictError(std::array<std::size_t, 3> voxel, double conflict)
        : Error("total conflict (delta=" + std::to_string(conflict) + ") at voxel (" +
                std::to_string(voxel[0]) + "," + std::to_string(voxel[1]) + "," +
                std::to_string(voxel[2]) + ")"),
          voxel_(voxel),
          conflict_(conflict) {}

    std::array<std::size_t, 3> voxel() const { return voxel_; }
    double conflict() const { return conflict_; }

   private:
    std::array<std::size_t, 3> voxel_;
    double conflict_;
};

}  // namespace epl
