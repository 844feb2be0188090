#pragma once

#include <complex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace beamcast {

using cplx = std::complex<double>;
using Rng = std::mt19937_64;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSpeedOfLight = 299792458.0;

// Error taxonomy. The CLI maps each class onto a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class DegenerateSampleError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

/// Undefined metric (empty subset) requested as a number.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Independent stream seed for item `index` under `master`. Used so that
/// per-UE / per-record work is identical in serial and parallel runs.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(const std::string& bytes);

std::string hex64(std::uint64_t v);

double db_to_linear(double db);
double dbm_to_mw(double dbm);

}  // namespace beamcast
