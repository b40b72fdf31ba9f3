#pragma once

#include <stdexcept>
#include <string>

namespace unigrec {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyDatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SplitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// quant_loss invoked on a soft quantization result, and similar misuse
struct ModeError : std::logic_error {
  using std::logic_error::logic_error;
};

struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// missing pipeline artifact; message names the command that produces it
struct PrerequisiteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace unigrec
