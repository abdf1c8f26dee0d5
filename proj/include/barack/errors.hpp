#pragma once

#include <stdexcept>
#include <string>

namespace barack {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct BudgetInfeasible : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyDataset : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyGroup : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateTarget : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LabelRange : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct Diverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Unsupported : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace barack
