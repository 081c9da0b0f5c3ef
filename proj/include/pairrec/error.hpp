#pragma once

#include <stdexcept>

namespace pairrec {

/// Malformed input data, inconsistent shapes, or broken files.
/// The command line tool maps this to exit code 2; flag misuse
/// (std::invalid_argument) maps to exit code 1.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace pairrec
