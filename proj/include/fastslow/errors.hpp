#pragma once

#include <stdexcept>
#include <string>

namespace fastslow {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// process exit codes: UsageError -> 1, DataError -> 2, NumericError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller misuse: bad arguments, malformed flags, out-of-range requests.
struct UsageError : Error {
    using Error::Error;
};

// Problems with inputs on disk or with generated data: corrupt files,
// version mismatches, impossible dataset requests.
struct DataError : Error {
    using Error::Error;
};

// Non-finite values or other numeric breakdowns. Raised at the op that
// produced the value, never propagated silently.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace fastslow
