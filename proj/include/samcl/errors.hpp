#pragma once

#include <stdexcept>
#include <string>

namespace samcl {

// Base class for everything thrown by this library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or rank mismatch between operands. Exit code 2.
struct dimension_error : error {
    using error::error;
};

// Bad configuration, out-of-range argument, malformed input. Exit code 2.
struct validation_error : error {
    using error::error;
};

// Operation not legal in the current object state (duplicate task id,
// empty buffer, missing module). Exit code 2.
struct state_error : error {
    using error::error;
};

// Non-finite values where finite ones are required. Exit code 2.
struct numeric_error : error {
    using error::error;
};

// A guaranteed property was observed broken (frozen weights changed,
// write-once file mutated). Exit code 3.
struct invariant_violation : error {
    using error::error;
};

// File system and serialization failures. Exit code 4.
struct io_error : error {
    using error::error;
};

// Adapter site placed at or before the selector extraction block. Exit code 2.
struct injection_error : error {
    using error::error;
};

// A training run missed its required quality threshold. Exit code 2.
struct training_failure : error {
    using error::error;
};

} // namespace samcl
