// Exception types shared across the library.

#pragma once

#include <stdexcept>
#include <string>

namespace qjfuse {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes of an operation's inputs do not line up.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// A forward op produced NaN or Inf.
struct NonFiniteError : Error {
    explicit NonFiniteError(const std::string& msg) : Error("non-finite value: " + msg) {}
};

// Vector norm below the representable threshold; cannot form a unit state.
struct NearZeroNorm : Error {
    explicit NearZeroNorm(const std::string& msg) : Error("near-zero norm: " + msg) {}
};

// A collapse operator annihilated the state (||L psi|| ~ 0).
struct AnnihilatedState : Error {
    explicit AnnihilatedState(const std::string& msg) : Error("annihilated state: " + msg) {}
};

// backward() invoked twice on the same tape.
struct TapeConsumed : Error {
    explicit TapeConsumed(const std::string& msg) : Error("tape consumed: " + msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

struct CheckpointError : Error {
    explicit CheckpointError(const std::string& msg) : Error("checkpoint error: " + msg) {}
};

} // namespace qjfuse
