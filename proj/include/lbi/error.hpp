#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lbi {

enum class ErrorCode {
    InvalidParameter,
    Dimension,
    Ordering,
    Bounds,
    MissingNoise,
    Divergence,
    Fit,
    TrainingFailure,
    InvalidInput,
    Config,
    Io,
    Format,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidParameter: return "invalid_parameter";
    case ErrorCode::Dimension: return "dimension";
    case ErrorCode::Ordering: return "ordering";
    case ErrorCode::Bounds: return "bounds";
    case ErrorCode::MissingNoise: return "missing_noise";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::Fit: return "fit";
    case ErrorCode::TrainingFailure: return "training_failure";
    case ErrorCode::InvalidInput: return "invalid_input";
    case ErrorCode::Config: return "config";
    case ErrorCode::Io: return "io";
    case ErrorCode::Format: return "format";
    }
    return "unknown";
}

// Every failure raised by the library. `context` is a short free-form locator
// (operation name, iteration index, file path) surfaced by the CLI error JSON.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message, std::string context = {})
        : std::runtime_error(message), code_(code), context_(std::move(context)) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& context() const noexcept { return context_; }

private:
    ErrorCode code_;
    std::string context_;
};

namespace detail {

inline void require(bool ok, ErrorCode code, const std::string& message, std::string context = {}) {
    if (!ok) throw Error(code, message, std::move(context));
}

inline void require_dim(long got, long want, std::string_view what) {
    if (got != want) {
        throw Error(ErrorCode::Dimension,
                    std::string(what) + ": expected " + std::to_string(want) + " entries, got " +
                        std::to_string(got),
                    std::string(what));
    }
}

} // namespace detail
} // namespace lbi
