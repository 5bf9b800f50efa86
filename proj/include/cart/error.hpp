#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cart {

enum class ErrorCode {
    Format,
    UnsupportedDtype,
    Truncation,
    Io,
    ArchitectureMismatch,
    Precondition,
    Numeric,
    Rank,
    Shape,
    EmptyInput,
    InsufficientTasks,
    Divergence,
    Plan,
    Index,
    ZeroTaskVector,
    Range,
    Param,
    Invariant,
    EmptyBatch,
    Evaluation,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries one of the codes above so
// callers (and the CLI) can dispatch without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string &what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::Format: return "FormatError";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::Truncation: return "TruncationError";
    case ErrorCode::Io: return "IoError";
    case ErrorCode::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorCode::Precondition: return "PreconditionError";
    case ErrorCode::Numeric: return "NumericError";
    case ErrorCode::Rank: return "RankError";
    case ErrorCode::Shape: return "ShapeError";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InsufficientTasks: return "InsufficientTasks";
    case ErrorCode::Divergence: return "DivergenceError";
    case ErrorCode::Plan: return "PlanError";
    case ErrorCode::Index: return "IndexError";
    case ErrorCode::ZeroTaskVector: return "ZeroTaskVector";
    case ErrorCode::Range: return "RangeError";
    case ErrorCode::Param: return "ParamError";
    case ErrorCode::Invariant: return "InvariantError";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::Evaluation: return "EvaluationError";
    }
    return "Error";
}

} // namespace cart
