#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mabflow {

// Every failure raised by the library carries exactly one code. The HTTP
// layer maps these onto status codes; the CLI maps them onto exit codes.
enum class ErrorCode {
    not_found,
    conflict,
    invalid,
    infeasible,
    parameter,
    configuration,
    campaign,
    gap,
    storage,
    internal,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::invalid: return "invalid";
    case ErrorCode::infeasible: return "infeasible";
    case ErrorCode::parameter: return "parameter";
    case ErrorCode::configuration: return "configuration";
    case ErrorCode::campaign: return "campaign";
    case ErrorCode::gap: return "gap";
    case ErrorCode::storage: return "storage";
    case ErrorCode::internal: return "internal";
    }
    return "internal";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message, std::string detail = {})
        : std::runtime_error(message), code_(code), detail_(std::move(detail)) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

} // namespace mabflow
