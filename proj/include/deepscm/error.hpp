#pragma once

#include <stdexcept>
#include <string>

namespace deepscm {

/// Failure categories; the CLI maps these onto process exit codes.
enum class ErrorKind {
    Shape,
    Contract,
    Index,
    UnsupportedOrder,
    SingularCovariance,
    DegeneratePower,
    DegenerateBound,
    InsufficientSamples,
    Degradedness,
    Config,
    Io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define DEEPSCM_DEFINE_ERROR(Name, Kind)                                   \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
    };

DEEPSCM_DEFINE_ERROR(ShapeError, Shape)
DEEPSCM_DEFINE_ERROR(ContractError, Contract)
DEEPSCM_DEFINE_ERROR(IndexError, Index)
DEEPSCM_DEFINE_ERROR(UnsupportedOrderError, UnsupportedOrder)
DEEPSCM_DEFINE_ERROR(SingularCovarianceError, SingularCovariance)
DEEPSCM_DEFINE_ERROR(DegeneratePowerError, DegeneratePower)
DEEPSCM_DEFINE_ERROR(DegenerateBoundError, DegenerateBound)
DEEPSCM_DEFINE_ERROR(InsufficientSamplesError, InsufficientSamples)
DEEPSCM_DEFINE_ERROR(DegradednessError, Degradedness)
DEEPSCM_DEFINE_ERROR(ConfigError, Config)
DEEPSCM_DEFINE_ERROR(IoError, Io)

#undef DEEPSCM_DEFINE_ERROR

/// 0 success, 2 config error, 3 contract violation, 4 I/O error.
inline int exit_code_for(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Io: return 4;
    default: return 3;
    }
}

} // namespace deepscm
