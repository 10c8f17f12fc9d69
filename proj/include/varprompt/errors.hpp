#pragma once

#include <stdexcept>
#include <string>

namespace varprompt {

// Every failure raised by the library derives from Error so callers can catch
// one type; the concrete class names the failure kind.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define VARPROMPT_ERROR(Name)                                                  \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {}   \
    }

VARPROMPT_ERROR(ShapeMismatch);
VARPROMPT_ERROR(DomainError);
VARPROMPT_ERROR(NonFiniteValue);
VARPROMPT_ERROR(InvalidAxis);
VARPROMPT_ERROR(NonScalarRoot);
VARPROMPT_ERROR(InvalidDf);
VARPROMPT_ERROR(InvalidDistribution);
VARPROMPT_ERROR(GradMismatch);
VARPROMPT_ERROR(TaskGenerationFailed);
VARPROMPT_ERROR(Divergence);
VARPROMPT_ERROR(NonFinite);
VARPROMPT_ERROR(InsufficientSignal);
VARPROMPT_ERROR(InvalidParam);
VARPROMPT_ERROR(DegenerateCloud);
VARPROMPT_ERROR(InvalidStrategy);
VARPROMPT_ERROR(ConfigError);
VARPROMPT_ERROR(RuntimeFailure);

#undef VARPROMPT_ERROR

} // namespace varprompt
