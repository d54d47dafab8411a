#pragma once

#include <stdexcept>
#include <string>

namespace smokegen {

/// Base class for every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI to map errors onto exit codes.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

class InvalidInput : public Error {
public:
    explicit InvalidInput(const std::string& m) : Error("invalid-input", m) {}
};

class InvalidConfig : public Error {
public:
    explicit InvalidConfig(const std::string& m) : Error("invalid-config", m) {}
};

class InvalidStep : public Error {
public:
    explicit InvalidStep(const std::string& m) : Error("invalid-step", m) {}
};

class SingularityError : public Error {
public:
    explicit SingularityError(const std::string& m) : Error("singularity", m) {}
};

class NoForeground : public Error {
public:
    explicit NoForeground(const std::string& m) : Error("no-foreground", m) {}
};

class CapacityError : public Error {
public:
    CapacityError(std::string category, const std::string& m)
        : Error("capacity", m), category_(std::move(category)) {}
    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

/// Failure talking to an external model client. Callers may retry.
class TransportError : public Error {
public:
    explicit TransportError(const std::string& m) : Error("transport", m) {}
};

class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& m) : Error("checkpoint", m) {}
};

class NonFiniteLoss : public Error {
public:
    explicit NonFiniteLoss(const std::string& m) : Error("non-finite-loss", m) {}
};

}  // namespace smokegen
