// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace omnicast {

/// Caller broke an operation's precondition (shape, range, configuration).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// A NaN/Inf surfaced in a forward or backward pass, or in an optimizer step.
class NumericFault : public std::runtime_error {
public:
    NumericFault(const std::string& op, const std::string& detail)
        : std::runtime_error("numeric fault in '" + op + "': " + detail), op_(op) {}
    const std::string& op() const noexcept { return op_; }

private:
    std::string op_;
};

/// Invalid configuration document or parameter set (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Missing, corrupt or inconsistent input files (CLI exit code 3).
class IngestionFault : public std::runtime_error {
public:
    IngestionFault(const std::string& file, const std::string& detail)
        : std::runtime_error(file + ": " + detail), file_(file) {}
    const std::string& file() const noexcept { return file_; }

private:
    std::string file_;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

}  // namespace omnicast
