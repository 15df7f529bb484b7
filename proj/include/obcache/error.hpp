// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace obcache {

enum class ErrorKind {
    Shape,
    DegenerateRow,
    Window,
    Index,
    Ordering,
    Aggregation,
    Accumulator,
    Config,
    Metric,
    UnsupportedSemantics,
    TraceMagic,
    TraceVersion,
    TraceShape,
    TraceTruncated,
    Io,
};

const char* to_string(ErrorKind kind) noexcept;

// Every failure raised by the library carries a kind so callers (the CLI in
// particular) can map it onto an exit code without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), m_kind(kind) {}

    ErrorKind kind() const noexcept { return m_kind; }

private:
    ErrorKind m_kind;
};

[[noreturn]] void raise(ErrorKind kind, const std::string& what);

}  // namespace obcache
