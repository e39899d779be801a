// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace iterkey {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated a documented precondition (bad argument, bad config).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Corpus or dataset file could not be read or contains a bad record.
class CorpusError : public Error {
 public:
  using Error::Error;
};

/// Index file has a bad header, is truncated, or fails its checksum.
class IndexFormatError : public Error {
 public:
  using Error::Error;
};

/// Model output could not be parsed into the expected structure.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Base for failures reported by an LLM backend.
class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool retryable)
      : Error(what), retryable_(retryable) {}

  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

/// Connection refused, reset, or timed out.
class TransportError : public BackendError {
 public:
  explicit TransportError(const std::string& what) : BackendError(what, true) {}
};

/// Server answered with a non-2xx status.
class HttpStatusError : public BackendError {
 public:
  HttpStatusError(int status, const std::string& body_excerpt)
      : BackendError("HTTP " + std::to_string(status) + ": " + body_excerpt,
                     status >= 500),
        status_(status) {}

  int status() const noexcept { return status_; }

 private:
  int status_;
};

/// The scripted mock has no entry for the request.
class MockScriptError : public BackendError {
 public:
  explicit MockScriptError(const std::string& what) : BackendError(what, false) {}
};

}  // namespace iterkey
