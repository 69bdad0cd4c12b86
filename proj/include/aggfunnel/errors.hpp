#pragma once

#include <stdexcept>
#include <string>

namespace aggfunnel {

/// Rejected construction parameters (zero aggregators, zero threads, ...).
class InvalidConfig : public std::invalid_argument {
 public:
  explicit InvalidConfig(const std::string& what) : std::invalid_argument(what) {}
};

/// Every id in [0, p) has already been handed out.
class RegistryFull : public std::runtime_error {
 public:
  explicit RegistryFull(const std::string& what) : std::runtime_error(what) {}
};

class HistoryTooLarge : public std::length_error {
 public:
  explicit HistoryTooLarge(const std::string& what) : std::length_error(what) {}
};

class MalformedHistory : public std::runtime_error {
 public:
  explicit MalformedHistory(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace aggfunnel
