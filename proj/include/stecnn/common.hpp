#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stecnn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw std::invalid_argument(format_msg(std::forward<Args>(args)...));
}

template <typename... Args>
[[noreturn]] void fail_runtime(Args&&... args) {
  throw std::runtime_error(format_msg(std::forward<Args>(args)...));
}

template <typename... Args>
void check(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}

template <typename... Args>
void warn(Args&&... args) {
  std::fprintf(stderr, "[stecnn] warning: %s\n", format_msg(std::forward<Args>(args)...).c_str());
}

}  // namespace stecnn
