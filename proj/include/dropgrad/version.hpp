#pragma once

namespace dropgrad {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace dropgrad
