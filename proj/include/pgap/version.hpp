#pragma once

namespace pgap {

inline constexpr const char* kVersion = "0.1.0";

} // namespace pgap
