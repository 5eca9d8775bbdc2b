#pragma once

namespace mombs {
inline constexpr const char* kVersion = "0.1.0";
}
