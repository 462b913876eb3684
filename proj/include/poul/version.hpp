#pragma once

namespace poul {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace poul
