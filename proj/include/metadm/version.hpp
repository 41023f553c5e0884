#pragma once

namespace metadm {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace metadm
