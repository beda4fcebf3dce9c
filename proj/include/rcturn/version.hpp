#pragma once

namespace rcturn {

inline constexpr const char* kVersion = "1.0.0";

// On-disk format versions. Bump when a format changes incompatibly.
inline constexpr int kVocabFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr int kSampleCacheFormatVersion = 1;
inline constexpr int kTraceFormatVersion = 1;
inline constexpr int kReportFormatVersion = 1;

} // namespace rcturn
