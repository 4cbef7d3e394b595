#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mkd {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

/// Label value carried by batches built from inputs-only views.
inline constexpr int kHiddenLabel = -1;

/// Row-major [size x seq_len] token block with per-sample labels.
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<int> token_ids;
  std::vector<int> mask;  // 1 = real token, 0 = padding
  std::vector<int> class_labels;
  std::vector<int> domain_labels;
  std::vector<int> corrupted_domain_labels;
  std::vector<std::string> ids;

  bool labeled() const {
    for (int y : class_labels)
      if (y == kHiddenLabel) return false;
    return true;
  }
};

}  // namespace mkd
