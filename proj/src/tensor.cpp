#include "bpq/tensor.hpp"

namespace bpq {

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

const char* to_string(ParseErrorKind kind) {
  switch (kind) {
    case ParseErrorKind::kBadMagic: return "bad magic";
    case ParseErrorKind::kBadVersion: return "unsupported version";
    case ParseErrorKind::kTruncated: return "truncated payload";
    case ParseErrorKind::kNonFinite: return "non-finite sample";
    case ParseErrorKind::kInvalidLabels: return "invalid labels";
    case ParseErrorKind::kCorrupt: return "corrupt file";
    case ParseErrorKind::kIo: return "i/o failure";
  }
  return "parse error";
}

}  // namespace bpq
