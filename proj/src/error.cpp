#include "fuselite/error.hpp"

namespace fuselite {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DegenerateCorners: return "DegenerateCorners";
    case ErrorCode::DegenerateMatrix: return "DegenerateMatrix";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::PatchSizeMismatch: return "PatchSizeMismatch";
    case ErrorCode::MissingReference: return "MissingReference";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::TooFewImages: return "TooFewImages";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::WeightsUnavailable: return "WeightsUnavailable";
    case ErrorCode::DataUnavailable: return "DataUnavailable";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace fuselite
