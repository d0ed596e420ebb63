#include "freesim/error.hpp"

namespace freesim {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::MalformedManifest: return "MalformedManifest";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NonFiniteParameter: return "NonFiniteParameter";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::TrajectoryTooShort: return "TrajectoryTooShort";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::NonPSD: return "NonPSD";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::ProtocolError: return "ProtocolError";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace freesim
