#include "cmkd/tensor.hpp"

namespace cmkd {

const char* err_code(Err e) {
  switch (e) {
    case Err::ShapeMismatch: return "E_SHAPE_MISMATCH";
    case Err::RankError: return "E_RANK";
    case Err::ElementCountMismatch: return "E_ELEMENT_COUNT";
    case Err::NonScalarLoss: return "E_NON_SCALAR_LOSS";
    case Err::NonFinite: return "E_NON_FINITE";
    case Err::UnknownTokenId: return "E_UNKNOWN_TOKEN";
    case Err::GenerationExhausted: return "E_GENERATION_EXHAUSTED";
    case Err::NotUnique: return "E_NOT_UNIQUE";
    case Err::EmptyMask: return "E_EMPTY_MASK";
    case Err::BadMagic: return "E_BAD_MAGIC";
    case Err::VersionMismatch: return "E_VERSION_MISMATCH";
    case Err::TruncatedRecord: return "E_TRUNCATED_RECORD";
    case Err::FingerprintMismatch: return "E_FINGERPRINT_MISMATCH";
    case Err::BadVocab: return "E_BAD_VOCAB";
    case Err::StateShapeMismatch: return "E_STATE_SHAPE_MISMATCH";
    case Err::IncompatibleTeacher: return "E_INCOMPATIBLE_TEACHER";
    case Err::UnknownKey: return "E_UNKNOWN_KEY";
    case Err::TypeError: return "E_TYPE";
    case Err::DuplicateKey: return "E_DUPLICATE_KEY";
    case Err::MissingInput: return "E_NO_INPUT";
    case Err::InvalidValue: return "E_INVALID_VALUE";
    case Err::IoError: return "E_IO";
  }
  return "E_UNKNOWN";
}

int err_exit_class(Err e) {
  switch (e) {
    case Err::UnknownKey:
    case Err::TypeError:
    case Err::DuplicateKey:
    case Err::InvalidValue:
      return 3;
    case Err::MissingInput:
    case Err::BadMagic:
    case Err::VersionMismatch:
    case Err::TruncatedRecord:
    case Err::FingerprintMismatch:
    case Err::BadVocab:
    case Err::IoError:
      return 2;
    default:
      return 1;
  }
}

} // namespace cmkd
