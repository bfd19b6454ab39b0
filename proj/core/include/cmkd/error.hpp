#pragma once

#include <stdexcept>
#include <string>

namespace cmkd {

enum class Err {
  ShapeMismatch,
  RankError,
  ElementCountMismatch,
  NonScalarLoss,
  NonFinite,
  UnknownTokenId,
  GenerationExhausted,
  NotUnique,
  EmptyMask,
  BadMagic,
  VersionMismatch,
  TruncatedRecord,
  FingerprintMismatch,
  BadVocab,
  StateShapeMismatch,
  IncompatibleTeacher,
  UnknownKey,
  TypeError,
  DuplicateKey,
  MissingInput,
  InvalidValue,
  IoError,
};

// Stable machine-parsable code, e.g. "E_SHAPE_MISMATCH".
const char* err_code(Err e);

// Process exit class per code: 0 ok, 1 invariant failure, 2 missing input,
// 3 config error.
int err_exit_class(Err e);

class Error : public std::runtime_error {
public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_code(code)) + ": " + msg), code_(code) {}
  Err code() const { return code_; }

private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

} // namespace cmkd
