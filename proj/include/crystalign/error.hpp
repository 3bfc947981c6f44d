#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace crystalign {

enum class Errc {
  // cif
  MissingTag,
  MalformedLoop,
  UnknownElement,
  ParseError,
  TooManySites,
  InvalidLattice,
  // graph
  IsolatedAtom,
  // tensor
  ShapeMismatch,
  NotScalar,
  Checkpoint,
  // encoders / loss
  EmptyText,
  NonUnitRows,
  InvalidConfig,
  // corpus
  EmptyCorpus,
  DuplicateId,
  ManifestError,
  Offline,
  Network,
  // retrieval / atlas
  EmptyIndex,
  DegenerateLabels,
  NoMatches,
  NumericalWarning,
  TooFewPoints,
  PerplexityTooHigh,
  NotNormalized,
  EmptyCluster,
  EmptyTitle,
  Io,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what);

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Parse failure carrying the byte offset of the offending token.
class ParseError : public Error {
 public:
  ParseError(std::size_t offset, const std::string& what);

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace crystalign
