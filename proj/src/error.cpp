#include "crystalign/error.hpp"

namespace crystalign {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::MissingTag: return "MissingTag";
    case Errc::MalformedLoop: return "MalformedLoop";
    case Errc::UnknownElement: return "UnknownElement";
    case Errc::ParseError: return "ParseError";
    case Errc::TooManySites: return "TooManySites";
    case Errc::InvalidLattice: return "InvalidLattice";
    case Errc::IsolatedAtom: return "IsolatedAtom";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NotScalar: return "NotScalar";
    case Errc::Checkpoint: return "Checkpoint";
    case Errc::EmptyText: return "EmptyText";
    case Errc::NonUnitRows: return "NonUnitRows";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::DuplicateId: return "DuplicateId";
    case Errc::ManifestError: return "ManifestError";
    case Errc::Offline: return "Offline";
    case Errc::Network: return "Network";
    case Errc::EmptyIndex: return "EmptyIndex";
    case Errc::DegenerateLabels: return "DegenerateLabels";
    case Errc::NoMatches: return "NoMatches";
    case Errc::NumericalWarning: return "NumericalWarning";
    case Errc::TooFewPoints: return "TooFewPoints";
    case Errc::PerplexityTooHigh: return "PerplexityTooHigh";
    case Errc::NotNormalized: return "NotNormalized";
    case Errc::EmptyCluster: return "EmptyCluster";
    case Errc::EmptyTitle: return "EmptyTitle";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& what)
    : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

ParseError::ParseError(std::size_t offset, const std::string& what)
    : Error(Errc::ParseError, what + " at byte " + std::to_string(offset)), offset_(offset) {}

}  // namespace crystalign
