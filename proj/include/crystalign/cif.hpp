#pragma once

// CIF reading (COD-style subset), symmetry-operator evaluation and expansion
// of the asymmetric unit into a P1 structure in fractional coordinates.

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace crystalign {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

/// Structures with more sites than this after expansion are rejected.
inline constexpr std::size_t kMaxSites = 500;

/// Sites closer than this (per fractional component, with periodic wrapping) coincide.
inline constexpr double kSiteTolerance = 1e-3;

struct LatticeParams {
  double a = 1.0, b = 1.0, c = 1.0;             // Angstrom
  double alpha = 90.0, beta = 90.0, gamma = 90.0;  // degrees

  /// Throws Errc::InvalidLattice unless lengths > 0, angles in (0,180) and the cell has volume.
  void validate() const;

  static LatticeParams cubic(double a) { return {a, a, a, 90.0, 90.0, 90.0}; }
};

/// Cell matrix whose rows are the lattice vectors: a along x, b in the xy plane.
/// Row-wise it is lower triangular; cartesian = Mᵀ·frac.
Mat3 cell_matrix(const LatticeParams& lattice);

double cell_volume(const LatticeParams& lattice);

Vec3 frac_to_cart(const LatticeParams& lattice, const Vec3& frac);
Vec3 frac_to_cart(const Mat3& cell, const Vec3& frac);

/// Wraps into [0, 1).
double wrap_unit(double x) noexcept;

struct AtomSite {
  std::string element;
  Vec3 frac{};
  double occupancy = 1.0;
};

/// Affine operator rotation·frac + translation (mod 1). The translation is held in
/// twelfths so every crystallographic denominator (1,2,3,4,6) is exact.
struct SymmetryOp {
  std::array<std::array<int, 3>, 3> rotation{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::array<int, 3> translation_twelfths{0, 0, 0};

  Vec3 translation() const noexcept;
  /// Applies the operator and wraps the result into [0,1).
  Vec3 apply(const Vec3& frac) const noexcept;

  bool operator==(const SymmetryOp&) const = default;
};

/// Parses "x, y+1/2, -z" style operators. Throws ParseError with a byte offset.
SymmetryOp parse_symmetry_op(std::string_view text);
std::string format_symmetry_op(const SymmetryOp& op);

struct CrystalStructure {
  std::string id;
  LatticeParams lattice;
  std::vector<AtomSite> sites;
  /// Raw operator strings from the CIF; empty after expansion.
  std::vector<std::string> symmetry_ops;
};

/// Parses the first data block of a CIF document. The returned structure holds the
/// asymmetric unit plus the raw operator strings; use expand_symmetry next.
CrystalStructure parse_cif(std::string_view text, std::string id = {});

/// Closure of `ops` over the input sites, deduplicated at kSiteTolerance and sorted
/// by element then fractional coordinates. Throws Errc::TooManySites past max_sites.
CrystalStructure expand_symmetry(const CrystalStructure& structure, std::span<const SymmetryOp> ops,
                                 std::size_t max_sites = kMaxSites);

/// parse_cif + operator parsing + expand_symmetry. The id defaults to the file stem.
CrystalStructure load_structure(const std::filesystem::path& path, std::size_t max_sites = kMaxSites);

/// Expanded structure from CIF text (identity op if the CIF lists none).
CrystalStructure structure_from_cif(std::string_view text, std::string id,
                                    std::size_t max_sites = kMaxSites);

/// Canonical dump: {id, lattice{a,b,c,alpha,beta,gamma}, sites[{element, frac}]}.
nlohmann::json to_json(const CrystalStructure& structure);

/// Hill-ordered formula of the expanded cell, e.g. "Cl4Na4".
std::string chemical_formula(const CrystalStructure& structure);

}  // namespace crystalign
