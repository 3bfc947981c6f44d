#pragma once

// Periodic crystal graphs: nearest-neighbor edges over lattice images with
// Gaussian-expanded distance features and one-hot atom features.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "crystalign/cif.hpp"
#include "crystalign/elements.hpp"

namespace crystalign {

struct GraphConfig {
  double cutoff = 8.0;  // Angstrom
  std::size_t max_neighbors = 12;
  double gauss_min = 0.0;
  double gauss_max = 8.0;
  double gauss_step = 0.2;
  double gauss_sigma = 0.2;

  void validate() const;
  std::size_t num_gaussians() const;
};

struct Edge {
  std::uint32_t src = 0;
  std::uint32_t dst = 0;
  std::array<int, 3> image{};  // lattice translation of dst
  double distance = 0.0;
};

struct CrystalGraph {
  std::string id;
  std::vector<int> atomic_numbers;
  std::size_t num_atom_features = kNumElements;
  std::vector<float> node_features;  // num_nodes × num_atom_features, row-major
  std::vector<Edge> edges;
  std::size_t num_edge_features = 0;
  std::vector<float> edge_features;  // edges.size() × num_edge_features

  std::size_t num_nodes() const { return atomic_numbers.size(); }
};

/// Sort key for neighbor distances: 1e-9 A resolution, so images at the same
/// distance up to rounding fall back to the (dst, image) tie-break.
std::int64_t distance_key(double distance);

/// For each site, up to max_neighbors nearest periodic images within the cutoff,
/// ordered by (distance, dst, image). Throws Errc::IsolatedAtom if a site has none.
std::vector<Edge> periodic_neighbors(const CrystalStructure& structure, const GraphConfig& config);

/// exp(-(d - mu_k)^2 / sigma^2) over mu_k = gauss_min + k * gauss_step.
std::vector<double> gaussian_expand(double distance, const GraphConfig& config);

CrystalGraph build_graph(const CrystalStructure& structure, const GraphConfig& config = {});

/// Graph cache: 16-byte header ("CXGRAPH\0", u32 version, u32 count) then one
/// little-endian record per graph.
void write_graph_cache(std::ostream& out, std::span<const CrystalGraph> graphs);
std::vector<CrystalGraph> read_graph_cache(std::istream& in);
void write_graph_cache(const std::filesystem::path& path, std::span<const CrystalGraph> graphs);
std::vector<CrystalGraph> read_graph_cache(const std::filesystem::path& path);

}  // namespace crystalign
