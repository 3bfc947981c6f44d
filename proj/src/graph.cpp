#include "crystalign/graph.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "crystalign/error.hpp"

namespace crystalign {
namespace {

Vec3 cross(const Vec3& u, const Vec3& v) {
  return {u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
}

double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

constexpr char kMagic[8] = {'C', 'X', 'G', 'R', 'A', 'P', 'H', '\0'};
constexpr std::uint32_t kCacheVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}
void put_i32(std::ostream& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }
void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw Error(Errc::Io, "truncated graph cache");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
std::int32_t get_i32(std::istream& in) { return static_cast<std::int32_t>(get_u32(in)); }
float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

}  // namespace

std::int64_t distance_key(double distance) { return std::llround(distance * 1e9); }

void GraphConfig::validate() const {
  if (!(cutoff > 0.0)) throw Error(Errc::InvalidConfig, "cutoff must be positive");
  if (max_neighbors < 1) throw Error(Errc::InvalidConfig, "max_neighbors must be >= 1");
  if (!(gauss_min < gauss_max)) throw Error(Errc::InvalidConfig, "gauss_min must be < gauss_max");
  if (!(gauss_step > 0.0)) throw Error(Errc::InvalidConfig, "gauss_step must be positive");
  if (!(gauss_sigma > 0.0)) throw Error(Errc::InvalidConfig, "gauss_sigma must be positive");
}

std::size_t GraphConfig::num_gaussians() const {
  // the epsilon absorbs representation error in e.g. 8.0 / 0.2
  return static_cast<std::size_t>(std::floor((gauss_max - gauss_min) / gauss_step + 1e-9)) + 1;
}

std::vector<Edge> periodic_neighbors(const CrystalStructure& structure, const GraphConfig& config) {
  config.validate();
  const Mat3 cell = cell_matrix(structure.lattice);
  const double volume = cell_volume(structure.lattice);
  // interplanar spacing d_k = V / |a_i x a_j| bounds how many images along k can fall in range
  std::array<int, 3> range{};
  for (int k = 0; k < 3; ++k) {
    const double area = norm(cross(cell[(k + 1) % 3], cell[(k + 2) % 3]));
    const double spacing = volume / area;
    range[k] = static_cast<int>(std::ceil(config.cutoff / spacing)) + 1;
  }

  const auto& sites = structure.sites;
  std::vector<Edge> edges;
  std::vector<Edge> candidates;
  for (std::uint32_t i = 0; i < sites.size(); ++i) {
    candidates.clear();
    for (std::uint32_t j = 0; j < sites.size(); ++j) {
      for (int n0 = -range[0]; n0 <= range[0]; ++n0) {
        for (int n1 = -range[1]; n1 <= range[1]; ++n1) {
          for (int n2 = -range[2]; n2 <= range[2]; ++n2) {
            if (i == j && n0 == 0 && n1 == 0 && n2 == 0) continue;
            const Vec3 diff = {sites[j].frac[0] + n0 - sites[i].frac[0],
                               sites[j].frac[1] + n1 - sites[i].frac[1],
                               sites[j].frac[2] + n2 - sites[i].frac[2]};
            const double d = norm(frac_to_cart(cell, diff));
            if (d > 0.0 && d <= config.cutoff) candidates.push_back({i, j, {n0, n1, n2}, d});
          }
        }
      }
    }
    if (candidates.empty()) {
      throw Error(Errc::IsolatedAtom, structure.id + ": site " + std::to_string(i) + " (" +
                                          sites[i].element + ") has no neighbor within " +
                                          std::to_string(config.cutoff) + " A");
    }
    const std::size_t keep = std::min(config.max_neighbors, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), [](const Edge& l, const Edge& r) {
                        const auto lk = distance_key(l.distance), rk = distance_key(r.distance);
                        if (lk != rk) return lk < rk;
                        if (l.dst != r.dst) return l.dst < r.dst;
                        return l.image < r.image;
                      });
    edges.insert(edges.end(), candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  return edges;
}

std::vector<double> gaussian_expand(double distance, const GraphConfig& config) {
  const std::size_t n = config.num_gaussians();
  std::vector<double> out(n);
  const double inv_var = 1.0 / (config.gauss_sigma * config.gauss_sigma);
  for (std::size_t k = 0; k < n; ++k) {
    const double mu = config.gauss_min + static_cast<double>(k) * config.gauss_step;
    const double delta = distance - mu;
    out[k] = std::exp(-delta * delta * inv_var);
  }
  return out;
}

CrystalGraph build_graph(const CrystalStructure& structure, const GraphConfig& config) {
  if (structure.sites.size() > kMaxSites) {
    throw Error(Errc::TooManySites, structure.id + " exceeds " + std::to_string(kMaxSites) + " sites");
  }
  CrystalGraph g;
  g.id = structure.id;
  g.num_atom_features = kNumElements;
  for (const auto& site : structure.sites) {
    const auto z = atomic_number(site.element);
    if (!z) throw Error(Errc::UnknownElement, "'" + site.element + "'");
    g.atomic_numbers.push_back(*z);
  }
  g.node_features.assign(g.num_nodes() * g.num_atom_features, 0.0f);
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    g.node_features[i * g.num_atom_features + static_cast<std::size_t>(g.atomic_numbers[i] - 1)] = 1.0f;
  }
  g.edges = periodic_neighbors(structure, config);
  g.num_edge_features = config.num_gaussians();
  g.edge_features.reserve(g.edges.size() * g.num_edge_features);
  for (const auto& e : g.edges) {
    for (double v : gaussian_expand(e.distance, config)) g.edge_features.push_back(static_cast<float>(v));
  }
  return g;
}

void write_graph_cache(std::ostream& out, std::span<const CrystalGraph> graphs) {
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kCacheVersion);
  put_u32(out, static_cast<std::uint32_t>(graphs.size()));
  for (const auto& g : graphs) {
    put_u32(out, static_cast<std::uint32_t>(g.id.size()));
    out.write(g.id.data(), static_cast<std::streamsize>(g.id.size()));
    put_u32(out, static_cast<std::uint32_t>(g.num_nodes()));
    put_u32(out, static_cast<std::uint32_t>(g.num_atom_features));
    for (int z : g.atomic_numbers) put_u32(out, static_cast<std::uint32_t>(z));
    put_u32(out, static_cast<std::uint32_t>(g.edges.size()));
    put_u32(out, static_cast<std::uint32_t>(g.num_edge_features));
    for (const auto& e : g.edges) {
      put_u32(out, e.src);
      put_u32(out, e.dst);
      for (int n : e.image) put_i32(out, n);
      put_f32(out, static_cast<float>(e.distance));
    }
    for (float v : g.edge_features) put_f32(out, v);
  }
}

std::vector<CrystalGraph> read_graph_cache(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw Error(Errc::Io, "not a graph cache");
  if (const auto v = get_u32(in); v != kCacheVersion) {
    throw Error(Errc::Io, "unsupported graph cache version " + std::to_string(v));
  }
  const std::uint32_t count = get_u32(in);
  std::vector<CrystalGraph> graphs(count);
  for (auto& g : graphs) {
    g.id.resize(get_u32(in));
    if (!in.read(g.id.data(), static_cast<std::streamsize>(g.id.size()))) throw Error(Errc::Io, "truncated id");
    const std::uint32_t n_nodes = get_u32(in);
    g.num_atom_features = get_u32(in);
    g.atomic_numbers.resize(n_nodes);
    g.node_features.assign(static_cast<std::size_t>(n_nodes) * g.num_atom_features, 0.0f);
    for (std::uint32_t i = 0; i < n_nodes; ++i) {
      const auto z = static_cast<int>(get_u32(in));
      if (z < 1 || static_cast<std::size_t>(z) > g.num_atom_features) throw Error(Errc::Io, "bad atomic number");
      g.atomic_numbers[i] = z;
      g.node_features[i * g.num_atom_features + static_cast<std::size_t>(z - 1)] = 1.0f;
    }
    g.edges.resize(get_u32(in));
    g.num_edge_features = get_u32(in);
    for (auto& e : g.edges) {
      e.src = get_u32(in);
      e.dst = get_u32(in);
      for (int& n : e.image) n = get_i32(in);
      e.distance = get_f32(in);
    }
    g.edge_features.resize(g.edges.size() * g.num_edge_features);
    for (float& v : g.edge_features) v = get_f32(in);
  }
  return graphs;
}

void write_graph_cache(const std::filesystem::path& path, std::span<const CrystalGraph> graphs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  write_graph_cache(out, graphs);
}

std::vector<CrystalGraph> read_graph_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  return read_graph_cache(in);
}

}  // namespace crystalign
