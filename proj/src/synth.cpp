#include <cstdio>
#include <fstream>
#include <map>

#include <spdlog/spdlog.h>

#include "crystalign/cif.hpp"
#include "crystalign/corpus.hpp"
#include "crystalign/error.hpp"
#include "crystalign/graph.hpp"
#include "crystalign/random.hpp"

namespace crystalign {
namespace {

constexpr char kFamilyTag[4] = {'a', 'b', 'c', 'd'};

struct Site {
  std::string element;
  double x, y, z;
};

struct Cell {
  double a, b, c, alpha = 90, beta = 90, gamma = 90;
  std::vector<std::string> ops;  // empty = P1
  std::vector<Site> sites;
};

template <class T>
const T& pick(Rng& rng, const std::vector<T>& pool) {
  return pool[rng.below(pool.size())];
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string render_cif(const std::string& id, const Cell& cell) {
  std::string s = "data_" + id + "\n";
  s += "_cell_length_a " + fmt(cell.a) + "\n";
  s += "_cell_length_b " + fmt(cell.b) + "\n";
  s += "_cell_length_c " + fmt(cell.c) + "\n";
  s += "_cell_angle_alpha " + fmt(cell.alpha) + "\n";
  s += "_cell_angle_beta " + fmt(cell.beta) + "\n";
  s += "_cell_angle_gamma " + fmt(cell.gamma) + "\n";
  s += "loop_\n_symmetry_equiv_pos_as_xyz\n";
  if (cell.ops.empty()) {
    s += "'x, y, z'\n";
  } else {
    for (const auto& op : cell.ops) s += "'" + op + "'\n";
  }
  s += "loop_\n_atom_site_label\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\n";
  std::map<std::string, int> counts;
  for (const auto& site : cell.sites) {
    const int n = ++counts[site.element];
    s += site.element + std::to_string(n) + " " + site.element + " " + fmt(site.x) + " " + fmt(site.y) + " " +
         fmt(site.z) + "\n";
  }
  return s;
}

Cell family_a(Rng& rng, std::string& formula) {
  static const std::vector<std::string> metals = {"Nb", "V", "Ta", "Mo", "Al", "In", "Re", "Tc", "Hg", "Zr"};
  const std::string el = pick(rng, metals);
  formula = el;
  Cell cell;
  cell.a = cell.b = cell.c = rng.uniform(2.3, 3.2);
  cell.sites.push_back({el, 0.0, 0.0, 0.0});
  return cell;
}

Cell family_b(Rng& rng, std::string& formula) {
  static const std::vector<std::string> cations = {"Pb", "Sn", "Ge", "Ca", "Sr", "Ba", "Mg"};
  static const std::vector<std::string> anions = {"Te", "Se", "S"};
  const std::string cat = pick(rng, cations);
  const std::string an = pick(rng, anions);
  formula = cat + an;
  Cell cell;
  cell.a = cell.b = cell.c = rng.uniform(5.2, 6.6);
  cell.ops = {"x, y, z", "x, y+1/2, z+1/2", "x+1/2, y, z+1/2", "x+1/2, y+1/2, z"};
  cell.sites.push_back({cat, 0.0, 0.0, 0.0});
  cell.sites.push_back({an, 0.5, 0.5, 0.5});
  return cell;
}

Cell family_c(Rng& rng, std::string& formula) {
  static const std::vector<std::string> nodes = {"Zn", "Cu", "Co", "Zr", "Cd"};
  static const std::vector<std::string> linkers = {"C", "O", "N", "H"};
  const std::string metal = pick(rng, nodes);
  formula = metal + "-BDC";
  Cell cell;
  cell.a = rng.uniform(12.0, 16.0);
  cell.b = rng.uniform(12.0, 16.0);
  cell.c = rng.uniform(12.0, 16.0);
  // one compact node: metal at the center, linker atoms within ~3 A
  const double cx = 0.5, cy = 0.5, cz = 0.5;
  cell.sites.push_back({metal, cx, cy, cz});
  const std::size_t n_link = 5 + rng.below(5);
  for (std::size_t i = 0; i < n_link; ++i) {
    const double r = rng.uniform(1.2, 3.0);
    double dx = rng.normal(), dy = rng.normal(), dz = rng.normal();
    const double norm = std::sqrt(dx * dx + dy * dy + dz * dz) + 1e-12;
    dx *= r / norm;
    dy *= r / norm;
    dz *= r / norm;
    cell.sites.push_back({pick(rng, linkers), cx + dx / cell.a, cy + dy / cell.b, cz + dz / cell.c});
  }
  return cell;
}

Cell family_d(Rng& rng, std::string& formula) {
  static const std::vector<std::string> a_sites = {"Bi", "Sr", "Ba", "La", "K"};
  static const std::vector<std::string> b_sites = {"Ti", "Nb", "Ta", "W"};
  const std::string a = pick(rng, a_sites);
  const std::string b = pick(rng, b_sites);
  formula = a + b + "O3";
  Cell cell;
  cell.a = cell.b = rng.uniform(3.6, 4.2);
  cell.c = rng.uniform(18.0, 26.0);
  const double z0 = 0.5;
  const double dz = 2.0 / cell.c;
  cell.sites.push_back({a, 0.0, 0.0, z0});
  cell.sites.push_back({b, 0.5, 0.5, z0 + dz});
  cell.sites.push_back({"O", 0.5, 0.0, z0 + dz});
  cell.sites.push_back({"O", 0.0, 0.5, z0 + dz});
  cell.sites.push_back({"O", 0.5, 0.5, z0 + 2 * dz});
  return cell;
}

struct Vocab {
  std::vector<std::string> phrases;  // each contains the family keyword
  std::vector<std::string> extras;   // family-flavored words for abstracts and keywords
};

const Vocab& family_vocab(int f) {
  static const Vocab v[4] = {
      {{"superconductor", "superconductor with enhanced superconductivity", "conventional superconductor",
        "superconductor under pressure", "superconductor with a superconducting gap"},
       {"Critical Temperature", "Cooper Pairing", "Meissner Effect", "Electron-Phonon Coupling"}},
      {{"thermoelectric", "thermoelectric performance", "thermoelectric properties", "thermoelectric for thermoelectrics",
        "thermoelectric figure of merit"},
       {"Seebeck Coefficient", "Lattice Thermal Conductivity", "Waste Heat Recovery", "Power Factor"}},
      {{"metal-organic framework", "porous metal-organic framework", "metal-organic framework for gas storage",
        "microporous metal-organic framework", "metal-organic framework linkers"},
       {"Gas Adsorption", "Porosity", "Coordination Polymer", "Carbon Capture"}},
      {{"ferroelectric", "layered ferroelectric", "ferroelectric polarization", "ferroelectric ordering",
        "ferroelectric domains"},
       {"Spontaneous Polarization", "Piezoelectric Response", "Curie Temperature", "Domain Switching"}},
  };
  return v[f];
}

const std::vector<std::string>& distractors() {
  static const std::vector<std::string> d = {
      "synthesis and characterization", "a first-principles study", "grown as single crystals", "in thin films",
      "at low temperature",             "with improved stability",  "from solution growth",     "revisited",
      "and its electronic structure",   "by solid-state reaction"};
  return d;
}

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

std::string make_title(Rng& rng, int f, const std::string& formula) {
  const std::string phrase = pick(rng, family_vocab(f).phrases);
  const std::string extra = pick(rng, distractors());
  switch (rng.below(3)) {
    case 0: return capitalize(phrase) + " " + formula + " " + extra;
    case 1: return formula + " as a " + phrase + " " + extra;
    default: return capitalize(extra) + ": " + phrase + " " + formula;
  }
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << text;
}

}  // namespace

int synth_family(std::string_view id) {
  if (id.size() < 8 || id.substr(0, 6) != "synth-") return -1;
  for (int f = 0; f < 4; ++f) {
    if (id[6] == kFamilyTag[f] && id[7] == '-') return f;
  }
  return -1;
}

SynthOutput synth_toy_corpus(std::uint64_t seed, std::size_t n_per_class, const std::filesystem::path& out_dir) {
  if (n_per_class == 0) throw Error(Errc::InvalidConfig, "n_per_class must be positive");
  std::filesystem::create_directories(out_dir / "cif");
  SynthOutput out;
  nlohmann::json abstracts = nlohmann::json::object();
  nlohmann::json keywords = nlohmann::json::object();
  const GraphConfig graph_cfg;

  for (int f = 0; f < 4; ++f) {
    Rng rng(derive_seed(seed, 100 + static_cast<std::uint64_t>(f)));
    for (std::size_t i = 0; i < n_per_class; ++i) {
      char idbuf[32];
      std::snprintf(idbuf, sizeof idbuf, "synth-%c-%04zu", kFamilyTag[f], i);
      const std::string id = idbuf;
      std::string formula;
      std::string cif;
      for (int attempt = 0;; ++attempt) {
        Cell cell = f == 0 ? family_a(rng, formula)
                  : f == 1 ? family_b(rng, formula)
                  : f == 2 ? family_c(rng, formula)
                           : family_d(rng, formula);
        cif = render_cif(id, cell);
        try {
          (void)build_graph(structure_from_cif(cif, id), graph_cfg);
          break;
        } catch (const Error& e) {
          if (attempt >= 20) throw;
        }
      }
      write_file(out_dir / "cif" / (id + ".cif"), cif);

      CorpusRecord rec;
      rec.id = id;
      rec.cif_path = "cif/" + id + ".cif";
      rec.title = make_title(rng, f, formula);
      rec.doi = "10.0000/synth." + id;
      const Vocab& vocab = family_vocab(f);
      const std::string extra1 = pick(rng, vocab.extras);
      const std::string extra2 = pick(rng, vocab.extras);
      abstracts[*rec.doi] = "We study " + formula + " as a " + std::string(kSynthFamilyKeywords[f]) +
                            ". Measurements of " + extra1 + " and " + extra2 + " are reported " +
                            pick(rng, distractors()) + ".";
      std::vector<std::string> kws = {capitalize(std::string(kSynthFamilyKeywords[f])), extra1};
      if (extra2 != extra1) kws.push_back(extra2);
      if (rng.below(4) == 0) kws.push_back("Crystal Structure");
      keywords[id] = kws;
      out.records.push_back(std::move(rec));
    }
  }

  split_records(out.records, {8, 1, 1}, derive_seed(seed, 7));

  std::string manifest = "id,cif_path,title,doi\n";
  for (const auto& r : out.records) {
    manifest += csv_field(r.id) + "," + csv_field(r.cif_path) + "," + csv_field(r.title) + "," + csv_field(*r.doi) + "\n";
  }
  out.manifest = out_dir / "manifest.csv";
  out.corpus = out_dir / "corpus.jsonl";
  out.abstracts_fixture = out_dir / "abstracts.json";
  out.keywords_fixture = out_dir / "keywords.json";
  write_file(out.manifest, manifest);
  write_corpus(out.corpus, out.records);
  write_file(out.abstracts_fixture, abstracts.dump(2) + "\n");
  write_file(out.keywords_fixture, keywords.dump(2) + "\n");
  spdlog::info("synth: {} records in {}", out.records.size(), out_dir.string());
  return out;
}

}  // namespace crystalign
