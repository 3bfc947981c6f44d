#include "crystalign/cif.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>

#include "crystalign/elements.hpp"
#include "crystalign/error.hpp"

namespace crystalign {
namespace {

double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }

double volume_factor(const LatticeParams& l) {
  const double ca = std::cos(deg2rad(l.alpha));
  const double cb = std::cos(deg2rad(l.beta));
  const double cg = std::cos(deg2rad(l.gamma));
  return 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
}

int gcd_int(int a, int b) {
  a = std::abs(a);
  b = std::abs(b);
  while (b != 0) {
    const int t = a % b;
    a = b;
    b = t;
  }
  return a;
}

int det3(const std::array<std::array<int, 3>, 3>& r) {
  return r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
         r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
         r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
}

// ---------------------------------------------------------------------------
// CIF tokenizer

struct Token {
  std::string text;
  bool quoted = false;
};

std::vector<Token> tokenize_cif(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t pos = 0;
  bool line_start = true;
  while (pos < text.size()) {
    const char ch = text[pos];
    if (ch == '\n') {
      line_start = true;
      ++pos;
      continue;
    }
    if (ch == ';' && line_start) {
      // semicolon text field: runs until a line starting with ';'
      std::size_t end = pos + 1;
      std::string body;
      while (true) {
        const std::size_t nl = text.find('\n', end);
        if (nl == std::string_view::npos) {
          body += text.substr(end);
          end = text.size();
          break;
        }
        body += text.substr(end, nl - end + 1);
        end = nl + 1;
        if (end < text.size() && text[end] == ';') {
          ++end;
          break;
        }
      }
      while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) body.pop_back();
      tokens.push_back({body, true});
      pos = end;
      line_start = false;
      continue;
    }
    line_start = false;
    if (std::isspace(static_cast<unsigned char>(ch))) {
      ++pos;
      continue;
    }
    if (ch == '#') {
      const std::size_t nl = text.find('\n', pos);
      pos = nl == std::string_view::npos ? text.size() : nl;
      continue;
    }
    if (ch == '\'' || ch == '"') {
      // a quote closes only when followed by whitespace or end of input
      std::size_t end = pos + 1;
      while (end < text.size()) {
        if (text[end] == ch &&
            (end + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[end + 1])))) {
          break;
        }
        if (text[end] == '\n') break;
        ++end;
      }
      tokens.push_back({std::string(text.substr(pos + 1, end - pos - 1)), true});
      pos = end < text.size() && text[end] == ch ? end + 1 : end;
      continue;
    }
    std::size_t end = pos;
    while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) ++end;
    tokens.push_back({std::string(text.substr(pos, end - pos)), false});
    pos = end;
  }
  return tokens;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_tag(const Token& t) { return !t.quoted && !t.text.empty() && t.text[0] == '_'; }
bool is_loop(const Token& t) { return !t.quoted && lower(t.text) == "loop_"; }
bool is_data(const Token& t) { return !t.quoted && lower(t.text).rfind("data_", 0) == 0; }
bool is_reserved(const Token& t) {
  if (t.quoted) return false;
  const std::string l = lower(t.text);
  return l == "loop_" || l.rfind("data_", 0) == 0 || l.rfind("save_", 0) == 0 || l == "global_" ||
         l == "stop_";
}

struct CifBlock {
  std::string name;
  std::map<std::string, std::string> items;
  std::vector<std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>> loops;
};

CifBlock read_first_block(std::string_view text) {
  const std::vector<Token> tokens = tokenize_cif(text);
  CifBlock block;
  std::size_t i = 0;
  while (i < tokens.size() && !is_data(tokens[i])) ++i;
  if (i < tokens.size()) {
    block.name = tokens[i].text.substr(5);
    ++i;
  }
  while (i < tokens.size()) {
    const Token& t = tokens[i];
    if (is_data(t)) break;
    if (is_loop(t)) {
      ++i;
      std::vector<std::string> headers;
      while (i < tokens.size() && is_tag(tokens[i])) headers.push_back(lower(tokens[i++].text));
      std::vector<std::string> values;
      while (i < tokens.size() && !is_tag(tokens[i]) && !is_reserved(tokens[i])) {
        values.push_back(tokens[i++].text);
      }
      if (headers.empty()) throw Error(Errc::MalformedLoop, "loop_ without column headers");
      if (values.size() % headers.size() != 0) {
        throw Error(Errc::MalformedLoop, "loop starting with " + headers.front() + " has " +
                                             std::to_string(values.size()) + " values for " +
                                             std::to_string(headers.size()) + " columns");
      }
      std::vector<std::vector<std::string>> rows;
      for (std::size_t r = 0; r < values.size(); r += headers.size()) {
        rows.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(r),
                          values.begin() + static_cast<std::ptrdiff_t>(r + headers.size()));
      }
      block.loops.emplace_back(std::move(headers), std::move(rows));
      continue;
    }
    if (is_tag(t)) {
      const std::string tag = lower(t.text);
      ++i;
      if (i < tokens.size() && !is_tag(tokens[i]) && !is_reserved(tokens[i])) {
        block.items[tag] = tokens[i++].text;
      } else {
        block.items[tag] = "?";
      }
      continue;
    }
    ++i;  // stray value
  }
  return block;
}

/// Numeric CIF value with any "(esd)" suffix removed; nullopt for '?' / '.'.
std::optional<double> cif_number(const std::string& raw) {
  std::string s = raw;
  if (const auto paren = s.find('('); paren != std::string::npos) s.erase(paren);
  if (s.empty() || s == "?" || s == ".") return std::nullopt;
  double value = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last) return std::nullopt;
  return value;
}

std::string element_from_label(const std::string& raw) {
  std::string out;
  for (char c : raw) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      if (out.empty()) {
        out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      } else if (out.size() == 1 && std::islower(static_cast<unsigned char>(c))) {
        out += c;
      } else {
        break;
      }
    } else {
      break;
    }
  }
  // "Ca" vs "C" + label suffix: fall back to the one-letter symbol if two letters are unknown
  if (out.size() == 2 && !atomic_number(out) && atomic_number(out.substr(0, 1))) out.resize(1);
  return out;
}

bool sites_coincide(const Vec3& a, const Vec3& b) {
  for (int k = 0; k < 3; ++k) {
    double d = std::fabs(a[k] - b[k]);
    d = std::min(d, 1.0 - d);
    if (d >= kSiteTolerance) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Lattice

void LatticeParams::validate() const {
  for (double len : {a, b, c}) {
    if (!(len > 0.0) || !std::isfinite(len)) {
      throw Error(Errc::InvalidLattice, "cell lengths must be positive");
    }
  }
  for (double ang : {alpha, beta, gamma}) {
    if (!(ang > 0.0 && ang < 180.0)) throw Error(Errc::InvalidLattice, "cell angles must lie in (0,180)");
  }
  // flat cells land a few ulp either side of zero
  if (!(volume_factor(*this) > 1e-12)) throw Error(Errc::InvalidLattice, "cell angles give zero volume");
}

Mat3 cell_matrix(const LatticeParams& l) {
  l.validate();
  const double ca = std::cos(deg2rad(l.alpha));
  const double cb = std::cos(deg2rad(l.beta));
  const double cg = std::cos(deg2rad(l.gamma));
  const double sg = std::sin(deg2rad(l.gamma));
  const double cy = (ca - cb * cg) / sg;
  const double cz = std::sqrt(std::max(0.0, 1.0 - cb * cb - cy * cy));
  return {{{l.a, 0.0, 0.0}, {l.b * cg, l.b * sg, 0.0}, {l.c * cb, l.c * cy, l.c * cz}}};
}

double cell_volume(const LatticeParams& l) {
  l.validate();
  return l.a * l.b * l.c * std::sqrt(volume_factor(l));
}

Vec3 frac_to_cart(const Mat3& m, const Vec3& f) {
  Vec3 out{};
  for (int k = 0; k < 3; ++k) out[k] = f[0] * m[0][k] + f[1] * m[1][k] + f[2] * m[2][k];
  return out;
}

Vec3 frac_to_cart(const LatticeParams& lattice, const Vec3& frac) {
  return frac_to_cart(cell_matrix(lattice), frac);
}

double wrap_unit(double x) noexcept {
  double w = x - std::floor(x);
  if (w >= 1.0) w = 0.0;
  return w;
}

// ---------------------------------------------------------------------------
// Symmetry operators

Vec3 SymmetryOp::translation() const noexcept {
  return {translation_twelfths[0] / 12.0, translation_twelfths[1] / 12.0,
          translation_twelfths[2] / 12.0};
}

Vec3 SymmetryOp::apply(const Vec3& f) const noexcept {
  Vec3 out{};
  for (int r = 0; r < 3; ++r) {
    double v = translation_twelfths[r] / 12.0;
    for (int c = 0; c < 3; ++c) v += rotation[r][c] * f[c];
    out[r] = wrap_unit(v);
  }
  return out;
}

SymmetryOp parse_symmetry_op(std::string_view text) {
  SymmetryOp op;
  op.rotation = {};
  op.translation_twelfths = {0, 0, 0};
  std::size_t pos = 0;
  const auto skip_ws = [&] {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  };
  // Fractions accumulate as numerator/denominator in twelfths; decimals must be exact twelfths.
  const auto read_number = [&](std::size_t start) -> int {
    std::size_t end = pos;
    while (end < text.size() && (std::isdigit(static_cast<unsigned char>(text[end])) || text[end] == '.')) ++end;
    const std::string num(text.substr(pos, end - pos));
    pos = end;
    double value = 0.0;
    {
      const auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), value);
      if (ec != std::errc{} || p != num.data() + num.size()) throw ParseError(start, "bad number '" + num + "'");
    }
    if (pos < text.size() && text[pos] == '/') {
      ++pos;
      const std::size_t den_start = pos;
      while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
      if (den_start == pos) throw ParseError(den_start, "missing denominator");
      int den = 0;
      std::from_chars(text.data() + den_start, text.data() + pos, den);
      if (den == 0) throw ParseError(den_start, "zero denominator");
      value /= den;
    }
    const double twelfths = value * 12.0;
    const double rounded = std::round(twelfths);
    if (std::fabs(twelfths - rounded) > 1e-4) {
      throw ParseError(start, "translation " + num + " is not a multiple of 1/12");
    }
    return static_cast<int>(rounded);
  };

  for (int row = 0; row < 3; ++row) {
    skip_ws();
    bool any_term = false;
    while (true) {
      skip_ws();
      if (pos >= text.size() || text[pos] == ',') break;
      const std::size_t term_start = pos;
      int sign = 1;
      if (text[pos] == '+' || text[pos] == '-') {
        sign = text[pos] == '-' ? -1 : 1;
        ++pos;
        skip_ws();
      } else if (any_term) {
        throw ParseError(pos, std::string("expected sign before '") + text[pos] + "'");
      }
      if (pos >= text.size()) throw ParseError(pos, "dangling sign");
      const char ch = static_cast<char>(std::tolower(static_cast<unsigned char>(text[pos])));
      if (ch == 'x' || ch == 'y' || ch == 'z') {
        op.rotation[row][ch - 'x'] += sign;
        ++pos;
      } else if (std::isdigit(static_cast<unsigned char>(ch)) || ch == '.') {
        const int t = read_number(term_start);
        skip_ws();
        if (pos < text.size() && text[pos] == '*') ++pos, skip_ws();
        const char next =
            pos < text.size() ? static_cast<char>(std::tolower(static_cast<unsigned char>(text[pos]))) : '\0';
        if (next == 'x' || next == 'y' || next == 'z') {
          // coefficient form "1*x" / "1x" only for unit coefficients
          if (t != 12) throw ParseError(term_start, "non-unit rotation coefficient");
          op.rotation[row][next - 'x'] += sign;
          ++pos;
        } else {
          op.translation_twelfths[row] += sign * t;
        }
      } else {
        throw ParseError(pos, std::string("unexpected token '") + text[pos] + "'");
      }
      any_term = true;
    }
    if (!any_term) throw ParseError(pos, "empty component");
    for (int c = 0; c < 3; ++c) {
      if (std::abs(op.rotation[row][c]) > 1) throw ParseError(pos, "rotation entry outside {-1,0,1}");
    }
    op.translation_twelfths[row] = ((op.translation_twelfths[row] % 12) + 12) % 12;
    if (row < 2) {
      if (pos >= text.size()) throw ParseError(pos, "expected three comma-separated components");
      ++pos;  // comma
    }
  }
  skip_ws();
  if (pos != text.size()) throw ParseError(pos, "trailing characters");
  if (det3(op.rotation) == 0) throw ParseError(0, "singular rotation");
  return op;
}

std::string format_symmetry_op(const SymmetryOp& op) {
  std::string out;
  for (int row = 0; row < 3; ++row) {
    if (row > 0) out += ", ";
    std::string comp;
    for (int c = 0; c < 3; ++c) {
      const int v = op.rotation[row][c];
      if (v == 0) continue;
      if (v < 0) {
        comp += '-';
      } else if (!comp.empty()) {
        comp += '+';
      }
      comp += static_cast<char>('x' + c);
    }
    const int t = op.translation_twelfths[row];
    if (t != 0) {
      const int g = gcd_int(t, 12);
      if (!comp.empty()) comp += '+';
      comp += std::to_string(t / g) + "/" + std::to_string(12 / g);
      if (12 / g == 1) comp.resize(comp.size() - 2);
    }
    if (comp.empty()) comp = "0";
    out += comp;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CIF documents

CrystalStructure parse_cif(std::string_view text, std::string id) {
  const CifBlock block = read_first_block(text);
  CrystalStructure s;
  s.id = id.empty() ? block.name : std::move(id);

  const auto cell = [&](const std::string& tag) {
    const auto it = block.items.find(tag);
    if (it == block.items.end()) throw Error(Errc::MissingTag, tag);
    const auto v = cif_number(it->second);
    if (!v) throw Error(Errc::MissingTag, tag + " has no numeric value");
    return *v;
  };
  s.lattice = {cell("_cell_length_a"),   cell("_cell_length_b"),  cell("_cell_length_c"),
               cell("_cell_angle_alpha"), cell("_cell_angle_beta"), cell("_cell_angle_gamma")};
  s.lattice.validate();

  static const std::array<std::string, 2> kSymTags = {"_symmetry_equiv_pos_as_xyz",
                                                      "_space_group_symop_operation_xyz"};
  bool have_atoms = false;
  for (const auto& [headers, rows] : block.loops) {
    const auto col = [&](std::string_view name) -> std::optional<std::size_t> {
      const auto it = std::find(headers.begin(), headers.end(), name);
      if (it == headers.end()) return std::nullopt;
      return static_cast<std::size_t>(it - headers.begin());
    };
    for (const auto& tag : kSymTags) {
      if (const auto c = col(tag)) {
        for (const auto& row : rows) s.symmetry_ops.push_back(row[*c]);
      }
    }
    const auto fx = col("_atom_site_fract_x");
    const auto fy = col("_atom_site_fract_y");
    const auto fz = col("_atom_site_fract_z");
    if (!(fx && fy && fz)) continue;
    const auto type_col = col("_atom_site_type_symbol");
    const auto label_col = col("_atom_site_label");
    const auto occ_col = col("_atom_site_occupancy");
    if (!type_col && !label_col) throw Error(Errc::MissingTag, "_atom_site_type_symbol");
    have_atoms = true;
    for (const auto& row : rows) {
      AtomSite site;
      site.element = element_from_label(row[type_col ? *type_col : *label_col]);
      if (!atomic_number(site.element)) {
        throw Error(Errc::UnknownElement, "'" + row[type_col ? *type_col : *label_col] + "'");
      }
      const auto x = cif_number(row[*fx]);
      const auto y = cif_number(row[*fy]);
      const auto z = cif_number(row[*fz]);
      if (!x || !y || !z) throw Error(Errc::MalformedLoop, "non-numeric fractional coordinate");
      site.frac = {wrap_unit(*x), wrap_unit(*y), wrap_unit(*z)};
      if (occ_col) site.occupancy = cif_number(row[*occ_col]).value_or(1.0);
      s.sites.push_back(std::move(site));
    }
  }
  for (const auto& tag : kSymTags) {
    if (const auto it = block.items.find(tag); it != block.items.end() && it->second != "?") {
      s.symmetry_ops.push_back(it->second);
    }
  }
  if (!have_atoms) throw Error(Errc::MissingTag, "_atom_site_fract_x");
  return s;
}

CrystalStructure expand_symmetry(const CrystalStructure& structure, std::span<const SymmetryOp> ops,
                                 std::size_t max_sites) {
  CrystalStructure out;
  out.id = structure.id;
  out.lattice = structure.lattice;
  const auto add = [&](const AtomSite& site) -> bool {
    for (const auto& existing : out.sites) {
      if (sites_coincide(existing.frac, site.frac)) return false;
    }
    if (out.sites.size() >= max_sites) {
      throw Error(Errc::TooManySites, structure.id + " expands past " + std::to_string(max_sites) + " sites");
    }
    out.sites.push_back(site);
    return true;
  };
  for (const auto& site : structure.sites) {
    AtomSite wrapped = site;
    for (double& x : wrapped.frac) x = wrap_unit(x);
    add(wrapped);
  }
  // breadth-first closure: newly generated sites are fed through every operator
  for (std::size_t next = 0; next < out.sites.size(); ++next) {
    for (const auto& op : ops) {
      AtomSite image = out.sites[next];
      image.frac = op.apply(image.frac);
      add(image);
    }
  }
  std::sort(out.sites.begin(), out.sites.end(), [](const AtomSite& l, const AtomSite& r) {
    if (l.element != r.element) return l.element < r.element;
    return l.frac < r.frac;
  });
  return out;
}

CrystalStructure structure_from_cif(std::string_view text, std::string id, std::size_t max_sites) {
  CrystalStructure raw = parse_cif(text, std::move(id));
  std::vector<SymmetryOp> ops;
  ops.reserve(raw.symmetry_ops.size());
  for (const auto& s : raw.symmetry_ops) ops.push_back(parse_symmetry_op(s));
  if (ops.empty()) ops.push_back(SymmetryOp{});
  return expand_symmetry(raw, ops, max_sites);
}

CrystalStructure load_structure(const std::filesystem::path& path, std::size_t max_sites) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return structure_from_cif(buf.str(), path.stem().string(), max_sites);
}

nlohmann::json to_json(const CrystalStructure& s) {
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& site : s.sites) {
    sites.push_back({{"element", site.element}, {"frac", site.frac}});
  }
  return {{"id", s.id},
          {"lattice",
           {{"a", s.lattice.a},
            {"b", s.lattice.b},
            {"c", s.lattice.c},
            {"alpha", s.lattice.alpha},
            {"beta", s.lattice.beta},
            {"gamma", s.lattice.gamma}}},
          {"sites", std::move(sites)}};
}

std::string chemical_formula(const CrystalStructure& s) {
  std::map<std::string, int> counts;
  for (const auto& site : s.sites) ++counts[site.element];
  std::string out;
  const auto emit = [&](const std::string& el) {
    const auto it = counts.find(el);
    if (it == counts.end()) return;
    out += el;
    if (it->second != 1) out += std::to_string(it->second);
    counts.erase(it);
  };
  if (counts.count("C")) {
    emit("C");
    emit("H");
  }
  while (!counts.empty()) emit(counts.begin()->first);
  return out;
}

}  // namespace crystalign
