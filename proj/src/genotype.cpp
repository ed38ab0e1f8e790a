#include "cellsearch/genotype.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "cellsearch/error.hpp"
#include "cellsearch/io.hpp"

namespace cellsearch {

using nlohmann::json;

Genotype Genotype::uniform(OperatorKind op) {
  Genotype g;
  for (CellSpec* cell : {&g.normal, &g.reduce})
    for (auto& node : *cell) node = {Branch{0, std::string(operator_name(op))}, Branch{1, std::string(operator_name(op))}};
  return g;
}

Genotype derive(const Alphas& alphas) {
  alphas.validate();
  const auto n_ops = static_cast<std::int64_t>(alphas.mask.size());
  Genotype g;
  for (CellKind kind : {CellKind::normal, CellKind::reduce}) {
    const Tensor<double>& m = alphas.of(kind);
    for (int node = 0; node < kNumNodes; ++node) {
      struct Candidate {
        int source;
        double strength;
        std::size_t op;
      };
      std::vector<Candidate> cands;
      for (int src = 0; src < node + 2; ++src) {
        const int e = EdgeId::edge_index(node, src);
        const auto row = std::span<const double>(m.vec()).subspan(static_cast<std::size_t>(e * n_ops),
                                                                   static_cast<std::size_t>(n_ops));
        const std::vector<double> c = softmax_coefficients(row);
        std::size_t best = 0;
        for (std::size_t o = 1; o < c.size(); ++o)
          if (c[o] > c[best]) best = o;
        cands.push_back({src, c[best], best});
      }
      if (cands.size() < 2) throw InternalError("node has fewer than two candidate sources");
      std::stable_sort(cands.begin(), cands.end(),
                       [](const Candidate& a, const Candidate& b) { return a.strength > b.strength; });
      std::array<Candidate, 2> kept{cands[0], cands[1]};
      if (kept[1].source < kept[0].source) std::swap(kept[0], kept[1]);
      auto& spec = g.of(kind)[static_cast<std::size_t>(node)];
      for (std::size_t b = 0; b < 2; ++b)
        spec[b] = Branch{kept[b].source, std::string(operator_name(alphas.mask.at(kept[b].op)))};
    }
  }
  return g;
}

std::vector<std::string> validate(const Genotype& genotype) {
  std::vector<std::string> errors;
  if (genotype.format_version != Genotype::kFormatVersion)
    errors.push_back("unsupported format_version " + std::to_string(genotype.format_version));
  for (CellKind kind : {CellKind::normal, CellKind::reduce}) {
    const std::string cell(cell_kind_name(kind));
    for (int node = 0; node < kNumNodes; ++node) {
      const auto& branches = genotype.of(kind)[static_cast<std::size_t>(node)];
      for (std::size_t b = 0; b < branches.size(); ++b) {
        const std::string where = cell + " node " + std::to_string(node) + " branch " + std::to_string(b) + ": ";
        const int src = branches[b].source;
        if (src < 0)
          errors.push_back(where + "source " + std::to_string(src) + " is out of range");
        else if (src >= node + 2)
          errors.push_back(where + "source must precede node (got " + std::to_string(src) + ", allowed 0.." +
                           std::to_string(node + 1) + ")");
        if (!parse_operator(branches[b].op)) errors.push_back(where + "unknown operator '" + branches[b].op + "'");
      }
      if (branches[0].source == branches[1].source)
        errors.push_back(cell + " node " + std::to_string(node) + ": branch sources must be distinct");
    }
  }
  if (genotype.concat != std::vector<int>{2, 3, 4, 5}) errors.push_back("concat must be [2, 3, 4, 5]");
  return errors;
}

void require_valid(const Genotype& genotype) {
  const auto errors = validate(genotype);
  if (errors.empty()) return;
  std::string msg = "invalid genotype: " + errors.front();
  for (std::size_t i = 1; i < errors.size(); ++i) msg += "; " + errors[i];
  throw ArgumentError(msg);
}

std::string serialize(const Genotype& genotype) {
  std::ostringstream os;
  os << "{\n  \"format_version\": " << genotype.format_version << ",\n";
  for (CellKind kind : {CellKind::normal, CellKind::reduce}) {
    os << "  \"" << cell_kind_name(kind) << "\": [\n";
    const CellSpec& cell = genotype.of(kind);
    for (std::size_t node = 0; node < cell.size(); ++node) {
      os << "    [";
      for (std::size_t b = 0; b < 2; ++b)
        os << (b ? ", " : "") << '[' << cell[node][b].source << ", " << json(cell[node][b].op).dump() << ']';
      os << ']' << (node + 1 < cell.size() ? "," : "") << '\n';
    }
    os << "  ],\n";
  }
  os << "  \"concat\": [";
  for (std::size_t i = 0; i < genotype.concat.size(); ++i) os << (i ? ", " : "") << genotype.concat[i];
  os << "]\n}\n";
  return os.str();
}

namespace {

json parse_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string(what) + ": " + e.what());
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw ParseError(std::string(what) + ": top level must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return key == k; }))
      throw ParseError(std::string(what) + ": unknown key '" + key + "'");
  }
  for (const char* k : allowed)
    if (!j.contains(k)) throw ParseError(std::string(what) + ": missing key '" + k + "'");
}

CellSpec parse_cell(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != kNumNodes)
    throw ParseError("genotype: " + field + " must be a list of " + std::to_string(kNumNodes) + " nodes");
  CellSpec cell;
  for (std::size_t node = 0; node < kNumNodes; ++node) {
    const std::string nf = field + "[" + std::to_string(node) + "]";
    const json& jn = j[node];
    if (!jn.is_array() || jn.size() != 2) throw ParseError("genotype: " + nf + " must hold exactly 2 branches");
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string bf = nf + "[" + std::to_string(b) + "]";
      const json& jb = jn[b];
      if (!jb.is_array() || jb.size() != 2) throw ParseError("genotype: " + bf + " must be a [source, operator] pair");
      if (!jb[0].is_number_integer()) throw ParseError("genotype: " + bf + "[0] (source) must be an integer");
      if (!jb[1].is_string()) throw ParseError("genotype: " + bf + "[1] (operator) must be a string");
      cell[node][b] = Branch{jb[0].get<int>(), jb[1].get<std::string>()};
    }
  }
  return cell;
}

std::vector<std::vector<double>> matrix_rows(const Tensor<double>& m) {
  std::vector<std::vector<double>> rows;
  const auto cols = static_cast<std::size_t>(m.dim(1));
  for (std::int64_t r = 0; r < m.dim(0); ++r) {
    const auto begin = m.vec().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r) * cols);
    rows.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(cols));
  }
  return rows;
}

Tensor<double> parse_matrix(const json& j, std::size_t cols, const char* field) {
  if (!j.is_array() || j.size() != kNumEdges)
    throw ParseError(std::string("alphas: ") + field + " must have " + std::to_string(kNumEdges) + " rows");
  std::vector<double> data;
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols)
      throw ParseError(std::string("alphas: ") + field + "[" + std::to_string(r) + "] must have " + std::to_string(cols) +
                       " entries");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number())
        throw ParseError(std::string("alphas: ") + field + "[" + std::to_string(r) + "][" + std::to_string(c) +
                         "] must be a number");
      data.push_back(j[r][c].get<double>());
    }
  }
  return Tensor<double>(Shape{kNumEdges, static_cast<std::int64_t>(cols)}, std::move(data));
}

}  // namespace

Genotype parse_genotype(const std::string& text) {
  const json j = parse_json(text, "genotype");
  check_keys(j, {"format_version", "normal", "reduce", "concat"}, "genotype");
  Genotype g;
  if (!j["format_version"].is_number_integer()) throw ParseError("genotype: format_version must be an integer");
  g.format_version = j["format_version"].get<int>();
  g.normal = parse_cell(j["normal"], "normal");
  g.reduce = parse_cell(j["reduce"], "reduce");
  const json& jc = j["concat"];
  if (!jc.is_array()) throw ParseError("genotype: concat must be a list of integers");
  g.concat.clear();
  for (const auto& v : jc) {
    if (!v.is_number_integer()) throw ParseError("genotype: concat must be a list of integers");
    g.concat.push_back(v.get<int>());
  }
  return g;
}

Genotype load_genotype(const std::filesystem::path& path) {
  Genotype g;
  try {
    g = parse_genotype(read_text_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  const auto errors = validate(g);
  if (!errors.empty()) throw ParseError(path.string() + ": " + errors.front());
  return g;
}

void save_genotype(const std::filesystem::path& path, const Genotype& genotype) {
  write_text_file_atomic(path, serialize(genotype));
}

std::string serialize(const Alphas& alphas) {
  alphas.validate();
  std::ostringstream os;
  os << "{\n";
  for (CellKind kind : {CellKind::normal, CellKind::reduce}) {
    os << "  \"" << cell_kind_name(kind) << "\": [\n";
    const auto rows = matrix_rows(alphas.of(kind));
    for (std::size_t r = 0; r < rows.size(); ++r) os << "    " << json(rows[r]).dump() << (r + 1 < rows.size() ? "," : "") << '\n';
    os << "  ],\n";
  }
  os << "  \"mask\": " << json(alphas.mask.names()).dump() << ",\n";
  os << "  \"seed\": " << alphas.seed << "\n}\n";
  return os.str();
}

Alphas parse_alphas(const std::string& text) {
  const json j = parse_json(text, "alphas");
  check_keys(j, {"normal", "reduce", "mask", "seed"}, "alphas");
  if (!j["mask"].is_array()) throw ParseError("alphas: mask must be a list of operator names");
  std::vector<OperatorKind> ops;
  for (const auto& name : j["mask"]) {
    if (!name.is_string()) throw ParseError("alphas: mask entries must be strings");
    auto kind = parse_operator(name.get<std::string>());
    if (!kind) throw ParseError("alphas: unknown operator '" + name.get<std::string>() + "' in mask");
    ops.push_back(*kind);
  }
  Alphas a;
  try {
    a.mask = OperatorMask(ops);
  } catch (const ArgumentError& e) {
    throw ParseError(std::string("alphas: mask: ") + e.what());
  }
  if (!std::is_sorted(ops.begin(), ops.end())) throw ParseError("alphas: mask must list operators in canonical order");
  a.normal = parse_matrix(j["normal"], a.mask.size(), "normal");
  a.reduce = parse_matrix(j["reduce"], a.mask.size(), "reduce");
  if (!j["seed"].is_number_unsigned()) throw ParseError("alphas: seed must be a non-negative integer");
  a.seed = j["seed"].get<std::uint64_t>();
  return a;
}

Alphas load_alphas(const std::filesystem::path& path) {
  try {
    return parse_alphas(read_text_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_alphas(const std::filesystem::path& path, const Alphas& alphas) {
  write_text_file_atomic(path, serialize(alphas));
}

std::string export_dot(const Genotype& genotype, CellKind kind) {
  require_valid(genotype);
  const std::string k(cell_kind_name(kind));
  auto state = [&](int source) {
    if (source == 0) return k + "_c_k_1";
    if (source == 1) return k + "_c_k_2";
    return k + "_sum_" + std::to_string(source - 2);
  };
  std::ostringstream os;
  os << "digraph " << k << " {\n";
  os << "  rankdir=LR;\n";
  os << "  label=\"" << k << " cell\";\n";
  os << "  " << state(1) << " [label=\"c_{k-2}\", shape=box];\n";
  os << "  " << state(0) << " [label=\"c_{k-1}\", shape=box];\n";
  for (int node = 0; node < kNumNodes; ++node)
    os << "  " << state(node + 2) << " [label=\"sum_" << node << "\", shape=circle];\n";
  os << "  " << k << "_out [label=\"out\", shape=box];\n";
  const CellSpec& cell = genotype.of(kind);
  for (int node = 0; node < kNumNodes; ++node)
    for (const Branch& b : cell[static_cast<std::size_t>(node)])
      os << "  " << state(b.source) << " -> " << state(node + 2) << " [label=\"" << b.op << "\"];\n";
  for (int node = 0; node < kNumNodes; ++node) os << "  " << state(node + 2) << " -> " << k << "_out;\n";
  os << "}\n";
  return os.str();
}

std::string export_dot(const Genotype& genotype) {
  return export_dot(genotype, CellKind::normal) + export_dot(genotype, CellKind::reduce);
}

Genotype ablate_replace_atrous(const Genotype& genotype) {
  Genotype out = genotype;
  for (CellKind kind : {CellKind::normal, CellKind::reduce})
    for (auto& node : out.of(kind))
      for (Branch& b : node) {
        if (b.op == operator_name(OperatorKind::atrous_conv_3)) b.op = operator_name(OperatorKind::sep_conv_3);
        if (b.op == operator_name(OperatorKind::atrous_conv_5)) b.op = operator_name(OperatorKind::sep_conv_5);
      }
  return out;
}

}  // namespace cellsearch
