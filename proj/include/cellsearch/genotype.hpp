#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "cellsearch/search_space.hpp"

namespace cellsearch {

/// One input branch of a node: a source state and the operator applied to it.
struct Branch {
  int source = 0;
  std::string op;

  friend bool operator==(const Branch&, const Branch&) = default;
};

using NodeBranches = std::array<Branch, 2>;
using CellSpec = std::array<NodeBranches, kNumNodes>;

/// Discrete cell description for both cell kinds. Node outputs are combined
/// by addition; the cell output concatenates all four nodes.
struct Genotype {
  static constexpr int kFormatVersion = 1;

  int format_version = kFormatVersion;
  CellSpec normal;
  CellSpec reduce;
  std::vector<int> concat{2, 3, 4, 5};

  const CellSpec& of(CellKind kind) const { return kind == CellKind::normal ? normal : reduce; }
  CellSpec& of(CellKind kind) { return kind == CellKind::normal ? normal : reduce; }

  /// Genotype with every branch set to `op` and sources (0, 1).
  static Genotype uniform(OperatorKind op);

  friend bool operator==(const Genotype&, const Genotype&) = default;
};

/// Keep, per node, the two sources with the largest best-operator softmax
/// coefficient, each with its argmax operator. Ties go to the lower source
/// index and the lower canonical operator index. Branches are emitted in
/// ascending source order.
Genotype derive(const Alphas& alphas);

/// Human-readable problems; empty when the genotype is valid.
std::vector<std::string> validate(const Genotype& genotype);
void require_valid(const Genotype& genotype);

/// Byte-stable JSON text, newline terminated.
std::string serialize(const Genotype& genotype);
/// Structural parse; call validate() for semantic checks. Throws ParseError.
Genotype parse_genotype(const std::string& text);
Genotype load_genotype(const std::filesystem::path& path);
void save_genotype(const std::filesystem::path& path, const Genotype& genotype);

std::string serialize(const Alphas& alphas);
Alphas parse_alphas(const std::string& text);
Alphas load_alphas(const std::filesystem::path& path);
void save_alphas(const std::filesystem::path& path, const Alphas& alphas);

/// Graphviz digraph for one cell kind.
std::string export_dot(const Genotype& genotype, CellKind kind);
/// Both cells, normal first, as two digraphs in one document.
std::string export_dot(const Genotype& genotype);

/// Atrous convolutions become separable convolutions of the same kernel size.
Genotype ablate_replace_atrous(const Genotype& genotype);

}  // namespace cellsearch
