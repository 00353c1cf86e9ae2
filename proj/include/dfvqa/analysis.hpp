#pragma once

// Embedding-space diagnostics: prompt-ensemble text prototypes, the CLIP-style
// zero-shot binary baseline, and nearest-token retrieval for a prototype.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dfvqa/embedding.hpp"
#include "dfvqa/error.hpp"
#include "dfvqa/imagenet_templates.hpp"
#include "dfvqa/manifest.hpp"
#include "dfvqa/util.hpp"

namespace dfvqa {

enum class PrototypeSource { text_prompts, image_class_mean };

struct Prototype {
  EmbeddingVector vector;
  PrototypeSource source = PrototypeSource::text_prompts;
  std::size_t n_members = 0;
};

/// Terms averaged into the zero-shot prototypes.
inline const std::vector<std::string>& default_positive_prototype_terms() {
  static const std::vector<std::string> terms{"manipulated", "synthetic", "altered"};
  return terms;
}
inline const std::vector<std::string>& default_negative_prototype_terms() {
  static const std::vector<std::string> terms{"real", "original", "unaltered"};
  return terms;
}

/// Every (template, term) prompt, term-major.
inline std::vector<std::string> prompt_ensemble_texts(const std::vector<std::string>& terms) {
  std::vector<std::string> out;
  out.reserve(terms.size() * kImagenetTemplates.size());
  for (const auto& t : terms)
    for (auto tmpl : kImagenetTemplates) out.push_back(fill_template(tmpl, t));
  return out;
}

namespace detail {
inline Prototype mean_prototype(const std::vector<EmbeddingVector>& members, PrototypeSource source) {
  if (members.empty()) throw Error(ErrorKind::data, "prototype needs at least one embedding");
  const std::size_t dim = members.front().dim();
  std::vector<double> sum(dim, 0.0);
  for (const auto& m : members) {
    if (m.dim() != dim) throw Error(ErrorKind::data, "prototype members differ in dimension");
    for (std::size_t i = 0; i < dim; ++i) sum[i] += m.values[i];
  }
  for (double& x : sum) x /= static_cast<double>(members.size());
  return {normalized(std::move(sum)), source, members.size()};
}
}  // namespace detail

/// Element-wise mean of unit prompt embeddings, re-normalized.
inline Prototype build_text_prototype(const std::vector<EmbeddingVector>& prompt_embeddings) {
  for (const auto& e : prompt_embeddings) require_unit(e, "prompt embedding");
  return detail::mean_prototype(prompt_embeddings, PrototypeSource::text_prompts);
}

/// Class prototype from the image embeddings of one class.
inline Prototype build_image_prototype(const std::vector<EmbeddingVector>& image_embeddings) {
  return detail::mean_prototype(image_embeddings, PrototypeSource::image_class_mean);
}

struct ZeroShotResult {
  BinaryLabel label = BinaryLabel::real;
  double margin = 0.0;  // cos(image, pos) - cos(image, neg)
  bool tie = false;
};

inline ZeroShotResult zeroshot_binary(const EmbeddingVector& image, const Prototype& pos, const Prototype& neg) {
  if (image.dim() != pos.vector.dim() || image.dim() != neg.vector.dim())
    throw Error(ErrorKind::data, "zero-shot inputs differ in dimension");
  const double cp = unit_cosine(image, pos.vector);
  const double cn = unit_cosine(image, neg.vector);
  ZeroShotResult r;
  r.margin = cp - cn;
  r.tie = cp == cn;
  r.label = cp > cn ? BinaryLabel::fake : BinaryLabel::real;
  return r;
}

/// Row-major token embedding matrix with one token string per row.
struct TokenMatrix {
  std::vector<std::string> tokens;
  std::size_t dim = 0;
  std::vector<double> data;

  std::size_t rows() const noexcept { return tokens.size(); }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * dim, dim}; }

  void validate() const {
    if (data.size() != tokens.size() * dim)
      throw Error(ErrorKind::data, "token matrix has " + std::to_string(data.size()) + " values for " +
                                       std::to_string(tokens.size()) + " tokens of dimension " + std::to_string(dim));
  }
};

inline std::vector<std::string> load_token_list(const std::filesystem::path& path) {
  std::vector<std::string> tokens;
  std::istringstream in(read_file(path));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  return tokens;
}

/// Text matrix: one whitespace-separated row per line, in sidecar token order.
/// Binary matrix (".bin"): little-endian float32, row-major, dimension
/// inferred from the token count.
inline TokenMatrix load_token_matrix(const std::filesystem::path& matrix_path,
                                     const std::filesystem::path& tokens_path) {
  TokenMatrix m;
  m.tokens = load_token_list(tokens_path);
  if (m.tokens.empty()) throw Error(ErrorKind::data, "empty token list " + tokens_path.string());
  const std::string raw = read_file(matrix_path);
  if (matrix_path.extension() == ".bin") {
    const std::size_t floats = raw.size() / sizeof(float);
    if (raw.size() % sizeof(float) != 0 || floats % m.tokens.size() != 0)
      throw Error(ErrorKind::data, "binary matrix size is not a multiple of the token count");
    m.dim = floats / m.tokens.size();
    m.data.resize(floats);
    for (std::size_t i = 0; i < floats; ++i) {
      float f;
      std::memcpy(&f, raw.data() + i * sizeof(float), sizeof(float));
      m.data[i] = f;
    }
  } else {
    std::istringstream in(raw);
    std::size_t row = 0;
    for (std::string line; std::getline(in, line);) {
      if (trim(line).empty()) continue;
      std::istringstream ls(line);
      std::vector<double> vals;
      for (double x; ls >> x;) vals.push_back(x);
      if (!ls.eof()) throw Error(ErrorKind::data, "matrix row " + std::to_string(row + 1) + " is not numeric");
      if (row == 0) m.dim = vals.size();
      if (vals.size() != m.dim || vals.empty())
        throw Error(ErrorKind::data, "matrix row " + std::to_string(row + 1) + " has the wrong width");
      m.data.insert(m.data.end(), vals.begin(), vals.end());
      ++row;
    }
  }
  m.validate();
  return m;
}

struct TokenHit {
  std::size_t index = 0;
  std::string token;
  double cosine = 0.0;
};

/// Top-k vocabulary rows by cosine to the prototype, descending; equal
/// cosines keep ascending row order.
inline std::vector<TokenHit> nearest_tokens(const Prototype& prototype, const TokenMatrix& vocab, std::size_t k) {
  vocab.validate();
  if (k > vocab.rows())
    throw Error(ErrorKind::config, "k = " + std::to_string(k) + " exceeds vocabulary size " + std::to_string(vocab.rows()));
  if (prototype.vector.dim() != vocab.dim) throw Error(ErrorKind::data, "prototype and vocabulary differ in dimension");

  std::vector<double> cos(vocab.rows());
  for (std::size_t i = 0; i < vocab.rows(); ++i) cos[i] = cosine(prototype.vector.values, vocab.row(i));
  std::vector<std::size_t> idx(vocab.rows());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) { return cos[a] > cos[b] || (cos[a] == cos[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);

  std::vector<TokenHit> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({idx[i], vocab.tokens[idx[i]], cos[idx[i]]});
  return out;
}

}  // namespace dfvqa
