#pragma once

// Synthetic clustered-classification corpus plus TSV import/export and
// batching.
//
// The task: the vocabulary above the reserved ids is split into K disjoint
// sub-vocabularies, one per cluster. An example drawn from cluster c is a
// fixed-length sequence of tokens sampled from c's noise pool, with the
// cluster's three-token signature planted contiguously at a random
// position. The label is c modulo n_classes, so a bag-of-words model (and
// anything stronger) can reach 100% accuracy; what varies in experiments
// is only how the encoder carries that signal.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "xattn/random.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

// Reserved token ids.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kClsId = 1;
inline constexpr std::int32_t kUnkId = 2;
inline constexpr std::int32_t kFirstContentId = 3;

struct Example {
  std::vector<std::int32_t> tokens;  // content only; [CLS] is added at batch time
  int label = 0;
};

struct Dataset {
  Index seq_len = 0;  // model-facing length, including the [CLS] slot
  std::vector<Example> examples;

  Index size() const { return static_cast<Index>(examples.size()); }
};

struct TaskSpec {
  Index n_clusters = 4;
  Index n_classes = 2;
  Index vocab_size = 64;
  Index seq_len = 16;
  Index train_examples = 1024;
  Index val_examples = 256;
  std::uint64_t seed = 1;

  Index cluster_width() const {
    return n_clusters > 0 ? (vocab_size - kFirstContentId) / n_clusters : 0;
  }

  void validate() const {
    if (n_clusters < 1) throw ConfigError("n_clusters must be at least 1");
    if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
    if (seq_len < 5)
      throw ConfigError("seq_len must be at least 5 ([CLS] + signature + noise)");
    if (train_examples < 1 || val_examples < 1)
      throw ConfigError("train/val example counts must be positive");
    if (cluster_width() < 4)
      throw ConfigError(
          "vocab_size " + std::to_string(vocab_size) + " too small for " +
          std::to_string(n_clusters) +
          " clusters (each needs a 3-token signature plus noise)");
  }
};

namespace detail {

inline Example draw_example(const TaskSpec& spec, Index cluster, Rng& rng) {
  const Index width = spec.cluster_width();
  const std::int32_t base =
      kFirstContentId + static_cast<std::int32_t>(cluster * width);
  const Index content = spec.seq_len - 1;
  const Index noise_pool = width - 3;

  Example ex;
  ex.label = static_cast<int>(cluster % spec.n_classes);
  ex.tokens.resize(static_cast<std::size_t>(content));
  for (Index i = 0; i < content; ++i)
    ex.tokens[static_cast<std::size_t>(i)] =
        base + 3 + static_cast<std::int32_t>(uniform_below(
                       rng, static_cast<std::uint64_t>(noise_pool)));
  const Index pos = static_cast<Index>(
      uniform_below(rng, static_cast<std::uint64_t>(content - 2)));
  for (Index j = 0; j < 3; ++j)
    ex.tokens[static_cast<std::size_t>(pos + j)] =
        base + static_cast<std::int32_t>(j);
  return ex;
}

inline Dataset draw_split(const TaskSpec& spec, Index count,
                          std::uint64_t salt) {
  Dataset ds;
  ds.seq_len = spec.seq_len;
  ds.examples.reserve(static_cast<std::size_t>(count));
  Rng rng(derive_seed(spec.seed, salt));
  for (Index i = 0; i < count; ++i)
    ds.examples.push_back(draw_example(spec, i % spec.n_clusters, rng));
  return ds;
}

}  // namespace detail

struct DataSplits {
  Dataset train;
  Dataset val;
};

inline DataSplits gen_cluster_task(const TaskSpec& spec) {
  spec.validate();
  return DataSplits{detail::draw_split(spec, spec.train_examples, 1),
                    detail::draw_split(spec, spec.val_examples, 2)};
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  Tensor<std::int32_t> ids;   // (B, seq_len), [CLS] first, padded with [PAD]
  Tensor<std::int32_t> mask;  // (B, seq_len), 1 over [CLS]+tokens, 0 over pad
  std::vector<int> labels;
};

inline Batch make_batch(const Dataset& ds, const std::vector<Index>& order,
                        Index begin, Index end) {
  if (begin < 0 || end > static_cast<Index>(order.size()) || begin >= end)
    throw UsageError("make_batch: bad range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ")");
  const Index B = end - begin, L = ds.seq_len;
  Batch batch{Tensor<std::int32_t>({B, L}), Tensor<std::int32_t>({B, L}), {}};
  batch.labels.reserve(static_cast<std::size_t>(B));
  for (Index r = 0; r < B; ++r) {
    const Index i = order[static_cast<std::size_t>(begin + r)];
    if (i < 0 || i >= ds.size())
      throw IndexError("make_batch: example " + std::to_string(i) +
                       " outside dataset of " + std::to_string(ds.size()));
    const Example& ex = ds.examples[static_cast<std::size_t>(i)];
    if (static_cast<Index>(ex.tokens.size()) > L - 1)
      throw ShapeError("make_batch: example of " +
                       std::to_string(ex.tokens.size()) +
                       " tokens does not fit seq_len " + std::to_string(L));
    batch.ids.at({r, 0}) = kClsId;
    batch.mask.at({r, 0}) = 1;
    for (Index j = 0; j < static_cast<Index>(ex.tokens.size()); ++j) {
      batch.ids.at({r, j + 1}) = ex.tokens[static_cast<std::size_t>(j)];
      batch.mask.at({r, j + 1}) = 1;
    }
    batch.labels.push_back(ex.label);
  }
  return batch;
}

inline std::vector<Index> identity_order(Index n) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  return order;
}

// ---------------------------------------------------------------------------
// TSV round-trip: "label<TAB>token token token...". Token ids, not strings;
// the synthetic task has no surface forms.

inline void export_tsv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "# seq_len=" << ds.seq_len << "\n";
  for (const Example& ex : ds.examples) {
    out << ex.label << '\t';
    for (std::size_t j = 0; j < ex.tokens.size(); ++j) {
      if (j) out << ' ';
      out << ex.tokens[j];
    }
    out << '\n';
  }
  if (!out.flush()) throw IoError("write to '" + path + "' failed");
}

inline Dataset import_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  Dataset ds;
  std::string line;
  Index lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find("seq_len=");
      if (eq != std::string::npos)
        ds.seq_len = std::strtoll(line.c_str() + eq + 8, nullptr, 10);
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw IoError(path + ":" + std::to_string(lineno) + ": missing tab");
    Example ex;
    try {
      ex.label = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw IoError(path + ":" + std::to_string(lineno) + ": bad label '" +
                    line.substr(0, tab) + "'");
    }
    if (ex.label < 0)
      throw IoError(path + ":" + std::to_string(lineno) + ": negative label");
    std::istringstream toks(line.substr(tab + 1));
    std::string tok;
    while (toks >> tok) {
      try {
        const long id = std::stol(tok);
        if (id < 0) throw std::out_of_range("negative");
        ex.tokens.push_back(static_cast<std::int32_t>(id));
      } catch (const std::exception&) {
        throw IoError(path + ":" + std::to_string(lineno) + ": bad token '" +
                      tok + "'");
      }
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.seq_len == 0) {
    // No header: infer from the longest row plus the [CLS] slot.
    Index longest = 0;
    for (const Example& ex : ds.examples)
      longest = std::max(longest, static_cast<Index>(ex.tokens.size()));
    ds.seq_len = longest + 1;
  }
  return ds;
}

inline bool operator==(const Example& a, const Example& b) {
  return a.label == b.label && a.tokens == b.tokens;
}

inline bool operator==(const Dataset& a, const Dataset& b) {
  return a.seq_len == b.seq_len && a.examples == b.examples;
}

}  // namespace xattn
