#pragma once

// Synthetic sequence generators, character-level text ingestion and the
// binary dataset cache.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pclab {

enum class DataKind : std::uint8_t {
  kLocalCopy = 0,
  kInductionCopy = 1,
  kMixed = 2,
  kCharText = 3,
  kSparseLast = 4,
};

// Per-row generator tag.
enum class Provenance : std::uint8_t { kLocal = 0, kInduction = 1, kText = 2, kSparse = 3 };

std::string kind_name(DataKind k);
DataKind parse_kind(const std::string& s);
std::string provenance_name(Provenance p);

// Row-major token matrix with a loss mask. mask[r * n + t] set means the
// prediction of token t (given tokens < t) counts towards the loss.
struct SequenceBatch {
  std::size_t n = 0;
  std::size_t vocab = 0;
  std::vector<std::uint32_t> tokens;
  std::vector<std::uint8_t> mask;
  std::vector<Provenance> provenance;

  std::size_t rows() const { return provenance.size(); }
  std::span<const std::uint32_t> row(std::size_t r) const { return {tokens.data() + r * n, n}; }
  std::span<const std::uint8_t> mask_row(std::size_t r) const { return {mask.data() + r * n, n}; }
  std::size_t masked_count() const;

  void append_row(std::span<const std::uint32_t> toks, std::span<const std::uint8_t> m, Provenance p);
  SequenceBatch subset(std::span<const std::size_t> rows) const;
  SequenceBatch only(Provenance p) const;
  // Throws std::invalid_argument on a broken invariant.
  void validate() const;
};

struct GenSpec {
  DataKind kind = DataKind::kLocalCopy;
  std::size_t n = 16;
  std::size_t vocab = 16;
  std::size_t count = 1000;
  std::uint64_t seed = 0;
  double mix_p = 0.5;
  std::uint64_t task_seed = 0;  // sparse-last: fixes the target permutation
};

// (a1, a1, a2, a2, ...), loss on every position.
SequenceBatch gen_local_copy(std::size_t n, std::size_t vocab, std::size_t count, std::uint64_t seed);
// (a1..aH, a1..aH), loss on the second half only.
SequenceBatch gen_induction_copy(std::size_t n, std::size_t vocab, std::size_t count,
                                 std::uint64_t seed);
// Each row local-copy with probability p, else induction-copy.
SequenceBatch gen_mixed(std::size_t n, std::size_t vocab, std::size_t count, double p,
                        std::uint64_t seed);
// Uniform prefix; the last token is sigma(previous token) for a fixed random
// permutation sigma drawn from task_seed. Loss on the last position only.
SequenceBatch gen_sparse_last(std::size_t n, std::size_t vocab, std::size_t count,
                              std::uint64_t seed, std::uint64_t task_seed = 0);
SequenceBatch generate(const GenSpec& spec);

// Best achievable mean masked NLL of each generator.
double local_copy_floor(std::size_t vocab);
double induction_copy_floor();
double sparse_last_floor();

class CharVocab {
 public:
  CharVocab() = default;
  explicit CharVocab(std::string symbols);
  static CharVocab build(const std::string& text, std::size_t max_size = 256);

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbols() const { return symbols_; }
  std::vector<std::uint32_t> encode(const std::string& text) const;
  std::string decode(std::span<const std::uint32_t> ids) const;

 private:
  std::string symbols_;
  std::vector<int> index_ = std::vector<int>(256, -1);
};

struct TextData {
  SequenceBatch batch;
  CharVocab vocab;
};

// Packs the file into consecutive length-n segments (remainder dropped).
TextData ingest_char_text(const std::string& path, std::size_t n,
                          const std::optional<CharVocab>& vocab = std::nullopt,
                          bool last_token_only = false);
TextData ingest_char_string(const std::string& text, std::size_t n,
                            const std::optional<CharVocab>& vocab = std::nullopt,
                            bool last_token_only = false);

// Binary cache: magic, version, header fields, then tokens/mask/provenance.
void save_dataset(const std::string& path, const SequenceBatch& batch, const GenSpec& spec);
SequenceBatch load_dataset(const std::string& path, GenSpec* spec = nullptr);

}  // namespace pclab
