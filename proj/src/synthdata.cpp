#include "pclab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace pclab {
namespace {

constexpr char kMagic[8] = {'P', 'C', 'L', 'A', 'B', 'D', 'S', '1'};
constexpr std::uint32_t kVersion = 1;

// Uniform integer in [0, n) without relying on the library's distribution
// algorithm, so cached datasets do not depend on the standard library.
std::uint32_t draw(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t bound = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<std::uint32_t>(x % bound);
}

double draw_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

void check_copy_args(std::size_t n, std::size_t vocab, bool need_pow2) {
  if (vocab < 1) throw std::invalid_argument("vocabulary must be non-empty");
  if (n < 2 || n % 2) throw std::invalid_argument("sequence length must be even and >= 2");
  if (need_pow2 && (n & (n - 1))) throw std::invalid_argument("sequence length must be a power of two");
}

void local_row(std::mt19937_64& rng, std::size_t n, std::size_t vocab, std::uint32_t* out,
               std::uint8_t* m) {
  for (std::size_t i = 0; i < n / 2; ++i) out[2 * i] = out[2 * i + 1] = draw(rng, vocab);
  std::fill(m, m + n, 1);
}

void induction_row(std::mt19937_64& rng, std::size_t n, std::size_t vocab, std::uint32_t* out,
                   std::uint8_t* m) {
  const std::size_t h = n / 2;
  for (std::size_t i = 0; i < h; ++i) out[i] = out[h + i] = draw(rng, vocab);
  std::fill(m, m + h, 0);
  std::fill(m + h, m + n, 1);
}

SequenceBatch empty_batch(std::size_t n, std::size_t vocab, std::size_t count) {
  SequenceBatch b;
  b.n = n;
  b.vocab = vocab;
  b.tokens.resize(n * count);
  b.mask.resize(n * count);
  b.provenance.resize(count);
  return b;
}

}  // namespace

std::string kind_name(DataKind k) {
  switch (k) {
    case DataKind::kLocalCopy: return "local";
    case DataKind::kInductionCopy: return "induction";
    case DataKind::kMixed: return "mixed";
    case DataKind::kCharText: return "text";
    case DataKind::kSparseLast: return "sparse";
  }
  return "?";
}

DataKind parse_kind(const std::string& s) {
  if (s == "local" || s == "local-copy") return DataKind::kLocalCopy;
  if (s == "induction" || s == "induction-copy") return DataKind::kInductionCopy;
  if (s == "mixed") return DataKind::kMixed;
  if (s == "text" || s == "char-text") return DataKind::kCharText;
  if (s == "sparse" || s == "sparse-last") return DataKind::kSparseLast;
  throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::kLocal: return "local";
    case Provenance::kInduction: return "induction";
    case Provenance::kText: return "text";
    case Provenance::kSparse: return "sparse";
  }
  return "?";
}

std::size_t SequenceBatch::masked_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

void SequenceBatch::append_row(std::span<const std::uint32_t> toks, std::span<const std::uint8_t> m,
                               Provenance p) {
  if (toks.size() != n || m.size() != n) throw std::invalid_argument("append_row: wrong length");
  tokens.insert(tokens.end(), toks.begin(), toks.end());
  mask.insert(mask.end(), m.begin(), m.end());
  provenance.push_back(p);
}

SequenceBatch SequenceBatch::subset(std::span<const std::size_t> rs) const {
  SequenceBatch out;
  out.n = n;
  out.vocab = vocab;
  for (auto r : rs) {
    if (r >= rows()) throw std::out_of_range("subset: row out of range");
    out.append_row(row(r), mask_row(r), provenance[r]);
  }
  return out;
}

SequenceBatch SequenceBatch::only(Provenance p) const {
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < rows(); ++r) {
    if (provenance[r] == p) keep.push_back(r);
  }
  return subset(keep);
}

void SequenceBatch::validate() const {
  if (tokens.size() != rows() * n || mask.size() != rows() * n) {
    throw std::invalid_argument("batch arrays disagree with rows x n");
  }
  for (auto t : tokens) {
    if (t >= vocab) throw std::invalid_argument("token " + std::to_string(t) + " >= vocabulary");
  }
  for (std::size_t r = 0; r < rows(); ++r) {
    auto m = mask_row(r);
    if (std::find(m.begin(), m.end(), 1) == m.end()) {
      throw std::invalid_argument("row " + std::to_string(r) + " has an empty loss mask");
    }
  }
}

SequenceBatch gen_local_copy(std::size_t n, std::size_t vocab, std::size_t count, std::uint64_t seed) {
  check_copy_args(n, vocab, false);
  auto b = empty_batch(n, vocab, count);
  std::mt19937_64 rng(seed);
  for (std::size_t r = 0; r < count; ++r) {
    local_row(rng, n, vocab, &b.tokens[r * n], &b.mask[r * n]);
    b.provenance[r] = Provenance::kLocal;
  }
  return b;
}

SequenceBatch gen_induction_copy(std::size_t n, std::size_t vocab, std::size_t count,
                                 std::uint64_t seed) {
  check_copy_args(n, vocab, true);
  auto b = empty_batch(n, vocab, count);
  std::mt19937_64 rng(seed);
  for (std::size_t r = 0; r < count; ++r) {
    induction_row(rng, n, vocab, &b.tokens[r * n], &b.mask[r * n]);
    b.provenance[r] = Provenance::kInduction;
  }
  return b;
}

SequenceBatch gen_mixed(std::size_t n, std::size_t vocab, std::size_t count, double p,
                        std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("mix probability must be in [0, 1]");
  check_copy_args(n, vocab, true);
  auto b = empty_batch(n, vocab, count);
  std::mt19937_64 rng(seed);
  for (std::size_t r = 0; r < count; ++r) {
    // p = 1 and p = 0 never take the other branch since draw_unit is in [0, 1).
    if (draw_unit(rng) < p) {
      local_row(rng, n, vocab, &b.tokens[r * n], &b.mask[r * n]);
      b.provenance[r] = Provenance::kLocal;
    } else {
      induction_row(rng, n, vocab, &b.tokens[r * n], &b.mask[r * n]);
      b.provenance[r] = Provenance::kInduction;
    }
  }
  return b;
}

SequenceBatch gen_sparse_last(std::size_t n, std::size_t vocab, std::size_t count,
                              std::uint64_t seed, std::uint64_t task_seed) {
  if (n < 2) throw std::invalid_argument("sparse-last needs n >= 2");
  if (vocab < 2) throw std::invalid_argument("sparse-last needs vocab >= 2");
  std::vector<std::uint32_t> sigma(vocab);
  std::iota(sigma.begin(), sigma.end(), 0u);
  std::mt19937_64 task(task_seed ^ 0x5eed5eedULL);
  for (std::size_t i = vocab - 1; i > 0; --i) std::swap(sigma[i], sigma[draw(task, i + 1)]);
  auto b = empty_batch(n, vocab, count);
  std::mt19937_64 rng(seed);
  for (std::size_t r = 0; r < count; ++r) {
    std::uint32_t* row = &b.tokens[r * n];
    for (std::size_t t = 0; t + 1 < n; ++t) row[t] = draw(rng, vocab);
    row[n - 1] = sigma[row[n - 2]];
    b.mask[r * n + n - 1] = 1;
    b.provenance[r] = Provenance::kSparse;
  }
  return b;
}

SequenceBatch generate(const GenSpec& s) {
  switch (s.kind) {
    case DataKind::kLocalCopy: return gen_local_copy(s.n, s.vocab, s.count, s.seed);
    case DataKind::kInductionCopy: return gen_induction_copy(s.n, s.vocab, s.count, s.seed);
    case DataKind::kMixed: return gen_mixed(s.n, s.vocab, s.count, s.mix_p, s.seed);
    case DataKind::kSparseLast: return gen_sparse_last(s.n, s.vocab, s.count, s.seed, s.task_seed);
    case DataKind::kCharText: break;
  }
  throw std::invalid_argument("generate: text data must be ingested from a file");
}

// Odd positions of local-copy rows are determined by their predecessor;
// even positions are fresh uniform draws.
double local_copy_floor(std::size_t vocab) { return std::log(static_cast<double>(vocab)) / 2.0; }
double induction_copy_floor() { return 0.0; }
double sparse_last_floor() { return 0.0; }

CharVocab::CharVocab(std::string symbols) : symbols_(std::move(symbols)) {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    auto c = static_cast<unsigned char>(symbols_[i]);
    if (index_[c] >= 0) throw std::invalid_argument("vocabulary has a duplicate symbol");
    index_[c] = static_cast<int>(i);
  }
}

CharVocab CharVocab::build(const std::string& text, std::size_t max_size) {
  std::vector<bool> seen(256, false);
  for (unsigned char c : text) seen[c] = true;
  std::string symbols;
  for (int c = 0; c < 256; ++c) {
    if (seen[c]) symbols.push_back(static_cast<char>(c));
  }
  if (symbols.size() > max_size) {
    throw std::invalid_argument("vocabulary overflow: " + std::to_string(symbols.size()) +
                                " symbols > " + std::to_string(max_size));
  }
  return CharVocab(symbols);
}

std::vector<std::uint32_t> CharVocab::encode(const std::string& text) const {
  std::vector<std::uint32_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    if (index_[c] < 0) throw std::invalid_argument("character outside the vocabulary");
    out.push_back(static_cast<std::uint32_t>(index_[c]));
  }
  return out;
}

std::string CharVocab::decode(std::span<const std::uint32_t> ids) const {
  std::string out;
  for (auto i : ids) {
    if (i >= symbols_.size()) throw std::out_of_range("decode: id outside the vocabulary");
    out.push_back(symbols_[i]);
  }
  return out;
}

TextData ingest_char_string(const std::string& text, std::size_t n,
                            const std::optional<CharVocab>& vocab, bool last_token_only) {
  if (n < 1) throw std::invalid_argument("segment length must be positive");
  TextData d;
  d.vocab = vocab ? *vocab : CharVocab::build(text);
  auto ids = d.vocab.encode(text);
  d.batch.n = n;
  d.batch.vocab = d.vocab.size();
  std::vector<std::uint8_t> m(n, last_token_only ? 0 : 1);
  m[n - 1] = 1;
  for (std::size_t start = 0; start + n <= ids.size(); start += n) {
    d.batch.append_row(std::span<const std::uint32_t>(ids.data() + start, n), m, Provenance::kText);
  }
  return d;
}

TextData ingest_char_text(const std::string& path, std::size_t n,
                          const std::optional<CharVocab>& vocab, bool last_token_only) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return ingest_char_string(text, n, vocab, last_token_only);
}

namespace {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("dataset cache truncated");
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const SequenceBatch& b, const GenSpec& spec) {
  b.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, b.n);
  put<std::uint64_t>(os, b.vocab);
  put<std::uint64_t>(os, b.rows());
  put<std::uint8_t>(os, static_cast<std::uint8_t>(spec.kind));
  put<std::uint64_t>(os, spec.seed);
  put<double>(os, spec.mix_p);
  put<std::uint64_t>(os, spec.task_seed);
  for (auto t : b.tokens) put<std::uint32_t>(os, t);
  os.write(reinterpret_cast<const char*>(b.mask.data()), static_cast<std::streamsize>(b.mask.size()));
  for (auto p : b.provenance) put<std::uint8_t>(os, static_cast<std::uint8_t>(p));
  if (!os) throw std::runtime_error("write failed: " + path);
}

SequenceBatch load_dataset(const std::string& path, GenSpec* spec) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path + " is not a dataset cache");
  }
  if (get<std::uint32_t>(is) != kVersion) throw std::runtime_error("unsupported cache version");
  SequenceBatch b;
  b.n = get<std::uint64_t>(is);
  b.vocab = get<std::uint64_t>(is);
  const auto count = get<std::uint64_t>(is);
  GenSpec s;
  s.kind = static_cast<DataKind>(get<std::uint8_t>(is));
  s.seed = get<std::uint64_t>(is);
  s.mix_p = get<double>(is);
  s.task_seed = get<std::uint64_t>(is);
  s.n = b.n;
  s.vocab = b.vocab;
  s.count = count;
  b.tokens.resize(b.n * count);
  for (auto& t : b.tokens) t = get<std::uint32_t>(is);
  b.mask.resize(b.n * count);
  is.read(reinterpret_cast<char*>(b.mask.data()), static_cast<std::streamsize>(b.mask.size()));
  b.provenance.resize(count);
  for (auto& p : b.provenance) p = static_cast<Provenance>(get<std::uint8_t>(is));
  if (!is) throw std::runtime_error("dataset cache truncated");
  b.validate();
  if (spec) *spec = s;
  return b;
}

}  // namespace pclab
