#include "hadapt/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <map>
#include <unordered_set>

#include "hadapt/error.hpp"
#include "hadapt/rng.hpp"

namespace hadapt {
namespace {

int random_content(Rng& rng) { return rng.range(vocab::kContentBegin, static_cast<int>(vocab::kSize) - 1); }

std::map<int, int> counts(std::span<const int> tokens) {
  std::map<int, int> c;
  for (int t : tokens) ++c[t];
  return c;
}

// [CLS] a [SEP] or [CLS] a [SEP] b [SEP]; segment 1 covers b and its [SEP].
Example pack(const std::vector<int>& a, const std::vector<int>* b) {
  Example ex;
  ex.tokens.push_back(vocab::kCls);
  ex.tokens.insert(ex.tokens.end(), a.begin(), a.end());
  ex.tokens.push_back(vocab::kSep);
  ex.segments.assign(ex.tokens.size(), 0);
  if (b) {
    ex.tokens.insert(ex.tokens.end(), b->begin(), b->end());
    ex.tokens.push_back(vocab::kSep);
    ex.segments.resize(ex.tokens.size(), 1);
  }
  return ex;
}

// Splits a packed example back into its segments, dropping CLS/SEP.
std::pair<std::vector<int>, std::vector<int>> unpack(const Example& ex) {
  std::vector<int> a, b;
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    if (!vocab::is_content(ex.tokens[i])) continue;
    (ex.segments[i] == 0 ? a : b).push_back(ex.tokens[i]);
  }
  return {a, b};
}

// Class-level Markov grammar shared by the corpus and the pair tasks.
int next_class(Rng& rng, int cls) {
  // 0 neutral, 1 pos, 2 neg
  const double u = rng.uniform();
  if (cls == 0) return u < 0.75 ? 0 : (u < 0.875 ? 1 : 2);
  if (u < 0.5) return cls;
  return u < 0.9 ? 0 : 3 - cls;
}

int zipf_in(Rng& rng, int begin, int end) {
  const int n = end - begin;
  double total = 0.0;
  for (int r = 0; r < n; ++r) total += 1.0 / (r + 1);
  double u = rng.uniform() * total;
  for (int r = 0; r < n; ++r) {
    u -= 1.0 / (r + 1);
    if (u < 0) return begin + r;
  }
  return end - 1;
}

std::vector<int> grammar_sentence(Rng& rng, std::size_t len) {
  std::vector<int> s(len);
  int cls = rng.range(0, 2);
  for (int& t : s) {
    cls = next_class(rng, cls);
    if (cls == 0) t = zipf_in(rng, vocab::kNeutralBegin, vocab::kNeutralEnd);
    else if (cls == 1) t = zipf_in(rng, vocab::kPosBegin, vocab::kPosEnd);
    else t = zipf_in(rng, vocab::kNegBegin, vocab::kNegEnd);
  }
  return s;
}

Example gen_polarity(Rng& rng) {
  std::vector<int> s(static_cast<std::size_t>(rng.range(8, 30)));
  for (int& t : s) {
    if (rng.bernoulli(0.3)) {
      t = rng.bernoulli(0.5) ? rng.range(vocab::kPosBegin, vocab::kPosEnd - 1) : rng.range(vocab::kNegBegin, vocab::kNegEnd - 1);
    } else {
      t = rng.range(vocab::kNeutralBegin, vocab::kNeutralEnd - 1);
    }
  }
  return pack(s, nullptr);
}

// Replaces about half of `b` with grammar tokens that do not occur in `a`.
void corrupt_half(Rng& rng, const std::vector<int>& a, std::vector<int>& b) {
  std::vector<std::size_t> pos(b.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  rng.shuffle(pos);
  const std::size_t n = (b.size() + 1) / 2;
  for (std::size_t i = 0; i < n; ++i) {
    int t;
    do t = grammar_sentence(rng, 1)[0];
    while (std::find(a.begin(), a.end(), t) != a.end());
    b[pos[i]] = t;
  }
}

Example gen_paraphrase(Rng& rng, bool positive) {
  std::vector<int> a = grammar_sentence(rng, static_cast<std::size_t>(rng.range(4, 14)));
  std::vector<int> b = a;
  rng.shuffle(b);
  if (!positive) corrupt_half(rng, a, b);
  return pack(a, &b);
}

Example gen_entail(Rng& rng, bool positive) {
  std::vector<int> a = grammar_sentence(rng, static_cast<std::size_t>(rng.range(6, 14)));
  std::vector<int> pool = a;
  rng.shuffle(pool);
  const std::size_t len = static_cast<std::size_t>(rng.range(2, std::min<int>(8, static_cast<int>(a.size()))));
  std::vector<int> b(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(len));
  if (!positive) corrupt_half(rng, a, b);
  return pack(a, &b);
}

Example gen_overlap(Rng& rng) {
  const std::size_t na = static_cast<std::size_t>(rng.range(3, 10));
  const std::size_t nb = static_cast<std::size_t>(rng.range(3, 10));
  std::vector<int> universe;
  for (int t = vocab::kContentBegin; t < static_cast<int>(vocab::kSize); ++t) universe.push_back(t);
  rng.shuffle(universe);
  std::vector<int> a(universe.begin(), universe.begin() + static_cast<std::ptrdiff_t>(na));
  const std::size_t shared = static_cast<std::size_t>(rng.range(0, static_cast<int>(std::min(na, nb))));
  std::vector<int> b(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(shared));
  for (std::size_t i = 0; b.size() < nb; ++i) b.push_back(universe[na + i]);
  rng.shuffle(a);
  rng.shuffle(b);
  return pack(a, &b);
}

Example gen_one(const TaskSpec& spec, Rng& rng, int desired) {
  for (;;) {
    Example ex;
    if (spec.name == "POLARITY") {
      ex = gen_polarity(rng);
      const auto [a, b] = unpack(ex);
      const auto pos = std::count_if(a.begin(), a.end(), vocab::is_pos);
      const auto neg = std::count_if(a.begin(), a.end(), vocab::is_neg);
      if (pos == neg) continue;  // ties rejected
    } else if (spec.name == "PARAPHRASE") {
      ex = gen_paraphrase(rng, desired == 1);
    } else if (spec.name == "ENTAIL") {
      ex = gen_entail(rng, desired == 1);
    } else {
      ex = gen_overlap(rng);
    }
    ex.label = oracle_label(spec.name, ex);
    if (spec.is_regression() || static_cast<int>(ex.label) == desired) return ex;
  }
}

Dataset gen_split(const TaskSpec& spec, std::string_view split, std::size_t n,
                  const std::unordered_set<std::uint64_t>* exclude) {
  Rng rng = Rng::stream(spec.seed, spec.name + "/" + std::string(split));
  Dataset d;
  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int desired = static_cast<int>(i % 2);
    Example ex = gen_one(spec, rng, desired);
    while (exclude && exclude->contains(example_hash(ex))) ex = gen_one(spec, rng, desired);
    d.examples.push_back(std::move(ex));
  }
  rng.shuffle(d.examples);
  return d;
}

}  // namespace

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::single_sentence: return "single_sentence";
    case TaskKind::sentence_pair: return "sentence_pair";
    case TaskKind::regression: return "regression";
  }
  return "?";
}

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::accuracy: return "accuracy";
    case Metric::mcc: return "mcc";
    case Metric::pearson: return "pearson";
  }
  return "?";
}

Metric parse_metric(std::string_view s) {
  if (s == "accuracy") return Metric::accuracy;
  if (s == "mcc") return Metric::mcc;
  if (s == "pearson") return Metric::pearson;
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

TaskSpec TaskSpec::builtin(std::string_view name, std::uint64_t seed, std::size_t train_size, std::size_t dev_size) {
  TaskSpec s;
  s.name = std::string(name);
  s.seed = seed;
  s.train_size = train_size;
  s.dev_size = dev_size;
  if (name == "POLARITY") {
    s.kind = TaskKind::single_sentence;
  } else if (name == "PARAPHRASE" || name == "ENTAIL") {
    s.kind = TaskKind::sentence_pair;
  } else if (name == "OVERLAP") {
    s.kind = TaskKind::regression;
    s.metric = Metric::pearson;
  } else {
    throw ConfigError("unknown task '" + std::string(name) + "' (expected POLARITY, PARAPHRASE, ENTAIL or OVERLAP)");
  }
  return s;
}

double oracle_label(std::string_view task, const Example& ex) {
  const auto [a, b] = unpack(ex);
  if (task == "POLARITY") {
    const auto pos = std::count_if(a.begin(), a.end(), vocab::is_pos);
    const auto neg = std::count_if(a.begin(), a.end(), vocab::is_neg);
    return pos > neg ? 1.0 : 0.0;
  }
  if (task == "PARAPHRASE") return counts(a) == counts(b) ? 1.0 : 0.0;
  if (task == "ENTAIL") {
    const auto ca = counts(a);
    for (const auto& [t, n] : counts(b)) {
      auto it = ca.find(t);
      if (it == ca.end() || it->second < n) return 0.0;
    }
    return 1.0;
  }
  if (task == "OVERLAP") {
    const auto ca = counts(a), cb = counts(b);
    std::size_t inter = 0;
    for (const auto& [t, n] : ca) inter += cb.contains(t);
    const std::size_t uni = ca.size() + cb.size() - inter;
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
  }
  throw ConfigError("unknown task '" + std::string(task) + "'");
}

TaskData gen_task(const TaskSpec& spec) {
  TaskSpec::builtin(spec.name);  // validates the name
  if (spec.train_size == 0 || spec.dev_size == 0) throw ConfigError("task " + spec.name + ": splits must be non-empty");
  TaskData out{spec, gen_split(spec, "train", spec.train_size, nullptr), {}};
  std::unordered_set<std::uint64_t> seen;
  for (const auto& ex : out.train.examples) seen.insert(example_hash(ex));
  out.dev = gen_split(spec, "dev", spec.dev_size, &seen);
  return out;
}

Dataset gen_pretrain_corpus(std::uint64_t seed, std::size_t size, std::size_t max_seq_len) {
  if (size < 1) throw ConfigError("pretraining corpus size must be >= 1");
  if (max_seq_len < 11) throw ConfigError("pretraining needs max_seq_len >= 11");
  Rng rng = Rng::stream(seed, "pretrain/corpus");
  const int max_single = static_cast<int>(std::min<std::size_t>(30, max_seq_len - 2));
  const int max_segment = static_cast<int>(std::min<std::size_t>(14, (max_seq_len - 3) / 2));
  Dataset d;
  d.examples.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    Example ex;
    if (rng.bernoulli(0.5)) {
      ex = pack(grammar_sentence(rng, static_cast<std::size_t>(rng.range(8, max_single))), nullptr);
    } else {
      std::vector<int> a = grammar_sentence(rng, static_cast<std::size_t>(rng.range(4, max_segment)));
      std::vector<int> b;
      const double u = rng.uniform();
      if (rng.bernoulli(0.3)) {  // copy
        b = a;
      } else if (u < 0.4) {  // permutation
        b = a;
        rng.shuffle(b);
      } else if (u < 0.85) {  // sub-multiset
        b = a;
        rng.shuffle(b);
        b.resize(static_cast<std::size_t>(rng.range(2, static_cast<int>(a.size()))));
      } else {  // unrelated
        b = grammar_sentence(rng, static_cast<std::size_t>(rng.range(4, max_segment)));
      }
      if (rng.bernoulli(0.3)) b[rng.below(b.size())] = random_content(rng);
      ex = pack(a, &b);
    }
    ex.mlm_targets.assign(ex.tokens.size(), -1);
    for (std::size_t p = 0; p < ex.tokens.size(); ++p) {
      if (!vocab::is_content(ex.tokens[p]) || !rng.bernoulli(0.15)) continue;
      ex.mlm_targets[p] = ex.tokens[p];
      const double r = rng.uniform();
      if (r < 0.8) ex.tokens[p] = vocab::kMask;
      else if (r < 0.9) ex.tokens[p] = random_content(rng);
    }
    d.examples.push_back(std::move(ex));
  }
  return d;
}

std::uint64_t example_hash(const Example& ex) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  const auto mix = [&h](std::int64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= static_cast<std::uint64_t>(v >> (8 * i)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  };
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    mix(ex.tokens[i]);
    mix(ex.segments[i]);
  }
  return h;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  Batch b;
  b.batch = indices.size();
  for (std::size_t i : indices) b.seq = std::max(b.seq, data.examples.at(i).tokens.size());
  b.tokens.assign(b.batch * b.seq, vocab::kPad);
  b.segments.assign(b.batch * b.seq, 0);
  b.mask.assign(b.batch * b.seq, 0);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Example& ex = data.examples[indices[r]];
    if (ex.segments.size() != ex.tokens.size()) throw ShapeError("example tokens and segments differ in length");
    for (std::size_t p = 0; p < ex.tokens.size(); ++p) {
      b.tokens[r * b.seq + p] = ex.tokens[p];
      b.segments[r * b.seq + p] = ex.segments[p];
      b.mask[r * b.seq + p] = 1;
    }
  }
  return b;
}

Batch make_batch(const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(data, all);
}

std::string to_jsonl(const Dataset& data) {
  std::string out;
  for (const auto& ex : data.examples) {
    nlohmann::json j{{"tokens", ex.tokens}, {"segments", ex.segments}, {"label", ex.label}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_jsonl(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << to_jsonl(data);
}

}  // namespace hadapt
