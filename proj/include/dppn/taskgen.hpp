#pragma once
// Synthetic structural-family classification tasks. A family is a set of
// 3-token motifs; what makes a family itself is pure structure: the internal
// spacing of each motif and the planting window, never the tokens. A surface
// mapping turns abstract roles into concrete token ids, so the same structure
// can wear arbitrarily many disguises (A1, A1', A2, ...).
//
// Labels are built so that a bag-of-tokens view solves the two-motif samples
// exactly but is blind to the three-motif samples, whose label also depends
// on which motif was planted first. That puts the bag ceiling at ~0.75 and
// reserves the rest for models that can read positional structure.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "dppn/rng.hpp"

namespace dppn {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An ordered triple of abstract roles planted at positions
// {s, s+gap1, s+gap1+gap2}. The gaps are the structural signature.
struct Motif {
  std::array<int, 3> roles;
  int gap1 = 0, gap2 = 0;
  int extent() const { return 1 + gap1 + gap2; }
  auto canonical() const { return std::make_tuple(roles[0], roles[1], roles[2], gap1, gap2); }
};

struct MotifFamily {
  char id = '?';
  std::vector<Motif> motifs;   // 4 motifs, subsets of which get planted
  int window_lo = 0;           // planting window [lo, hi)
  int window_hi = 0;
  // Motif-subset bitmask -> label. Two-motif subsets resolve from the table
  // alone; three-motif subsets XOR the table entry with the planting-order
  // bit, which no bag-of-tokens view can see.
  std::map<int, int> label2;
  std::map<int, int> label3;
};

struct SurfaceMapping {
  std::array<int, 32> token_of_role{};  // bijection role -> token id in [1, V]
  uint64_t seed = 0;
};

struct TaskSpec {
  std::string name;  // e.g. "A1", "A1p"
  MotifFamily family;
  SurfaceMapping surface;
  int n_train = 2000;
  int n_val = 500;
  int seq_len = 128;
  int vocab = 32;
  float noise_level = 0.02f;
  uint64_t seed = 0;
};

struct Dataset {
  int n = 0, seq_len = 0, vocab = 0;
  std::vector<uint8_t> tokens;              // n * seq_len, ids in [1, vocab]
  std::vector<uint8_t> labels;              // n, in {0, 1}
  std::vector<std::vector<int>> motif_positions;  // diagnostics: planted slots
};

// ---------------------------------------------------------------------------
// Family construction. All families share the role triples and label tables;
// identity lives entirely in the gap signatures and planting windows, which
// are disjoint across families by construction.

inline MotifFamily make_family(char id) {
  static constexpr std::array<std::array<int, 3>, 4> kRoleTriples{{
      {0, 1, 2}, {2, 3, 4}, {4, 5, 0}, {1, 3, 5}}};
  MotifFamily f;
  f.id = id;
  std::array<std::pair<int, int>, 4> gaps;
  switch (id) {
    case 'A': gaps = {{{2, 5}, {5, 3}, {3, 6}, {6, 2}}}; f.window_lo = 0; break;
    case 'B': gaps = {{{1, 4}, {4, 1}, {2, 7}, {7, 2}}}; f.window_lo = 14; break;
    case 'C': gaps = {{{1, 2}, {2, 1}, {4, 5}, {5, 4}}}; f.window_lo = 28; break;
    default: throw std::invalid_argument("make_family: unknown family id");
  }
  f.window_hi = f.window_lo + 100;
  for (int i = 0; i < 4; ++i)
    f.motifs.push_back(Motif{kRoleTriples[i], gaps[i].first, gaps[i].second});
  // Two-motif label: presence of motif 0. Balanced (3 of 6 subsets) and
  // linearly recoverable from token counts, which is what keeps the
  // two-motif half solvable by a bag model.
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b)
      f.label2[(1 << a) | (1 << b)] = (a == 0 || b == 0) ? 1 : 0;
  f.label3[0b0111] = 0;
  f.label3[0b1011] = 1;
  f.label3[0b1101] = 1;
  f.label3[0b1110] = 0;
  return f;
}

// Canonical structure of a motif set, surface-independent.
inline float structural_jaccard(const MotifFamily& f1, const MotifFamily& f2) {
  std::set<std::tuple<int, int, int, int, int>> s1, s2;
  for (const auto& m : f1.motifs) s1.insert(m.canonical());
  for (const auto& m : f2.motifs) s2.insert(m.canonical());
  int inter = 0;
  for (const auto& c : s1) inter += s2.count(c) ? 1 : 0;
  const int uni = static_cast<int>(s1.size() + s2.size()) - inter;
  return uni == 0 ? 1.0f : static_cast<float>(inter) / static_cast<float>(uni);
}

// ---------------------------------------------------------------------------
// Surfaces. Each surface is a random bijection roles -> token ids; surfaces
// of the same family are pairwise deranged (no role keeps its token), so
// nothing of the surface survives a re-mapping.

namespace detail {

inline SurfaceMapping random_surface(RngStream r, uint64_t seed_tag) {
  SurfaceMapping s;
  s.seed = seed_tag;
  std::vector<int> tokens(32);
  for (int i = 0; i < 32; ++i) tokens[static_cast<size_t>(i)] = i + 1;
  r.shuffle(tokens);
  for (int i = 0; i < 32; ++i) s.token_of_role[static_cast<size_t>(i)] = tokens[static_cast<size_t>(i)];
  return s;
}

inline bool deranged(const SurfaceMapping& a, const SurfaceMapping& b) {
  for (int i = 0; i < 32; ++i)
    if (a.token_of_role[static_cast<size_t>(i)] == b.token_of_role[static_cast<size_t>(i)]) return false;
  return true;
}

}  // namespace detail

// Surfaces indexed 0..count-1 for one family, pairwise deranged.
inline std::vector<SurfaceMapping> make_surfaces(uint64_t global_seed, char family_id, int count) {
  std::vector<SurfaceMapping> out;
  RngStream fam = RngStream::from(global_seed, std::string("surface.") + family_id);
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      SurfaceMapping cand = detail::random_surface(
          fam.derive("perm", static_cast<uint64_t>(i) * 1000 + attempt),
          static_cast<uint64_t>(i));
      bool ok = true;
      for (const auto& prev : out) ok = ok && detail::deranged(cand, prev);
      if (ok) {
        out.push_back(cand);
        break;
      }
    }
    if (out.size() != static_cast<size_t>(i) + 1)
      throw GenerationError("make_surfaces: no deranged permutation found");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task stream: the six tasks every experiment draws from. A1/A1'/A2/A3 share
// family A under four different surfaces; B1 and C1 are the other families.

struct TaskStream {
  TaskSpec A1, A1p, A2, A3, B1, C1;
  const TaskSpec& by_name(const std::string& name) const {
    if (name == "A1") return A1;
    if (name == "A1p") return A1p;
    if (name == "A2") return A2;
    if (name == "A3") return A3;
    if (name == "B1") return B1;
    if (name == "C1") return C1;
    throw std::invalid_argument("unknown task name: " + name);
  }
};

inline TaskStream build_task_stream(uint64_t global_seed) {
  auto spec = [&](const std::string& name, char fam, const SurfaceMapping& surf) {
    TaskSpec s;
    s.name = name;
    s.family = make_family(fam);
    s.surface = surf;
    s.seed = RngStream::from(global_seed, "task." + name).next_u64();
    return s;
  };
  auto a = make_surfaces(global_seed, 'A', 4);
  auto b = make_surfaces(global_seed, 'B', 1);
  auto c = make_surfaces(global_seed, 'C', 1);
  TaskStream ts;
  ts.A1 = spec("A1", 'A', a[0]);
  ts.A1p = spec("A1p", 'A', a[1]);
  ts.A2 = spec("A2", 'A', a[2]);
  ts.A3 = spec("A3", 'A', a[3]);
  ts.B1 = spec("B1", 'B', b[0]);
  ts.C1 = spec("C1", 'C', c[0]);
  return ts;
}

// ---------------------------------------------------------------------------
// Generation. Pure function of the spec; every sample derives its own stream,
// so samples are independent of each other's consumption.

namespace detail {

struct PlacedSample {
  std::vector<uint8_t> tokens;
  int label = 0;
  std::vector<int> positions;
};

inline PlacedSample generate_sample(const TaskSpec& spec, RngStream rs) {
  const MotifFamily& fam = spec.family;
  PlacedSample out;
  out.tokens.resize(static_cast<size_t>(spec.seq_len));

  // Noise background: roles 6..31 only, so noise can never fake a motif token.
  RngStream noise = rs.derive("noise");
  for (int i = 0; i < spec.seq_len; ++i) {
    const int role = 6 + noise.uniform_int(26);
    out.tokens[static_cast<size_t>(i)] = static_cast<uint8_t>(spec.surface.token_of_role[static_cast<size_t>(role)]);
  }

  // Choose the motif subset: 2 or 3 motifs, uniform over subsets of that size.
  RngStream pick = rs.derive("pick");
  const int count = pick.next_float() < 0.5f ? 2 : 3;
  std::vector<int> subsets;
  for (int mask = 0; mask < 16; ++mask)
    if (__builtin_popcount(static_cast<unsigned>(mask)) == count) subsets.push_back(mask);
  const int mask = subsets[static_cast<size_t>(pick.uniform_int(static_cast<int>(subsets.size())))];
  std::vector<int> chosen;
  for (int i = 0; i < 4; ++i)
    if (mask & (1 << i)) chosen.push_back(i);

  // Sample non-colliding start positions inside the family window, then
  // assign motifs to starts by a uniform permutation. The uniform assignment
  // is what makes the planting-order bit exactly balanced.
  RngStream place = rs.derive("place");
  std::set<int> occupied;
  std::vector<int> starts;
  int max_extent = 0;
  for (int mi : chosen) max_extent = std::max(max_extent, fam.motifs[static_cast<size_t>(mi)].extent());
  const int start_span = fam.window_hi - max_extent - fam.window_lo + 1;
  if (start_span <= 0) throw GenerationError("generate: window cannot hold motif");
  for (size_t k = 0; k < chosen.size(); ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const int s = fam.window_lo + place.uniform_int(start_span);
      // Reserve the maximal footprint so any motif can sit at any start.
      bool free = true;
      for (int off = 0; off < max_extent; ++off) free = free && !occupied.count(s + off);
      if (free) {
        for (int off = 0; off < max_extent; ++off) occupied.insert(s + off);
        starts.push_back(s);
        placed = true;
      }
    }
    if (!placed) throw GenerationError("generate: motif placement collision persisted");
  }
  std::vector<int> order(chosen.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  place.shuffle(order);  // motif chosen[i] goes to starts[order[i]]

  std::vector<int> start_of_motif(chosen.size());
  for (size_t i = 0; i < chosen.size(); ++i) start_of_motif[i] = starts[static_cast<size_t>(order[i])];

  for (size_t i = 0; i < chosen.size(); ++i) {
    const Motif& m = fam.motifs[static_cast<size_t>(chosen[i])];
    const int s = start_of_motif[i];
    const int pos[3] = {s, s + m.gap1, s + m.gap1 + m.gap2};
    for (int t = 0; t < 3; ++t) {
      out.tokens[static_cast<size_t>(pos[t])] =
          static_cast<uint8_t>(spec.surface.token_of_role[static_cast<size_t>(m.roles[static_cast<size_t>(t)])]);
      out.positions.push_back(pos[t]);
    }
  }

  // Label. chosen is sorted, so chosen[0]/chosen[1] are the two lowest ids.
  const int order_bit = start_of_motif[0] < start_of_motif[1] ? 1 : 0;
  if (count == 2) {
    out.label = fam.label2.at(mask);
  } else {
    out.label = fam.label3.at(mask) ^ order_bit;
  }

  // Corruption: each motif token independently becomes a random noise token.
  if (spec.noise_level > 0.0f) {
    RngStream corrupt = rs.derive("corrupt");
    for (int p : out.positions) {
      if (corrupt.next_float() < spec.noise_level) {
        const int role = 6 + corrupt.uniform_int(26);
        out.tokens[static_cast<size_t>(p)] =
            static_cast<uint8_t>(spec.surface.token_of_role[static_cast<size_t>(role)]);
      }
    }
  }
  return out;
}

}  // namespace detail

// One split. Splits are balance-enforced: if the majority class exceeds 54%,
// the whole split regenerates under a bumped sub-seed (deterministically), so
// downstream majority-baseline checks hold for every seed.
inline Dataset generate_split(const TaskSpec& spec, int n, const std::string& split) {
  RngStream root = RngStream::from(spec.seed, "gen." + split);
  for (int round = 0; round < 50; ++round) {
    Dataset d;
    d.n = n;
    d.seq_len = spec.seq_len;
    d.vocab = spec.vocab;
    d.tokens.reserve(static_cast<size_t>(n) * spec.seq_len);
    int ones = 0;
    for (int i = 0; i < n; ++i) {
      auto s = detail::generate_sample(spec, root.derive("sample", static_cast<uint64_t>(round) << 32 | static_cast<uint32_t>(i)));
      d.tokens.insert(d.tokens.end(), s.tokens.begin(), s.tokens.end());
      d.labels.push_back(static_cast<uint8_t>(s.label));
      d.motif_positions.push_back(std::move(s.positions));
      ones += s.label;
    }
    const float frac = static_cast<float>(ones) / static_cast<float>(n);
    if (frac >= 0.46f && frac <= 0.54f) return d;
  }
  throw GenerationError("generate_split: balance enforcement failed");
}

inline std::pair<Dataset, Dataset> generate(const TaskSpec& spec) {
  return {generate_split(spec, spec.n_train, "train"), generate_split(spec, spec.n_val, "val")};
}

// ---------------------------------------------------------------------------
// Persistence: <stem>.bin holds tokens then labels as bytes; <stem>.json
// echoes the spec and carries a checksum. Datasets are regenerable from the
// spec, so the files are a cache, not a source of truth.

inline void save_dataset(const std::string& stem, const TaskSpec& spec, const Dataset& d) {
  std::ofstream bin(stem + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("save_dataset: cannot open " + stem + ".bin");
  bin.write(reinterpret_cast<const char*>(d.tokens.data()), static_cast<std::streamsize>(d.tokens.size()));
  bin.write(reinterpret_cast<const char*>(d.labels.data()), static_cast<std::streamsize>(d.labels.size()));
  uint32_t crc = static_cast<uint32_t>(crc32(0, d.tokens.data(), static_cast<uInt>(d.tokens.size())));
  crc = static_cast<uint32_t>(crc32(crc, d.labels.data(), static_cast<uInt>(d.labels.size())));
  nlohmann::json j = {
      {"task", spec.name},
      {"family", std::string(1, spec.family.id)},
      {"surface", std::vector<int>(spec.surface.token_of_role.begin(), spec.surface.token_of_role.end())},
      {"n", d.n},
      {"seq_len", d.seq_len},
      {"vocab", d.vocab},
      {"noise_level", spec.noise_level},
      {"seed", spec.seed},
      {"crc32", crc},
  };
  std::ofstream side(stem + ".json", std::ios::trunc);
  side << j.dump(2) << "\n";
  if (!side) throw std::runtime_error("save_dataset: cannot write " + stem + ".json");
}

inline Dataset load_dataset(const std::string& stem) {
  std::ifstream side(stem + ".json");
  if (!side) throw std::runtime_error("load_dataset: missing sidecar " + stem + ".json");
  nlohmann::json j = nlohmann::json::parse(side, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("load_dataset: unparseable sidecar " + stem + ".json");
  Dataset d;
  d.n = j.at("n").get<int>();
  d.seq_len = j.at("seq_len").get<int>();
  d.vocab = j.at("vocab").get<int>();
  d.tokens.resize(static_cast<size_t>(d.n) * d.seq_len);
  d.labels.resize(static_cast<size_t>(d.n));
  std::ifstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("load_dataset: missing " + stem + ".bin");
  bin.read(reinterpret_cast<char*>(d.tokens.data()), static_cast<std::streamsize>(d.tokens.size()));
  bin.read(reinterpret_cast<char*>(d.labels.data()), static_cast<std::streamsize>(d.labels.size()));
  if (!bin) throw std::runtime_error("load_dataset: truncated " + stem + ".bin");
  uint32_t crc = static_cast<uint32_t>(crc32(0, d.tokens.data(), static_cast<uInt>(d.tokens.size())));
  crc = static_cast<uint32_t>(crc32(crc, d.labels.data(), static_cast<uInt>(d.labels.size())));
  if (crc != j.at("crc32").get<uint32_t>())
    throw std::runtime_error("load_dataset: checksum mismatch for " + stem);
  return d;
}

// Re-express a dataset generated under one surface through another surface of
// the same family (tokens pass through role space: inverse then forward).
inline Dataset relabel_surface(const Dataset& d, const SurfaceMapping& from, const SurfaceMapping& to) {
  std::array<int, 33> role_of_token{};
  for (int role = 0; role < 32; ++role) role_of_token[static_cast<size_t>(from.token_of_role[static_cast<size_t>(role)])] = role;
  Dataset out = d;
  for (auto& t : out.tokens)
    t = static_cast<uint8_t>(to.token_of_role[static_cast<size_t>(role_of_token[t])]);
  return out;
}

}  // namespace dppn
