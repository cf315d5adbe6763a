#pragma once
// Experiment protocol: source training with per-step pheromone deposits,
// weight-reset transfer under the warm/cold condition family, pattern
// harvesting for the completion priors, and the distillation pipeline that
// fuses two single-task fields after slot alignment. Every run is a pure
// function of its cell key: all randomness flows from named substreams of
// the experiment seed, so re-running a cell reproduces it bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "dppn/alignment.hpp"
#include "dppn/checkpoint.hpp"
#include "dppn/completion.hpp"
#include "dppn/decomposition.hpp"
#include "dppn/metrics.hpp"
#include "dppn/model.hpp"
#include "dppn/optim.hpp"
#include "dppn/pheromone.hpp"
#include "dppn/rng.hpp"
#include "dppn/store.hpp"
#include "dppn/taskgen.hpp"

namespace dppn {

// Loss went non-finite; the run is unusable and the caller should abort
// with a numeric-failure exit, not record a result.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HarnessConfig {
  ModelConfig model;          // architecture + optimizer knobs; variant set per run
  PheromoneConfig pheromone;  // update-cascade knobs for fresh fields
  int source_epochs = 80;
  int transfer_epochs = 50;
  int batch_size = 64;
  uint64_t task_stream_seed = 101;
  std::vector<int> snapshot_epochs = {0, 5, 10, 20, 30, 50, 79};
  int probe_samples = 256;    // alignment probe size (samples of A1)
  int reduce_rank = 4;
  int completion_epochs = 60;
  int completion_batch = 64;
  float completion_mask = 0.5f;
  int max_patterns = 2048;
  int n_train = -1;           // > 0 overrides the task spec (desk-scale pilots)
  int n_val = -1;
};

// Does this variant read or write a pheromone field at all? Routed variants
// and the decomposition deposit; the meta-LR variant only reads.
inline bool variant_uses_field(Variant v) {
  return variant_routes(v) || v == Variant::decomposition || v == Variant::dppn_metalr;
}

inline std::pair<int, int> field_dims(const ModelConfig& c) {
  if (c.variant == Variant::decomposition) return {c.clusters, c.strategies};
  return {c.m, c.m};
}

inline uint32_t value_crc(const std::vector<float>& v) {
  return static_cast<uint32_t>(
      crc32(0u, reinterpret_cast<const Bytef*>(v.data()), static_cast<uInt>(v.size() * sizeof(float))));
}

inline uint32_t param_crc(const ParamMap& params) {
  uLong c = 0;
  for (const auto& [name, t] : params) {
    c = crc32(c, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    c = crc32(c, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(t.numel() * sizeof(float)));
  }
  return static_cast<uint32_t>(c);
}

// ---------------------------------------------------------------------------
// Batching and the two inner loops.

inline Batch slice_batch(const Dataset& d, const std::vector<int>& order, int start, int B) {
  Batch b;
  b.B = B;
  b.N = d.seq_len;
  b.tokens.resize(static_cast<size_t>(B) * d.seq_len);
  b.labels.resize(static_cast<size_t>(B));
  for (int i = 0; i < B; ++i) {
    const int s = order[static_cast<size_t>(start + i)];
    for (int j = 0; j < d.seq_len; ++j)
      b.tokens[static_cast<size_t>(i) * d.seq_len + j] =
          d.tokens[static_cast<size_t>(s) * d.seq_len + j];
    b.labels[static_cast<size_t>(i)] = d.labels[static_cast<size_t>(s)];
  }
  return b;
}

struct StepOut {
  float loss = 0.0f;
  int correct = 0;
};

// One optimizer step: forward, divergence guard, backward, AdamW, model
// bookkeeping, then one pheromone cascade step from this batch's route
// preferences (when the variant produced any).
inline StepOut train_step(ModelBase& model, AdamW& opt, const Batch& batch,
                          const ForwardOptions& opts, PheromoneField* field) {
  Tape tape;
  ForwardResult res = model.forward(tape, batch, opts);
  StepOut out;
  out.loss = res.loss.data()[0];
  if (!std::isfinite(out.loss)) throw DivergenceError("training loss is not finite");
  opt.zero_grad(model.params());
  tape.backward(res.loss);
  opt.step(model.params());
  model.post_step(res);
  if (field && !res.routing.route.empty()) {
    const size_t n = static_cast<size_t>(res.routing.rows) * res.routing.cols;
    std::vector<RoutePreference> prefs(static_cast<size_t>(batch.B));
    for (int b = 0; b < batch.B; ++b) {
      auto begin = res.routing.route.begin() + static_cast<int64_t>(b) * static_cast<int64_t>(n);
      prefs[static_cast<size_t>(b)].p.assign(begin, begin + static_cast<int64_t>(n));
      prefs[static_cast<size_t>(b)].correct = res.correct[static_cast<size_t>(b)] != 0;
    }
    field->step(prefs);
  }
  for (uint8_t c : res.correct) out.correct += c;
  return out;
}

// Full-split accuracy in eval mode (remainder batch included).
inline float evaluate(ModelBase& model, const Dataset& val, ForwardOptions opts, int batch_size) {
  opts.training = false;
  std::vector<int> order(static_cast<size_t>(val.n));
  std::iota(order.begin(), order.end(), 0);
  int correct = 0;
  for (int start = 0; start < val.n; start += batch_size) {
    const int B = std::min(batch_size, val.n - start);
    Batch b = slice_batch(val, order, start, B);
    Tape tape;
    tape.set_recording(false);
    ForwardResult res = model.forward(tape, b, opts);
    for (uint8_t c : res.correct) correct += c;
  }
  return static_cast<float>(correct) / static_cast<float>(val.n);
}

// ---------------------------------------------------------------------------
// Cell naming.

inline std::string join_tasks(const std::vector<std::string>& tasks) {
  std::string s;
  for (size_t i = 0; i < tasks.size(); ++i) s += (i ? "+" : "") + tasks[i];
  return s;
}

inline CellKey source_key(Variant v, const std::vector<std::string>& tasks, uint64_t seed) {
  CellKey k;
  k.variant = variant_name(v);
  k.condition = tasks.size() > 1 ? "source_joint" : "source_single";
  k.target = join_tasks(tasks);
  k.seed = seed;
  return k;
}

inline CellKey transfer_key(Variant v, const std::string& condition, const std::string& target,
                            uint64_t seed) {
  CellKey k;
  k.variant = variant_name(v);
  k.condition = condition;
  k.target = target;
  k.seed = seed;
  return k;
}

inline const std::vector<std::string>& transfer_targets() {
  static const std::vector<std::string> t = {"A2", "A3", "B1", "C1"};
  return t;
}

// Conditions a variant admits at transfer time. The dense and frozen-mask
// baselines have no field, so warm versus cold is meaningless for them; the
// completion variants contrast trained against untrained priors instead of
// warm against cold fields; the meta-LR variant reads a raw field only.
inline std::vector<std::string> allowed_conditions(Variant v) {
  switch (v) {
    case Variant::transformer:
    case Variant::random_sparse:
      return {"cold"};
    case Variant::dppn_metalr:
      return {"cold", "warm_raw"};
    case Variant::dppn_completion_learnedA:
    case Variant::dppn_completion_extrinsicP:
      return {"prior_trained", "prior_random"};
    default:
      return {"cold", "warm_raw", "warm_distilled", "warm_rank_reduced"};
  }
}

inline void check_condition(Variant v, const std::string& condition) {
  auto ok = allowed_conditions(v);
  if (std::find(ok.begin(), ok.end(), condition) == ok.end())
    throw std::invalid_argument("condition '" + condition + "' is not defined for variant " +
                                variant_name(v));
}

// ---------------------------------------------------------------------------
// Pattern harvesting for the completion priors.

// Routing patterns from correctly predicted samples, flattened m*m each.
// extrinsic=false captures each layer's agreement matrix through an
// identity-blend hook (alpha 0.5 with C == A leaves the forward unchanged);
// extrinsic=true captures the weight-free token-equality projection, one
// pattern per sample.
inline std::vector<float> collect_patterns(Model& model, const Dataset& data,
                                           const PheromoneField& field, bool extrinsic, int cap,
                                           int batch_size) {
  const int m = model.config().m;
  const size_t n = static_cast<size_t>(m) * m;
  std::vector<int> order(static_cast<size_t>(data.n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<float> out;
  for (int start = 0; start < data.n && static_cast<int>(out.size() / n) < cap;
       start += batch_size) {
    const int B = std::min(batch_size, data.n - start);
    Batch b = slice_batch(data, order, start, B);
    std::vector<std::vector<float>> captured;
    CompletionContext ctx;
    ctx.alpha = 0.5f;
    ctx.use_extrinsic = extrinsic;
    ctx.complete_batch = [&captured](const std::vector<float>& pats, int) {
      captured.push_back(pats);
      return pats;
    };
    ForwardOptions o;
    o.field = &field;
    o.completion = &ctx;
    Tape tape;
    tape.set_recording(false);
    ForwardResult res = model.forward(tape, b, o);
    for (int i = 0; i < B; ++i) {
      if (!res.correct[static_cast<size_t>(i)]) continue;
      for (const auto& block : captured) {
        if (static_cast<int>(out.size() / n) >= cap) break;
        out.insert(out.end(), block.begin() + static_cast<int64_t>(i) * static_cast<int64_t>(n),
                   block.begin() + static_cast<int64_t>(i + 1) * static_cast<int64_t>(n));
      }
    }
  }
  return out;
}

inline void save_patterns(const std::string& path, const std::vector<float>& patterns, int m) {
  const int n = m * m;
  const int count = static_cast<int>(patterns.size()) / n;
  ParamMap pm;
  pm.emplace_back("patterns", Tensor::from({count, n}, patterns));
  save_tensors(path, pm);
}

inline std::vector<float> load_patterns(const std::string& path) {
  ParamMap pm = load_tensors(path);
  if (pm.size() != 1 || pm[0].first != "patterns")
    throw std::runtime_error("load_patterns: not a pattern file: " + path);
  return pm[0].second.values();
}

// ---------------------------------------------------------------------------
// Source training.

inline nlohmann::json train_source(Variant v, const std::vector<std::string>& tasks, uint64_t seed,
                                   const HarnessConfig& hc, const ResultsStore& store) {
  if (!variant_uses_field(v) || v == Variant::dppn_metalr)
    throw std::invalid_argument(std::string("train_source: variant ") + variant_name(v) +
                                " has no depositing source phase");
  if (tasks.empty() || tasks.size() > 2)
    throw std::invalid_argument("train_source: expected one or two tasks");

  ModelConfig cfg = hc.model;
  cfg.variant = v;
  const CellKey key = source_key(v, tasks, seed);
  const std::filesystem::path art = store.artifact_dir(key);
  std::filesystem::create_directories(art);

  TaskStream ts = build_task_stream(hc.task_stream_seed);
  std::vector<Dataset> train, val;
  for (const auto& name : tasks) {
    TaskSpec spec = ts.by_name(name);
    if (hc.n_train > 0) spec.n_train = hc.n_train;
    if (hc.n_val > 0) spec.n_val = hc.n_val;
    spec.seq_len = cfg.seq_len;
    spec.vocab = cfg.vocab;
    auto [tr, va] = generate(spec);
    train.push_back(std::move(tr));
    val.push_back(std::move(va));
  }

  const uint64_t init_seed = RngStream::from(seed, "source.init").next_u64();
  std::unique_ptr<ModelBase> model = build_model(cfg, init_seed);
  AdamW opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;

  auto [rows, cols] = field_dims(cfg);
  PheromoneField field(rows, cols, hc.pheromone);

  const int E = hc.source_epochs;
  const int B = hc.batch_size;
  int steps = train[0].n / B;
  for (const auto& d : train) steps = std::min(steps, d.n / B);
  if (steps == 0) throw std::invalid_argument("train_source: batch size exceeds dataset");

  RngStream order_rng = RngStream::from(seed, "source.order");
  nlohmann::json doc;
  doc["status"] = "running";
  doc["kind"] = "source";
  doc["tasks"] = tasks;
  doc["epochs"] = E;
  doc["batch_size"] = B;
  doc["task_stream_seed"] = hc.task_stream_seed;
  doc["init_seed"] = init_seed;

  std::vector<float> loss_series, train_acc_series, val_series;
  std::vector<std::vector<float>> val_per_task(tasks.size());
  std::vector<float> entropy_series, stddev_series;
  std::vector<int> high_series;
  entropy_series.push_back(static_cast<float>(field.entropy()));
  stddev_series.push_back(field.stats().stddev);
  high_series.push_back(field.stats().high_count);

  auto snapshot = [&](int epoch) {
    save_field((art / ("field_ep" + std::to_string(epoch) + ".phero")).string(), field, key.id());
  };

  for (int t = 0; t < E; ++t) {
    const float phase = static_cast<float>(t + 1) / static_cast<float>(E);
    std::vector<std::vector<int>> orders(tasks.size());
    for (size_t k = 0; k < tasks.size(); ++k) {
      orders[k].resize(static_cast<size_t>(train[k].n));
      std::iota(orders[k].begin(), orders[k].end(), 0);
      order_rng.shuffle(orders[k]);
    }
    double loss_sum = 0.0;
    int correct = 0, seen = 0;
    ForwardOptions o;
    o.training = true;
    o.phase = phase;
    o.field = &field;
    // Strict alternation: one batch of each task per step, tasks in order.
    for (int s = 0; s < steps; ++s)
      for (size_t k = 0; k < tasks.size(); ++k) {
        Batch batch = slice_batch(train[k], orders[k], s * B, B);
        StepOut so = train_step(*model, opt, batch, o, &field);
        loss_sum += so.loss;
        correct += so.correct;
        seen += B;
      }
    loss_series.push_back(static_cast<float>(loss_sum / (steps * tasks.size())));
    train_acc_series.push_back(static_cast<float>(correct) / static_cast<float>(seen));

    float va = 0.0f;
    for (size_t k = 0; k < tasks.size(); ++k) {
      const float a = evaluate(*model, val[k], o, B);
      val_per_task[k].push_back(a);
      va += a;
    }
    val_series.push_back(va / static_cast<float>(tasks.size()));
    entropy_series.push_back(static_cast<float>(field.entropy()));
    stddev_series.push_back(field.stats().stddev);
    high_series.push_back(field.stats().high_count);
    if (std::find(hc.snapshot_epochs.begin(), hc.snapshot_epochs.end(), t) !=
        hc.snapshot_epochs.end())
      snapshot(t);
  }

  save_tensors((art / "weights.bin").string(), model->params());
  save_field((art / "field_final.phero").string(), field, key.id());
  doc["artifacts"]["weights"] = (art / "weights.bin").string();
  doc["artifacts"]["field_final"] = (art / "field_final.phero").string();
  doc["field_crc"] = value_crc(field.values());
  doc["param_crc"] = param_crc(model->params());

  // Alignment profile over the shared probe (slot-routed variants only).
  if (auto* routed = dynamic_cast<Model*>(model.get()); routed && variant_routes(v)) {
    TaskSpec probe_spec = ts.A1;
    probe_spec.seq_len = cfg.seq_len;
    probe_spec.vocab = cfg.vocab;
    Dataset probe = generate_split(probe_spec, hc.probe_samples, "probe");
    AssignmentProfile prof = collect_profile(*routed, probe, B);
    save_profile((art / "profile.json").string(), prof);
    doc["artifacts"]["profile"] = (art / "profile.json").string();
  }

  // The completion priors train on this variant's harvested patterns.
  if (v == Variant::dppn_fourier_pos && tasks.size() > 1) {
    auto* routed = dynamic_cast<Model*>(model.get());
    std::vector<float> pats_a, pats_p;
    for (const auto& d : train) {
      const int room = hc.max_patterns;
      if (static_cast<int>(pats_a.size()) / (cfg.m * cfg.m) < room) {
        auto more = collect_patterns(*routed, d, field, false, room, B);
        pats_a.insert(pats_a.end(), more.begin(), more.end());
      }
      if (static_cast<int>(pats_p.size()) / (cfg.m * cfg.m) < room) {
        auto more = collect_patterns(*routed, d, field, true, room, B);
        pats_p.insert(pats_p.end(), more.begin(), more.end());
      }
    }
    const size_t limit = static_cast<size_t>(hc.max_patterns) * cfg.m * cfg.m;
    if (pats_a.size() > limit) pats_a.resize(limit);
    if (pats_p.size() > limit) pats_p.resize(limit);
    save_patterns((art / "patterns_A.bin").string(), pats_a, cfg.m);
    save_patterns((art / "patterns_P.bin").string(), pats_p, cfg.m);
    doc["artifacts"]["patterns_A"] = (art / "patterns_A.bin").string();
    doc["artifacts"]["patterns_P"] = (art / "patterns_P.bin").string();
    doc["pattern_counts"] = {static_cast<int>(pats_a.size()) / (cfg.m * cfg.m),
                             static_cast<int>(pats_p.size()) / (cfg.m * cfg.m)};
  }

  doc["curve"]["train_loss"] = loss_series;
  doc["curve"]["train_acc"] = train_acc_series;
  doc["curve"]["val_acc"] = val_series;
  for (size_t k = 0; k < tasks.size(); ++k)
    doc["curve"]["val_acc_" + tasks[k]] = val_per_task[k];
  doc["field"]["entropy"] = entropy_series;
  doc["field"]["stddev"] = stddev_series;
  doc["field"]["high_count"] = high_series;
  doc["metrics"]["final_val_acc"] = val_series.back();
  doc["metrics"]["aulc"] = aulc(val_series);
  doc["status"] = "done";
  store.save(key, doc);
  return doc;
}

// ---------------------------------------------------------------------------
// Field preparation for the warm conditions.

struct DistillOutcome {
  PheromoneField field;
  AlignmentResult alignment;
};

// Two single-task source fields fused after undoing the slot relabeling:
// the second run's field is carried into the first run's coordinates by the
// matched permutation, then the element-wise minimum keeps what both runs
// reinforced.
inline DistillOutcome distilled_from_singles(Variant v, uint64_t seed, const HarnessConfig& hc,
                                             const ResultsStore& store) {
  const CellKey k1 = source_key(v, {"A1"}, seed);
  const CellKey k2 = source_key(v, {"A1p"}, seed);
  auto [rows, cols] = field_dims([&] {
    ModelConfig c = hc.model;
    c.variant = v;
    return c;
  }());
  const std::string f1p = (store.artifact_dir(k1) / "field_final.phero").string();
  const std::string f2p = (store.artifact_dir(k2) / "field_final.phero").string();
  PheromoneField f1 = load_field(f1p, rows, cols);
  PheromoneField f2 = load_field(f2p, rows, cols);
  AssignmentProfile p1 = load_profile((store.artifact_dir(k1) / "profile.json").string());
  AssignmentProfile p2 = load_profile((store.artifact_dir(k2) / "profile.json").string());
  AlignmentResult res = align_profiles(p1, p2);
  PheromoneField aligned2 = align_field(f2, res.perm);
  return {distill_min(f1, aligned2), res};
}

// ---------------------------------------------------------------------------
// Transfer.

inline std::shared_ptr<CompletionNet> prepare_completion_net(Variant v, bool trained,
                                                             uint64_t seed,
                                                             const HarnessConfig& hc,
                                                             const ResultsStore& store) {
  const int m = hc.model.m;
  // Both arms start from the same initialization; the contrast is purely
  // whether masked-reconstruction training happened.
  const uint64_t net_seed = RngStream::from(seed, "cmp.init").next_u64();
  auto net = std::make_shared<CompletionNet>(m, net_seed);
  if (!trained) return net;

  const char* suffix = v == Variant::dppn_completion_extrinsicP ? "P" : "A";
  const CellKey src = source_key(Variant::dppn_fourier_pos, {"A1", "A1p"}, seed);
  const std::filesystem::path art = store.artifact_dir(src);
  const std::filesystem::path cache = art / (std::string("completion_net_") + suffix + ".bin");
  if (std::filesystem::exists(cache)) {
    ParamMap saved = load_tensors(cache.string());
    for (auto& [name, t] : net->params()) {
      bool found = false;
      for (const auto& [sn, st] : saved)
        if (sn == name && st.numel() == t.numel()) {
          std::copy(st.data(), st.data() + st.numel(), t.data());
          found = true;
        }
      if (!found) throw std::runtime_error("completion net cache is incompatible: " + cache.string());
    }
    return net;
  }
  const std::filesystem::path pats = art / (std::string("patterns_") + suffix + ".bin");
  if (!std::filesystem::exists(pats))
    throw std::runtime_error("missing source artifact for trained prior: " + pats.string());
  std::vector<float> patterns = load_patterns(pats.string());
  net->train(patterns, hc.completion_epochs, hc.completion_batch, hc.completion_mask,
             RngStream::from(seed, "cmp.train").next_u64());
  save_tensors(cache.string(), net->params());
  return net;
}

inline nlohmann::json run_transfer(Variant v, const std::string& condition,
                                   const std::string& target, uint64_t seed,
                                   const HarnessConfig& hc, const ResultsStore& store) {
  check_condition(v, condition);
  ModelConfig cfg = hc.model;
  cfg.variant = v;
  const CellKey key = transfer_key(v, condition, target, seed);

  TaskStream ts = build_task_stream(hc.task_stream_seed);
  TaskSpec spec = ts.by_name(target);
  if (hc.n_train > 0) spec.n_train = hc.n_train;
  if (hc.n_val > 0) spec.n_val = hc.n_val;
  spec.seq_len = cfg.seq_len;
  spec.vocab = cfg.vocab;
  auto [train, val] = generate(spec);

  nlohmann::json doc;
  doc["kind"] = "transfer";
  doc["epochs"] = hc.transfer_epochs;
  doc["batch_size"] = hc.batch_size;
  doc["task_stream_seed"] = hc.task_stream_seed;

  // Field per condition. The cold and prior conditions build a fresh uniform
  // field and never touch the filesystem; the warm family restores source
  // structure (raw bit-for-bit, distilled, or rank-reduced).
  auto [rows, cols] = field_dims(cfg);
  std::unique_ptr<PheromoneField> field;
  if (condition == "warm_raw") {
    const Variant source_variant =
        v == Variant::dppn_metalr ? Variant::dppn_fourier_pos : v;
    const CellKey src = source_key(source_variant, {"A1", "A1p"}, seed);
    const std::string path = (store.artifact_dir(src) / "field_final.phero").string();
    if (!std::filesystem::exists(path))
      throw std::runtime_error("missing source artifact for warm transfer: " + path);
    field = std::make_unique<PheromoneField>(load_field(path, rows, cols));
    doc["source"]["field"] = path;
    doc["source"]["field_crc"] = value_crc(field->values());
    const nlohmann::json src_doc = store.load(src);
    if (src_doc.contains("field_crc") &&
        src_doc.at("field_crc").get<uint32_t>() != doc["source"]["field_crc"].get<uint32_t>())
      throw std::runtime_error("warm field does not match its source checkpoint bit for bit");
  } else if (condition == "warm_distilled") {
    DistillOutcome d = distilled_from_singles(v, seed, hc, store);
    field = std::make_unique<PheromoneField>(std::move(d.field));
    doc["source"]["alignment_score"] = d.alignment.correlation_score;
  } else if (condition == "warm_rank_reduced") {
    const CellKey src = source_key(v, {"A1", "A1p"}, seed);
    const std::string path = (store.artifact_dir(src) / "field_final.phero").string();
    if (!std::filesystem::exists(path))
      throw std::runtime_error("missing source artifact for warm transfer: " + path);
    field = std::make_unique<PheromoneField>(
        rank_reduce(load_field(path, rows, cols), hc.reduce_rank));
    doc["source"]["field"] = path;
    doc["source"]["rank"] = hc.reduce_rank;
  } else if (variant_uses_field(v)) {
    field = std::make_unique<PheromoneField>(rows, cols, hc.pheromone);
  }

  std::shared_ptr<CompletionNet> net;
  CompletionContext ctx;
  const bool uses_prior = condition == "prior_trained" || condition == "prior_random";
  if (uses_prior) {
    net = prepare_completion_net(v, condition == "prior_trained", seed, hc, store);
    ctx.use_extrinsic = v == Variant::dppn_completion_extrinsicP;
    ctx.complete_batch = [net](const std::vector<float>& pats, int B) {
      return net->complete(pats, B);
    };
  }

  // Fresh weights from a stream the source never used: the reset is total.
  const uint64_t init_seed = RngStream::from(seed, "transfer." + target).next_u64();
  std::unique_ptr<ModelBase> model = build_model(cfg, init_seed);
  doc["init_seed"] = init_seed;
  doc["param_crc"] = param_crc(model->params());

  AdamW opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;

  const int E = hc.transfer_epochs;
  const int B = hc.batch_size;
  const int steps = train.n / B;
  if (steps == 0) throw std::invalid_argument("run_transfer: batch size exceeds dataset");
  RngStream order_rng = RngStream::from(seed, "transfer.order." + target);

  std::vector<float> loss_series, val_series, entropy_series;
  if (field) entropy_series.push_back(static_cast<float>(field->entropy()));

  for (int t = 0; t < E; ++t) {
    const float phase = static_cast<float>(t + 1) / static_cast<float>(E);
    if (uses_prior) ctx.alpha = completion_alpha_at(cfg.completion_alpha, t, cfg.completion_decay_epochs);
    ForwardOptions o;
    o.training = true;
    o.phase = phase;
    o.field = field.get();
    o.completion = uses_prior ? &ctx : nullptr;

    std::vector<int> order(static_cast<size_t>(train.n));
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    for (int s = 0; s < steps; ++s) {
      Batch batch = slice_batch(train, order, s * B, B);
      // The meta-LR field is a frozen prior: its variant produces no route
      // preferences, so nothing deposits and the field stays as loaded.
      StepOut so = train_step(*model, opt, batch, o, field.get());
      loss_sum += so.loss;
    }
    loss_series.push_back(static_cast<float>(loss_sum / steps));
    val_series.push_back(evaluate(*model, val, o, B));
    if (field) entropy_series.push_back(static_cast<float>(field->entropy()));
  }

  doc["curve"]["train_loss"] = loss_series;
  doc["curve"]["val_acc"] = val_series;
  if (field) doc["field"]["entropy"] = entropy_series;
  doc["metrics"]["final_val_acc"] = val_series.back();
  doc["metrics"]["aulc"] = aulc(val_series);
  if (auto e = epochs_to(val_series, 0.70f))
    doc["metrics"]["epochs_to_70"] = *e;
  else
    doc["metrics"]["epochs_to_70"] = nullptr;
  doc["status"] = "done";
  store.save(key, doc);
  return doc;
}

}  // namespace dppn
