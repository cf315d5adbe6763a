#pragma once
// Sweep orchestration: a plan names one variant plus the conditions, targets
// and seeds to cover; the job expander prepends whatever source runs the warm
// conditions need; the runner resumes by skipping any cell the store already
// holds, records failures per cell, and keeps going.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dppn/store.hpp"
#include "dppn/train.hpp"

namespace dppn {

struct ExperimentPlan {
  Variant variant = Variant::dppn_learned;
  std::vector<std::string> conditions = {"cold"};
  std::vector<std::string> targets = {"A2", "B1", "A3", "C1"};
  std::vector<uint64_t> seeds = {42, 137, 256};
  HarnessConfig harness;
};

inline void validate_plan(const ExperimentPlan& plan) {
  if (plan.conditions.empty()) throw std::invalid_argument("plan has no conditions");
  if (plan.targets.empty()) throw std::invalid_argument("plan has no targets");
  if (plan.seeds.empty()) throw std::invalid_argument("plan has no seeds");
  for (const auto& c : plan.conditions) check_condition(plan.variant, c);
  const auto& ok = transfer_targets();
  for (const auto& t : plan.targets)
    if (std::find(ok.begin(), ok.end(), t) == ok.end())
      throw std::invalid_argument("'" + t + "' is not a transfer target (expected one of A2, A3, B1, C1)");
  if (plan.harness.source_epochs <= 0 || plan.harness.transfer_epochs <= 0 ||
      plan.harness.batch_size <= 0)
    throw std::invalid_argument("plan epochs and batch size must be positive");
}

// ---------------------------------------------------------------------------
// Plan files: `key = value` lines, '#' comments, keys named after the model,
// pheromone and protocol knobs.

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

inline void apply_plan_key(ExperimentPlan& plan, const std::string& key, const std::string& value) {
  auto& m = plan.harness.model;
  auto& ph = plan.harness.pheromone;
  auto as_int = [&] { return std::stoi(value); };
  auto as_float = [&] { return std::stof(value); };
  auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };

  if (key == "variant") plan.variant = variant_from_string(value);
  else if (key == "conditions") plan.conditions = detail::split_list(value);
  else if (key == "targets") plan.targets = detail::split_list(value);
  else if (key == "seeds") {
    plan.seeds.clear();
    for (const auto& s : detail::split_list(value))
      plan.seeds.push_back(static_cast<uint64_t>(std::stoull(s)));
  }
  else if (key == "d") m.d = as_int();
  else if (key == "heads") m.heads = as_int();
  else if (key == "layers") m.layers = as_int();
  else if (key == "m") m.m = as_int();
  else if (key == "topk_mask") m.topk_mask = as_int();
  else if (key == "window") m.window = as_int();
  else if (key == "vocab") m.vocab = as_int();
  else if (key == "seq_len") m.seq_len = as_int();
  else if (key == "grouper_temperature") m.grouper_temperature = as_float();
  else if (key == "gumbel_scale") m.gumbel_scale = as_float();
  else if (key == "alpha") m.route_alpha = as_float();
  else if (key == "beta") m.route_beta = as_float();
  else if (key == "dropout") m.dropout = as_float();
  else if (key == "lr") m.lr = as_float();
  else if (key == "weight_decay") m.weight_decay = as_float();
  else if (key == "metalr_lambda") m.metalr_lambda = as_float();
  else if (key == "fourier_seed") m.fourier_seed = as_u64();
  else if (key == "fourier_sigma") m.fourier_sigma = as_float();
  else if (key == "completion_alpha") m.completion_alpha = as_float();
  else if (key == "completion_decay_epochs") m.completion_decay_epochs = as_int();
  else if (key == "regions") m.regions = as_int();
  else if (key == "clusters") m.clusters = as_int();
  else if (key == "strategies") m.strategies = as_int();
  else if (key == "centroid_momentum") m.centroid_momentum = as_float();
  else if (key == "match_temperature") m.match_temperature = as_float();
  else if (key == "tau_min") ph.tau_min = as_float();
  else if (key == "tau_max") ph.tau_max = as_float();
  else if (key == "rho") ph.rho = as_float();
  else if (key == "delta") ph.delta = as_float();
  else if (key == "update_topk") ph.update_topk = as_int();
  else if (key == "source_epochs") plan.harness.source_epochs = as_int();
  else if (key == "transfer_epochs") plan.harness.transfer_epochs = as_int();
  else if (key == "batch_size") plan.harness.batch_size = as_int();
  else if (key == "task_stream_seed") plan.harness.task_stream_seed = as_u64();
  else if (key == "n_train") plan.harness.n_train = as_int();
  else if (key == "n_val") plan.harness.n_val = as_int();
  else if (key == "probe_samples") plan.harness.probe_samples = as_int();
  else if (key == "reduce_rank") plan.harness.reduce_rank = as_int();
  else if (key == "completion_epochs") plan.harness.completion_epochs = as_int();
  else if (key == "completion_batch") plan.harness.completion_batch = as_int();
  else if (key == "completion_mask") plan.harness.completion_mask = as_float();
  else if (key == "max_patterns") plan.harness.max_patterns = as_int();
  else throw std::invalid_argument("unknown plan key: " + key);
}

inline ExperimentPlan parse_plan(const std::string& text) {
  ExperimentPlan plan;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line = line.substr(0, h);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("plan line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      apply_plan_key(plan, key, value);
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception& e) {
      throw std::invalid_argument("plan line " + std::to_string(lineno) + " (" + key + "): " + e.what());
    }
  }
  validate_plan(plan);
  return plan;
}

// ---------------------------------------------------------------------------
// Jobs.

struct SweepJob {
  enum class Kind { source, transfer };
  Kind kind = Kind::transfer;
  Variant variant = Variant::dppn_learned;
  std::vector<std::string> tasks;  // source runs: the task list (joint or single)
  std::string condition, target;   // transfer runs
  uint64_t seed = 0;

  CellKey key() const {
    return kind == Kind::source ? source_key(variant, tasks, seed)
                                : transfer_key(variant, condition, target, seed);
  }
};

inline SweepJob source_job(Variant v, std::vector<std::string> tasks, uint64_t seed) {
  SweepJob j;
  j.kind = SweepJob::Kind::source;
  j.variant = v;
  j.tasks = std::move(tasks);
  j.seed = seed;
  return j;
}

inline SweepJob transfer_job(Variant v, std::string condition, std::string target, uint64_t seed) {
  SweepJob j;
  j.kind = SweepJob::Kind::transfer;
  j.variant = v;
  j.condition = std::move(condition);
  j.target = std::move(target);
  j.seed = seed;
  return j;
}

namespace detail {

inline void push_unique(std::vector<SweepJob>& jobs, const SweepJob& j) {
  const std::string id = j.key().id();
  for (const auto& have : jobs)
    if (have.key().id() == id) return;
  jobs.push_back(j);
}

// Source runs a transfer condition depends on.
inline void push_prereqs(std::vector<SweepJob>& jobs, Variant v, const std::string& condition,
                         uint64_t seed) {
  if (condition == "warm_raw" || condition == "warm_rank_reduced") {
    const Variant sv = v == Variant::dppn_metalr ? Variant::dppn_fourier_pos : v;
    push_unique(jobs, source_job(sv, {"A1", "A1p"}, seed));
  } else if (condition == "warm_distilled") {
    push_unique(jobs, source_job(v, {"A1"}, seed));
    push_unique(jobs, source_job(v, {"A1p"}, seed));
  } else if (condition == "prior_trained") {
    push_unique(jobs, source_job(Variant::dppn_fourier_pos, {"A1", "A1p"}, seed));
  }
}

}  // namespace detail

// Expand a plan into runnable jobs, prerequisites first.
inline std::vector<SweepJob> jobs_for_plan(const ExperimentPlan& plan) {
  validate_plan(plan);
  std::vector<SweepJob> sources, transfers;
  for (uint64_t seed : plan.seeds)
    for (const auto& c : plan.conditions) {
      detail::push_prereqs(sources, plan.variant, c, seed);
      for (const auto& t : plan.targets)
        transfers.push_back(transfer_job(plan.variant, c, t, seed));
    }
  sources.insert(sources.end(), transfers.begin(), transfers.end());
  return sources;
}

// The full run matrix behind the headline comparisons, cheapest-risk first:
// one flagship joint run, the position-routed joints every warm arm builds
// on, the single-task runs the distillation study fuses, the decomposition
// replicates, then the three transfer grids (cold ordering, warm deltas,
// completion priors).
inline std::vector<SweepJob> acceptance_jobs() {
  const std::vector<uint64_t> seeds = {42, 137, 256};
  const std::vector<std::string> targets = transfer_targets();
  std::vector<SweepJob> jobs;
  auto add = [&jobs](const SweepJob& j) { detail::push_unique(jobs, j); };

  add(source_job(Variant::dppn_learned, {"A1", "A1p"}, 42));
  for (uint64_t s : seeds) add(source_job(Variant::dppn_fourier_pos, {"A1", "A1p"}, s));
  for (Variant v : {Variant::dppn_learned, Variant::dppn_fourier_pos, Variant::dppn_fourier_tokpos}) {
    add(source_job(v, {"A1"}, 42));
    add(source_job(v, {"A1p"}, 42));
  }
  for (uint64_t s : seeds) add(source_job(Variant::decomposition, {"A1"}, s));

  for (Variant v : {Variant::dppn_learned, Variant::transformer, Variant::random_sparse})
    for (const auto& t : targets)
      for (uint64_t s : seeds) add(transfer_job(v, "cold", t, s));

  for (Variant v : {Variant::dppn_fourier_pos, Variant::dppn_metalr})
    for (const auto& c : {std::string("cold"), std::string("warm_raw")})
      for (const auto& t : targets)
        for (uint64_t s : seeds) add(transfer_job(v, c, t, s));

  for (const auto& c : {std::string("prior_trained"), std::string("prior_random")})
    for (const auto& t : targets)
      for (uint64_t s : seeds)
        add(transfer_job(Variant::dppn_completion_extrinsicP, c, t, s));

  return jobs;
}

// ---------------------------------------------------------------------------
// Runner.

struct SweepSummary {
  int ran = 0, skipped = 0, failed = 0;
  std::vector<std::string> failures;  // cell ids with their messages
};

inline SweepSummary run_sweep(const std::vector<SweepJob>& jobs, const HarnessConfig& hc,
                              const ResultsStore& store,
                              const std::function<void(const std::string&)>& log = {}) {
  SweepSummary sum;
  for (const auto& job : jobs) {
    const CellKey key = job.key();
    if (store.complete(key)) {
      ++sum.skipped;
      if (log) log("skip " + key.id());
      continue;
    }
    if (log) log("run  " + key.id());
    try {
      if (job.kind == SweepJob::Kind::source)
        train_source(job.variant, job.tasks, job.seed, hc, store);
      else
        run_transfer(job.variant, job.condition, job.target, job.seed, hc, store);
      ++sum.ran;
    } catch (const std::exception& e) {
      // A failed cell is recorded and the sweep moves on; resume re-attempts
      // it because "failed" is not "done".
      ++sum.failed;
      sum.failures.push_back(key.id() + ": " + e.what());
      nlohmann::json doc;
      doc["status"] = "failed";
      doc["error"] = e.what();
      try {
        store.save(key, doc);
      } catch (...) {
      }
      if (log) log("FAIL " + key.id() + ": " + e.what());
    }
  }
  store.write_index_csv();
  return sum;
}

}  // namespace dppn
