// Command-line front end for the transfer experiment harness.
//
// Verbs:
//   generate      sample a synthetic task split and dump it as CSV
//   train-source  run the depositing source phase (joint or single task)
//   transfer      one weight-reset transfer run under a named condition
//   align         match slot identities between the two single-task runs
//   distill       fuse the single-task fields after alignment
//   sweep         run a plan (or the full built-in matrix), resumable
//   report        render tables and figures from the results store
//
// Exit codes: 0 success, 2 bad input or missing artifacts, 3 numeric failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dppn/report.hpp"
#include "dppn/sweep.hpp"

namespace {

dppn::ExperimentPlan load_plan_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open plan file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return dppn::parse_plan(ss.str());
}

std::vector<std::string> split_tasks(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dppn: dual-view pathway network experiment harness"};
  app.require_subcommand(1);

  std::string results_root = dppn::results_root();
  std::string plan_path;
  app.add_option("--results", results_root, "results store root (env DPPN_RESULTS_ROOT)");
  app.add_option("--plan", plan_path, "plan file overriding model and protocol knobs");
  // Let --results/--plan appear after the verb as well as before it.
  app.fallthrough();

  // generate
  auto* g = app.add_subcommand("generate", "sample a task split and print CSV");
  std::string g_task = "A1", g_split = "train", g_out;
  int g_n = 8;
  uint64_t g_stream_seed = 101;
  g->add_option("--task", g_task, "task name (A1, A1p, A2, A3, B1, C1)");
  g->add_option("--split", g_split, "split label mixed into the sampling stream");
  g->add_option("--n", g_n, "number of samples");
  g->add_option("--stream-seed", g_stream_seed, "task stream seed");
  g->add_option("--out", g_out, "output file (default stdout)");

  // train-source
  auto* tsrc = app.add_subcommand("train-source", "depositing source phase");
  std::string s_variant = "dppn_learned", s_tasks = "A1,A1p";
  uint64_t s_seed = 42;
  tsrc->add_option("--variant", s_variant, "model variant");
  tsrc->add_option("--tasks", s_tasks, "comma list: one task (single) or two (joint)");
  tsrc->add_option("--seed", s_seed, "experiment seed");

  // transfer
  auto* tr = app.add_subcommand("transfer", "weight-reset transfer run");
  std::string t_variant = "dppn_learned", t_condition = "cold", t_target = "A2";
  uint64_t t_seed = 42;
  tr->add_option("--variant", t_variant, "model variant");
  tr->add_option("--condition", t_condition,
                 "cold, warm_raw, warm_distilled, warm_rank_reduced, prior_trained, prior_random");
  tr->add_option("--target", t_target, "transfer target (A2, A3, B1, C1)");
  tr->add_option("--seed", t_seed, "experiment seed");

  // align
  auto* al = app.add_subcommand("align", "slot alignment between the single-task runs");
  std::string a_variant = "dppn_fourier_pos";
  uint64_t a_seed = 42;
  al->add_option("--variant", a_variant, "model variant");
  al->add_option("--seed", a_seed, "experiment seed");

  // distill
  auto* di = app.add_subcommand("distill", "aligned element-wise minimum of the single fields");
  std::string d_variant = "dppn_fourier_pos", d_out;
  uint64_t d_seed = 42;
  di->add_option("--variant", d_variant, "model variant");
  di->add_option("--seed", d_seed, "experiment seed");
  di->add_option("--out", d_out, "write the distilled field here (.phero)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "run many cells, skipping completed ones");
  bool sw_full = false, sw_dry = false;
  sw->add_flag("--full", sw_full, "run the built-in acceptance matrix");
  sw->add_flag("--dry-run", sw_dry, "list the jobs without running them");

  // report
  auto* rep = app.add_subcommand("report", "render tables and figures from the store");
  std::string r_out = "report";
  rep->add_option("--out", r_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    dppn::ExperimentPlan plan;
    if (!plan_path.empty()) plan = load_plan_file(plan_path);
    const dppn::HarnessConfig& hc = plan.harness;
    dppn::ResultsStore store(results_root);

    if (g->parsed()) {
      dppn::TaskStream ts = dppn::build_task_stream(g_stream_seed);
      dppn::TaskSpec spec = ts.by_name(g_task);
      dppn::Dataset d = dppn::generate_split(spec, g_n, g_split);
      std::ostringstream out;
      out << "label,tokens\n";
      for (int i = 0; i < d.n; ++i) {
        out << static_cast<int>(d.labels[static_cast<size_t>(i)]) << ",";
        for (int j = 0; j < d.seq_len; ++j)
          out << (j ? " " : "")
              << static_cast<int>(d.tokens[static_cast<size_t>(i) * d.seq_len + j]);
        out << "\n";
      }
      if (g_out.empty()) {
        std::cout << out.str();
      } else {
        std::ofstream f(g_out, std::ios::trunc);
        if (!f) throw std::invalid_argument("cannot write " + g_out);
        f << out.str();
      }
      return 0;
    }

    if (tsrc->parsed()) {
      const dppn::Variant v = dppn::variant_from_string(s_variant);
      auto doc = dppn::train_source(v, split_tasks(s_tasks), s_seed, hc, store);
      std::cout << "done: final_val_acc=" << doc["metrics"]["final_val_acc"]
                << " aulc=" << doc["metrics"]["aulc"]
                << " entropy=" << doc["field"]["entropy"].back() << "\n";
      return 0;
    }

    if (tr->parsed()) {
      const dppn::Variant v = dppn::variant_from_string(t_variant);
      auto doc = dppn::run_transfer(v, t_condition, t_target, t_seed, hc, store);
      std::cout << "done: final_val_acc=" << doc["metrics"]["final_val_acc"]
                << " aulc=" << doc["metrics"]["aulc"]
                << " epochs_to_70=" << doc["metrics"]["epochs_to_70"] << "\n";
      return 0;
    }

    if (al->parsed()) {
      const dppn::Variant v = dppn::variant_from_string(a_variant);
      const dppn::CellKey k1 = dppn::source_key(v, {"A1"}, a_seed);
      const dppn::CellKey k2 = dppn::source_key(v, {"A1p"}, a_seed);
      auto p1 = dppn::load_profile((store.artifact_dir(k1) / "profile.json").string());
      auto p2 = dppn::load_profile((store.artifact_dir(k2) / "profile.json").string());
      auto res = dppn::align_profiles(p1, p2);
      std::cout << "correlation_score=" << res.correlation_score << " chance=" << res.chance
                << "\nperm=";
      for (size_t i = 0; i < res.perm.size(); ++i) std::cout << (i ? "," : "") << res.perm[i];
      std::cout << "\n";
      return 0;
    }

    if (di->parsed()) {
      const dppn::Variant v = dppn::variant_from_string(d_variant);
      dppn::DistillOutcome d = dppn::distilled_from_singles(v, d_seed, hc, store);
      const auto st = d.field.stats();
      std::cout << "alignment_score=" << d.alignment.correlation_score
                << " survivors=" << st.high_count << " stddev=" << st.stddev << "\n";
      if (!d_out.empty()) dppn::save_field(d_out, d.field);
      return 0;
    }

    if (sw->parsed()) {
      std::vector<dppn::SweepJob> jobs;
      if (sw_full) {
        jobs = dppn::acceptance_jobs();
      } else if (!plan_path.empty()) {
        jobs = dppn::jobs_for_plan(plan);
      } else {
        throw std::invalid_argument("sweep needs --plan or --full");
      }
      if (sw_dry) {
        for (const auto& j : jobs) std::cout << j.key().id() << "\n";
        return 0;
      }
      auto log = [](const std::string& line) {
        std::cout << line << std::endl;  // flush per cell: sweeps run for hours
      };
      dppn::SweepSummary sum = dppn::run_sweep(jobs, hc, store, log);
      std::cout << "sweep: ran=" << sum.ran << " skipped=" << sum.skipped
                << " failed=" << sum.failed << "\n";
      for (const auto& f : sum.failures) std::cout << "  failed " << f << "\n";
      return sum.failed == 0 ? 0 : 3;
    }

    if (rep->parsed()) {
      dppn::ReportPaths rp = dppn::write_report(store, hc, r_out);
      std::cout << "report: " << rp.written.size() << " files in " << rp.dir.string() << "\n";
      return 0;
    }
  } catch (const dppn::DivergenceError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
