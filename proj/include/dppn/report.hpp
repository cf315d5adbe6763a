#pragma once
// Report generation over a results store: summary tables (CSV + markdown),
// paired transfer deltas with family shading, pheromone heatmaps, entropy
// trajectories, and the distillation survival panel. Cells the store does not
// hold render as missing, never as zero.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dppn/alignment.hpp"
#include "dppn/metrics.hpp"
#include "dppn/store.hpp"
#include "dppn/train.hpp"

namespace dppn {

namespace detail {

inline std::string fmt(double v, int prec = 4) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

inline std::string fmt_mean_std(const MeanStd& ms, int prec = 4) {
  if (ms.n == 0) return "-";
  return fmt(ms.mean, prec) + " +/- " + fmt(ms.sd, prec);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Blue -> white -> red over [lo, hi], midpoint at the uniform initial level.
inline std::string heat_color(float v, float lo, float hi) {
  const float mid = 0.5f * (lo + hi);
  float t = v <= mid ? (mid - v) / std::max(mid - lo, 1e-9f) : (v - mid) / std::max(hi - mid, 1e-9f);
  t = std::clamp(t, 0.0f, 1.0f);
  int r = 255, g = 255, b = 255;
  if (v <= mid) {
    r = static_cast<int>(255 * (1.0f - t));
    g = static_cast<int>(255 * (1.0f - 0.6f * t));
  } else {
    g = static_cast<int>(255 * (1.0f - 0.6f * t));
    b = static_cast<int>(255 * (1.0f - t));
  }
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SVG figures.

inline void write_heatmap_svg(const std::filesystem::path& path, const std::vector<float>& v,
                              int rows, int cols, float lo, float hi, const std::string& title) {
  const int cell = std::max(2, 320 / std::max(rows, cols));
  const int w = cols * cell + 40, h = rows * cell + 56;
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  s << "<rect width='100%' height='100%' fill='white'/>\n";
  s << "<text x='20' y='20' font-family='monospace' font-size='13'>" << title << "</text>\n";
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const float val = v[static_cast<size_t>(i) * cols + j];
      s << "<rect x='" << 20 + j * cell << "' y='" << 32 + i * cell << "' width='" << cell
        << "' height='" << cell << "' fill='" << detail::heat_color(val, lo, hi) << "'/>\n";
    }
  s << "<text x='20' y='" << h - 8 << "' font-family='monospace' font-size='11'>" << detail::fmt(lo, 2)
    << " (blue) .. " << detail::fmt(hi, 2) << " (red)</text>\n</svg>\n";
  detail::write_text(path, s.str());
}

inline void write_curves_svg(const std::filesystem::path& path,
                             const std::vector<std::pair<std::string, std::vector<float>>>& series,
                             const std::string& title, const std::string& y_label) {
  const int w = 640, h = 400, ml = 56, mr = 16, mt = 36, mb = 36;
  float lo = 1e30f, hi = -1e30f;
  size_t max_len = 1;
  for (const auto& [name, ys] : series)
    for (float y : ys) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  for (const auto& [name, ys] : series) max_len = std::max(max_len, ys.size());
  if (hi <= lo) hi = lo + 1.0f;
  const float pad = 0.05f * (hi - lo);
  lo -= pad;
  hi += pad;
  static const char* palette[] = {"#1f6fb2", "#c83e32", "#2e8b57", "#8a5fb0",
                                  "#c98a1f", "#4d4d4d", "#17a2b8", "#b03a6e"};
  auto X = [&](size_t i) {
    return ml + static_cast<float>(i) * (w - ml - mr) / static_cast<float>(std::max<size_t>(max_len - 1, 1));
  };
  auto Y = [&](float v) { return mt + (hi - v) * (h - mt - mb) / (hi - lo); };
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  s << "<rect width='100%' height='100%' fill='white'/>\n";
  s << "<text x='" << ml << "' y='20' font-family='monospace' font-size='13'>" << title << "</text>\n";
  s << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
    << "' stroke='#333'/>\n";
  s << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
    << "' stroke='#333'/>\n";
  for (int k = 0; k <= 4; ++k) {
    const float v = lo + (hi - lo) * k / 4.0f;
    s << "<text x='4' y='" << Y(v) + 4 << "' font-family='monospace' font-size='10'>"
      << detail::fmt(v, 2) << "</text>\n";
  }
  s << "<text x='4' y='" << mt - 6 << "' font-family='monospace' font-size='10'>" << y_label
    << "</text>\n";
  int ci = 0;
  for (const auto& [name, ys] : series) {
    const char* color = palette[ci % 8];
    s << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
    for (size_t i = 0; i < ys.size(); ++i) s << X(i) << "," << Y(ys[i]) << " ";
    s << "'/>\n";
    s << "<text x='" << w - mr - 180 << "' y='" << mt + 14 * ci << "' fill='" << color
      << "' font-family='monospace' font-size='10'>" << name << "</text>\n";
    ++ci;
  }
  s << "</svg>\n";
  detail::write_text(path, s.str());
}

struct DeltaBar {
  std::string target;
  bool same_family = false;
  MeanStd delta;
};

// Paired transfer gains per target; same-family targets get the filled bars,
// different-family the hatched gray ones. Error whiskers are one sample sd.
inline void write_delta_bars_svg(const std::filesystem::path& path,
                                 const std::vector<DeltaBar>& bars, const std::string& title) {
  const int w = 560, h = 360, ml = 72, mr = 16, mt = 40, mb = 48;
  float lo = 0.0f, hi = 0.0f;
  for (const auto& b : bars) {
    lo = std::min(lo, static_cast<float>(b.delta.mean - b.delta.sd));
    hi = std::max(hi, static_cast<float>(b.delta.mean + b.delta.sd));
  }
  const float span = std::max(hi - lo, 1e-4f);
  lo -= 0.15f * span;
  hi += 0.15f * span;
  auto Y = [&](float v) { return mt + (hi - v) * (h - mt - mb) / (hi - lo); };
  const float bw = static_cast<float>(w - ml - mr) / std::max<size_t>(bars.size(), 1);
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  s << "<defs><pattern id='hatch' width='6' height='6' patternTransform='rotate(45)' "
       "patternUnits='userSpaceOnUse'><line x1='0' y1='0' x2='0' y2='6' stroke='#8a8a8a' "
       "stroke-width='2'/></pattern></defs>\n";
  s << "<rect width='100%' height='100%' fill='white'/>\n";
  s << "<text x='" << ml << "' y='20' font-family='monospace' font-size='13'>" << title << "</text>\n";
  s << "<line x1='" << ml << "' y1='" << Y(0.0f) << "' x2='" << w - mr << "' y2='" << Y(0.0f)
    << "' stroke='#333'/>\n";
  for (int k = 0; k <= 4; ++k) {
    const float v = lo + (hi - lo) * k / 4.0f;
    s << "<text x='4' y='" << Y(v) + 4 << "' font-family='monospace' font-size='10'>"
      << detail::fmt(v, 3) << "</text>\n";
  }
  for (size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const float x = ml + i * bw + 0.2f * bw;
    const float y0 = Y(0.0f), y1 = Y(static_cast<float>(b.delta.mean));
    const std::string fill = b.same_family ? "#2e7d52" : "url(#hatch)";
    s << "<rect x='" << x << "' y='" << std::min(y0, y1) << "' width='" << 0.6f * bw
      << "' height='" << std::fabs(y1 - y0) << "' fill='" << fill << "' stroke='#555'/>\n";
    if (b.delta.n > 1) {
      const float cx = x + 0.3f * bw;
      s << "<line x1='" << cx << "' y1='" << Y(static_cast<float>(b.delta.mean - b.delta.sd))
        << "' x2='" << cx << "' y2='" << Y(static_cast<float>(b.delta.mean + b.delta.sd))
        << "' stroke='#222' stroke-width='1.5'/>\n";
    }
    s << "<text x='" << x << "' y='" << h - mb + 16 << "' font-family='monospace' font-size='11'>"
      << b.target << "</text>\n";
  }
  s << "<rect x='" << ml << "' y='" << h - 22 << "' width='12' height='12' fill='#2e7d52'/>"
    << "<text x='" << ml + 16 << "' y='" << h - 12
    << "' font-family='monospace' font-size='10'>same family</text>\n";
  s << "<rect x='" << ml + 130 << "' y='" << h - 22
    << "' width='12' height='12' fill='url(#hatch)' stroke='#555'/>" << "<text x='" << ml + 146
    << "' y='" << h - 12 << "' font-family='monospace' font-size='10'>different family</text>\n";
  s << "</svg>\n";
  detail::write_text(path, s.str());
}

inline void write_survival_svg(const std::filesystem::path& path,
                               std::vector<std::pair<std::string, int>> panel,
                               const std::string& title) {
  std::sort(panel.begin(), panel.end(),
            [](const auto& a, const auto& b) { return a.second > b.second; });
  int max_count = 1;
  for (const auto& [name, c] : panel) max_count = std::max(max_count, c);
  const int w = 520, row_h = 30, ml = 190, h = 60 + row_h * static_cast<int>(panel.size());
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  s << "<rect width='100%' height='100%' fill='white'/>\n";
  s << "<text x='16' y='22' font-family='monospace' font-size='13'>" << title << "</text>\n";
  for (size_t i = 0; i < panel.size(); ++i) {
    const int y = 40 + static_cast<int>(i) * row_h;
    const float bw = static_cast<float>(panel[i].second) / max_count * (w - ml - 60);
    s << "<text x='16' y='" << y + 15 << "' font-family='monospace' font-size='11'>"
      << panel[i].first << "</text>\n";
    s << "<rect x='" << ml << "' y='" << y << "' width='" << bw
      << "' height='20' fill='#1f6fb2'/>\n";
    s << "<text x='" << ml + bw + 6 << "' y='" << y + 15
      << "' font-family='monospace' font-size='11'>" << panel[i].second << "</text>\n";
  }
  s << "</svg>\n";
  detail::write_text(path, s.str());
}

// ---------------------------------------------------------------------------
// Aggregation.

namespace detail {

using CellMap = std::map<std::string, nlohmann::json>;

inline std::optional<double> metric_of(const CellMap& cells, const CellKey& k,
                                       const std::string& name) {
  auto it = cells.find(k.id());
  if (it == cells.end()) return std::nullopt;
  const auto& doc = it->second;
  if (!doc.contains("metrics") || !doc["metrics"].contains(name) || doc["metrics"][name].is_null())
    return std::nullopt;
  return doc["metrics"][name].get<double>();
}

inline bool same_family_target(const std::string& t) { return t == "A2" || t == "A3"; }

// Baseline condition a variant's gains pair against.
inline std::string baseline_condition(Variant v) {
  return variant_routes(v) && allowed_conditions(v)[0] == "prior_trained" ? "prior_random" : "cold";
}

}  // namespace detail

struct ReportPaths {
  std::filesystem::path dir;
  std::vector<std::string> written;
};

// Render everything derivable from the store into out_dir. Missing cells are
// skipped (tables show '-', CSV rows are simply absent).
inline ReportPaths write_report(const ResultsStore& store, const HarnessConfig& hc,
                                const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ReportPaths rp;
  rp.dir = out_dir;
  auto emit = [&rp](const fs::path& p, const std::string& text) {
    detail::write_text(p, text);
    rp.written.push_back(p.filename().string());
  };

  detail::CellMap cells;
  std::vector<CellKey> keys;
  for (auto& [k, doc] : store.scan()) {
    cells[k.id()] = std::move(doc);
    keys.push_back(k);
  }

  const std::vector<uint64_t> seeds = [&] {
    std::vector<uint64_t> s;
    for (const auto& k : keys)
      if (std::find(s.begin(), s.end(), k.seed) == s.end()) s.push_back(k.seed);
    std::sort(s.begin(), s.end());
    return s.empty() ? std::vector<uint64_t>{42, 137, 256} : s;
  }();

  std::ostringstream md;
  md << "# Transfer experiment report\n\n";

  // --- Source summary -------------------------------------------------------
  {
    std::ostringstream csv;
    csv << "variant,tasks,seed,final_val_acc,aulc,entropy_start,entropy_final,field_std_final,"
           "high_count_final\n";
    md << "## Source runs\n\n"
       << "| variant | tasks | seed | final val acc | entropy start -> final | field std |\n"
       << "|---|---|---|---|---|---|\n";
    for (const auto& k : keys) {
      if (k.condition != "source_joint" && k.condition != "source_single") continue;
      const auto& doc = cells[k.id()];
      if (doc.value("status", "") != "done") continue;
      const auto& ent = doc["field"]["entropy"];
      const auto& sd = doc["field"]["stddev"];
      const auto& hc2 = doc["field"]["high_count"];
      csv << k.variant << "," << k.target << "," << k.seed << ","
          << detail::fmt(doc["metrics"]["final_val_acc"].get<double>()) << ","
          << detail::fmt(doc["metrics"]["aulc"].get<double>()) << ","
          << detail::fmt(ent.front().get<double>()) << "," << detail::fmt(ent.back().get<double>())
          << "," << detail::fmt(sd.back().get<double>()) << "," << hc2.back().get<int>() << "\n";
      md << "| " << k.variant << " | " << k.target << " | " << k.seed << " | "
         << detail::fmt(doc["metrics"]["final_val_acc"].get<double>()) << " | "
         << detail::fmt(ent.front().get<double>(), 2) << " -> "
         << detail::fmt(ent.back().get<double>(), 2) << " | "
         << detail::fmt(sd.back().get<double>(), 3) << " |\n";
    }
    emit(out_dir / "source_summary.csv", csv.str());
    md << "\n";
  }

  // --- Cold transfer table --------------------------------------------------
  {
    std::ostringstream csv;
    csv << "variant,target,n,mean_aulc,sd_aulc,mean_final,sd_final,n_reached_70,mean_epochs_to_70\n";
    md << "## Cold transfer (AULC, mean +/- sd over seeds)\n\n| variant |";
    for (const auto& t : transfer_targets()) md << " " << t << " |";
    md << "\n|---|---|---|---|---|\n";
    for (const auto& vn :
         {"dppn_learned", "dppn_fourier_pos", "dppn_fourier_tokpos", "dppn_metalr", "transformer",
          "random_sparse", "decomposition", "dppn_completion_learnedA",
          "dppn_completion_extrinsicP"}) {
      bool any = false;
      std::ostringstream row;
      row << "| " << vn << " |";
      for (const auto& t : transfer_targets()) {
        std::vector<double> au, fin, e70;
        for (uint64_t s : seeds) {
          CellKey k{vn, "cold", t, s};
          if (auto a = detail::metric_of(cells, k, "aulc")) {
            au.push_back(*a);
            fin.push_back(*detail::metric_of(cells, k, "final_val_acc"));
            if (auto e = detail::metric_of(cells, k, "epochs_to_70")) e70.push_back(*e);
          }
        }
        if (au.empty()) {
          row << " - |";
          continue;
        }
        any = true;
        const MeanStd a = mean_std(au), f = mean_std(fin);
        row << " " << detail::fmt_mean_std(a) << " |";
        csv << vn << "," << t << "," << a.n << "," << detail::fmt(a.mean) << ","
            << detail::fmt(a.sd) << "," << detail::fmt(f.mean) << "," << detail::fmt(f.sd) << ","
            << e70.size() << ","
            << (e70.empty() ? std::string("") : detail::fmt(mean_std(e70).mean, 1)) << "\n";
      }
      if (any) md << row.str() << "\n";
    }
    emit(out_dir / "cold_aulc.csv", csv.str());
    md << "\n";
  }

  // --- Paired deltas --------------------------------------------------------
  {
    std::ostringstream csv;
    csv << "variant,condition,target,family,n,mean_delta,sd_delta\n";
    md << "## Paired transfer gains (condition minus its baseline, per seed, then aggregated)\n\n";
    for (Variant v :
         {Variant::dppn_learned, Variant::dppn_fourier_pos, Variant::dppn_fourier_tokpos,
          Variant::dppn_metalr, Variant::decomposition, Variant::dppn_completion_learnedA,
          Variant::dppn_completion_extrinsicP}) {
      const std::string base = detail::baseline_condition(v);
      for (const auto& cond : allowed_conditions(v)) {
        if (cond == base) continue;
        std::vector<DeltaBar> bars;
        bool any = false;
        for (const auto& t : transfer_targets()) {
          std::vector<double> deltas;
          for (uint64_t s : seeds) {
            auto w = detail::metric_of(cells, CellKey{variant_name(v), cond, t, s}, "aulc");
            auto c = detail::metric_of(cells, CellKey{variant_name(v), base, t, s}, "aulc");
            if (w && c) deltas.push_back(*w - *c);
          }
          DeltaBar b;
          b.target = t;
          b.same_family = detail::same_family_target(t);
          b.delta = mean_std(deltas);
          if (b.delta.n > 0) {
            any = true;
            csv << variant_name(v) << "," << cond << "," << t << ","
                << (b.same_family ? "same" : "different") << "," << b.delta.n << ","
                << detail::fmt(b.delta.mean, 5) << "," << detail::fmt(b.delta.sd, 5) << "\n";
          }
          bars.push_back(b);
        }
        if (!any) continue;
        const std::string fname =
            std::string("delta_") + variant_name(v) + "_" + cond + ".svg";
        write_delta_bars_svg(out_dir / fname, bars,
                             std::string(variant_name(v)) + ": " + cond + " - " + base);
        rp.written.push_back(fname);
        md << "### " << variant_name(v) << " (" << cond << " - " << base << ")\n\n| target |";
        for (const auto& b : bars) md << " " << b.target << " |";
        md << "\n|---|---|---|---|---|\n| delta |";
        for (const auto& b : bars)
          md << " " << (b.delta.n ? detail::fmt_mean_std(b.delta) : std::string("-")) << " |";
        md << "\n\n![](" << fname << ")\n\n";
      }
    }
    emit(out_dir / "delta.csv", csv.str());
  }

  // --- Entropy trajectories and heatmaps ------------------------------------
  {
    std::vector<std::pair<std::string, std::vector<float>>> series;
    for (const auto& k : keys) {
      if (k.condition != "source_joint" && k.condition != "source_single") continue;
      const auto& doc = cells[k.id()];
      if (doc.value("status", "") != "done" || !doc.contains("field")) continue;
      series.emplace_back(k.variant + "/" + k.target + "/s" + std::to_string(k.seed),
                          doc["field"]["entropy"].get<std::vector<float>>());
    }
    if (!series.empty()) {
      write_curves_svg(out_dir / "entropy.svg", series, "Field entropy during source training",
                       "nats");
      rp.written.push_back("entropy.svg");
      md << "## Field entropy\n\n![](entropy.svg)\n\n";
    }
    for (const auto& k : keys) {
      if (k.condition != "source_joint" || k.seed != seeds.front()) continue;
      const fs::path art = store.artifact_dir(k);
      const fs::path before = art / "field_ep0.phero", after = art / "field_final.phero";
      if (!fs::exists(before) || !fs::exists(after)) continue;
      PheromoneField f0 = load_field(before.string());
      PheromoneField f1 = load_field(after.string());
      const auto& pc = f0.config();
      const std::string b = "heatmap_" + k.variant + "_before.svg";
      const std::string a = "heatmap_" + k.variant + "_after.svg";
      write_heatmap_svg(out_dir / b, f0.values(), f0.rows(), f0.cols(), pc.tau_min, pc.tau_max,
                        k.variant + " field, epoch 0");
      write_heatmap_svg(out_dir / a, f1.values(), f1.rows(), f1.cols(), pc.tau_min, pc.tau_max,
                        k.variant + " field, final");
      rp.written.push_back(b);
      rp.written.push_back(a);
      md << "## " << k.variant << " pheromone field (seed " << k.seed << ")\n\n![](" << b
         << ") ![](" << a << ")\n\n";
    }
  }

  // --- Distillation survival panel ------------------------------------------
  {
    std::vector<std::pair<std::string, int>> panel;
    std::ostringstream csv;
    csv << "grouper,aligned,alignment_score,survivors\n";
    const uint64_t s = seeds.front();
    for (Variant v :
         {Variant::dppn_fourier_pos, Variant::dppn_fourier_tokpos, Variant::dppn_learned}) {
      const CellKey k1 = source_key(v, {"A1"}, s), k2 = source_key(v, {"A1p"}, s);
      if (!store.complete(k1) || !store.complete(k2)) continue;
      const bool align = v != Variant::dppn_learned;
      int survivors;
      std::string score = "";
      if (align) {
        DistillOutcome d = distilled_from_singles(v, s, hc, store);
        survivors = d.field.stats().high_count;
        score = detail::fmt(d.alignment.correlation_score, 3);
      } else {
        // The learned grouper has no stable slot identity to align on, so its
        // fields are fused as-is.
        auto [rows, cols] = field_dims([&] {
          ModelConfig c = hc.model;
          c.variant = v;
          return c;
        }());
        PheromoneField f1 =
            load_field((store.artifact_dir(k1) / "field_final.phero").string(), rows, cols);
        PheromoneField f2 =
            load_field((store.artifact_dir(k2) / "field_final.phero").string(), rows, cols);
        survivors = distill_min(f1, f2).stats().high_count;
      }
      const std::string label = std::string(variant_name(v)) + (align ? " (aligned)" : " (unaligned)");
      panel.emplace_back(label, survivors);
      csv << variant_name(v) << "," << (align ? "yes" : "no") << "," << score << "," << survivors
          << "\n";
    }
    if (!panel.empty()) {
      emit(out_dir / "distillation.csv", csv.str());
      write_survival_svg(out_dir / "survival.svg", panel,
                         "High-magnitude cells surviving distillation");
      rp.written.push_back("survival.svg");
      md << "## Distillation survivors\n\n![](survival.svg)\n\n";
    }
  }

  // --- Decomposition replicate correlation ----------------------------------
  {
    std::vector<std::pair<CellKey, PheromoneField>> runs;
    for (uint64_t s : seeds) {
      const CellKey k = source_key(Variant::decomposition, {"A1"}, s);
      if (!store.complete(k)) continue;
      const fs::path p = store.artifact_dir(k) / "field_final.phero";
      if (fs::exists(p)) runs.emplace_back(k, load_field(p.string()));
    }
    if (runs.size() >= 2) {
      std::ostringstream csv;
      csv << "seed_a,seed_b,pearson_r\n";
      md << "## Decomposition replicates (field correlation across runs)\n\n"
         << "| pair | r |\n|---|---|\n";
      for (size_t i = 0; i < runs.size(); ++i)
        for (size_t j = i + 1; j < runs.size(); ++j) {
          auto r = field_pearson(runs[i].second, runs[j].second);
          const std::string rs = r ? detail::fmt(*r, 4) : std::string("undefined");
          csv << runs[i].first.seed << "," << runs[j].first.seed << "," << rs << "\n";
          md << "| s" << runs[i].first.seed << " vs s" << runs[j].first.seed << " | " << rs
             << " |\n";
        }
      emit(out_dir / "decomposition.csv", csv.str());
      md << "\n";
    }
  }

  // --- Transfer curves (long form) ------------------------------------------
  {
    std::ostringstream csv;
    csv << "variant,condition,target,seed,epoch,val_acc\n";
    for (const auto& k : keys) {
      const auto& doc = cells[k.id()];
      if (doc.value("status", "") != "done" || doc.value("kind", "") != "transfer") continue;
      const auto curve = doc["curve"]["val_acc"].get<std::vector<float>>();
      for (size_t e = 0; e < curve.size(); ++e)
        csv << k.variant << "," << k.condition << "," << k.target << "," << k.seed << "," << e + 1
            << "," << detail::fmt(curve[e]) << "\n";
    }
    emit(out_dir / "transfer_curves.csv", csv.str());
  }

  emit(out_dir / "report.md", md.str());
  return rp;
}

}  // namespace dppn
