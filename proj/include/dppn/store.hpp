#pragma once
// Results store: one JSON document per experiment cell at
// {root}/{variant}/{condition}/{target}/{seed}.json, written atomically
// (temp file + rename) so a crash never leaves a half-written cell, plus a
// flat CSV index regenerated from the tree on demand. The root comes from
// DPPN_RESULTS_ROOT or defaults to ./results.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

namespace dppn {

struct CellKey {
  std::string variant;    // model variant, or "source" phase variants directly
  std::string condition;  // cold / warm_raw / warm_distilled / warm_rank_reduced /
                          // prior_trained / prior_random / source_joint / source_single
  std::string target;     // task name, or "A1+A1p" for joint sources
  uint64_t seed = 0;

  std::string id() const {
    return variant + "/" + condition + "/" + target + "/" + std::to_string(seed);
  }
};

inline std::string results_root() {
  const char* env = std::getenv("DPPN_RESULTS_ROOT");
  return env && *env ? env : "results";
}

class ResultsStore {
 public:
  explicit ResultsStore(std::string root = results_root()) : root_(std::move(root)) {}

  const std::string& root() const { return root_; }

  std::filesystem::path cell_path(const CellKey& k) const {
    return std::filesystem::path(root_) / k.variant / k.condition / k.target /
           (std::to_string(k.seed) + ".json");
  }

  // Artifacts (fields, weights, profiles, patterns) live next to the cell.
  std::filesystem::path artifact_dir(const CellKey& k) const {
    return std::filesystem::path(root_) / k.variant / k.condition / k.target /
           ("artifacts_" + std::to_string(k.seed));
  }

  // A cell counts as complete only when it parses and finished cleanly, so a
  // crashed or failed run is re-attempted on the next sweep.
  bool complete(const CellKey& k) const {
    std::ifstream f(cell_path(k));
    if (!f) return false;
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    return !j.is_discarded() && j.value("status", "") == "done";
  }

  nlohmann::json load(const CellKey& k) const {
    std::ifstream f(cell_path(k));
    if (!f) throw std::runtime_error("results: missing cell " + k.id());
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error("results: corrupt cell " + k.id());
    return j;
  }

  void save(const CellKey& k, nlohmann::json doc) const {
    doc["variant"] = k.variant;
    doc["condition"] = k.condition;
    doc["target"] = k.target;
    doc["seed"] = k.seed;
    write_json_atomic(cell_path(k), doc);
  }

  static void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& doc) {
    std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
      std::ofstream f(tmp, std::ios::trunc);
      if (!f) throw std::runtime_error("results: cannot write " + tmp.string());
      f << doc.dump(1);
      f << '\n';
      if (!f) throw std::runtime_error("results: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);  // atomic on one filesystem
  }

  // Every parseable cell in the tree, unfinished ones included.
  std::vector<std::pair<CellKey, nlohmann::json>> scan() const {
    std::vector<std::pair<CellKey, nlohmann::json>> out;
    if (!std::filesystem::exists(root_)) return out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root_)) {
      if (!e.is_regular_file() || e.path().extension() != ".json") continue;
      const auto rel = std::filesystem::relative(e.path(), root_);
      std::vector<std::string> parts;
      for (const auto& p : rel) parts.push_back(p.string());
      if (parts.size() != 4) continue;  // index or stray files
      std::ifstream f(e.path());
      nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
      if (j.is_discarded()) continue;
      CellKey k;
      k.variant = parts[0];
      k.condition = parts[1];
      k.target = parts[2];
      k.seed = std::stoull(e.path().stem().string());
      out.emplace_back(std::move(k), std::move(j));
    }
    return out;
  }

  // Flat index of the whole tree; one row per cell, rewritten from scratch.
  std::filesystem::path write_index_csv() const {
    auto cells = scan();
    std::sort(cells.begin(), cells.end(),
              [](const auto& a, const auto& b) { return a.first.id() < b.first.id(); });
    std::filesystem::path path = std::filesystem::path(root_) / "index.csv";
    std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
      std::ofstream f(tmp, std::ios::trunc);
      f << "variant,condition,target,seed,status,final_val_acc,aulc,epochs_to_70\n";
      for (const auto& [k, j] : cells) {
        const auto& m = j.contains("metrics") ? j.at("metrics") : nlohmann::json::object();
        f << k.variant << ',' << k.condition << ',' << k.target << ',' << k.seed << ','
          << j.value("status", "?") << ',';
        if (m.contains("final_val_acc")) f << m.at("final_val_acc").get<float>();
        f << ',';
        if (m.contains("aulc")) f << m.at("aulc").get<float>();
        f << ',';
        if (m.contains("epochs_to_70") && !m.at("epochs_to_70").is_null())
          f << m.at("epochs_to_70").get<int>();
        f << '\n';
      }
    }
    std::filesystem::rename(tmp, path);
    return path;
  }

 private:
  std::string root_;
};

}  // namespace dppn
