#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/eval.hpp"
#include "skd/synthgen.hpp"
#include "skd/train.hpp"

namespace skd {

inline bool deterministic_mode() {
  const char* v = std::getenv("SKD_DETERMINISTIC");
  return v && *v && std::string(v) != "0";
}

// Hash of every file in a dataset directory, path-ordered. Used to refuse
// cross-dataset run comparisons.
inline uint64_t dataset_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& f : files) {
    h = fnv1a(fs::relative(f, dir).generic_string(), h);
    std::ifstream in(f, std::ios::binary);
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h = fnv1a(buf.data(), buf.size(), h);
  }
  return h;
}

struct ExperimentConfig {
  Setting setting = Setting::Baseline;
  uint64_t seed = 1;
  ArchDescriptor arch;
  OptimizerConfig optimizer;
  LossConfig loss;
  std::optional<SynthConfig> synth;  // used by gen-data and sweep
  // students initialize from the teacher weights; set false for a fresh init
  bool warm_start = true;
  // iteration budget for student runs; 0 means optimizer.total_iterations
  int student_iterations = 0;
};

inline void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"schema_version", 1},
           {"setting", to_string(c.setting)},
           {"seed", c.seed},
           {"arch", c.arch},
           {"optimizer", c.optimizer},
           {"loss", c.loss},
           {"warm_start", c.warm_start},
           {"student_iterations", c.student_iterations}};
  if (c.synth) j["synth"] = *c.synth;
}
inline void from_json(const json& j, ExperimentConfig& c) {
  if (j.contains("setting")) c.setting = setting_from_string(j["setting"].get<std::string>());
  c.seed = j.value("seed", 1ull);
  if (j.contains("arch")) c.arch = j["arch"].get<ArchDescriptor>();
  if (j.contains("optimizer")) c.optimizer = j["optimizer"].get<OptimizerConfig>();
  if (j.contains("loss")) c.loss = j["loss"].get<LossConfig>();
  if (j.contains("synth")) c.synth = j["synth"].get<SynthConfig>();
  c.warm_start = j.value("warm_start", true);
  c.student_iterations = j.value("student_iterations", 0);
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing config file: " + path.string());
  return json::parse(in).get<ExperimentConfig>();
}

namespace detail {

inline void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace detail

// A completed run directory: config.json, metrics.json, train_log.csv,
// checkpoint.ckpt (+ teacher.ckpt when trained here), selection.jsonl,
// pl_cache.json, scores_test.csv.
struct RunOutcome {
  fs::path dir;
  EvalResult eval;
};

// Train (teacher if needed), select, train student, evaluate, persist.
// Written to a temp directory and renamed into place on success; an
// `incomplete` sentinel marks any partially written tree.
inline RunOutcome run_setting(const ExperimentConfig& cfg, const Dataset& dataset,
                              uint64_t data_hash, const fs::path& out_dir,
                              const DualHeadModel* teacher_in = nullptr) {
  fs::path tmp = out_dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream(tmp / "incomplete") << "run in progress\n";
  }

  DualHeadModel student;
  std::vector<TrainLogRow> log;
  if (cfg.setting == Setting::Baseline) {
    auto res = train_teacher(dataset, cfg.arch, cfg.optimizer, cfg.loss, cfg.seed);
    student = std::move(res.model);
    log = std::move(res.log);
    auto selections = build_training_selection(dataset, Setting::Baseline, nullptr, cfg.loss);
    save_selection_manifest(selections, tmp / "selection.jsonl");
  } else {
    DualHeadModel teacher;
    if (teacher_in) {
      teacher = *teacher_in;
    } else {
      auto tres = train_teacher(dataset, cfg.arch, cfg.optimizer, cfg.loss, cfg.seed);
      teacher = std::move(tres.model);
    }
    save_checkpoint(teacher, tmp / "teacher.ckpt");
    auto cache = compute_pseudo_labels(teacher, dataset, cfg.loss);
    cache.save(tmp / "pl_cache.json");
    auto selections = build_training_selection(dataset, cfg.setting, &cache, cfg.loss);
    save_selection_manifest(selections, tmp / "selection.jsonl");
    OptimizerConfig sopt = cfg.optimizer;
    if (cfg.student_iterations > 0) sopt.total_iterations = cfg.student_iterations;
    auto res = train_student(teacher, cache, dataset, cfg.setting, sopt, cfg.loss,
                             cfg.seed, cfg.warm_start);
    student = std::move(res.model);
    log = std::move(res.log);
  }

  save_checkpoint(student, tmp / "checkpoint.ckpt");
  save_train_log(log, tmp / "train_log.csv");

  EvalResult eval = evaluate(student, dataset, Split::Test);
  save_scores_csv(eval.scores, tmp / "scores_test.csv");

  json metrics = eval_result_to_json(eval);
  metrics["dataset_hash"] = data_hash;
  metrics["setting"] = to_string(cfg.setting);
  metrics["seed"] = cfg.seed;
  detail::write_json(metrics, tmp / "metrics.json");
  detail::write_json(json(cfg), tmp / "config.json");

  fs::remove(tmp / "incomplete");
  fs::remove_all(out_dir);
  fs::rename(tmp, out_dir);
  return RunOutcome{out_dir, std::move(eval)};
}

inline RunOutcome run_setting(const ExperimentConfig& cfg, const fs::path& dataset_dir,
                              const fs::path& out_dir, const fs::path& teacher_run = {}) {
  Dataset ds = load_dataset(dataset_dir);
  uint64_t h = dataset_hash(dataset_dir);
  std::optional<DualHeadModel> teacher;
  if (!teacher_run.empty()) {
    teacher = load_checkpoint(teacher_run / "checkpoint.ckpt");
    teacher->frozen = true;
  }
  return run_setting(cfg, ds, h, out_dir, teacher ? &*teacher : nullptr);
}

// --- run comparison ---------------------------------------------------------

struct ComparisonRow {
  std::string run;
  std::string setting;
  std::map<std::string, DomainResult> per_domain;
  DomainResult pooled;
  std::optional<double> p_vs_first;  // paired DeLong against the first run
};

inline std::vector<ComparisonRow> compare_runs(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw ValidationError("compare_runs: no runs given");

  std::vector<ComparisonRow> rows;
  std::vector<std::vector<StackScore>> all_scores;
  std::optional<uint64_t> expected_hash;

  for (const auto& dir : run_dirs) {
    std::ifstream min(dir / "metrics.json");
    if (!min) throw IoError("missing metrics.json in " + dir.string());
    json metrics = json::parse(min);
    uint64_t h = metrics.at("dataset_hash").get<uint64_t>();
    if (expected_hash && h != *expected_hash)
      throw ValidationError("refusing to compare runs evaluated on different datasets: " +
                            dir.string());
    expected_hash = h;

    auto scores = load_scores_csv(dir / "scores_test.csv");
    ComparisonRow row;
    row.run = dir.filename().string();
    row.setting = metrics.value("setting", "?");
    auto parse_dom = [](const json& j) {
      DomainResult d;
      d.defined = j.value("defined", false);
      d.n_pos = j.value("n_pos", 0);
      d.n_neg = j.value("n_neg", 0);
      if (d.defined) {
        d.auc = j.at("auc").get<double>();
        d.ci_low = j.at("ci_low").get<double>();
        d.ci_high = j.at("ci_high").get<double>();
        d.degenerate_ci = j.value("degenerate_ci", false);
      }
      return d;
    };
    row.pooled = parse_dom(metrics.at("all"));
    if (metrics.contains("domains"))
      for (auto it = metrics["domains"].begin(); it != metrics["domains"].end(); ++it)
        row.per_domain[it.key()] = parse_dom(it.value());

    if (!rows.empty()) {
      // pair by stack id against the first run
      std::map<std::string, double> first;
      for (const auto& s : all_scores[0]) first[s.stack_id] = s.score;
      std::vector<double> a, b;
      std::vector<int> labels;
      for (const auto& s : scores) {
        auto it = first.find(s.stack_id);
        if (it == first.end())
          throw ValidationError("runs score different cases: " + s.stack_id);
        a.push_back(it->second);
        b.push_back(s.score);
        labels.push_back(s.label);
      }
      row.p_vs_first = delong_paired_test(a, b, labels);
    }
    all_scores.push_back(std::move(scores));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string comparison_table_text(const std::vector<ComparisonRow>& rows) {
  std::set<std::string> domains;
  for (const auto& r : rows)
    for (const auto& [d, _] : r.per_domain) domains.insert(d);

  std::ostringstream os;
  os << "run,setting";
  for (const auto& d : domains) os << "," << d << "_auc," << d << "_ci";
  os << ",all_auc,all_ci,p_vs_first\n";
  char buf[128];
  auto cell = [&](const DomainResult& d) {
    if (!d.defined) {
      os << ",undefined,";
      return;
    }
    std::snprintf(buf, sizeof(buf), ",%.4f,[%.4f;%.4f]", d.auc, d.ci_low, d.ci_high);
    os << buf;
  };
  for (const auto& r : rows) {
    os << r.run << "," << r.setting;
    for (const auto& d : domains) {
      auto it = r.per_domain.find(d);
      if (it == r.per_domain.end())
        os << ",,";
      else
        cell(it->second);
    }
    cell(r.pooled);
    if (r.p_vs_first) {
      std::snprintf(buf, sizeof(buf), ",%.6g", *r.p_vs_first);
      os << buf;
    } else {
      os << ",";
    }
    os << "\n";
  }
  return os.str();
}

// --- annotation-fraction sweep ----------------------------------------------

struct SweepCell {
  double fraction = 0;
  uint64_t seed = 0;
  std::string setting;
  bool ok = false;
  std::string error;
  double auc = 0, ci_low = 0, ci_high = 0;
};

struct SweepResult {
  std::vector<SweepCell> cells;

  // seed-mean AUC for one setting at one fraction
  std::optional<double> mean_auc(const std::string& setting, double fraction) const {
    double sum = 0;
    int n = 0;
    for (const auto& c : cells)
      if (c.ok && c.setting == setting && std::abs(c.fraction - fraction) < 1e-9) {
        sum += c.auc;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return sum / n;
  }
};

inline void save_sweep_csv(const SweepResult& res, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "fraction,seed,setting,status,auc,ci_low,ci_high\n";
  char buf[256];
  for (const auto& c : res.cells) {
    if (c.ok)
      std::snprintf(buf, sizeof(buf), "%.2f,%llu,%s,ok,%.6f,%.6f,%.6f\n", c.fraction,
                    static_cast<unsigned long long>(c.seed), c.setting.c_str(), c.auc, c.ci_low,
                    c.ci_high);
    else
      std::snprintf(buf, sizeof(buf), "%.2f,%llu,%s,error,,,\n", c.fraction,
                    static_cast<unsigned long long>(c.seed), c.setting.c_str());
    out << buf;
  }
}

// AUC-vs-fraction line plot, one polyline per setting, data embedded as an
// SVG comment for diffing.
inline void save_sweep_svg(const SweepResult& res, const std::vector<double>& fractions,
                           const fs::path& path) {
  const int width = 640, height = 420, ml = 60, mr = 20, mt = 30, mb = 50;
  double lo = 1.0, hi = 0.0;
  for (const auto& c : res.cells)
    if (c.ok) {
      lo = std::min(lo, c.auc);
      hi = std::max(hi, c.auc);
    }
  if (hi <= lo) {
    lo = 0.0;
    hi = 1.0;
  }
  double pad = 0.05 * (hi - lo) + 1e-6;
  lo -= pad;
  hi += pad;

  auto px = [&](double f) { return ml + (f - fractions.front()) /
                                       std::max(1e-9, fractions.back() - fractions.front()) *
                                       (width - ml - mr); };
  auto py = [&](double a) { return height - mb - (a - lo) / (hi - lo) * (height - mt - mb); };

  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
     << "'>\n<!-- data:\nfraction,setting,mean_auc\n";
  const char* settings[] = {"baseline", "selective", "selective_weak"};
  for (const char* s : settings)
    for (double f : fractions)
      if (auto m = res.mean_auc(s, f)) os << f << "," << s << "," << *m << "\n";
  os << "-->\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<line x1='" << ml << "' y1='" << height - mb << "' x2='" << width - mr << "' y2='"
     << height - mb << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << height - mb
     << "' stroke='black'/>\n";
  os << "<text x='" << width / 2 << "' y='" << height - 12
     << "' text-anchor='middle' font-size='13'>fraction of annotated stacks</text>\n";
  os << "<text x='16' y='" << height / 2
     << "' text-anchor='middle' font-size='13' transform='rotate(-90 16 " << height / 2
     << ")'>test AUC</text>\n";

  const char* colors[] = {"#444444", "#1f77b4", "#d62728"};
  for (int si = 0; si < 3; ++si) {
    std::ostringstream pts;
    for (double f : fractions)
      if (auto m = res.mean_auc(settings[si], f)) pts << px(f) << "," << py(*m) << " ";
    if (pts.str().empty()) continue;
    os << "<polyline fill='none' stroke='" << colors[si] << "' stroke-width='2' points='"
       << pts.str() << "'/>\n";
    os << "<text x='" << width - mr - 150 << "' y='" << mt + 16 * si + 4 << "' fill='"
       << colors[si] << "' font-size='12'>" << settings[si] << "</text>\n";
  }
  os << "</svg>\n";

  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << os.str();
}

// Annotation-cost sweep: for each (fraction, seed) cell, downgrade a share of
// the annotations, train the baseline (reused as teacher), then the two
// selective settings. Failed cells are recorded and skipped.
inline SweepResult run_sweep(const ExperimentConfig& base_cfg, const Dataset& dataset,
                             uint64_t data_hash, const std::vector<double>& fractions,
                             const std::vector<uint64_t>& seeds, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  SweepResult res;

  for (uint64_t seed : seeds) {
    for (double f : fractions) {
      Dataset ds = subsample_annotations(dataset, f, derive_seed(base_cfg.seed, "sweep-subsample",
                                                                 seed));
      char tag[64];
      std::snprintf(tag, sizeof(tag), "f%03d_s%llu", static_cast<int>(std::lround(f * 100)),
                    static_cast<unsigned long long>(seed));

      ExperimentConfig cfg = base_cfg;
      cfg.seed = seed;
      std::optional<DualHeadModel> teacher;

      auto run_one = [&](Setting setting) {
        SweepCell cell;
        cell.fraction = f;
        cell.seed = seed;
        cell.setting = to_string(setting);
        try {
          cfg.setting = setting;
          auto out = run_setting(cfg, ds, data_hash,
                                 out_dir / (std::string(tag) + "_" + to_string(setting)),
                                 teacher ? &*teacher : nullptr);
          if (setting == Setting::Baseline)
            teacher = load_checkpoint(out.dir / "checkpoint.ckpt");
          cell.ok = true;
          cell.auc = out.eval.pooled.auc;
          cell.ci_low = out.eval.pooled.ci_low;
          cell.ci_high = out.eval.pooled.ci_high;
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
        res.cells.push_back(cell);
      };

      run_one(Setting::Baseline);
      run_one(Setting::Selective);
      run_one(Setting::SelectiveWeak);
    }
  }

  save_sweep_csv(res, out_dir / "sweep.csv");
  save_sweep_svg(res, fractions, out_dir / "sweep.svg");
  return res;
}

}  // namespace skd
