// Acceptance gate: one pass/fail line per criterion, exit code = #failures.
//
//   1  statistics oracle (AUC pair counting, DeLong variance recomputation)
//   2  paired-test calibration under a permutation null
//   3  gated-loss rule table enumeration
//   4  KD identity and alpha linearity
//   5  gradient check against central finite differences
//   6  directional cross-domain reproduction over 5 seeds
//   7  directional annotation-cost reproduction over 5 seeds
//   8  end-to-end determinism
//   9  property suites at >= 1000 cases each

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "skd/harness.hpp"

using namespace skd;

namespace {

using Clock = std::chrono::steady_clock;

int g_failures = 0;

void report(int num, const char* name, bool ok, const std::string& detail, double secs) {
  std::printf("criterion %d (%s): %s  [%s, %.1fs]\n", num, name, ok ? "PASS" : "FAIL",
              detail.c_str(), secs);
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

void run(int num, const char* name, const std::function<bool(std::string&)>& fn) {
  auto t0 = Clock::now();
  std::string detail;
  bool ok = false;
  try {
    ok = fn(detail);
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(num, name, ok, detail, secs);
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("skd_acc_" + name);
  fs::remove_all(p);
  return p;
}

double sample_var(const std::vector<double>& xs) {
  double m = 0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return xs.size() > 1 ? s / static_cast<double>(xs.size() - 1) : 0.0;
}

// --- 1: statistics oracle ----------------------------------------------

bool crit_stats_oracle(std::string& detail) {
  Rng rng(2024);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    int m = 5 + static_cast<int>(rng.below(46));
    int n = 5 + static_cast<int>(rng.below(46));
    // quantized scores so ties occur
    auto draw = [&](int k) {
      std::vector<double> v(k);
      for (auto& x : v) x = static_cast<double>(rng.below(12)) / 11.0;
      return v;
    };
    auto pos = draw(m), neg = draw(n);

    // exhaustive pair counting
    double wins = 0;
    for (double p : pos)
      for (double q : neg) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
    double oracle_auc = wins / (static_cast<double>(m) * n);
    if (auc(pos, neg) != oracle_auc) {
      detail = "auc mismatch at trial " + std::to_string(trial);
      return false;
    }

    // placement values recomputed directly from the definition
    std::vector<double> v10(m), v01(n);
    for (int i = 0; i < m; ++i) {
      double s = 0;
      for (int j = 0; j < n; ++j) s += pos[i] > neg[j] ? 1.0 : (pos[i] == neg[j] ? 0.5 : 0.0);
      v10[i] = s / n;
    }
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int i = 0; i < m; ++i) s += pos[i] > neg[j] ? 1.0 : (pos[i] == neg[j] ? 0.5 : 0.0);
      v01[j] = s / m;
    }
    double oracle_var = sample_var(v10) / m + sample_var(v01) / n;
    if (std::abs(delong_variance(pos, neg) - oracle_var) > 1e-12) {
      detail = "variance mismatch at trial " + std::to_string(trial);
      return false;
    }
    ++checked;
  }
  detail = std::to_string(checked) + " score sets exact";
  return true;
}

// --- 2: paired-test calibration ------------------------------------------

bool crit_calibration(std::string& detail) {
  Rng rng(77);
  const int trials = 1000, m = 40, n = 40;
  int rejections = 0;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> a, b;
    std::vector<int> labels;
    for (int i = 0; i < m + n; ++i) {
      // exchangeable pair: both scores drawn from the same distribution,
      // randomly swapped, so the equal-AUC null holds exactly
      double x = rng.uniform(), y = rng.uniform();
      if (rng.bernoulli(0.5)) std::swap(x, y);
      a.push_back(x);
      b.push_back(y);
      labels.push_back(i < m ? 1 : 0);
    }
    if (delong_paired_test(a, b, labels) < 0.05) ++rejections;
  }
  double rate = static_cast<double>(rejections) / trials;
  std::ostringstream os;
  os << "rejection rate " << rate << " over " << trials << " null trials";
  detail = os.str();
  return rate >= 0.03 && rate <= 0.08;
}

// --- 3: gated-loss rule table ---------------------------------------------

struct GateCase {
  int index;
  bool sup_clf, sup_seg, kd;
  std::optional<int> label;
};

Dataset one_stack_dataset(AnnotationLevel level, std::optional<int> label, int n_slices = 4) {
  StackRecord s;
  s.id = "case";
  s.domain = "A";
  s.annotation_level = level;
  s.breast_label = label;
  for (int k = 0; k < n_slices; ++k) {
    SliceRecord sl;
    sl.index = k;
    sl.image = Image(8, 8, 0.f);
    s.slices.push_back(std::move(sl));
  }
  if (level == AnnotationLevel::Full && label && *label == 1) {
    s.annotated_slice_index = 1;
    Image m(8, 8, 0.f);
    m.v[0] = 1.f;
    s.slices[1].mask = m;
  }
  Dataset ds;
  ds.stacks.push_back(std::move(s));
  ds.split["case"] = Split::Train;
  return ds;
}

bool crit_gate_table(std::string& detail) {
  LossConfig cfg;  // t_weak 0.1, t_noweak 0.7
  const int n = 4;
  int checked = 0;

  struct LevelCase {
    AnnotationLevel level;
    std::optional<int> label;
  };
  const LevelCase levels[] = {{AnnotationLevel::Full, 1},
                              {AnnotationLevel::Full, 0},
                              {AnnotationLevel::Weak, 1},
                              {AnnotationLevel::Weak, 0},
                              {AnnotationLevel::None, std::nullopt}};
  const Setting settings[] = {Setting::Baseline, Setting::Kd, Setting::KdWeak,
                              Setting::Selective, Setting::SelectiveWeak};
  // bands: below both thresholds, between, above both
  const float scores[] = {0.05f, 0.4f, 0.9f};

  auto expected = [&](const LevelCase& lc, Setting st, float score) {
    std::vector<GateCase> out;
    bool kd = st != Setting::Baseline;
    bool positive = lc.label && *lc.label == 1;
    auto all = [&] {
      for (int k = 0; k < n; ++k) out.push_back({k, false, false, true, std::nullopt});
    };
    auto filtered = [&](double t, bool sup, std::optional<int> lab) {
      if (static_cast<double>(score) > t)
        for (int k = 0; k < n; ++k) out.push_back({k, sup, false, true, lab});
    };
    if (lc.level == AnnotationLevel::Full) {
      if (positive)
        for (int k : {0, 1, 2}) out.push_back({k, true, true, kd, 1});
      else
        for (int k : {0, 2}) out.push_back({k, true, true, kd, 0});
      return out;
    }
    if (st == Setting::Baseline) return out;
    if (lc.level == AnnotationLevel::Weak && setting_uses_weak_labels(st)) {
      if (positive) {
        if (st == Setting::SelectiveWeak)
          filtered(cfg.t_weak, true, 1);
        else
          all();
      } else {
        for (int k : {0, 2}) out.push_back({k, true, false, true, 0});
      }
      return out;
    }
    // unannotated treatment (WEAK under kd/selective, NONE everywhere)
    if (setting_uses_filtering(st))
      filtered(cfg.t_noweak, false, std::nullopt);
    else
      all();
    return out;
  };

  for (const auto& lc : levels) {
    Dataset ds = one_stack_dataset(lc.level, lc.label, n);
    for (float score : scores) {
      PseudoLabelCache cache;
      for (int k = 0; k < n; ++k) cache.put("case", k, score);
      for (Setting st : settings) {
        auto sel = build_training_selection(ds, st, st == Setting::Baseline ? nullptr : &cache,
                                            cfg);
        auto exp = expected(lc, st, score);
        bool match = sel.size() == exp.size();
        for (size_t i = 0; match && i < sel.size(); ++i)
          match = sel[i].slice_index == exp[i].index && sel[i].use_sup_clf == exp[i].sup_clf &&
                  sel[i].use_sup_seg == exp[i].sup_seg && sel[i].use_kd == exp[i].kd &&
                  sel[i].hard_clf_label == exp[i].label;
        if (!match) {
          std::ostringstream os;
          os << "mismatch: level=" << to_string(lc.level) << " label="
             << (lc.label ? std::to_string(*lc.label) : "-") << " score=" << score
             << " setting=" << to_string(st) << " got " << sel.size() << " expected "
             << exp.size();
          detail = os.str();
          return false;
        }
        ++checked;
      }
    }
  }

  // exact-threshold ties are excluded ("above" is strict)
  {
    LossConfig tie = cfg;
    tie.t_weak = 0.25;  // float-exact thresholds so the tie is representable
    tie.t_noweak = 0.75;
    Dataset weak_pos = one_stack_dataset(AnnotationLevel::Weak, 1, n);
    Dataset none = one_stack_dataset(AnnotationLevel::None, std::nullopt, n);
    PseudoLabelCache cw, cn;
    for (int k = 0; k < n; ++k) cw.put("case", k, 0.25f);
    for (int k = 0; k < n; ++k) cn.put("case", k, 0.75f);
    if (!build_training_selection(weak_pos, Setting::SelectiveWeak, &cw, tie).empty() ||
        !build_training_selection(none, Setting::Selective, &cn, tie).empty()) {
      detail = "scores equal to the threshold were not excluded";
      return false;
    }
    checked += 2;
  }

  // strict gating also filters annotated slices on the teacher score
  {
    LossConfig strict = cfg;
    strict.strict_gating = true;
    Dataset full_pos = one_stack_dataset(AnnotationLevel::Full, 1, n);
    PseudoLabelCache cache;
    for (int k = 0; k < n; ++k) cache.put("case", k, 0.4f);
    // 0.4 <= t_noweak: selective drops the annotated slices entirely
    auto drop = build_training_selection(full_pos, Setting::Selective, &cache, strict);
    // 0.4 > t_weak: selective_weak keeps them
    auto keep = build_training_selection(full_pos, Setting::SelectiveWeak, &cache, strict);
    // gating is inactive without a teacher
    auto base = build_training_selection(full_pos, Setting::Baseline, nullptr, strict);
    if (!drop.empty() || keep.size() != 3 || base.size() != 3) {
      detail = "strict gating table mismatch";
      return false;
    }
    checked += 3;
  }

  detail = std::to_string(checked) + " rule-table cases exact";
  return true;
}

// --- 4: KD identity and alpha linearity -------------------------------------

bool crit_kd_identity(std::string& detail) {
  ArchDescriptor arch;
  arch.input_h = arch.input_w = 8;
  arch.channels = {2, 3};
  auto model = init_model(arch, 31);

  Image x(8, 8);
  Rng rng(9);
  for (auto& v : x.v) v = static_cast<float>(rng.uniform());

  auto out = forward(model, x);
  HeadOutputs teacher{out.clf_prob, out.seg_probs};

  LossConfig cfg;
  LossGates kd_only{false, false, true};
  auto same = combined_loss(kd_only, std::nullopt, nullptr, &teacher, teacher, cfg);
  if (same.kd_clf != 0.0 || same.kd_seg != 0.0 || same.total != 0.0) {
    detail = "student == teacher did not give exactly zero KD loss";
    return false;
  }

  // with only the seg KD term active, total == alpha_seg * kd_seg, so
  // doubling alpha_seg doubles the contribution exactly
  auto other = forward(init_model(arch, 32), x);
  HeadOutputs student{other.clf_prob, other.seg_probs};
  LossConfig a = cfg, b = cfg;
  a.alpha_clf = 0.0;
  b.alpha_clf = 0.0;
  b.alpha_seg = 2.0 * a.alpha_seg;
  auto la = combined_loss(kd_only, std::nullopt, nullptr, &teacher, student, a);
  auto lb = combined_loss(kd_only, std::nullopt, nullptr, &teacher, student, b);
  if (la.kd_seg != lb.kd_seg || la.kd_seg <= 0.0 || lb.total != 2.0 * la.total) {
    detail = "doubling alpha_seg did not exactly double the kd_seg contribution";
    return false;
  }

  // the raw components never depend on the weights
  LossGates all_gates{true, false, true};
  LossConfig c = cfg;
  c.alpha_seg = 2.0 * cfg.alpha_seg;
  auto l1 = combined_loss(all_gates, 1, nullptr, &teacher, student, cfg);
  auto l2 = combined_loss(all_gates, 1, nullptr, &teacher, student, c);
  if (l1.kd_seg != l2.kd_seg || l1.kd_clf != l2.kd_clf || l1.sup_clf != l2.sup_clf) {
    detail = "alpha reweighting changed a raw loss component";
    return false;
  }
  detail = "identity exact, linearity exact";
  return true;
}

// --- 5: gradient check -------------------------------------------------------

bool crit_gradient_check(std::string& detail) {
  ArchDescriptor arch;
  arch.input_h = arch.input_w = 8;
  arch.channels = {2, 3};
  auto model = init_model(arch, 21);

  Image x(8, 8);
  {
    Rng rng(99);
    for (auto& v : x.v) v = static_cast<float>(rng.below(256)) / 255.f;
  }
  Image seg_target(arch.feat_h(), arch.feat_w());
  {
    Rng rng(5);
    for (auto& v : seg_target.v) v = rng.bernoulli(0.3) ? 1.f : 0.f;
  }
  HeadOutputs teacher;
  teacher.clf_prob = 0.7f;
  teacher.seg_probs = Image(arch.feat_h(), arch.feat_w(), 0.35f);

  LossConfig cfg;
  int label = 1;

  // the same loss evaluated through a double-precision forward pass
  auto loss_of = [&](const DualHeadModel& m) {
    BasicForwardCache<double> c;
    forward_cached(m, x, c);
    auto bce1 = [](double p, double y) {
      p = std::clamp(p, static_cast<double>(kBceEps), 1.0 - kBceEps);
      return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    };
    double sup_clf = bce1(c.clf_prob, label);
    double sup_seg = 0, kd_seg = 0;
    for (size_t i = 0; i < c.seg_probs.size(); ++i) {
      sup_seg += bce1(c.seg_probs[i], seg_target.v[i]);
      double d = c.seg_probs[i] - teacher.seg_probs.v[i];
      kd_seg += d * d;
    }
    sup_seg /= static_cast<double>(c.seg_probs.size());
    kd_seg /= static_cast<double>(c.seg_probs.size());
    double dclf = c.clf_prob - teacher.clf_prob;
    return sup_clf + sup_seg + cfg.alpha_clf * dclf * dclf + cfg.alpha_seg * kd_seg;
  };

  ForwardCache cache;
  forward_cached(model, x, cache);
  TrainingExample ex;
  ex.gates = LossGates{true, true, true};
  ex.hard_clf_label = label;
  double d_clf = 0;
  std::vector<float> d_seg;
  skd::detail::loss_gradients(ex, &seg_target, &teacher, cache, cfg, 1.0, d_clf, d_seg);
  std::vector<float> grads(model.params.size(), 0.f);
  backward(model, cache, d_clf, d_seg, grads);

  const double eps = 1e-3;
  int checked = 0, ok = 0;
  for (size_t i = 0; i < model.params.size(); ++i) {
    auto mp = model;
    float wp = static_cast<float>(model.params[i] + eps);
    float wm = static_cast<float>(model.params[i] - eps);
    mp.params[i] = wp;
    double lp = loss_of(mp);
    mp.params[i] = wm;
    double lm = loss_of(mp);
    double fd = (lp - lm) / (static_cast<double>(wp) - static_cast<double>(wm));
    double an = grads[i];
    double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
    ++checked;
    if (std::abs(fd - an) / denom <= 1e-3 || std::abs(fd - an) < 1e-5) ++ok;
  }
  std::ostringstream os;
  os << ok << "/" << checked << " parameters within 1e-3";
  detail = os.str();
  return static_cast<double>(ok) / checked >= 0.95;
}

// --- 6/7 shared experiment configuration ------------------------------------

SynthConfig experiment_synth() {
  auto cfg = default_synth_config(16);
  for (const auto& g : {"cancer", "benign", "normal"}) cfg.counts["A"][g] = 24;
  return cfg;
}

double ood_auc(const EvalResult& ev) {
  std::vector<double> pos, neg;
  for (const auto& s : ev.scores)
    if (s.domain != "A") (s.label ? pos : neg).push_back(s.score);
  return auc(pos, neg);
}

constexpr int kTeacherIters = 600;
constexpr int kStudentIters = 1200;

bool crit_cross_domain(std::string& detail) {
  auto synth = experiment_synth();
  LossConfig loss;
  OptimizerConfig topt;
  topt.total_iterations = kTeacherIters;
  OptimizerConfig sopt = topt;
  sopt.total_iterations = kStudentIters;

  double mb = 0, ms = 0, mw = 0;
  int sel_wins = 0, selw_wins = 0;
  const int seeds = 5;
  for (uint64_t seed = 1; seed <= seeds; ++seed) {
    auto ds = generate_dataset(synth, 100 + seed);
    auto teacher = train_teacher(ds, ArchDescriptor{}, topt, loss, seed).model;
    auto cache = compute_pseudo_labels(teacher, ds, loss);
    auto sel = train_student(teacher, cache, ds, Setting::Selective, sopt, loss, seed, true).model;
    auto selw =
        train_student(teacher, cache, ds, Setting::SelectiveWeak, sopt, loss, seed, true).model;
    double b = ood_auc(evaluate(teacher, ds, Split::Test));
    double s = ood_auc(evaluate(sel, ds, Split::Test));
    double w = ood_auc(evaluate(selw, ds, Split::Test));
    std::fprintf(stderr, "  seed %llu: baseline %.3f selective %.3f selective_weak %.3f\n",
                 static_cast<unsigned long long>(seed), b, s, w);
    mb += b;
    ms += s;
    mw += w;
    if (s > b) ++sel_wins;
    if (w > b) ++selw_wins;
  }
  mb /= seeds;
  ms /= seeds;
  mw /= seeds;
  std::ostringstream os;
  os << "mean OOD AUC baseline " << mb << " selective " << ms << " selective_weak " << mw
     << "; selective_weak wins " << selw_wins << "/" << seeds;
  detail = os.str();
  return mb < ms && mb < mw && selw_wins >= 4;
}

bool crit_annotation_cost(std::string& detail) {
  auto synth = experiment_synth();
  LossConfig loss;
  OptimizerConfig topt;
  topt.total_iterations = kTeacherIters;
  OptimizerConfig sopt = topt;
  sopt.total_iterations = kStudentIters;

  const std::vector<double> fractions = {0.2, 0.3, 0.4, 0.5};
  const int seeds = 5;
  std::map<double, double> base_mean, sel_mean;
  for (uint64_t seed = 1; seed <= seeds; ++seed) {
    auto full = generate_dataset(synth, 200 + seed);
    for (double f : fractions) {
      auto ds = subsample_annotations(full, f, derive_seed(7, "sweep", seed));
      auto teacher = train_teacher(ds, ArchDescriptor{}, topt, loss, seed).model;
      auto cache = compute_pseudo_labels(teacher, ds, loss);
      auto sel =
          train_student(teacher, cache, ds, Setting::Selective, sopt, loss, seed, true).model;
      double b = evaluate(teacher, ds, Split::Test).pooled.auc;
      double s = evaluate(sel, ds, Split::Test).pooled.auc;
      std::fprintf(stderr, "  seed %llu f=%.1f: baseline %.3f selective %.3f\n",
                   static_cast<unsigned long long>(seed), f, b, s);
      base_mean[f] += b / seeds;
      sel_mean[f] += s / seeds;
    }
  }

  bool dominates = true;
  for (double f : fractions)
    if (sel_mean[f] < base_mean[f]) dominates = false;
  std::ostringstream os;
  os << "selective@0.2 " << sel_mean[0.2] << " vs baseline@0.4 " << base_mean[0.4]
     << (dominates ? "; selective >= baseline at all fractions" : "; dominance violated");
  detail = os.str();
  return sel_mean[0.2] >= base_mean[0.4] && dominates;
}

// --- 8: determinism ----------------------------------------------------------

bool files_identical(const fs::path& a, const fs::path& b) {
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  return slurp(a) == slurp(b);
}

bool trees_identical(const fs::path& a, const fs::path& b, std::string& why) {
  std::set<fs::path> ra, rb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) ra.insert(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rb.insert(fs::relative(e.path(), b));
  if (ra != rb) {
    why = "file lists differ";
    return false;
  }
  for (const auto& r : ra)
    if (!files_identical(a / r, b / r)) {
      why = "byte mismatch in " + r.string();
      return false;
    }
  return true;
}

bool json_close(const json& a, const json& b, double tol) {
  if (a.is_number() && b.is_number())
    return std::abs(a.get<double>() - b.get<double>()) <= tol;
  if (a.type() != b.type()) return false;
  if (a.is_object()) {
    if (a.size() != b.size()) return false;
    for (auto it = a.begin(); it != a.end(); ++it)
      if (!b.contains(it.key()) || !json_close(it.value(), b[it.key()], tol)) return false;
    return true;
  }
  if (a.is_array()) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
      if (!json_close(a[i], b[i], tol)) return false;
    return true;
  }
  return a == b;
}

bool crit_determinism(std::string& detail) {
  setenv("SKD_DETERMINISTIC", "1", 1);
  if (!deterministic_mode()) {
    detail = "SKD_DETERMINISTIC=1 not picked up";
    return false;
  }

  auto synth = default_synth_config(4);
  synth.slices_min = 5;
  synth.slices_max = 6;
  synth.lesion_span_min = synth.lesion_span_max = 3;

  // identical (config, seed) => byte-identical dataset directories
  auto d1 = scratch("det_data1"), d2 = scratch("det_data2");
  save_dataset(generate_dataset(synth, 21), d1);
  save_dataset(generate_dataset(synth, 21), d2);
  std::string why;
  if (!trees_identical(d1, d2, why)) {
    detail = "dataset rerun not byte-identical: " + why;
    return false;
  }

  // two full reruns of a selective experiment (teacher trained inside)
  ExperimentConfig cfg;
  cfg.setting = Setting::Selective;
  cfg.seed = 3;
  cfg.optimizer.total_iterations = 60;
  cfg.optimizer.batch_size = 4;
  auto ds = load_dataset(d1);
  auto r1 = scratch("det_run1"), r2 = scratch("det_run2");
  run_setting(cfg, ds, 1, r1);
  run_setting(cfg, ds, 1, r2);

  if (!files_identical(r1 / "selection.jsonl", r2 / "selection.jsonl")) {
    detail = "selection manifests differ between reruns";
    return false;
  }
  json m1 = json::parse(std::ifstream(r1 / "metrics.json"));
  json m2 = json::parse(std::ifstream(r2 / "metrics.json"));
  if (!json_close(m1, m2, 1e-6)) {
    detail = "metrics differ beyond 1e-6 between reruns";
    return false;
  }
  for (const auto& p : {d1, d2, r1, r2}) fs::remove_all(p);
  detail = "datasets byte-identical, manifests byte-identical, metrics within 1e-6";
  return true;
}

// --- 9: property suites --------------------------------------------------

bool prop_pl_select(std::string& detail) {
  Rng rng(411);
  for (int t = 0; t < 1000; ++t) {
    std::map<int, float> scores;
    int n = 1 + static_cast<int>(rng.below(30));
    for (int k = 0; k < n; ++k)
      scores[k] = static_cast<float>(rng.below(21)) / 20.f;
    double t1 = static_cast<double>(rng.below(21)) / 20.0;
    double t2 = static_cast<double>(rng.below(21)) / 20.0;
    if (t1 > t2) std::swap(t1, t2);
    auto lo = pl_select(scores, t1);
    auto hi = pl_select(scores, t2);
    // monotone: raising the threshold only removes slices
    if (!std::includes(lo.begin(), lo.end(), hi.begin(), hi.end())) {
      detail = "pl_select monotonicity violated at case " + std::to_string(t);
      return false;
    }
    for (int k : lo)
      if (!(static_cast<double>(scores[k]) > t1)) {
        detail = "pl_select kept a tied or below-threshold score";
        return false;
      }
    for (const auto& [k, s] : scores)
      if (static_cast<double>(s) > t1 &&
          !std::binary_search(lo.begin(), lo.end(), k)) {
        detail = "pl_select dropped an above-threshold score";
        return false;
      }
  }
  return true;
}

bool prop_expand_stride(std::string& detail) {
  Rng rng(412);
  for (int t = 0; t < 1000; ++t) {
    int n = 1 + static_cast<int>(rng.below(12));
    int a = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
    auto ex = expand_annotated_indices(a, n);
    bool ok = !ex.empty() && std::is_sorted(ex.begin(), ex.end());
    for (int k : ex) ok = ok && k >= 0 && k < n && std::abs(k - a) <= 1;
    int want = 1 + (a > 0 ? 1 : 0) + (a < n - 1 ? 1 : 0);
    ok = ok && static_cast<int>(ex.size()) == want &&
         std::count(ex.begin(), ex.end(), a) == 1;

    int stride = 1 + static_cast<int>(rng.below(4));
    int offset = static_cast<int>(rng.below(static_cast<uint64_t>(stride)));
    auto st = strided_indices(n, stride, offset);
    for (size_t i = 0; i < st.size(); ++i)
      ok = ok && st[i] == offset + static_cast<int>(i) * stride && st[i] < n;
    ok = ok && static_cast<int>(st.size()) == (n - offset + stride - 1) / stride;
    if (!ok) {
      detail = "expand/stride boundary violated at case " + std::to_string(t);
      return false;
    }
  }
  bool threw = false;
  try {
    expand_annotated_indices(3, 3);
  } catch (const ValidationError&) {
    threw = true;
  }
  try {
    strided_indices(4, 0);
    threw = false;
  } catch (const ValidationError&) {
  }
  if (!threw) {
    detail = "out-of-range inputs did not throw";
    return false;
  }
  return true;
}

bool prop_dataset_roundtrip(std::string& detail) {
  Rng rng(413);
  auto dir = scratch("roundtrip");
  int cases = 0;
  for (int t = 0; t < 250; ++t) {
    Dataset ds;
    int n_stacks = 4;
    for (int s = 0; s < n_stacks; ++s) {
      StackRecord st;
      st.id = "s" + std::to_string(s);
      st.domain = s % 2 ? "B" : "A";
      st.subgroup = static_cast<Subgroup>(rng.below(3));
      int n = 1 + static_cast<int>(rng.below(4));
      for (int k = 0; k < n; ++k) {
        SliceRecord sl;
        sl.index = k;
        sl.image = Image(8, 8);
        // PGM stores 8-bit levels; quantized values survive exactly
        for (auto& v : sl.image.v) v = static_cast<float>(rng.below(256)) / 255.f;
        st.slices.push_back(std::move(sl));
      }
      switch (rng.below(4)) {
        case 0: {  // FULL positive
          st.annotation_level = AnnotationLevel::Full;
          st.breast_label = 1;
          st.annotated_slice_index = static_cast<int>(rng.below(st.slices.size()));
          Image m(8, 8, 0.f);
          for (auto& v : m.v) v = rng.bernoulli(0.2) ? 1.f : 0.f;
          m.v[0] = 1.f;
          st.slices[*st.annotated_slice_index].mask = std::move(m);
          break;
        }
        case 1:
          st.annotation_level = AnnotationLevel::Full;
          st.breast_label = 0;
          break;
        case 2:
          st.annotation_level = AnnotationLevel::Weak;
          st.breast_label = rng.bernoulli(0.5) ? 1 : 0;
          break;
        default:
          st.annotation_level = AnnotationLevel::None;
          break;
      }
      ds.split[st.id] = static_cast<Split>(rng.below(3));
      if (st.breast_label) ds.eval_truth[st.id] = *st.breast_label;
      ds.stacks.push_back(std::move(st));
      ++cases;
    }
    fs::remove_all(dir);
    save_dataset(ds, dir);
    if (!(load_dataset(dir) == ds)) {
      detail = "round-trip mismatch at dataset " + std::to_string(t);
      return false;
    }
  }
  fs::remove_all(dir);
  detail = std::to_string(cases) + " stacks round-tripped";
  return true;
}

bool prop_subsample_nesting(std::string& detail) {
  auto synth = default_synth_config(4);
  synth.slices_min = 5;
  synth.slices_max = 6;
  synth.lesion_span_min = synth.lesion_span_max = 3;
  auto full = generate_dataset(synth, 31);

  auto annotated_ids = [](const Dataset& ds) {
    std::set<std::string> out;
    for (const auto& s : ds.stacks)
      if (s.annotation_level != AnnotationLevel::None) out.insert(s.id);
    return out;
  };

  Rng rng(414);
  for (int t = 0; t < 1000; ++t) {
    double f1 = 0.05 + 0.95 * rng.uniform();
    double f2 = 0.05 + 0.95 * rng.uniform();
    if (f1 > f2) std::swap(f1, f2);
    uint64_t seed = rng.next_u64();
    auto a = annotated_ids(subsample_annotations(full, f1, seed));
    auto b = annotated_ids(subsample_annotations(full, f2, seed));
    if (!std::includes(b.begin(), b.end(), a.begin(), a.end())) {
      detail = "kept sets do not nest at case " + std::to_string(t);
      return false;
    }
  }
  return true;
}

bool prop_frozen_hash(std::string& detail) {
  ArchDescriptor arch;
  arch.input_h = arch.input_w = 8;
  arch.channels = {2};

  Rng rng(415);
  for (int t = 0; t < 1000; ++t) {
    auto teacher = init_model(arch, rng.next_u64());
    teacher.frozen = true;

    Dataset ds;
    for (int s = 0; s < 2; ++s) {
      StackRecord st;
      st.id = "s" + std::to_string(s);
      st.domain = "B";
      st.annotation_level = s ? AnnotationLevel::None : AnnotationLevel::Weak;
      if (!s) st.breast_label = 1;
      for (int k = 0; k < 3; ++k) {
        SliceRecord sl;
        sl.index = k;
        sl.image = Image(8, 8);
        for (auto& v : sl.image.v) v = static_cast<float>(rng.uniform());
        st.slices.push_back(std::move(sl));
      }
      ds.split[st.id] = Split::Train;
      ds.stacks.push_back(std::move(st));
    }

    uint64_t before = teacher.param_hash();
    compute_pseudo_labels(teacher, ds, LossConfig{});
    stack_score(teacher, ds.stacks[0]);
    if (teacher.param_hash() != before) {
      detail = "teacher parameters changed at case " + std::to_string(t);
      return false;
    }
  }
  return true;
}

bool crit_properties(std::string& detail) {
  struct Suite {
    const char* name;
    bool (*fn)(std::string&);
  };
  const Suite suites[] = {{"pl_select monotonicity", prop_pl_select},
                          {"expand/stride boundaries", prop_expand_stride},
                          {"dataset round-trip", prop_dataset_roundtrip},
                          {"subsample nesting", prop_subsample_nesting},
                          {"frozen-teacher invariance", prop_frozen_hash}};
  for (const auto& s : suites) {
    std::string sub;
    if (!s.fn(sub)) {
      detail = std::string(s.name) + ": " + sub;
      return false;
    }
  }
  detail = "5 suites x >=1000 cases";
  return true;
}

}  // namespace

int main() {
  run(1, "statistics oracle", crit_stats_oracle);
  run(2, "paired-test calibration", crit_calibration);
  run(3, "gated-loss rule table", crit_gate_table);
  run(4, "KD identity and alpha linearity", crit_kd_identity);
  run(5, "gradient check", crit_gradient_check);
  run(6, "cross-domain improvement", crit_cross_domain);
  run(7, "annotation-cost parity", crit_annotation_cost);
  run(8, "determinism", crit_determinism);
  run(9, "property suites", crit_properties);
  return g_failures;
}
