#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/datamodel.hpp"
#include "skd/losses.hpp"

namespace skd {

enum class Setting { Baseline, Kd, KdWeak, Selective, SelectiveWeak };

inline const char* to_string(Setting s) {
  switch (s) {
    case Setting::Baseline: return "baseline";
    case Setting::Kd: return "kd";
    case Setting::KdWeak: return "kd_weak";
    case Setting::Selective: return "selective";
    default: return "selective_weak";
  }
}

inline Setting setting_from_string(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "baseline") return Setting::Baseline;
  if (s == "kd") return Setting::Kd;
  if (s == "kd_weak") return Setting::KdWeak;
  if (s == "selective") return Setting::Selective;
  if (s == "selective_weak") return Setting::SelectiveWeak;
  throw ValidationError("unknown setting: " + s);
}

inline bool setting_uses_teacher(Setting s) { return s != Setting::Baseline; }
inline bool setting_uses_weak_labels(Setting s) {
  return s == Setting::KdWeak || s == Setting::SelectiveWeak;
}
inline bool setting_uses_filtering(Setting s) {
  return s == Setting::Selective || s == Setting::SelectiveWeak;
}

// Teacher classification scores on the non-augmented images.
struct PseudoLabelCache {
  std::map<std::string, std::map<int, float>> entries;  // stack_id -> slice -> score

  void put(const std::string& stack_id, int slice_index, float score) {
    if (score < 0.f || score > 1.f) throw ValidationError("pseudo-label score outside [0,1]");
    entries[stack_id][slice_index] = score;
  }

  std::optional<float> get(const std::string& stack_id, int slice_index) const {
    auto it = entries.find(stack_id);
    if (it == entries.end()) return std::nullopt;
    auto jt = it->second.find(slice_index);
    if (jt == it->second.end()) return std::nullopt;
    return jt->second;
  }

  float require(const std::string& stack_id, int slice_index) const {
    auto s = get(stack_id, slice_index);
    if (!s)
      throw ValidationError("pseudo-label cache miss: " + stack_id + " slice " +
                            std::to_string(slice_index));
    return *s;
  }

  void save(const fs::path& path) const {
    json j = json::object();
    for (const auto& [id, slices] : entries)
      for (const auto& [k, score] : slices) j[id][std::to_string(k)] = score;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump() << "\n";
  }

  static PseudoLabelCache load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("missing pseudo-label cache: " + path.string());
    PseudoLabelCache c;
    json j = json::parse(in);
    for (auto it = j.begin(); it != j.end(); ++it)
      for (auto jt = it.value().begin(); jt != it.value().end(); ++jt)
        c.entries[it.key()][std::stoi(jt.key())] = jt.value().get<float>();
    return c;
  }
};

struct SliceSelection {
  std::string stack_id;
  int slice_index = 0;
  bool use_sup_clf = false;
  bool use_sup_seg = false;
  bool use_kd = false;
  std::optional<int> hard_clf_label;

  bool operator==(const SliceSelection& o) const {
    return stack_id == o.stack_id && slice_index == o.slice_index &&
           use_sup_clf == o.use_sup_clf && use_sup_seg == o.use_sup_seg && use_kd == o.use_kd &&
           hard_clf_label == o.hard_clf_label;
  }
};

// The annotated slice plus its immediate neighbours, clipped to the stack.
inline std::vector<int> expand_annotated_indices(int annotated_index, int n_slices) {
  if (annotated_index < 0 || annotated_index >= n_slices)
    throw ValidationError("annotated index out of range");
  std::vector<int> out;
  for (int k = annotated_index - 1; k <= annotated_index + 1; ++k)
    if (k >= 0 && k < n_slices) out.push_back(k);
  return out;
}

inline std::vector<int> strided_indices(int n_slices, int stride, int offset = 0) {
  if (stride < 1) throw ValidationError("stride must be >= 1");
  if (offset < 0 || offset >= stride) throw ValidationError("offset must lie in [0, stride)");
  std::vector<int> out;
  for (int k = offset; k < n_slices; k += stride) out.push_back(k);
  return out;
}

// "above a predefined confidence threshold": strict inequality, ties excluded.
inline std::vector<int> pl_select(const std::map<int, float>& scores, double threshold) {
  if (threshold < 0.0 || threshold > 1.0) throw ValidationError("threshold must lie in [0,1]");
  std::vector<int> out;
  for (const auto& [k, s] : scores)
    if (s > threshold) out.push_back(k);
  return out;
}

namespace detail {

inline std::map<int, float> stack_scores(const PseudoLabelCache& cache, const StackRecord& s) {
  std::map<int, float> out;
  for (const auto& sl : s.slices) out[sl.index] = cache.require(s.id, sl.index);
  return out;
}

inline std::vector<int> all_indices(const StackRecord& s) {
  std::vector<int> out;
  for (const auto& sl : s.slices) out.push_back(sl.index);
  return out;
}

}  // namespace detail

constexpr int kNegativeStride = 2;

// Per-setting assembly of the training set over the train split.
//
//   baseline        FULL stacks only, supervised losses.
//   kd              + WEAK/NONE stacks, weak labels ignored, KD on all slices.
//   kd_weak         + WEAK negatives as supervised negatives (strided);
//                     WEAK positives KD-only on all slices.
//   selective       as kd, added slices filtered at t_noweak.
//   selective_weak  as kd_weak; WEAK positive slices filtered at t_weak and
//                     given a supervised positive label; NONE stacks filtered
//                     at t_noweak.
inline std::vector<SliceSelection> build_training_selection(const Dataset& dataset,
                                                            Setting setting,
                                                            const PseudoLabelCache* pl_cache,
                                                            const LossConfig& cfg) {
  cfg.validate();
  if (setting_uses_teacher(setting) && !pl_cache)
    throw ValidationError("settings with a teacher require a pseudo-label cache");

  const bool kd = setting_uses_teacher(setting);
  std::vector<SliceSelection> out;

  auto push = [&](const StackRecord& s, int idx, bool sup_clf, bool sup_seg, bool use_kd,
                  std::optional<int> label) {
    out.push_back(SliceSelection{s.id, idx, sup_clf, sup_seg, use_kd, label});
  };

  // In strict mode annotated data is gated on the teacher score too.
  auto pass_strict = [&](const StackRecord& s, int idx) {
    if (!cfg.strict_gating || !kd || !setting_uses_filtering(setting)) return true;
    double t = setting_uses_weak_labels(setting) ? cfg.t_weak : cfg.t_noweak;
    return pl_cache->require(s.id, idx) > t;
  };

  for (const auto& stack : dataset.stacks) {
    if (dataset.split_of(stack.id) != Split::Train) continue;

    const bool full = stack.annotation_level == AnnotationLevel::Full;
    const bool weak = stack.annotation_level == AnnotationLevel::Weak;
    const bool positive = stack.breast_label && *stack.breast_label == 1;

    if (full && positive) {
      for (int k : expand_annotated_indices(*stack.annotated_slice_index, stack.n_slices()))
        if (pass_strict(stack, k)) push(stack, k, true, true, kd, 1);
      continue;
    }
    if (full && !positive) {
      for (int k : strided_indices(stack.n_slices(), kNegativeStride))
        if (pass_strict(stack, k)) push(stack, k, true, true, kd, 0);
      continue;
    }
    if (setting == Setting::Baseline) continue;  // only the annotated dataset

    if (weak && setting_uses_weak_labels(setting)) {
      if (positive) {
        if (setting == Setting::SelectiveWeak) {
          // supervised + KD on teacher-selected slices, no segmentation target
          for (int k : pl_select(detail::stack_scores(*pl_cache, stack), cfg.t_weak))
            push(stack, k, true, false, true, 1);
        } else {  // kd_weak: all slices, KD only
          for (int k : detail::all_indices(stack)) push(stack, k, false, false, true, std::nullopt);
        }
      } else {
        // negative stacks: every slice is safely negative; strided subsampling
        for (int k : strided_indices(stack.n_slices(), kNegativeStride))
          push(stack, k, true, false, true, 0);
      }
      continue;
    }

    // added data treated as unannotated (WEAK in settings 2/4, NONE everywhere)
    std::vector<int> idx;
    if (setting_uses_filtering(setting))
      idx = pl_select(detail::stack_scores(*pl_cache, stack), cfg.t_noweak);
    else
      idx = detail::all_indices(stack);
    for (int k : idx) push(stack, k, false, false, true, std::nullopt);
  }
  return out;
}

// --- JSON-lines manifest ------------------------------------------------

inline void save_selection_manifest(const std::vector<SliceSelection>& sel, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& s : sel) {
    json j{{"stack_id", s.stack_id},
           {"slice_index", s.slice_index},
           {"use_sup_clf", s.use_sup_clf},
           {"use_sup_seg", s.use_sup_seg},
           {"use_kd", s.use_kd}};
    if (s.hard_clf_label) j["hard_clf_label"] = *s.hard_clf_label;
    out << j.dump() << "\n";
  }
}

inline std::vector<SliceSelection> load_selection_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing selection manifest: " + path.string());
  std::vector<SliceSelection> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    SliceSelection s;
    s.stack_id = j.at("stack_id").get<std::string>();
    s.slice_index = j.at("slice_index").get<int>();
    s.use_sup_clf = j.at("use_sup_clf").get<bool>();
    s.use_sup_seg = j.at("use_sup_seg").get<bool>();
    s.use_kd = j.at("use_kd").get<bool>();
    if (j.contains("hard_clf_label")) s.hard_clf_label = j["hard_clf_label"].get<int>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace skd
