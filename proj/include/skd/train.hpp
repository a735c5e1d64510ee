#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "skd/datamodel.hpp"
#include "skd/losses.hpp"
#include "skd/model.hpp"
#include "skd/sampling.hpp"

namespace skd {

// --- augmentation --------------------------------------------------------

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  int rot_k = 0;  // multiples of 90 degrees, counter-clockwise
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;
  uint64_t noise_seed = 0;

  static AugmentParams identity() { return {}; }
};

inline AugmentParams sample_augment_params(Rng& rng, double noise_sigma = 0.02) {
  AugmentParams p;
  p.hflip = rng.bernoulli(0.5);
  p.vflip = rng.bernoulli(0.5);
  p.rot_k = static_cast<int>(rng.below(4));
  p.brightness = rng.uniform(-0.1, 0.1);
  p.contrast = rng.uniform(0.8, 1.2);
  p.noise_sigma = noise_sigma;
  p.noise_seed = rng.next_u64();
  return p;
}

namespace detail {

inline Image geometric_transform(const Image& img, const AugmentParams& p) {
  Image cur = img;
  if (p.hflip) {
    Image out(cur.h, cur.w);
    for (int r = 0; r < cur.h; ++r)
      for (int c = 0; c < cur.w; ++c) out.at(r, c) = cur.at(r, cur.w - 1 - c);
    cur = std::move(out);
  }
  if (p.vflip) {
    Image out(cur.h, cur.w);
    for (int r = 0; r < cur.h; ++r)
      for (int c = 0; c < cur.w; ++c) out.at(r, c) = cur.at(cur.h - 1 - r, c);
    cur = std::move(out);
  }
  for (int k = 0; k < (p.rot_k & 3); ++k) {
    Image out(cur.w, cur.h);
    for (int r = 0; r < cur.h; ++r)
      for (int c = 0; c < cur.w; ++c) out.at(cur.w - 1 - c, r) = cur.at(r, c);
    cur = std::move(out);
  }
  return cur;
}

}  // namespace detail

// Geometric ops hit image and mask alike; photometric ops only the image.
inline std::pair<Image, std::optional<Image>> apply_augment(const Image& x,
                                                            const std::optional<Image>& mask,
                                                            const AugmentParams& p) {
  Image xt = detail::geometric_transform(x, p);
  std::optional<Image> mt;
  if (mask) mt = detail::geometric_transform(*mask, p);

  Rng noise(p.noise_seed);
  for (auto& v : xt.v) {
    double y = static_cast<double>(v) * p.contrast + p.brightness;
    if (p.noise_sigma > 0.0) y += p.noise_sigma * noise.normal();
    v = clamp01(static_cast<float>(y));
  }
  return {std::move(xt), std::move(mt)};
}

inline std::pair<Image, std::optional<Image>> augment(const Image& x,
                                                      const std::optional<Image>& mask,
                                                      uint64_t rng_seed) {
  Rng rng(rng_seed);
  return apply_augment(x, mask, sample_augment_params(rng));
}

// --- training examples ----------------------------------------------------

struct TrainingExample {
  Image x;
  Image x_tilde;
  std::optional<int> hard_clf_label;
  std::optional<Image> hard_seg_mask;  // full-res, augmented alongside x_tilde
  LossGates gates;
  std::string stack_id;
  int slice_index = 0;
};

// Block-average a full-resolution binary mask down to the segmentation
// head's resolution; targets become soft occupancy fractions.
inline Image downsample_mask(const Image& mask, int factor) {
  Image out(mask.h / factor, mask.w / factor);
  for (int r = 0; r < out.h; ++r)
    for (int c = 0; c < out.w; ++c) {
      double s = 0;
      for (int dr = 0; dr < factor; ++dr)
        for (int dc = 0; dc < factor; ++dc) s += mask.at(r * factor + dr, c * factor + dc);
      out.at(r, c) = static_cast<float>(s / (factor * factor));
    }
  return out;
}

// --- loss gradients --------------------------------------------------------

namespace detail {

inline double clamp_prob(double p) {
  return std::min(1.0 - kBceEps, std::max(kBceEps, p));
}

// d(total)/d(clf_prob) and d(total)/d(seg_probs) for one example.
inline void loss_gradients(const TrainingExample& ex, const Image* seg_target,
                           const HeadOutputs* teacher, const ForwardCache& student,
                           const LossConfig& cfg, double weight, double& d_clf,
                           std::vector<float>& d_seg) {
  d_clf = 0.0;
  d_seg.assign(student.seg_probs.size(), 0.f);

  if (ex.gates.use_sup_clf) {
    double p = clamp_prob(student.clf_prob);
    double y = static_cast<double>(*ex.hard_clf_label);
    d_clf += weight * (p - y) / (p * (1.0 - p));
  }
  if (ex.gates.use_sup_seg) {
    double n = static_cast<double>(seg_target->size());
    for (size_t i = 0; i < seg_target->size(); ++i) {
      double p = clamp_prob(student.seg_probs[i]);
      double y = seg_target->v[i];
      d_seg[i] += static_cast<float>(weight * (p - y) / (p * (1.0 - p)) / n);
    }
  }
  if (ex.gates.use_kd) {
    d_clf += weight * cfg.alpha_clf * 2.0 *
             (static_cast<double>(student.clf_prob) - teacher->clf_prob);
    double n = static_cast<double>(student.seg_probs.size());
    for (size_t i = 0; i < d_seg.size(); ++i)
      d_seg[i] += static_cast<float>(weight * cfg.alpha_seg * 2.0 *
                                     (student.seg_probs[i] - teacher->seg_probs.v[i]) / n);
  }
}

}  // namespace detail

// --- training loop ----------------------------------------------------------

struct TrainLogRow {
  int iteration = 0;
  double lr = 0;
  double sup_clf = 0, sup_seg = 0, kd_clf = 0, kd_seg = 0, total = 0;
};

inline void save_train_log(const std::vector<TrainLogRow>& rows, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration,lr,sup_clf,sup_seg,kd_clf,kd_seg,total\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.lr,
                  r.sup_clf, r.sup_seg, r.kd_clf, r.kd_seg, r.total);
    out << buf;
  }
}

// Test instrumentation: observes the shared augmented view handed to the
// teacher and the student for every KD-active example.
struct TrainHooks {
  std::function<void(const Image& teacher_input, const Image& student_input)> on_kd_example;
};

struct TrainResult {
  DualHeadModel model;
  std::vector<TrainLogRow> log;
};

// Core loop shared by teacher and student training. The teacher, when
// present, is only ever read.
inline TrainResult train_on_selection(DualHeadModel student,
                                      const std::vector<SliceSelection>& selections,
                                      const Dataset& dataset, const DualHeadModel* teacher,
                                      const OptimizerConfig& opt, const LossConfig& loss_cfg,
                                      uint64_t seed, const TrainHooks* hooks = nullptr) {
  opt.validate();
  loss_cfg.validate();
  if (selections.empty()) throw ValidationError("training selection is empty");

  std::map<std::string, const StackRecord*> by_id;
  for (const auto& s : dataset.stacks) by_id[s.id] = &s;

  struct Item {
    const SliceSelection* sel;
    const Image* image;
    std::optional<Image> seg_mask;  // full-res supervised target
  };
  std::vector<Item> items;
  items.reserve(selections.size());
  for (const auto& sel : selections) {
    auto it = by_id.find(sel.stack_id);
    if (it == by_id.end()) throw ValidationError("selection references unknown stack: " + sel.stack_id);
    const StackRecord& st = *it->second;
    if (sel.slice_index < 0 || sel.slice_index >= st.n_slices())
      throw ValidationError("selection slice out of range in stack " + sel.stack_id);
    Item item{&sel, &st.slices[sel.slice_index].image, std::nullopt};
    if (sel.use_sup_seg) {
      // positive stacks share the annotated slice's mask across the
      // expanded neighbours; negatives train against an empty map
      if (st.annotated_slice_index && st.slices[*st.annotated_slice_index].mask)
        item.seg_mask = *st.slices[*st.annotated_slice_index].mask;
      else
        item.seg_mask = Image(item.image->h, item.image->w, 0.f);
    }
    items.push_back(std::move(item));
  }

  const int factor = student.arch.downscale();
  std::vector<float> grads(student.params.size(), 0.f);
  std::vector<float> velocity(student.params.size(), 0.f);
  std::vector<size_t> order;
  size_t cursor = 0;
  int epoch = 0;
  ForwardCache scache, tcache;
  std::vector<float> d_seg;
  std::vector<TrainLogRow> log;
  log.reserve(opt.total_iterations);

  auto reshuffle = [&]() {
    order.resize(items.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(derive_seed(seed, "shuffle", static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    cursor = 0;
    ++epoch;
  };
  reshuffle();

  for (int iter = 0; iter < opt.total_iterations; ++iter) {
    std::fill(grads.begin(), grads.end(), 0.f);
    TrainLogRow row;
    row.iteration = iter;
    row.lr = lr_at(iter, opt);
    double weight = 1.0 / opt.batch_size;

    for (int b = 0; b < opt.batch_size; ++b) {
      if (cursor >= order.size()) reshuffle();
      const Item& item = items[order[cursor++]];
      const SliceSelection& sel = *item.sel;

      Rng arng(derive_seed(seed, "augment", static_cast<uint64_t>(iter) * 100003ull + b));
      auto params = sample_augment_params(arng);
      auto [x_tilde, mask_tilde] = apply_augment(*item.image, item.seg_mask, params);

      forward_cached(student, x_tilde, scache);

      HeadOutputs teacher_out;
      const HeadOutputs* teacher_ptr = nullptr;
      if (sel.use_kd) {
        if (!teacher) throw ValidationError("KD-gated example without a teacher");
        forward_cached(*teacher, x_tilde, tcache);
        teacher_out = HeadOutputs{tcache.clf_prob, tcache.seg_probs_image()};
        teacher_ptr = &teacher_out;
        if (hooks && hooks->on_kd_example) hooks->on_kd_example(x_tilde, x_tilde);
      }

      std::optional<Image> seg_target;
      if (sel.use_sup_seg) seg_target = downsample_mask(*mask_tilde, factor);

      TrainingExample ex;
      ex.gates = LossGates{sel.use_sup_clf, sel.use_sup_seg, sel.use_kd};
      ex.hard_clf_label = sel.hard_clf_label;
      HeadOutputs student_out{scache.clf_prob, scache.seg_probs_image()};
      LossBreakdown lb = combined_loss(ex.gates, sel.hard_clf_label,
                                       seg_target ? &*seg_target : nullptr, teacher_ptr,
                                       student_out, loss_cfg);
      if (!std::isfinite(lb.total))
        throw ValidationError("training diverged at iteration " + std::to_string(iter));
      row.sup_clf += lb.sup_clf * weight;
      row.sup_seg += lb.sup_seg * weight;
      row.kd_clf += lb.kd_clf * weight;
      row.kd_seg += lb.kd_seg * weight;
      row.total += lb.total * weight;

      double d_clf = 0;
      ex.x_tilde = x_tilde;  // for gradient helper signature symmetry
      detail::loss_gradients(ex, seg_target ? &*seg_target : nullptr, teacher_ptr, scache,
                             loss_cfg, weight, d_clf, d_seg);
      backward(student, scache, d_clf, d_seg, grads);
    }

    sgd_update(student.params, grads, velocity, row.lr, opt.momentum, opt.weight_decay);
    log.push_back(row);
  }

  student.trained_iterations = opt.total_iterations;
  student.frozen = true;
  return TrainResult{std::move(student), std::move(log)};
}

// --- public entry points -----------------------------------------------

inline TrainResult train_teacher(const Dataset& dataset, const ArchDescriptor& arch,
                                 const OptimizerConfig& opt, const LossConfig& loss_cfg,
                                 uint64_t seed) {
  auto selections = build_training_selection(dataset, Setting::Baseline, nullptr, loss_cfg);
  if (selections.empty()) throw ValidationError("no annotated stacks in the train split");
  auto model = init_model(arch, derive_seed(seed, "teacher-init"));
  return train_on_selection(std::move(model), selections, dataset, nullptr, opt, loss_cfg, seed);
}

// Teacher classification scores on non-augmented slices of every candidate
// stack in the train split.
inline PseudoLabelCache compute_pseudo_labels(const DualHeadModel& teacher, const Dataset& dataset,
                                              const LossConfig& loss_cfg) {
  if (!teacher.frozen) throw ValidationError("pseudo-labels require a frozen teacher");
  PseudoLabelCache cache;
  for (const auto& stack : dataset.stacks) {
    if (dataset.split_of(stack.id) != Split::Train) continue;
    bool candidate = stack.annotation_level != AnnotationLevel::Full || loss_cfg.strict_gating;
    if (!candidate) continue;
    for (const auto& sl : stack.slices)
      cache.put(stack.id, sl.index, forward(teacher, sl.image).clf_prob);
  }
  return cache;
}

inline TrainResult train_student(const DualHeadModel& teacher, const PseudoLabelCache& cache,
                                 const Dataset& dataset, Setting setting,
                                 const OptimizerConfig& opt, const LossConfig& loss_cfg,
                                 uint64_t seed, bool warm_start = false,
                                 const TrainHooks* hooks = nullptr) {
  if (setting == Setting::Baseline)
    throw ValidationError("student training requires a KD setting");
  if (!teacher.frozen) throw ValidationError("teacher must be frozen");
  auto selections = build_training_selection(dataset, setting, &cache, loss_cfg);
  DualHeadModel student =
      warm_start ? teacher : init_model(teacher.arch, derive_seed(seed, "student-init"));
  student.frozen = false;
  student.trained_iterations = 0;
  return train_on_selection(std::move(student), selections, dataset, &teacher, opt, loss_cfg,
                            seed, hooks);
}

}  // namespace skd
