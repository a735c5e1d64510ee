#pragma once

#include <cmath>
#include <optional>
#include <span>

#include <json.hpp>

#include "skd/common.hpp"

namespace skd {

using json = nlohmann::json;

// Thresholds and weights of the gated dual loss.
struct LossConfig {
  double t_weak = 0.1;    // PL threshold when weak annotations are used
  double t_noweak = 0.7;  // PL threshold when added data is treated as unannotated
  double alpha_clf = 1.0;
  double alpha_seg = 25.0;
  bool strict_gating = false;  // also gate annotated data on teacher score

  void validate() const {
    if (t_weak < 0 || t_weak > 1 || t_noweak < 0 || t_noweak > 1)
      throw ValidationError("thresholds must lie in [0,1]");
    if (alpha_clf < 0 || alpha_seg < 0) throw ValidationError("alpha weights must be >= 0");
  }
};

inline void to_json(json& j, const LossConfig& c) {
  j = json{{"t_weak", c.t_weak},
           {"t_noweak", c.t_noweak},
           {"alpha_clf", c.alpha_clf},
           {"alpha_seg", c.alpha_seg},
           {"strict_gating", c.strict_gating}};
}
inline void from_json(const json& j, LossConfig& c) {
  LossConfig def;
  c.t_weak = j.value("t_weak", def.t_weak);
  c.t_noweak = j.value("t_noweak", def.t_noweak);
  c.alpha_clf = j.value("alpha_clf", def.alpha_clf);
  c.alpha_seg = j.value("alpha_seg", def.alpha_seg);
  c.strict_gating = j.value("strict_gating", def.strict_gating);
}

struct LossBreakdown {
  double sup_clf = 0;
  double sup_seg = 0;
  double kd_clf = 0;
  double kd_seg = 0;
  double total = 0;
};

constexpr double kBceEps = 1e-7;

// Mean binary cross-entropy; targets may be soft ([0,1]).
inline double bce(std::span<const float> target, std::span<const float> prediction) {
  if (target.size() != prediction.size()) throw ValidationError("bce: shape mismatch");
  double sum = 0;
  for (size_t i = 0; i < target.size(); ++i) {
    double p = std::min(1.0 - kBceEps, std::max(kBceEps, static_cast<double>(prediction[i])));
    double y = target[i];
    sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return sum / static_cast<double>(target.size());
}

inline double bce(double target, double prediction) {
  float t = static_cast<float>(target), p = static_cast<float>(prediction);
  return bce(std::span<const float>(&t, 1), std::span<const float>(&p, 1));
}

// Mean squared error between teacher and student outputs.
inline double mse_kd(std::span<const float> teacher, std::span<const float> student) {
  if (teacher.size() != student.size()) throw ValidationError("mse_kd: shape mismatch");
  double sum = 0;
  for (size_t i = 0; i < teacher.size(); ++i) {
    double d = static_cast<double>(teacher[i]) - static_cast<double>(student[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(teacher.size());
}

inline double mse_kd(double teacher, double student) {
  float t = static_cast<float>(teacher), s = static_cast<float>(student);
  return mse_kd(std::span<const float>(&t, 1), std::span<const float>(&s, 1));
}

// One model evaluation on the shared augmented view.
struct HeadOutputs {
  float clf_prob = 0.f;
  Image seg_probs;
};

struct LossGates {
  bool use_sup_clf = false;
  bool use_sup_seg = false;
  bool use_kd = false;
};

// Gated combination: supervised BCE terms where hard targets exist, MSE
// distillation terms weighted per head.
inline LossBreakdown combined_loss(const LossGates& gates, std::optional<int> hard_clf_label,
                                   const Image* seg_target, const HeadOutputs* teacher,
                                   const HeadOutputs& student, const LossConfig& cfg) {
  cfg.validate();
  LossBreakdown out;
  if (gates.use_sup_clf) {
    if (!hard_clf_label) throw ValidationError("combined_loss: sup_clf without a hard label");
    out.sup_clf = bce(static_cast<double>(*hard_clf_label), student.clf_prob);
  }
  if (gates.use_sup_seg) {
    if (!seg_target) throw ValidationError("combined_loss: sup_seg without a mask target");
    out.sup_seg = bce(std::span<const float>(seg_target->v), std::span<const float>(student.seg_probs.v));
  }
  if (gates.use_kd) {
    if (!teacher) throw ValidationError("combined_loss: use_kd without teacher outputs");
    out.kd_clf = mse_kd(static_cast<double>(teacher->clf_prob), student.clf_prob);
    out.kd_seg = mse_kd(std::span<const float>(teacher->seg_probs.v),
                        std::span<const float>(student.seg_probs.v));
  }
  out.total = out.sup_clf + out.sup_seg + cfg.alpha_clf * out.kd_clf + cfg.alpha_seg * out.kd_seg;
  return out;
}

}  // namespace skd
