#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/datamodel.hpp"

namespace skd {

// Synthetic stand-in for one device manufacturer's appearance.
struct DomainParams {
  double contrast_gain = 1.0;
  double texture_amp = 0.0;   // amplitude of the background sine texture
  double texture_freq = 0.0;  // cycles across the image width
  double noise_sigma = 0.0;
  // malignant blobs render this much fainter relative to domain A, so an
  // absolute-contrast decision rule learned on A overlaps the benign range here
  double lesion_gain = 1.0;

  bool is_identity() const {
    return contrast_gain == 1.0 && texture_amp == 0.0 && noise_sigma == 0.0;
  }
};

struct SynthConfig {
  int image_h = 32;
  int image_w = 32;
  int slices_min = 12;
  int slices_max = 24;
  int lesion_span_min = 3;
  int lesion_span_max = 5;
  double lesion_radius_min = 3.0;
  double lesion_radius_max = 5.0;
  double lesion_amplitude = 0.55;
  double benign_contrast_min = 0.4;  // fraction of the cancer-blob amplitude
  double benign_contrast_max = 0.6;
  double cancer_eccentricity = 2.0;  // axis ratio of the malignant blob
  double background_level = 0.25;
  double noise_floor = 0.02;
  // counts per (domain, subgroup)
  std::map<std::string, std::map<std::string, int>> counts;
  std::map<std::string, DomainParams> domains;
  std::string weak_mode = "WEAK";  // annotation level for non-A domains: WEAK or NONE
  std::array<double, 3> split_ratios{0.6, 0.2, 0.2};

  void validate() const {
    if (lesion_span_max > slices_min)
      throw ValidationError("lesion span must fit in the shortest stack");
    if (noise_floor < 0) throw ValidationError("noise_floor must be >= 0");
    for (const auto& [name, d] : domains) {
      if (d.contrast_gain <= 0) throw ValidationError("contrast gain must be > 0: domain " + name);
      if (d.noise_sigma < 0) throw ValidationError("noise sigma must be >= 0: domain " + name);
      if (d.lesion_gain <= 0) throw ValidationError("lesion gain must be > 0: domain " + name);
    }
  }
};

// Default three-domain configuration: A is the annotated source domain,
// B a mild shift, C a strong one.
inline SynthConfig default_synth_config(int per_cell = 8) {
  SynthConfig cfg;
  cfg.domains["A"] = DomainParams{1.0, 0.0, 0.0, 0.0, 1.0};
  cfg.domains["B"] = DomainParams{0.9, 0.04, 5.0, 0.02, 0.75};
  cfg.domains["C"] = DomainParams{0.75, 0.08, 9.0, 0.04, 0.55};
  for (const auto& d : {"A", "B", "C"})
    for (const auto& g : {"cancer", "benign", "normal"}) cfg.counts[d][g] = per_cell;
  return cfg;
}

inline void to_json(json& j, const DomainParams& d) {
  j = json{{"contrast_gain", d.contrast_gain},
           {"texture_amp", d.texture_amp},
           {"texture_freq", d.texture_freq},
           {"noise_sigma", d.noise_sigma},
           {"lesion_gain", d.lesion_gain}};
}
inline void from_json(const json& j, DomainParams& d) {
  d.contrast_gain = j.value("contrast_gain", 1.0);
  d.texture_amp = j.value("texture_amp", 0.0);
  d.texture_freq = j.value("texture_freq", 0.0);
  d.noise_sigma = j.value("noise_sigma", 0.0);
  d.lesion_gain = j.value("lesion_gain", 1.0);
}

inline void to_json(json& j, const SynthConfig& c) {
  j = json{{"image_h", c.image_h},
           {"image_w", c.image_w},
           {"slices_min", c.slices_min},
           {"slices_max", c.slices_max},
           {"lesion_span_min", c.lesion_span_min},
           {"lesion_span_max", c.lesion_span_max},
           {"lesion_radius_min", c.lesion_radius_min},
           {"lesion_radius_max", c.lesion_radius_max},
           {"lesion_amplitude", c.lesion_amplitude},
           {"benign_contrast_min", c.benign_contrast_min},
           {"benign_contrast_max", c.benign_contrast_max},
           {"cancer_eccentricity", c.cancer_eccentricity},
           {"background_level", c.background_level},
           {"noise_floor", c.noise_floor},
           {"counts", c.counts},
           {"domains", c.domains},
           {"weak_mode", c.weak_mode},
           {"split_ratios", c.split_ratios}};
}
inline void from_json(const json& j, SynthConfig& c) {
  SynthConfig def = default_synth_config();
  c.image_h = j.value("image_h", def.image_h);
  c.image_w = j.value("image_w", def.image_w);
  c.slices_min = j.value("slices_min", def.slices_min);
  c.slices_max = j.value("slices_max", def.slices_max);
  c.lesion_span_min = j.value("lesion_span_min", def.lesion_span_min);
  c.lesion_span_max = j.value("lesion_span_max", def.lesion_span_max);
  c.lesion_radius_min = j.value("lesion_radius_min", def.lesion_radius_min);
  c.lesion_radius_max = j.value("lesion_radius_max", def.lesion_radius_max);
  c.lesion_amplitude = j.value("lesion_amplitude", def.lesion_amplitude);
  c.benign_contrast_min = j.value("benign_contrast_min", def.benign_contrast_min);
  c.benign_contrast_max = j.value("benign_contrast_max", def.benign_contrast_max);
  c.cancer_eccentricity = j.value("cancer_eccentricity", def.cancer_eccentricity);
  c.background_level = j.value("background_level", def.background_level);
  c.noise_floor = j.value("noise_floor", def.noise_floor);
  c.counts = j.contains("counts") ? j.at("counts").get<decltype(c.counts)>() : def.counts;
  c.domains = j.contains("domains") ? j.at("domains").get<decltype(c.domains)>() : def.domains;
  c.weak_mode = j.value("weak_mode", def.weak_mode);
  if (j.contains("split_ratios")) c.split_ratios = j.at("split_ratios").get<std::array<double, 3>>();
}

// Manufacturer appearance model: contrast scaling, a fixed-phase background
// texture, and additive Gaussian noise. Output clipped to [0,1].
inline Image apply_domain_shift(const Image& img, const DomainParams& d, Rng& rng) {
  Image out(img.h, img.w);
  for (int r = 0; r < img.h; ++r) {
    for (int c = 0; c < img.w; ++c) {
      double v = img.at(r, c) * d.contrast_gain;
      if (d.texture_amp != 0.0)
        v += d.texture_amp * std::sin(2.0 * M_PI * d.texture_freq * (r + c) /
                                      static_cast<double>(img.w));
      if (d.noise_sigma > 0.0) v += d.noise_sigma * rng.normal();
      out.at(r, c) = clamp01(static_cast<float>(v));
    }
  }
  return out;
}

inline Image apply_domain_shift(const Image& img, const DomainParams& d, uint64_t rng_seed) {
  Rng rng(rng_seed);
  return apply_domain_shift(img, d, rng);
}

namespace detail {

inline void add_gaussian_blob(Image& img, double cy, double cx, double sigma_y, double sigma_x,
                              double amplitude) {
  for (int r = 0; r < img.h; ++r)
    for (int c = 0; c < img.w; ++c) {
      double d2 = (r - cy) * (r - cy) / (sigma_y * sigma_y) +
                  (c - cx) * (c - cx) / (sigma_x * sigma_x);
      img.at(r, c) += static_cast<float>(amplitude * std::exp(-d2 / 2.0));
    }
}

}  // namespace detail

inline StackRecord generate_stack(const SynthConfig& cfg, Subgroup subgroup,
                                  const std::string& domain, uint64_t rng_seed) {
  cfg.validate();
  auto dit = cfg.domains.find(domain);
  if (dit == cfg.domains.end()) throw ValidationError("unknown domain: " + domain);
  const DomainParams& dp = dit->second;

  Rng rng(rng_seed);
  StackRecord stack;
  stack.domain = domain;
  stack.subgroup = subgroup;

  int n = rng.range_int(cfg.slices_min, cfg.slices_max);
  bool has_blob = subgroup != Subgroup::Normal;
  double amplitude = cfg.lesion_amplitude;
  if (subgroup == Subgroup::Benign)
    amplitude *= rng.uniform(cfg.benign_contrast_min, cfg.benign_contrast_max);
  else if (subgroup == Subgroup::Cancer)
    amplitude *= dp.lesion_gain;

  int span = 0, center = 0;
  double cy = 0, cx = 0, sigma_y = 0, sigma_x = 0;
  if (has_blob) {
    span = rng.range_int(cfg.lesion_span_min, cfg.lesion_span_max);
    // span fits entirely inside the stack
    int half_lo = span / 2;
    int half_hi = span - 1 - half_lo;
    center = rng.range_int(half_lo, n - 1 - half_hi);
    double margin = cfg.lesion_radius_max + 2.0;
    cy = rng.uniform(margin, cfg.image_h - margin);
    cx = rng.uniform(margin, cfg.image_w - margin);
    double sigma = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max) / 2.0;
    sigma_y = sigma_x = sigma;
    if (subgroup == Subgroup::Cancer) {
      // malignant blobs are elongated; benign distractors stay round, so
      // shape separates the classes even where the amplitudes overlap
      double e = cfg.cancer_eccentricity;
      if (rng.bernoulli(0.5))
        sigma_y *= e, sigma_x /= e;
      else
        sigma_y /= e, sigma_x *= e;
    }
  }

  for (int k = 0; k < n; ++k) {
    SliceRecord sl;
    sl.index = k;
    Image img(cfg.image_h, cfg.image_w, static_cast<float>(cfg.background_level));
    for (auto& x : img.v) x += static_cast<float>(cfg.noise_floor * rng.normal());

    if (has_blob) {
      int lo = center - span / 2;
      int hi = lo + span - 1;
      if (k >= lo && k <= hi) {
        // triangular through-slice profile peaking at the central slice
        double falloff = 1.0 - std::abs(k - center) / (span / 2.0 + 1.0);
        detail::add_gaussian_blob(img, cy, cx, sigma_y, sigma_x, amplitude * falloff);
      }
    }

    sl.image = apply_domain_shift(img, dp, rng);
    quantize8(sl.image);
    stack.slices.push_back(std::move(sl));
  }

  stack.breast_label = subgroup == Subgroup::Cancer ? 1 : 0;
  if (subgroup == Subgroup::Cancer) {
    stack.annotated_slice_index = center;
    // mask: blob footprint above half the peak amplitude
    Image mask(cfg.image_h, cfg.image_w, 0.f);
    double d2_half = 2.0 * std::log(2.0);  // exp(-d2/2) > 0.5 in normalized units
    for (int r = 0; r < cfg.image_h; ++r)
      for (int c = 0; c < cfg.image_w; ++c) {
        double d2 = (r - cy) * (r - cy) / (sigma_y * sigma_y) +
                    (c - cx) * (c - cx) / (sigma_x * sigma_x);
        if (d2 < d2_half) mask.at(r, c) = 1.f;
      }
    stack.slices[center].mask = std::move(mask);
  }
  return stack;
}

inline Dataset generate_dataset(const SynthConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (cfg.counts.empty()) throw ValidationError("no (domain, subgroup) counts configured");

  Dataset ds;
  uint64_t ordinal = 0;
  for (const auto& [domain, per_group] : cfg.counts) {
    for (const auto& g : {Subgroup::Cancer, Subgroup::Benign, Subgroup::Normal}) {
      auto it = per_group.find(to_string(g));
      int count = it == per_group.end() ? 0 : it->second;
      if (count <= 0)
        throw ValidationError(std::string("zero stacks configured for (") + domain + ", " +
                              to_string(g) + ")");
      for (int i = 0; i < count; ++i, ++ordinal) {
        auto stack = generate_stack(cfg, g, domain, derive_seed(seed, "stack", ordinal));
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%s_%s_%03d", domain.c_str(), to_string(g), i);
        stack.id = buf;
        ds.eval_truth[stack.id] = *stack.breast_label;

        if (domain == "A") {
          stack.annotation_level = AnnotationLevel::Full;
        } else if (cfg.weak_mode == "NONE") {
          stack.annotation_level = AnnotationLevel::None;
          stack.breast_label.reset();
          stack.annotated_slice_index.reset();
          for (auto& sl : stack.slices) sl.mask.reset();
        } else {
          stack.annotation_level = AnnotationLevel::Weak;
          stack.annotated_slice_index.reset();
          for (auto& sl : stack.slices) sl.mask.reset();
        }
        ds.stacks.push_back(std::move(stack));
      }
    }
  }
  return split_dataset(std::move(ds), cfg.split_ratios, derive_seed(seed, "split"));
}

}  // namespace skd
