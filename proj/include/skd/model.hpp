#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "skd/common.hpp"
#include "skd/losses.hpp"

namespace skd {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Small dual-head convnet: stacked 3x3 conv + leaky-ReLU blocks with 2x2 max
// pooling between blocks, a global-max-pooled sigmoid classification head
// and a 1x1-conv sigmoid segmentation head at the feature resolution.
struct ArchDescriptor {
  int input_h = 32;
  int input_w = 32;
  std::vector<int> channels = {8, 16, 16};

  int n_blocks() const { return static_cast<int>(channels.size()); }
  // pooling after every block but the last
  int downscale() const { return 1 << (n_blocks() - 1); }
  int feat_h() const { return input_h / downscale(); }
  int feat_w() const { return input_w / downscale(); }

  void validate() const {
    if (channels.empty()) throw ValidationError("architecture needs at least one block");
    for (int c : channels)
      if (c < 1) throw ValidationError("channel counts must be >= 1");
    if (input_h % downscale() != 0 || input_w % downscale() != 0)
      throw ValidationError("input size must be divisible by the pooling downscale");
  }

  bool operator==(const ArchDescriptor&) const = default;
};

inline void to_json(json& j, const ArchDescriptor& a) {
  j = json{{"input_h", a.input_h}, {"input_w", a.input_w}, {"channels", a.channels}};
}
inline void from_json(const json& j, ArchDescriptor& a) {
  a.input_h = j.at("input_h").get<int>();
  a.input_w = j.at("input_w").get<int>();
  a.channels = j.at("channels").get<std::vector<int>>();
}

namespace detail {

// parameter layout: per block [out][in][3][3] weights then [out] biases,
// then clf weights [C_last] + bias, then seg 1x1 weights [C_last] + bias.
inline size_t param_count(const ArchDescriptor& a) {
  size_t n = 0;
  int in_c = 1;
  for (int out_c : a.channels) {
    n += static_cast<size_t>(out_c) * in_c * 9 + out_c;
    in_c = out_c;
  }
  n += 2 * (static_cast<size_t>(in_c) + 1);
  return n;
}

}  // namespace detail

struct DualHeadModel {
  ArchDescriptor arch;
  std::vector<float> params;
  bool frozen = false;
  uint64_t init_seed = 0;
  int trained_iterations = 0;

  uint64_t param_hash() const { return fnv1a(params.data(), params.size() * sizeof(float)); }
};

inline DualHeadModel init_model(const ArchDescriptor& arch, uint64_t seed) {
  arch.validate();
  DualHeadModel m;
  m.arch = arch;
  m.init_seed = seed;
  m.params.resize(detail::param_count(arch));
  Rng rng(derive_seed(seed, "model-init"));
  size_t p = 0;
  int in_c = 1;
  for (int out_c : arch.channels) {
    double scale = std::sqrt(2.0 / (in_c * 9.0));  // He init
    for (int i = 0; i < out_c * in_c * 9; ++i) m.params[p++] = static_cast<float>(scale * rng.normal());
    for (int i = 0; i < out_c; ++i) m.params[p++] = 0.f;
    in_c = out_c;
  }
  double head_scale = std::sqrt(1.0 / in_c);
  for (int head = 0; head < 2; ++head) {
    for (int i = 0; i < in_c; ++i) m.params[p++] = static_cast<float>(head_scale * rng.normal());
    m.params[p++] = 0.f;
  }
  return m;
}

// Channel-major activation volume. Templated on the scalar so tests can run
// the identical forward path in double precision.
template <typename T>
struct BasicVolume {
  int c = 0, h = 0, w = 0;
  std::vector<T> v;
  BasicVolume() = default;
  BasicVolume(int c_, int h_, int w_)
      : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, T{0}) {}
  T& at(int ch, int r, int col) { return v[(static_cast<size_t>(ch) * h + r) * w + col]; }
  T at(int ch, int r, int col) const { return v[(static_cast<size_t>(ch) * h + r) * w + col]; }
};

using Volume = BasicVolume<float>;

template <typename T>
struct BasicForwardCache {
  std::vector<BasicVolume<T>> block_in;    // input to each conv block
  std::vector<BasicVolume<T>> pre_relu;    // conv output before ReLU
  std::vector<BasicVolume<T>> post_relu;   // after ReLU (pool input where pooled)
  std::vector<std::vector<int>> pool_argmax;  // flat index into post_relu
  BasicVolume<T> features;                 // final block output
  std::vector<T> gpool;                    // global max pool per channel
  std::vector<int> gpool_argmax;           // position of each channel maximum
  T clf_logit{};
  T clf_prob{};
  std::vector<T> seg_logits;
  std::vector<T> seg_probs;  // flattened feature-resolution map
  int feat_h = 0;
  int feat_w = 0;

  Image seg_probs_image() const {
    Image out(feat_h, feat_w);
    for (size_t i = 0; i < seg_probs.size(); ++i) out.v[i] = static_cast<float>(seg_probs[i]);
    return out;
  }
};

using ForwardCache = BasicForwardCache<float>;

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline constexpr double kLeakySlope = 0.01;

namespace detail {

template <typename T>
inline void conv3x3_forward(const BasicVolume<T>& in, const float* w, const float* b,
                            BasicVolume<T>& out) {
  // zero padding 1
  for (int oc = 0; oc < out.c; ++oc) {
    for (int r = 0; r < out.h; ++r) {
      for (int col = 0; col < out.w; ++col) {
        T acc = static_cast<T>(b[oc]);
        const float* wk = w + static_cast<size_t>(oc) * in.c * 9;
        for (int ic = 0; ic < in.c; ++ic, wk += 9) {
          for (int dr = -1; dr <= 1; ++dr) {
            int rr = r + dr;
            if (rr < 0 || rr >= in.h) continue;
            for (int dc = -1; dc <= 1; ++dc) {
              int cc = col + dc;
              if (cc < 0 || cc >= in.w) continue;
              acc += static_cast<T>(wk[(dr + 1) * 3 + (dc + 1)]) * in.at(ic, rr, cc);
            }
          }
        }
        out.at(oc, r, col) = acc;
      }
    }
  }
}

inline void conv3x3_backward(const Volume& in, const float* w, const Volume& dout, Volume& din,
                             float* dw, float* db) {
  for (int oc = 0; oc < dout.c; ++oc) {
    const float* wk_base = w + static_cast<size_t>(oc) * in.c * 9;
    float* dwk_base = dw + static_cast<size_t>(oc) * in.c * 9;
    for (int r = 0; r < dout.h; ++r) {
      for (int col = 0; col < dout.w; ++col) {
        float g = dout.at(oc, r, col);
        if (g == 0.f) continue;
        db[oc] += g;
        for (int ic = 0; ic < in.c; ++ic) {
          const float* wk = wk_base + ic * 9;
          float* dwk = dwk_base + ic * 9;
          for (int dr = -1; dr <= 1; ++dr) {
            int rr = r + dr;
            if (rr < 0 || rr >= in.h) continue;
            for (int dc = -1; dc <= 1; ++dc) {
              int cc = col + dc;
              if (cc < 0 || cc >= in.w) continue;
              int ki = (dr + 1) * 3 + (dc + 1);
              dwk[ki] += g * in.at(ic, rr, cc);
              din.at(ic, rr, cc) += g * wk[ki];
            }
          }
        }
      }
    }
  }
}

template <typename T>
inline void maxpool2_forward(const BasicVolume<T>& in, BasicVolume<T>& out,
                             std::vector<int>& argmax) {
  argmax.assign(out.v.size(), 0);
  for (int c = 0; c < in.c; ++c)
    for (int r = 0; r < out.h; ++r)
      for (int col = 0; col < out.w; ++col) {
        T best = static_cast<T>(-1e30);
        int best_idx = 0;
        for (int dr = 0; dr < 2; ++dr)
          for (int dc = 0; dc < 2; ++dc) {
            int idx = ((c * in.h) + 2 * r + dr) * in.w + 2 * col + dc;
            if (in.v[idx] > best) {
              best = in.v[idx];
              best_idx = idx;
            }
          }
        size_t o = (static_cast<size_t>(c) * out.h + r) * out.w + col;
        out.v[o] = best;
        argmax[o] = best_idx;
      }
}

}  // namespace detail

template <typename T>
inline void forward_cached(const DualHeadModel& m, const Image& image,
                           BasicForwardCache<T>& cache) {
  const auto& a = m.arch;
  if (image.h != a.input_h || image.w != a.input_w)
    throw ValidationError("forward: image shape mismatch");

  int nb = a.n_blocks();
  cache.block_in.assign(nb, {});
  cache.pre_relu.assign(nb, {});
  cache.post_relu.assign(nb, {});
  cache.pool_argmax.assign(nb, {});

  BasicVolume<T> cur(1, a.input_h, a.input_w);
  for (size_t i = 0; i < image.v.size(); ++i) cur.v[i] = static_cast<T>(image.v[i]);

  size_t p = 0;
  for (int b = 0; b < nb; ++b) {
    int out_c = a.channels[b];
    cache.block_in[b] = cur;
    BasicVolume<T> conv_out(out_c, cur.h, cur.w);
    const float* w = m.params.data() + p;
    p += static_cast<size_t>(out_c) * cur.c * 9;
    const float* bias = m.params.data() + p;
    p += out_c;
    detail::conv3x3_forward(cur, w, bias, conv_out);
    cache.pre_relu[b] = conv_out;
    for (auto& x : conv_out.v)
      if (x < T{0}) x *= static_cast<T>(kLeakySlope);
    cache.post_relu[b] = conv_out;
    if (b + 1 < nb) {
      BasicVolume<T> pooled(out_c, conv_out.h / 2, conv_out.w / 2);
      detail::maxpool2_forward(conv_out, pooled, cache.pool_argmax[b]);
      cur = std::move(pooled);
    } else {
      cur = std::move(conv_out);
    }
  }
  cache.features = cur;

  int cl = a.channels.back();
  int fh = cur.h, fw = cur.w;
  cache.feat_h = fh;
  cache.feat_w = fw;
  cache.gpool.assign(cl, T{0});
  cache.gpool_argmax.assign(cl, 0);
  for (int c = 0; c < cl; ++c) {
    int best = 0;
    for (int i = 1; i < fh * fw; ++i)
      if (cur.v[static_cast<size_t>(c) * fh * fw + i] >
          cur.v[static_cast<size_t>(c) * fh * fw + best])
        best = i;
    cache.gpool[c] = cur.v[static_cast<size_t>(c) * fh * fw + best];
    cache.gpool_argmax[c] = best;
  }
  const float* wc = m.params.data() + p;
  float bc = m.params[p + cl];
  const float* ws = m.params.data() + p + cl + 1;
  float bs = m.params[p + 2 * cl + 1];

  T logit = static_cast<T>(bc);
  for (int c = 0; c < cl; ++c) logit += static_cast<T>(wc[c]) * cache.gpool[c];
  cache.clf_logit = logit;
  cache.clf_prob = static_cast<T>(sigmoid(static_cast<double>(logit)));

  cache.seg_logits.assign(static_cast<size_t>(fh) * fw, T{0});
  cache.seg_probs.assign(static_cast<size_t>(fh) * fw, T{0});
  for (int i = 0; i < fh * fw; ++i) {
    T z = static_cast<T>(bs);
    for (int c = 0; c < cl; ++c)
      z += static_cast<T>(ws[c]) * cur.v[static_cast<size_t>(c) * fh * fw + i];
    cache.seg_logits[i] = z;
    cache.seg_probs[i] = static_cast<T>(sigmoid(static_cast<double>(z)));
  }
}

inline HeadOutputs forward(const DualHeadModel& m, const Image& image) {
  ForwardCache cache;
  forward_cached(m, image, cache);
  return HeadOutputs{cache.clf_prob, cache.seg_probs_image()};
}


// Backpropagate d(loss)/d(clf_prob) and d(loss)/d(seg_probs) into parameter
// gradients, accumulated into grads (same layout as params).
inline void backward(const DualHeadModel& m, const ForwardCache& cache, double d_clf_prob,
                     const std::vector<float>& d_seg_probs, std::vector<float>& grads) {
  const auto& a = m.arch;
  int nb = a.n_blocks();
  int cl = a.channels.back();
  int fh = cache.features.h, fw = cache.features.w;
  if (grads.size() != m.params.size()) throw ValidationError("backward: gradient buffer size");
  if (!d_seg_probs.empty() && d_seg_probs.size() != static_cast<size_t>(fh) * fw)
    throw ValidationError("backward: seg gradient shape");

  // head parameter offsets
  size_t p = 0;
  std::vector<size_t> block_w(nb), block_b(nb);
  {
    int in_c = 1;
    for (int b = 0; b < nb; ++b) {
      block_w[b] = p;
      p += static_cast<size_t>(a.channels[b]) * in_c * 9;
      block_b[b] = p;
      p += a.channels[b];
      in_c = a.channels[b];
    }
  }
  size_t clf_w = p, clf_b = p + cl, seg_w = p + cl + 1, seg_b = p + 2 * cl + 1;

  // chain through the sigmoids
  double d_clf_logit = d_clf_prob * cache.clf_prob * (1.0 - cache.clf_prob);

  Volume dfeat(cl, fh, fw);
  // classification head
  for (int c = 0; c < cl; ++c) {
    grads[clf_w + c] += static_cast<float>(d_clf_logit * cache.gpool[c]);
    // max pool: the gradient flows only through the channel maximum
    size_t fi = static_cast<size_t>(c) * fh * fw + cache.gpool_argmax[c];
    dfeat.v[fi] += static_cast<float>(d_clf_logit * m.params[clf_w + c]);
  }
  grads[clf_b] += static_cast<float>(d_clf_logit);

  // segmentation head
  if (!d_seg_probs.empty()) {
    for (int i = 0; i < fh * fw; ++i) {
      double pr = cache.seg_probs[i];
      double dz = d_seg_probs[i] * pr * (1.0 - pr);
      if (dz == 0.0) continue;
      grads[seg_b] += static_cast<float>(dz);
      for (int c = 0; c < cl; ++c) {
        size_t fi = static_cast<size_t>(c) * fh * fw + i;
        grads[seg_w + c] += static_cast<float>(dz * cache.features.v[fi]);
        dfeat.v[fi] += static_cast<float>(dz * m.params[seg_w + c]);
      }
    }
  }

  // blocks, last to first
  Volume dcur = std::move(dfeat);
  for (int b = nb - 1; b >= 0; --b) {
    const Volume& post = cache.post_relu[b];
    Volume dpost;
    if (b + 1 < nb) {
      // un-pool: route gradient to the argmax positions
      dpost = Volume(post.c, post.h, post.w);
      for (size_t o = 0; o < dcur.v.size(); ++o)
        dpost.v[cache.pool_argmax[b][o]] += dcur.v[o];
    } else {
      dpost = std::move(dcur);
    }
    // leaky ReLU mask
    const Volume& pre = cache.pre_relu[b];
    for (size_t i = 0; i < dpost.v.size(); ++i)
      if (pre.v[i] <= 0.f) dpost.v[i] *= static_cast<float>(kLeakySlope);

    const Volume& in = cache.block_in[b];
    Volume din(in.c, in.h, in.w);
    detail::conv3x3_backward(in, m.params.data() + block_w[b], dpost, din,
                             grads.data() + block_w[b], grads.data() + block_b[b]);
    dcur = std::move(din);
  }
}

// --- optimizer ---------------------------------------------------------

struct OptimizerConfig {
  double base_lr = 0.012;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int total_iterations = 600;
  int batch_size = 8;

  void validate() const {
    if (base_lr <= 0) throw ValidationError("base_lr must be > 0");
    if (momentum < 0 || momentum >= 1) throw ValidationError("momentum must lie in [0,1)");
    if (total_iterations < 1) throw ValidationError("total_iterations must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  }
};

inline void to_json(json& j, const OptimizerConfig& c) {
  j = json{{"base_lr", c.base_lr},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"total_iterations", c.total_iterations},
           {"batch_size", c.batch_size}};
}
inline void from_json(const json& j, OptimizerConfig& c) {
  OptimizerConfig def;
  c.base_lr = j.value("base_lr", def.base_lr);
  c.momentum = j.value("momentum", def.momentum);
  c.weight_decay = j.value("weight_decay", def.weight_decay);
  c.total_iterations = j.value("total_iterations", def.total_iterations);
  c.batch_size = j.value("batch_size", def.batch_size);
}

// Cosine annealing from base_lr down to zero.
inline double lr_at(int iteration, const OptimizerConfig& cfg) {
  cfg.validate();
  if (iteration < 0 || iteration > cfg.total_iterations)
    throw ValidationError("iteration out of schedule range");
  return 0.5 * cfg.base_lr * (1.0 + std::cos(M_PI * iteration / cfg.total_iterations));
}

// Momentum SGD with L2 weight decay folded into the gradient.
inline void sgd_update(std::vector<float>& params, const std::vector<float>& grads,
                       std::vector<float>& velocity, double lr, double momentum,
                       double weight_decay) {
  if (grads.size() != params.size()) throw ValidationError("sgd_update: size mismatch");
  if (velocity.size() != params.size()) velocity.assign(params.size(), 0.f);
  for (size_t i = 0; i < params.size(); ++i) {
    float g = grads[i];
    if (!std::isfinite(g)) throw ValidationError("sgd_update: non-finite gradient");
    double v = momentum * velocity[i] + (g + weight_decay * params[i]);
    velocity[i] = static_cast<float>(v);
    params[i] = static_cast<float>(params[i] - lr * v);
  }
}

// --- checkpoints ---------------------------------------------------------
//
// "SKDCKPT1" magic, uint32 little-endian JSON header length, JSON header,
// raw float32 parameters.

inline void save_checkpoint(const DualHeadModel& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  json header{{"arch", m.arch},
              {"init_seed", m.init_seed},
              {"trained_iterations", m.trained_iterations},
              {"frozen", m.frozen}};
  std::string h = header.dump();
  out.write("SKDCKPT1", 8);
  uint32_t len = static_cast<uint32_t>(h.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(m.params.data()),
            static_cast<std::streamsize>(m.params.size() * sizeof(float)));
}

inline DualHeadModel load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, "SKDCKPT1", 8) != 0) throw IoError("bad checkpoint magic: " + path.string());
  uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  std::string h(len, '\0');
  in.read(h.data(), len);
  json header = json::parse(h);
  DualHeadModel m;
  m.arch = header.at("arch").get<ArchDescriptor>();
  m.init_seed = header.value("init_seed", 0ull);
  m.trained_iterations = header.value("trained_iterations", 0);
  m.frozen = header.value("frozen", false);
  m.params.resize(detail::param_count(m.arch));
  in.read(reinterpret_cast<char*>(m.params.data()),
          static_cast<std::streamsize>(m.params.size() * sizeof(float)));
  if (!in) throw IoError("truncated checkpoint: " + path.string());
  return m;
}

}  // namespace skd
