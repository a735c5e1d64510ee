#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/common.hpp"

namespace skd {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class AnnotationLevel { Full, Weak, None };
enum class Subgroup { Cancer, Benign, Normal };
enum class Split { Train, Val, Test };

inline const char* to_string(AnnotationLevel a) {
  switch (a) {
    case AnnotationLevel::Full: return "FULL";
    case AnnotationLevel::Weak: return "WEAK";
    default: return "NONE";
  }
}
inline const char* to_string(Subgroup g) {
  switch (g) {
    case Subgroup::Cancer: return "cancer";
    case Subgroup::Benign: return "benign";
    default: return "normal";
  }
}
inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

inline AnnotationLevel annotation_from_string(const std::string& s) {
  if (s == "FULL") return AnnotationLevel::Full;
  if (s == "WEAK") return AnnotationLevel::Weak;
  if (s == "NONE") return AnnotationLevel::None;
  throw ValidationError("unknown annotation level: " + s);
}
inline Subgroup subgroup_from_string(const std::string& s) {
  if (s == "cancer") return Subgroup::Cancer;
  if (s == "benign") return Subgroup::Benign;
  if (s == "normal") return Subgroup::Normal;
  throw ValidationError("unknown subgroup: " + s);
}
inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ValidationError("unknown split: " + s);
}

struct SliceRecord {
  int index = 0;
  Image image;
  std::optional<Image> mask;  // binary {0,1}

  bool operator==(const SliceRecord& o) const {
    return index == o.index && image == o.image && mask == o.mask;
  }
};

struct StackRecord {
  std::string id;
  std::string domain;  // "A" / "B" / "C"
  std::optional<int> breast_label;
  AnnotationLevel annotation_level = AnnotationLevel::None;
  std::vector<SliceRecord> slices;
  std::optional<int> annotated_slice_index;
  Subgroup subgroup = Subgroup::Normal;

  int n_slices() const { return static_cast<int>(slices.size()); }

  bool operator==(const StackRecord& o) const {
    return id == o.id && domain == o.domain && breast_label == o.breast_label &&
           annotation_level == o.annotation_level && slices == o.slices &&
           annotated_slice_index == o.annotated_slice_index && subgroup == o.subgroup;
  }
};

// A dataset together with split assignment and the evaluation-only label
// sidecar. Stacks whose annotation level is NONE hide their breast label
// from training; ground truth survives in eval_truth.
struct Dataset {
  std::vector<StackRecord> stacks;
  std::map<std::string, Split> split;
  std::map<std::string, int> eval_truth;  // stack_id -> breast label

  const StackRecord* find(const std::string& id) const {
    for (const auto& s : stacks)
      if (s.id == id) return &s;
    return nullptr;
  }

  Split split_of(const std::string& id) const {
    auto it = split.find(id);
    if (it == split.end()) throw ValidationError("stack has no split assignment: " + id);
    return it->second;
  }

  int truth_label(const std::string& id) const {
    auto it = eval_truth.find(id);
    if (it == eval_truth.end()) throw ValidationError("stack has no eval truth: " + id);
    return it->second;
  }

  bool operator==(const Dataset& o) const {
    return stacks == o.stacks && split == o.split && eval_truth == o.eval_truth;
  }
};

inline void validate_stack(const StackRecord& s) {
  if (s.slices.empty()) throw ValidationError("stack " + s.id + ": no slices");
  for (size_t k = 0; k < s.slices.size(); ++k) {
    const auto& sl = s.slices[k];
    if (sl.index != static_cast<int>(k))
      throw ValidationError("stack " + s.id + ": non-contiguous slice indices at position " +
                            std::to_string(k));
    if (sl.mask) {
      if (!sl.mask->same_shape(sl.image))
        throw ValidationError("stack " + s.id + " slice " + std::to_string(k) +
                              ": mask shape mismatch");
      for (float m : sl.mask->v)
        if (m != 0.f && m != 1.f)
          throw ValidationError("stack " + s.id + " slice " + std::to_string(k) +
                                ": mask is not binary");
    }
  }
  switch (s.annotation_level) {
    case AnnotationLevel::Full:
      if (s.breast_label && *s.breast_label == 1) {
        if (!s.annotated_slice_index)
          throw ValidationError("stack " + s.id + ": FULL positive without annotated slice");
        int k = *s.annotated_slice_index;
        if (k < 0 || k >= s.n_slices())
          throw ValidationError("stack " + s.id + ": annotated slice index out of range");
        const auto& m = s.slices[k].mask;
        bool nonempty = m && std::any_of(m->v.begin(), m->v.end(), [](float x) { return x > 0; });
        if (!nonempty)
          throw ValidationError("stack " + s.id + ": FULL positive without nonempty mask");
      }
      break;
    case AnnotationLevel::Weak:
      if (!s.breast_label) throw ValidationError("stack " + s.id + ": WEAK without breast label");
      for (const auto& sl : s.slices)
        if (sl.mask) throw ValidationError("stack " + s.id + ": WEAK stack carries a mask");
      break;
    case AnnotationLevel::None:
      if (s.breast_label)
        throw ValidationError("stack " + s.id + ": NONE stack exposes a breast label");
      break;
  }
}

inline void validate_dataset(const Dataset& ds) {
  std::map<std::string, int> seen;
  for (const auto& s : ds.stacks) {
    if (++seen[s.id] > 1) throw ValidationError("duplicate stack id: " + s.id);
    validate_stack(s);
  }
  for (const auto& [id, sp] : ds.split)
    if (!seen.count(id)) throw ValidationError("split entry for unknown stack: " + id);
}

// --- PGM I/O ----------------------------------------------------------------

inline void write_pgm(const fs::path& path, const Image& img, float scale = 255.f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> buf(img.size());
  for (size_t i = 0; i < img.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(clamp01(img.v[i]) * scale));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline Image read_pgm(const fs::path& path, float scale = 255.f) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing image file: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || w <= 0 || h <= 0)
    throw IoError("bad PGM header in " + path.string());
  in.get();  // single whitespace after maxval
  Image img(h, w);
  std::vector<unsigned char> buf(img.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw IoError("truncated PGM data in " + path.string());
  for (size_t i = 0; i < img.size(); ++i) img.v[i] = static_cast<float>(buf[i]) / scale;
  return img;
}

// --- dataset directory format ----------------------------------------------
//
// <dir>/index.json, <dir>/eval_truth.json,
// <dir>/stacks/<id>/slice_<k>.pgm and mask_<k>.pgm where masks exist.

inline fs::path save_dataset(const Dataset& ds, const fs::path& dir) {
  validate_dataset(ds);
  fs::create_directories(dir / "stacks");

  json index;
  index["schema_version"] = 1;
  index["stacks"] = json::array();
  for (const auto& s : ds.stacks) {
    json j;
    j["id"] = s.id;
    j["domain"] = s.domain;
    j["annotation_level"] = to_string(s.annotation_level);
    if (s.breast_label) j["breast_label"] = *s.breast_label;
    if (s.annotated_slice_index) j["annotated_slice_index"] = *s.annotated_slice_index;
    j["n_slices"] = s.n_slices();
    j["subgroup"] = to_string(s.subgroup);
    auto it = ds.split.find(s.id);
    j["split"] = it == ds.split.end() ? "train" : to_string(it->second);
    index["stacks"].push_back(j);

    fs::path sdir = dir / "stacks" / s.id;
    fs::create_directories(sdir);
    for (const auto& sl : s.slices) {
      write_pgm(sdir / ("slice_" + std::to_string(sl.index) + ".pgm"), sl.image);
      if (sl.mask) write_pgm(sdir / ("mask_" + std::to_string(sl.index) + ".pgm"), *sl.mask);
    }
  }
  {
    std::ofstream out(dir / "index.json");
    if (!out) throw IoError("cannot write " + (dir / "index.json").string());
    out << index.dump(2) << "\n";
  }
  {
    json truth(ds.eval_truth);
    std::ofstream out(dir / "eval_truth.json");
    out << truth.dump(2) << "\n";
  }
  return dir;
}

inline Dataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw IoError("missing index.json in " + dir.string());
  json index = json::parse(in);

  Dataset ds;
  for (const auto& j : index.at("stacks")) {
    StackRecord s;
    s.id = j.at("id").get<std::string>();
    s.domain = j.at("domain").get<std::string>();
    s.annotation_level = annotation_from_string(j.at("annotation_level").get<std::string>());
    if (j.contains("breast_label")) s.breast_label = j["breast_label"].get<int>();
    if (j.contains("annotated_slice_index"))
      s.annotated_slice_index = j["annotated_slice_index"].get<int>();
    s.subgroup = subgroup_from_string(j.at("subgroup").get<std::string>());
    ds.split[s.id] = split_from_string(j.at("split").get<std::string>());

    int n = j.at("n_slices").get<int>();
    fs::path sdir = dir / "stacks" / s.id;
    for (int k = 0; k < n; ++k) {
      SliceRecord sl;
      sl.index = k;
      sl.image = read_pgm(sdir / ("slice_" + std::to_string(k) + ".pgm"));
      fs::path mpath = sdir / ("mask_" + std::to_string(k) + ".pgm");
      if (fs::exists(mpath)) {
        Image m = read_pgm(mpath, 255.f);
        for (auto& x : m.v) x = x > 0.5f ? 1.f : 0.f;
        if (!m.same_shape(sl.image))
          throw IoError("stack " + s.id + " slice " + std::to_string(k) + ": mask shape mismatch");
        sl.mask = std::move(m);
      }
      s.slices.push_back(std::move(sl));
    }
    ds.stacks.push_back(std::move(s));
  }

  std::ifstream tin(dir / "eval_truth.json");
  if (tin) {
    json truth = json::parse(tin);
    for (auto it = truth.begin(); it != truth.end(); ++it)
      ds.eval_truth[it.key()] = it.value().get<int>();
  }

  validate_dataset(ds);
  return ds;
}

// --- stratified split -------------------------------------------------------

// Largest-remainder allocation of n items to the given ratios.
inline std::array<int, 3> allocate_counts(int n, const std::array<double, 3>& ratios) {
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = ratios[i] * n;
    counts[i] = static_cast<int>(std::floor(exact + 1e-12));
    rem[i] = exact - counts[i];
    assigned += counts[i];
  }
  // hand leftovers to the largest remainders; ties resolve train > val > test
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int i = 0; assigned < n; ++i, ++assigned) counts[order[i % 3]]++;
  return counts;
}

inline Dataset split_dataset(Dataset ds, const std::array<double, 3>& ratios, uint64_t seed) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");
  for (double r : ratios)
    if (r <= 0) throw ValidationError("split ratios must be positive");

  std::map<Subgroup, std::vector<std::string>> groups;
  for (const auto& s : ds.stacks) groups[s.subgroup].push_back(s.id);

  ds.split.clear();
  for (auto& [g, ids] : groups) {
    if (ids.size() < 3)
      throw ValidationError(std::string("subgroup ") + to_string(g) +
                            " too small for a three-way split");
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, "split", fnv1a(to_string(g))));
    rng.shuffle(ids);
    auto counts = allocate_counts(static_cast<int>(ids.size()), ratios);
    size_t pos = 0;
    for (int si = 0; si < 3; ++si)
      for (int k = 0; k < counts[si]; ++k)
        ds.split[ids[pos++]] = static_cast<Split>(si);
  }
  return ds;
}

// --- annotation subsampling -------------------------------------------------

// Deterministic per-subgroup priority order; kept sets are prefixes, so they
// nest across fractions for a fixed seed.
inline std::vector<std::string> annotation_keep_order(const Dataset& ds, Subgroup g,
                                                      uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& s : ds.stacks)
    if (s.subgroup == g && ds.split.count(s.id) && ds.split.at(s.id) == Split::Train)
      ids.push_back(s.id);
  std::sort(ids.begin(), ids.end(), [&](const std::string& a, const std::string& b) {
    uint64_t ha = derive_seed(seed, "subsample", fnv1a(a));
    uint64_t hb = derive_seed(seed, "subsample", fnv1a(b));
    return ha != hb ? ha < hb : a < b;
  });
  return ids;
}

inline Dataset subsample_annotations(Dataset ds, double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw ValidationError("annotation fraction must lie in (0,1]");

  std::map<std::string, bool> keep;
  for (Subgroup g : {Subgroup::Cancer, Subgroup::Benign, Subgroup::Normal}) {
    auto order = annotation_keep_order(ds, g, seed);
    auto k = static_cast<size_t>(std::llround(fraction * static_cast<double>(order.size())));
    for (size_t i = 0; i < order.size(); ++i) keep[order[i]] = i < k;
  }

  for (auto& s : ds.stacks) {
    auto it = keep.find(s.id);
    if (it == keep.end() || it->second) continue;
    if (s.breast_label) ds.eval_truth[s.id] = *s.breast_label;
    s.annotation_level = AnnotationLevel::None;
    s.breast_label.reset();
    s.annotated_slice_index.reset();
    for (auto& sl : s.slices) sl.mask.reset();
  }
  return ds;
}

}  // namespace skd
