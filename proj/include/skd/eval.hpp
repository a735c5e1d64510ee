#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/datamodel.hpp"
#include "skd/model.hpp"

namespace skd {

// --- rank statistics ------------------------------------------------------

namespace detail {

// Midranks (1-based, ties averaged) of the input values.
inline std::vector<double> midranks(const std::vector<double>& x) {
  size_t n = x.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
    double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// DeLong structural components: placement values for positives (V10) and
// negatives (V01), computed with midranks in O((m+n) log(m+n)).
struct Placements {
  double auc = 0;
  std::vector<double> v10;
  std::vector<double> v01;
};

inline Placements placements(const std::vector<double>& pos, const std::vector<double>& neg) {
  size_t m = pos.size(), n = neg.size();
  if (m == 0 || n == 0) throw ValidationError("auc: both classes must be nonempty");
  std::vector<double> all;
  all.reserve(m + n);
  all.insert(all.end(), pos.begin(), pos.end());
  all.insert(all.end(), neg.begin(), neg.end());
  auto tz = midranks(all);
  auto tx = midranks(pos);
  auto ty = midranks(neg);

  Placements out;
  out.v10.resize(m);
  out.v01.resize(n);
  double sum = 0;
  for (size_t i = 0; i < m; ++i) {
    out.v10[i] = (tz[i] - tx[i]) / static_cast<double>(n);
    sum += tz[i];
  }
  for (size_t j = 0; j < n; ++j)
    out.v01[j] = 1.0 - (tz[m + j] - ty[j]) / static_cast<double>(m);
  out.auc = (sum - static_cast<double>(m) * (m + 1) / 2.0) /
            (static_cast<double>(m) * static_cast<double>(n));
  return out;
}

inline double sample_variance(const std::vector<double>& xs) {
  size_t n = xs.size();
  if (n < 2) return 0.0;
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(n);
  double s = 0;
  for (double x : xs) s += (x - mean) * (x - mean);
  return s / static_cast<double>(n - 1);
}

inline double sample_covariance(const std::vector<double>& xs, const std::vector<double>& ys) {
  size_t n = xs.size();
  if (n < 2) return 0.0;
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double s = 0;
  for (size_t i = 0; i < n; ++i) s += (xs[i] - mx) * (ys[i] - my);
  return s / static_cast<double>(n - 1);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Acklam's rational approximation to the standard normal quantile.
inline double normal_quantile(double p) {
  if (p <= 0.0 || p >= 1.0) throw ValidationError("quantile argument must lie in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1 - plow;
  double q, r;
  if (p < plow) {
    q = std::sqrt(-2 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  if (p > phigh) {
    q = std::sqrt(-2 * std::log(1 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  q = p - 0.5;
  r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

}  // namespace detail

// Mann-Whitney AUC with tie correction (0.5 per tied pair).
inline double auc(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores) {
  return detail::placements(pos_scores, neg_scores).auc;
}

// DeLong variance of the AUC estimate: S10/m + S01/n.
inline double delong_variance(const std::vector<double>& pos_scores,
                              const std::vector<double>& neg_scores) {
  auto pl = detail::placements(pos_scores, neg_scores);
  return detail::sample_variance(pl.v10) / static_cast<double>(pl.v10.size()) +
         detail::sample_variance(pl.v01) / static_cast<double>(pl.v01.size());
}

struct CiResult {
  double auc = 0;
  double ci_low = 0;
  double ci_high = 0;
  bool degenerate = false;  // zero variance (e.g. perfect separation)
};

inline CiResult delong_ci(const std::vector<double>& pos_scores,
                          const std::vector<double>& neg_scores, double level = 0.95) {
  if (pos_scores.size() < 2 || neg_scores.size() < 2)
    throw ValidationError("delong_ci requires at least 2 cases per class");
  auto pl = detail::placements(pos_scores, neg_scores);
  double var = detail::sample_variance(pl.v10) / static_cast<double>(pl.v10.size()) +
               detail::sample_variance(pl.v01) / static_cast<double>(pl.v01.size());
  CiResult r;
  r.auc = pl.auc;
  if (var <= 0.0) {
    r.ci_low = r.ci_high = pl.auc;
    r.degenerate = true;
    return r;
  }
  double z = detail::normal_quantile(0.5 + level / 2.0);
  double half = z * std::sqrt(var);
  r.ci_low = std::max(0.0, pl.auc - half);
  r.ci_high = std::min(1.0, pl.auc + half);
  return r;
}

// Two-sided paired DeLong test for H0: auc_a == auc_b, both models scored on
// the same cases.
inline double delong_paired_test(const std::vector<double>& scores_a,
                                 const std::vector<double>& scores_b,
                                 const std::vector<int>& labels) {
  if (scores_a.size() != scores_b.size() || scores_a.size() != labels.size())
    throw ValidationError("delong_paired_test: length mismatch");
  std::vector<double> pos_a, neg_a, pos_b, neg_b;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos_a.push_back(scores_a[i]);
      pos_b.push_back(scores_b[i]);
    } else {
      neg_a.push_back(scores_a[i]);
      neg_b.push_back(scores_b[i]);
    }
  }
  if (pos_a.empty() || neg_a.empty())
    throw ValidationError("delong_paired_test: labels contain a single class");

  auto pa = detail::placements(pos_a, neg_a);
  auto pb = detail::placements(pos_b, neg_b);
  double m = static_cast<double>(pos_a.size());
  double n = static_cast<double>(neg_a.size());
  double var_a = detail::sample_variance(pa.v10) / m + detail::sample_variance(pa.v01) / n;
  double var_b = detail::sample_variance(pb.v10) / m + detail::sample_variance(pb.v01) / n;
  double cov = detail::sample_covariance(pa.v10, pb.v10) / m +
               detail::sample_covariance(pa.v01, pb.v01) / n;
  double diff = pa.auc - pb.auc;
  double var = var_a + var_b - 2.0 * cov;
  if (var <= 0.0) return diff == 0.0 ? 1.0 : 0.0;
  double z = diff / std::sqrt(var);
  return 2.0 * (1.0 - detail::normal_cdf(std::abs(z)));
}

// --- model evaluation -------------------------------------------------------

// Stack-level score: maximum slice classification probability.
inline double stack_score(const DualHeadModel& model, const StackRecord& stack) {
  if (stack.slices.empty()) throw ValidationError("stack_score: empty stack " + stack.id);
  double best = 0.0;
  for (const auto& sl : stack.slices)
    best = std::max(best, static_cast<double>(forward(model, sl.image).clf_prob));
  return best;
}

struct StackScore {
  std::string stack_id;
  std::string domain;
  int label = 0;
  double score = 0;
};

struct DomainResult {
  bool defined = false;  // false when the domain has a single class
  double auc = 0, ci_low = 0, ci_high = 0;
  bool degenerate_ci = false;
  int n_pos = 0, n_neg = 0;
};

struct EvalResult {
  std::map<std::string, DomainResult> per_domain;
  DomainResult pooled;
  std::vector<StackScore> scores;
};

namespace detail {

inline DomainResult summarize(const std::vector<StackScore>& scores) {
  DomainResult r;
  std::vector<double> pos, neg;
  for (const auto& s : scores) (s.label == 1 ? pos : neg).push_back(s.score);
  r.n_pos = static_cast<int>(pos.size());
  r.n_neg = static_cast<int>(neg.size());
  if (pos.size() < 2 || neg.size() < 2) {
    if (!pos.empty() && !neg.empty()) {
      r.defined = true;
      r.auc = r.ci_low = r.ci_high = auc(pos, neg);
      r.degenerate_ci = true;
    }
    return r;
  }
  auto ci = delong_ci(pos, neg);
  r.defined = true;
  r.auc = ci.auc;
  r.ci_low = ci.ci_low;
  r.ci_high = ci.ci_high;
  r.degenerate_ci = ci.degenerate;
  return r;
}

}  // namespace detail

inline EvalResult evaluate(const DualHeadModel& model, const Dataset& dataset, Split split) {
  EvalResult res;
  std::map<std::string, std::vector<StackScore>> by_domain;
  for (const auto& stack : dataset.stacks) {
    if (dataset.split_of(stack.id) != split) continue;
    StackScore s;
    s.stack_id = stack.id;
    s.domain = stack.domain;
    s.label = dataset.truth_label(stack.id);
    s.score = stack_score(model, stack);
    by_domain[s.domain].push_back(s);
    res.scores.push_back(std::move(s));
  }
  if (res.scores.empty()) throw ValidationError("evaluate: split is empty");
  for (const auto& [domain, ss] : by_domain) res.per_domain[domain] = detail::summarize(ss);
  res.pooled = detail::summarize(res.scores);
  return res;
}

// --- persistence ---------------------------------------------------------

inline json eval_result_to_json(const EvalResult& res) {
  auto dom = [](const DomainResult& d) {
    json j{{"defined", d.defined}, {"n_pos", d.n_pos}, {"n_neg", d.n_neg}};
    if (d.defined) {
      j["auc"] = d.auc;
      j["ci_low"] = d.ci_low;
      j["ci_high"] = d.ci_high;
      j["degenerate_ci"] = d.degenerate_ci;
    }
    return j;
  };
  json j;
  j["all"] = dom(res.pooled);
  for (const auto& [name, d] : res.per_domain) j["domains"][name] = dom(d);
  return j;
}

inline void save_scores_csv(const std::vector<StackScore>& scores, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "stack_id,domain,label,score\n";
  char buf[256];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.9g\n", s.stack_id.c_str(), s.domain.c_str(),
                  s.label, s.score);
    out << buf;
  }
}

inline std::vector<StackScore> load_scores_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing scores csv: " + path.string());
  std::vector<StackScore> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    StackScore s;
    std::string field;
    std::getline(ss, s.stack_id, ',');
    std::getline(ss, s.domain, ',');
    std::getline(ss, field, ',');
    s.label = std::stoi(field);
    std::getline(ss, field, ',');
    s.score = std::stod(field);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace skd
