#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdarts/data.hpp"
#include "rdarts/errors.hpp"
#include "rdarts/supernet.hpp"

namespace rdarts {

struct ScoreSet {
  std::vector<double> genuine, impostor;
};

struct EvalConfig {
  std::size_t batch = 256;
};

struct DetPoint {
  double threshold = 0, far = 0, frr = 0;
};

// Row-major [n, d] embedding matrix with one label per row.
struct Embeddings {
  std::size_t n = 0, d = 0;
  std::vector<double> v;
  std::vector<int> labels;
  const double* row(std::size_t i) const { return v.data() + i * d; }
};

inline void l2_normalize_rows(std::vector<double>& v, std::size_t n, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t k = 0; k < d; ++k) sq += v[i * d + k] * v[i * d + k];
    const double inv = 1.0 / std::max(std::sqrt(sq), 1e-12);
    for (std::size_t k = 0; k < d; ++k) v[i * d + k] *= inv;
  }
}

// Pooled pre-logit features in evaluation mode, L2-normalized per row.
template <typename S>
Tensor<S> embed(DiscreteNetwork<S>& net, const Tensor<S>& windows, std::size_t batch = 256) {
  if (windows.rank() != 3) throw ShapeError("embed", "expected [B, C, T], got " + shape_str(windows));
  NoGradGuard ng;
  const std::size_t B = windows.dim(0), w = windows.dim(1) * windows.dim(2);
  std::vector<double> out;
  std::size_t D = 0;
  for (std::size_t b0 = 0; b0 < B; b0 += batch) {
    const std::size_t nb = std::min(batch, B - b0);
    std::vector<S> chunk(windows.values().begin() + static_cast<std::ptrdiff_t>(b0 * w),
                         windows.values().begin() + static_cast<std::ptrdiff_t>((b0 + nb) * w));
    auto e = net.evaluate(Tensor<S>(Shape{nb, windows.dim(1), windows.dim(2)}, std::move(chunk))).embedding;
    D = e.dim(1);
    for (auto x : e.values()) out.push_back(static_cast<double>(x));
  }
  l2_normalize_rows(out, B, D);
  std::vector<S> cast(out.begin(), out.end());
  return Tensor<S>(Shape{B, D}, std::move(cast));
}

template <typename S>
Embeddings embed_windows(DiscreteNetwork<S>& net, const WindowedDataset& ds, const std::vector<std::size_t>& idx,
                         std::size_t batch = 256) {
  Embeddings e;
  e.labels = ds.labels_of(idx);
  e.n = idx.size();
  for (std::size_t b0 = 0; b0 < idx.size(); b0 += batch) {
    std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(b0),
                                  idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b0 + batch)));
    auto t = embed(net, ds.template tensor<S>(part), batch);
    e.d = t.dim(1);
    for (auto x : t.values()) e.v.push_back(static_cast<double>(x));
  }
  return e;
}

using WarnFn = std::function<void(const std::string&)>;

// Enrollment is the re-normalized per-subject centroid of session-1
// embeddings; every session-2 embedding is scored against every centroid by
// cosine similarity. Subjects seen in only one session are dropped.
inline ScoreSet score_protocol(const Embeddings& s1, const Embeddings& s2, const WarnFn& warn = {}) {
  if (s1.n == 0 || s2.n == 0) throw DataError("score_protocol: both sessions need embeddings");
  if (s1.d != s2.d) throw ShapeError("score_protocol", "embedding widths differ between sessions");
  const std::size_t d = s1.d;
  std::map<int, std::vector<double>> centroid;
  std::map<int, std::size_t> count;
  for (std::size_t i = 0; i < s1.n; ++i) {
    auto& c = centroid[s1.labels[i]];
    c.resize(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) c[k] += s1.row(i)[k];
    ++count[s1.labels[i]];
  }
  std::map<int, bool> in_s2;
  for (auto l : s2.labels) in_s2[l] = true;
  std::vector<int> enrolled;
  std::vector<double> cm;
  for (auto& [label, c] : centroid) {
    if (!in_s2.count(label)) {
      if (warn) warn("subject label " + std::to_string(label) + " has no session-2 data; excluded");
      continue;
    }
    enrolled.push_back(label);
    cm.insert(cm.end(), c.begin(), c.end());
  }
  for (auto& [label, _] : in_s2)
    if (!centroid.count(label) && warn) warn("subject label " + std::to_string(label) + " has no session-1 data; excluded");
  l2_normalize_rows(cm, enrolled.size(), d);

  ScoreSet s;
  for (std::size_t i = 0; i < s2.n; ++i) {
    const auto it = std::lower_bound(enrolled.begin(), enrolled.end(), s2.labels[i]);
    if (it == enrolled.end() || *it != s2.labels[i]) continue;
    for (std::size_t e = 0; e < enrolled.size(); ++e) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += s2.row(i)[k] * cm[e * d + k];
      (enrolled[e] == s2.labels[i] ? s.genuine : s.impostor).push_back(dot);
    }
  }
  return s;
}

inline void check_scores(const ScoreSet& s) {
  if (s.genuine.empty()) throw DataError("no genuine scores");
  if (s.impostor.empty()) throw DataError("no impostor scores (a single enrolled subject cannot be verified)");
  for (const auto* v : {&s.genuine, &s.impostor})
    for (double x : *v)
      if (!std::isfinite(x)) throw NumericalError("non-finite similarity score");
}

// Empirical DET at every distinct score plus +inf, thresholds ascending.
// A probe is accepted when score >= threshold.
inline std::vector<DetPoint> det_curve(const ScoreSet& s) {
  check_scores(s);
  std::vector<double> g = s.genuine, im = s.impostor;
  std::sort(g.begin(), g.end());
  std::sort(im.begin(), im.end());
  std::vector<double> th;
  std::merge(g.begin(), g.end(), im.begin(), im.end(), std::back_inserter(th));
  th.erase(std::unique(th.begin(), th.end()), th.end());
  th.push_back(std::numeric_limits<double>::infinity());
  const double ng = static_cast<double>(g.size()), ni = static_cast<double>(im.size());
  std::vector<DetPoint> out;
  out.reserve(th.size());
  std::size_t gi = 0, ii = 0;  // counts of scores strictly below the threshold
  for (double t : th) {
    while (gi < g.size() && g[gi] < t) ++gi;
    while (ii < im.size() && im[ii] < t) ++ii;
    out.push_back({t, static_cast<double>(im.size() - ii) / ni, static_cast<double>(gi) / ng});
  }
  return out;
}

// FAR = FRR crossing of a DET, interpolated linearly between the last point
// with FRR < FAR and the first with FRR >= FAR.
inline double eer_from_det(const std::vector<DetPoint>& det) {
  for (std::size_t k = 0; k < det.size(); ++k) {
    const double dk = det[k].frr - det[k].far;
    if (dk < 0) continue;
    if (dk == 0 || k == 0) return det[k].far;
    const double dp = det[k - 1].frr - det[k - 1].far;
    const double lam = -dp / (dk - dp);
    return det[k - 1].far + lam * (det[k].far - det[k - 1].far);
  }
  throw NumericalError("DET curve never crosses");
}

inline double compute_eer(const ScoreSet& s) { return eer_from_det(det_curve(s)); }

inline double frr_at_far_from_det(const std::vector<DetPoint>& det, double far_target) {
  if (!(far_target > 0 && far_target < 1)) throw UsageError("FAR target must lie in (0, 1)");
  for (std::size_t k = 0; k < det.size(); ++k) {
    if (det[k].far > far_target) continue;
    if (k == 0 || det[k].far == far_target) return det[k].frr;
    const double lam = (det[k - 1].far - far_target) / (det[k - 1].far - det[k].far);
    return det[k - 1].frr + lam * (det[k].frr - det[k - 1].frr);
  }
  throw NumericalError("DET curve never reaches the FAR target");
}

inline double frr_at_far(const ScoreSet& s, double far_target) { return frr_at_far_from_det(det_curve(s), far_target); }

inline bool under_resolved(const ScoreSet& s, double far_target) {
  return static_cast<double>(s.impostor.size()) < 1.0 / far_target;
}

struct FarTarget {
  const char* key;
  double value;
};
inline constexpr FarTarget kFarTargets[] = {{"1e-1", 1e-1}, {"1e-2", 1e-2}, {"1e-3", 1e-3}};

inline nlohmann::json metrics_json(const ScoreSet& s) {
  const auto det = det_curve(s);
  nlohmann::json frr = nlohmann::json::object();
  auto flagged = nlohmann::json::array();
  for (const auto& t : kFarTargets) {
    frr[t.key] = frr_at_far_from_det(det, t.value);
    if (under_resolved(s, t.value)) flagged.push_back(t.key);
  }
  return {{"eer", eer_from_det(det)},
          {"frr_at_far", frr},
          {"n_genuine", s.genuine.size()},
          {"n_impostor", s.impostor.size()},
          {"under_resolved", flagged}};
}

inline void write_det_csv(std::ostream& out, const std::vector<DetPoint>& det) {
  out << "threshold,far,frr\n";
  char buf[96];
  for (const auto& p : det) {
    if (std::isinf(p.threshold))
      std::snprintf(buf, sizeof buf, "inf,%.17g,%.17g\n", p.far, p.frr);
    else
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.far, p.frr);
    out << buf;
  }
}

// Session-2 verification of a trained network.
template <typename S>
ScoreSet verification_scores(DiscreteNetwork<S>& net, const WindowedDataset& ds, std::size_t batch = 256,
                             const WarnFn& warn = {}) {
  const auto e1 = embed_windows(net, ds, ds.indices_where_session(1), batch);
  const auto e2 = embed_windows(net, ds, ds.indices_where_session(2), batch);
  return score_protocol(e1, e2, warn);
}

}  // namespace rdarts
