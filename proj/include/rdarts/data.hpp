#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdarts/errors.hpp"
#include "rdarts/random.hpp"
#include "rdarts/tensor.hpp"

namespace rdarts {

// Column layout of an input CSV. An empty channel list means every column
// other than subject/session/segment is a channel.
struct CsvSchema {
  std::string subject_col = "subject";
  std::string session_col = "session";
  std::string segment_col = "segment";  // optional in the file
  std::vector<std::string> channels;
  double sampling_rate_hz = 1000.0;
  double max_gap_ms = 50.0;
};

struct SequenceRecord {
  std::string subject;
  int session = 1;
  int segment = 0;
  std::vector<std::string> channel_names;
  std::vector<std::vector<double>> channels;
  double sampling_rate_hz = 1000.0;

  std::size_t length() const { return channels.empty() ? 0 : channels.front().size(); }
  std::string id() const {
    return subject + "/s" + std::to_string(session) + (segment ? "/seg" + std::to_string(segment) : "");
  }
  bool operator==(const SequenceRecord&) const = default;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    auto b = f.find_first_not_of(" \t");
    auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_sample(const std::string& f, std::size_t line_no) {
  if (f.empty() || f == "NaN" || f == "nan" || f == "NA") return std::numeric_limits<double>::quiet_NaN();
  double v = 0;
  auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (ec != std::errc() || p != f.data() + f.size())
    throw DataError("line " + std::to_string(line_no) + ": cannot parse sample '" + f + "'");
  return v;
}

// Fills interior and edge NaNs of one channel. Returns false if the channel
// has no finite sample at all.
inline bool interpolate_nans(std::vector<double>& v) {
  const std::size_t n = v.size();
  std::size_t first = n;
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isnan(v[i])) {
      first = i;
      break;
    }
  if (first == n) return false;
  for (std::size_t i = 0; i < first; ++i) v[i] = v[first];
  std::size_t last = first;
  for (std::size_t i = first + 1; i < n; ++i) {
    if (std::isnan(v[i])) continue;
    if (i > last + 1) {
      const double a = v[last], b = v[i];
      for (std::size_t k = last + 1; k < i; ++k)
        v[k] = a + (b - a) * static_cast<double>(k - last) / static_cast<double>(i - last);
    }
    last = i;
  }
  for (std::size_t i = last + 1; i < n; ++i) v[i] = v[last];
  return true;
}

// Cuts a record wherever more than max_gap consecutive rows carry a NaN in
// any channel, then interpolates what is left.
inline std::vector<SequenceRecord> apply_nan_policy(SequenceRecord rec, std::size_t max_gap) {
  const std::size_t n = rec.length();
  std::vector<bool> bad(n, false);
  for (const auto& ch : rec.channels)
    for (std::size_t t = 0; t < n; ++t)
      if (std::isnan(ch[t])) bad[t] = true;

  std::vector<std::pair<std::size_t, std::size_t>> pieces;
  std::size_t start = 0, t = 0;
  while (t < n) {
    if (!bad[t]) {
      ++t;
      continue;
    }
    std::size_t e = t;
    while (e < n && bad[e]) ++e;
    if (e - t > max_gap) {
      if (t > start) pieces.emplace_back(start, t);
      start = e;
    }
    t = e;
  }
  if (n > start) pieces.emplace_back(start, n);

  std::vector<SequenceRecord> out;
  for (const auto& [b, e] : pieces) {
    SequenceRecord r;
    r.subject = rec.subject;
    r.session = rec.session;
    r.channel_names = rec.channel_names;
    r.sampling_rate_hz = rec.sampling_rate_hz;
    bool ok = true;
    for (const auto& ch : rec.channels) {
      std::vector<double> piece(ch.begin() + static_cast<std::ptrdiff_t>(b), ch.begin() + static_cast<std::ptrdiff_t>(e));
      ok = ok && interpolate_nans(piece);
      r.channels.push_back(std::move(piece));
    }
    if (!ok) continue;
    r.segment = rec.segment + static_cast<int>(out.size());
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace detail

inline std::vector<SequenceRecord> ingest_csv(std::istream& in, const CsvSchema& schema = {}) {
  std::string line;
  std::size_t line_no = 0;
  do {
    if (!std::getline(in, line)) throw DataError("empty CSV input");
    ++line_no;
  } while (line.find_first_not_of(" \t\r") == std::string::npos);
  const auto header = detail::split_csv_line(line);

  auto find_col = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  };
  auto require_col = [&](const std::string& name) {
    auto c = find_col(name);
    if (!c) throw DataError("CSV is missing required column '" + name + "'");
    return *c;
  };
  const std::size_t subj_c = require_col(schema.subject_col);
  const std::size_t sess_c = require_col(schema.session_col);
  const auto seg_c = find_col(schema.segment_col);

  std::vector<std::string> names = schema.channels;
  std::vector<std::size_t> chan_c;
  if (names.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (i != subj_c && i != sess_c && (!seg_c || i != *seg_c)) {
        names.push_back(header[i]);
        chan_c.push_back(i);
      }
  } else {
    for (const auto& n : names) chan_c.push_back(require_col(n));
  }
  if (names.empty()) throw DataError("CSV has no channel columns");

  std::map<std::tuple<std::string, int, int>, std::size_t> index;
  std::vector<SequenceRecord> raw;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(f.size()));
    int session = 0, segment = 0;
    auto parse_int = [&](const std::string& s, const char* what) {
      int v = 0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size())
        throw DataError("line " + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
      return v;
    };
    session = parse_int(f[sess_c], "session");
    if (seg_c) segment = parse_int(f[*seg_c], "segment");
    const auto key = std::make_tuple(f[subj_c], session, segment);
    auto it = index.find(key);
    if (it == index.end()) {
      SequenceRecord r;
      r.subject = f[subj_c];
      r.session = session;
      r.segment = segment;
      r.channel_names = names;
      r.channels.resize(names.size());
      r.sampling_rate_hz = schema.sampling_rate_hz;
      it = index.emplace(key, raw.size()).first;
      raw.push_back(std::move(r));
    }
    auto& r = raw[it->second];
    for (std::size_t c = 0; c < chan_c.size(); ++c) r.channels[c].push_back(detail::parse_sample(f[chan_c[c]], line_no));
  }
  if (raw.empty()) throw DataError("CSV has a header but no samples");

  const auto max_gap = static_cast<std::size_t>(std::floor(schema.max_gap_ms * schema.sampling_rate_hz / 1000.0));
  std::vector<SequenceRecord> out;
  for (auto& r : raw)
    for (auto& piece : detail::apply_nan_policy(std::move(r), max_gap)) out.push_back(std::move(piece));
  return out;
}

inline std::vector<SequenceRecord> ingest_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return ingest_csv(in, schema);
}

inline void export_csv(std::ostream& out, const std::vector<SequenceRecord>& records) {
  if (records.empty()) throw DataError("nothing to export");
  const auto& names = records.front().channel_names;
  out << "subject,session,segment";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  char buf[32];
  for (const auto& r : records) {
    if (r.channel_names != names) throw DataError("records disagree on channel names");
    for (std::size_t t = 0; t < r.length(); ++t) {
      out << r.subject << ',' << r.session << ',' << r.segment;
      for (const auto& ch : r.channels) {
        auto [p, ec] = std::to_chars(buf, buf + sizeof buf, ch[t]);
        out << ',' << std::string_view(buf, static_cast<std::size_t>(p - buf));
      }
      out << '\n';
    }
  }
}

inline void export_csv(const std::string& path, const std::vector<SequenceRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  export_csv(out, records);
}

inline nlohmann::json dataset_manifest(const std::vector<SequenceRecord>& records) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records)
    recs.push_back({{"subject", r.subject}, {"session", r.session}, {"segment", r.segment}, {"length", r.length()}});
  return {{"records", recs},
          {"channels", records.empty() ? std::vector<std::string>{} : records.front().channel_names},
          {"sampling_rate_hz", records.empty() ? 0.0 : records.front().sampling_rate_hz}};
}

// ---------------------------------------------------------------------------
// Windowing

struct NormStats {
  std::vector<double> mean, stddev;
};

struct WindowedDataset {
  std::size_t channels = 0, length = 0, stride = 0;
  std::vector<double> data;  // [N, C, T]
  std::vector<int> labels;
  std::vector<int> sessions;
  std::vector<std::size_t> record_index, offset;
  std::vector<std::string> subjects;  // label -> subject id
  std::size_t num_classes = 0;        // labels below this have session-1 data
  std::optional<NormStats> norm;

  std::size_t size() const { return labels.size(); }

  std::vector<std::size_t> indices_where_session(int session) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (sessions[i] == session) out.push_back(i);
    return out;
  }

  template <typename S>
  Tensor<S> tensor(const std::vector<std::size_t>& idx) const {
    const std::size_t w = channels * length;
    std::vector<S> v(idx.size() * w);
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t k = 0; k < w; ++k) v[b * w + k] = static_cast<S>(data[idx[b] * w + k]);
    return Tensor<S>(Shape{idx.size(), channels, length}, std::move(v));
  }

  std::vector<int> labels_of(const std::vector<std::size_t>& idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
};

inline NormStats session1_stats(const WindowedDataset& ds) {
  NormStats st{std::vector<double>(ds.channels, 0.0), std::vector<double>(ds.channels, 0.0)};
  std::vector<double> count(ds.channels, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.sessions[i] != 1) continue;
    for (std::size_t c = 0; c < ds.channels; ++c) {
      const double* p = ds.data.data() + (i * ds.channels + c) * ds.length;
      for (std::size_t t = 0; t < ds.length; ++t) st.mean[c] += p[t];
      count[c] += static_cast<double>(ds.length);
    }
  }
  if (count.empty() || count[0] == 0) throw DataError("no session-1 windows to compute normalization statistics");
  for (std::size_t c = 0; c < ds.channels; ++c) st.mean[c] /= count[c];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.sessions[i] != 1) continue;
    for (std::size_t c = 0; c < ds.channels; ++c) {
      const double* p = ds.data.data() + (i * ds.channels + c) * ds.length;
      for (std::size_t t = 0; t < ds.length; ++t) st.stddev[c] += (p[t] - st.mean[c]) * (p[t] - st.mean[c]);
    }
  }
  for (std::size_t c = 0; c < ds.channels; ++c) {
    st.stddev[c] = std::sqrt(st.stddev[c] / count[c]);
    if (!(st.stddev[c] > 0)) throw DataError("channel " + std::to_string(c) + " is constant over session 1");
  }
  return st;
}

inline void apply_norm(WindowedDataset& ds, const NormStats& st) {
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t c = 0; c < ds.channels; ++c) {
      double* p = ds.data.data() + (i * ds.channels + c) * ds.length;
      for (std::size_t t = 0; t < ds.length; ++t) p[t] = (p[t] - st.mean[c]) / st.stddev[c];
    }
  ds.norm = st;
}

// Cuts every record into length-T windows at the given stride. With
// z_normalize, per-channel statistics come from session-1 windows only (or
// from `stats` when given) and are applied unchanged to every session.
inline WindowedDataset make_windows(const std::vector<SequenceRecord>& records, std::size_t T, std::size_t stride,
                                    bool z_normalize, const std::optional<NormStats>& stats = std::nullopt) {
  if (records.empty()) throw DataError("make_windows: no records");
  if (T == 0 || stride == 0) throw UsageError("make_windows: window length and stride must be positive");
  std::vector<std::string> short_ones;
  for (const auto& r : records)
    if (r.length() < T) short_ones.push_back(r.id() + " (" + std::to_string(r.length()) + ")");
  if (!short_ones.empty()) {
    std::string msg = "window length " + std::to_string(T) + " exceeds records:";
    for (const auto& s : short_ones) msg += " " + s;
    throw DataError(msg);
  }

  WindowedDataset ds;
  ds.channels = records.front().channels.size();
  ds.length = T;
  ds.stride = stride;
  std::vector<std::string> s1, rest;
  for (const auto& r : records) {
    if (r.channels.size() != ds.channels) throw DataError("record " + r.id() + " has a different channel count");
    (r.session == 1 ? s1 : rest).push_back(r.subject);
  }
  auto uniq = [](std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  };
  ds.subjects = uniq(s1);
  ds.num_classes = ds.subjects.size();
  for (const auto& s : uniq(rest))
    if (!std::binary_search(ds.subjects.begin(), ds.subjects.begin() + static_cast<std::ptrdiff_t>(ds.num_classes), s))
      ds.subjects.push_back(s);
  std::map<std::string, int> label_of;
  for (std::size_t i = 0; i < ds.subjects.size(); ++i) label_of[ds.subjects[i]] = static_cast<int>(i);

  for (std::size_t ri = 0; ri < records.size(); ++ri) {
    const auto& r = records[ri];
    for (std::size_t off = 0; off + T <= r.length(); off += stride) {
      for (const auto& ch : r.channels)
        for (std::size_t t = 0; t < T; ++t) ds.data.push_back(ch[off + t]);
      ds.labels.push_back(label_of.at(r.subject));
      ds.sessions.push_back(r.session);
      ds.record_index.push_back(ri);
      ds.offset.push_back(off);
    }
  }
  if (z_normalize) apply_norm(ds, stats ? *stats : session1_stats(ds));
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic subjects

struct SynthSignature {
  std::vector<double> freq;       // cycles per sample, per channel
  std::vector<double> amplitude;  // per channel
  std::vector<double> offset;     // per channel
  double saccade_rate = 0;        // expected pulses per 1000 samples
  double saccade_amp = 0;
};

inline std::vector<SynthSignature> synth_signatures(std::size_t num_subjects, std::size_t C, std::uint64_t seed) {
  if (num_subjects < 2) throw UsageError("synthetic data needs at least 2 subjects");
  if (C == 0) throw UsageError("synthetic data needs at least one channel");
  Rng rng = Rng::derive(seed, 0);
  // Dominant frequencies sit on a grid of 1/128 cycles/sample when it fits,
  // otherwise the grid is refined; each channel draws a fresh assignment.
  const double f_lo = 4.0 / 128.0, f_hi = 0.42;
  const double df = std::min(1.0 / 128.0, (f_hi - f_lo) / static_cast<double>(num_subjects));
  std::vector<SynthSignature> sig(num_subjects);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::size_t> slots(num_subjects);
    for (std::size_t i = 0; i < num_subjects; ++i) slots[i] = i;
    rng.shuffle(slots);
    for (std::size_t s = 0; s < num_subjects; ++s) {
      sig[s].freq.push_back(f_lo + df * static_cast<double>(slots[s]));
      sig[s].amplitude.push_back(rng.uniform(1.2, 2.0));
      sig[s].offset.push_back(rng.uniform(-0.5, 0.5));
    }
  }
  for (auto& s : sig) {
    s.saccade_rate = rng.uniform(2.0, 6.0);
    s.saccade_amp = rng.uniform(1.0, 2.0);
  }
  return sig;
}

// Each subject has a persistent per-channel signature; every session redraws
// phases, saccade times and noise.
inline std::vector<SequenceRecord> synth_generate(std::size_t num_subjects, int sessions, std::size_t len, std::size_t C,
                                                  std::uint64_t seed, double noise = 0.3, double jitter = 1.5) {
  if (sessions < 1) throw UsageError("synthetic data needs at least one session");
  if (len == 0) throw UsageError("synthetic record length must be positive");
  const auto sig = synth_signatures(num_subjects, C, seed);
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < C; ++c) names.push_back("ch" + std::to_string(c));
  const int width = static_cast<int>(std::to_string(num_subjects - 1).size());

  std::vector<SequenceRecord> out;
  for (std::size_t s = 0; s < num_subjects; ++s) {
    for (int sess = 1; sess <= sessions; ++sess) {
      Rng rng = Rng::derive(seed, 1000 + 64 * s + static_cast<std::uint64_t>(sess));
      SequenceRecord r;
      char id[32];
      std::snprintf(id, sizeof id, "S%0*zu", width, s);
      r.subject = id;
      r.session = sess;
      r.channel_names = names;
      r.sampling_rate_hz = 1000.0;

      std::vector<double> pulse(len, 0.0);
      const double p_start = sig[s].saccade_rate / 1000.0;
      for (std::size_t t = 0; t < len; ++t) {
        if (!rng.bernoulli(p_start)) continue;
        const double a = sig[s].saccade_amp * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        for (std::size_t k = t; k < std::min(len, t + 12); ++k) {
          const double u = (static_cast<double>(k - t) - 5.5) / 2.5;
          pulse[k] += a * std::exp(-0.5 * u * u);
        }
      }
      for (std::size_t c = 0; c < C; ++c) {
        const double phase = rng.uniform(0.0, two_pi);
        const double phase2 = rng.uniform(0.0, two_pi);
        const double f = sig[s].freq[c], A = sig[s].amplitude[c];
        const double gain = c % 2 == 0 ? 1.0 : -0.6;
        // Fixation offsets: a fresh level after each geometric-length segment.
        std::vector<double> level(len);
        double cur = jitter * rng.normal();
        for (std::size_t t = 0; t < len; ++t) {
          if (t > 0 && rng.bernoulli(0.01)) cur = jitter * rng.normal();
          level[t] = cur;
        }
        std::vector<double> ch(len);
        for (std::size_t t = 0; t < len; ++t) {
          const double tt = static_cast<double>(t);
          ch[t] = sig[s].offset[c] + A * std::sin(two_pi * f * tt + phase) +
                  0.3 * A * std::sin(two_pi * 2.0 * f * tt + phase2) + gain * pulse[t] + noise * rng.normal();
          ch[t] += level[t];
        }
        r.channels.push_back(std::move(ch));
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Search split

struct SearchSplit {
  std::vector<std::size_t> train, val;
};

// Stratified by label: each subject contributes round(ratio * n) windows to
// train (at least one to each side).
inline SearchSplit split_for_search(const WindowedDataset& ds, const std::vector<std::size_t>& pool, double ratio,
                                    std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw UsageError("split ratio must lie in (0, 1)");
  if (pool.empty()) throw DataError("split_for_search: no windows");
  std::map<int, std::vector<std::size_t>> by_label;
  for (auto i : pool) by_label[ds.labels.at(i)].push_back(i);
  Rng rng = Rng::derive(seed, 4);
  SearchSplit out;
  for (auto& [label, idx] : by_label) {
    if (idx.size() < 2)
      throw DataError("subject " + ds.subjects.at(static_cast<std::size_t>(label)) +
                      " has a single window and cannot be stratified");
    rng.shuffle(idx);
    auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

}  // namespace rdarts
