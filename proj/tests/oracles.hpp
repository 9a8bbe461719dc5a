#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance binary. Deliberately naive: loops, doubles, no shared helpers
// from the library beyond plain data types.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "phqfuse/data.hpp"
#include "phqfuse/tensor.hpp"

namespace oracle {

/// Numerical rank by Gaussian elimination with full pivoting; pivots below
/// tol * (largest pivot) count as zero.
inline std::size_t numerical_rank(const phqfuse::Tensor& m, double tol = 1e-6) {
  const std::size_t R = m.rows(), C = m.cols();
  std::vector<double> a(m.data().begin(), m.data().end());
  std::vector<bool> row_used(R, false), col_used(C, false);
  double first = 0.0;
  std::size_t rank = 0;
  for (std::size_t step = 0; step < std::min(R, C); ++step) {
    double best = 0.0;
    std::size_t br = 0, bc = 0;
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j)
        if (!row_used[i] && !col_used[j] && std::abs(a[i * C + j]) > best) {
          best = std::abs(a[i * C + j]);
          br = i;
          bc = j;
        }
    if (step == 0) first = best;
    if (best == 0.0 || best <= tol * first) break;
    ++rank;
    row_used[br] = col_used[bc] = true;
    for (std::size_t i = 0; i < R; ++i) {
      if (row_used[i]) continue;
      const double f = a[i * C + bc] / a[br * C + bc];
      for (std::size_t j = 0; j < C; ++j) a[i * C + j] -= f * a[br * C + j];
    }
  }
  return rank;
}

/// Participant rows by linear scan.
inline std::vector<phqfuse::data::Utterance> participant_rows(const std::vector<phqfuse::data::Utterance>& u) {
  std::vector<phqfuse::data::Utterance> out;
  for (std::size_t i = 0; i < u.size(); ++i)
    if (u[i].speaker == phqfuse::data::Speaker::kParticipant) out.push_back(u[i]);
  return out;
}

/// Group sizes by counting: a new group starts every fifth item.
inline std::vector<std::size_t> group_sizes(std::size_t n) {
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 5 == 0) sizes.push_back(0);
    ++sizes.back();
  }
  return sizes;
}

/// Sample-by-sample copy of the utterance spans, rounding half up.
inline std::vector<float> slice(const std::vector<float>& session, const std::vector<phqfuse::data::Utterance>& utts) {
  std::vector<float> out;
  for (const auto& u : utts) {
    const auto a = static_cast<std::size_t>(std::floor(u.start_time * 16000.0 + 0.5));
    const auto b = static_cast<std::size_t>(std::floor(u.stop_time * 16000.0 + 0.5));
    for (std::size_t i = a; i < b; ++i) out.push_back(session[i]);
  }
  return out;
}

inline std::map<std::string, double> grouped_mean(const std::vector<std::pair<std::string, double>>& recs) {
  std::map<std::string, std::vector<double>> g;
  for (const auto& [k, v] : recs) g[k].push_back(v);
  std::map<std::string, double> out;
  for (const auto& [k, vs] : g) {
    double s = 0.0;
    for (double v : vs) s += v;
    out[k] = s / static_cast<double>(vs.size());
  }
  return out;
}

inline double mae(const std::vector<double>& p, const std::vector<double>& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::fabs(p[i] - t[i]);
  return s / static_cast<double>(p.size());
}

inline double rmse(const std::vector<double>& p, const std::vector<double>& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - t[i]) * (p[i] - t[i]);
  return std::sqrt(s / static_cast<double>(p.size()));
}

}  // namespace oracle
