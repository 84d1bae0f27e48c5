#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "bdlab/autodiff.hpp"

namespace bdlab {

// max |a-b| / max(|a|, |b|, floor); 0 when both sides are below floor.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 1e-8) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size() && i < b.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // Full per-parameter gradients, analytic and central-difference, so a
  // caller can re-derive any comparison in the report.
  std::map<std::string, std::vector<double>> analytic;
  std::map<std::string, std::vector<double>> numeric;
};

// Central-difference check of backward() against the forward evaluation,
// over every Param leaf reachable from `out`. Double precision only.
inline GradCheckReport grad_check(GraphT<double>& g, int out, double step = 1e-5) {
  GradCheckReport rep;
  g.forward(out);
  g.backward(out);
  for (int pid : g.param_ids()) {
    const std::string& name = g.name_of(pid);
    auto& p = g.tensor(pid);
    rep.analytic[name] = p.grad;
    std::vector<double> fd(p.data.size(), 0.0);
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double saved = p.data[i];
      p.data[i] = saved + step;
      const double up = g.forward(out).data[0];
      p.data[i] = saved - step;
      const double dn = g.forward(out).data[0];
      p.data[i] = saved;
      fd[i] = (up - dn) / (2.0 * step);
    }
    rep.numeric[name] = fd;
    const auto& an = rep.analytic[name];
    for (size_t i = 0; i < fd.size(); ++i) {
      const double denom = std::max({std::fabs(an[i]), std::fabs(fd[i]), 1e-8});
      const double rel = std::fabs(an[i] - fd[i]) / denom;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = name;
        rep.worst_index = static_cast<int64_t>(i);
        rep.worst_analytic = an[i];
        rep.worst_numeric = fd[i];
      }
    }
  }
  // restore a consistent forward/backward state
  g.forward(out);
  g.backward(out);
  return rep;
}

}  // namespace bdlab
