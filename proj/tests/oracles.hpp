#pragma once

// Test-only reference implementations, kept independent of the library code
// they check. Everything here is written as plain nested loops over
// explicit indices so it can be inspected line by line.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// y[n][ho][wo][co] for stride-1 conv, zero padding ph/pw.
inline std::vector<double> conv2d_nhwc(const std::vector<double>& x, int N, int H, int W, int Ci,
                                       const std::vector<double>& k, int kh, int kw, int Co,
                                       const std::vector<double>& bias, int ph, int pw) {
  const int Ho = H + 2 * ph - kh + 1;
  const int Wo = W + 2 * pw - kw + 1;
  std::vector<double> y(static_cast<size_t>(N) * Ho * Wo * Co, 0.0);
  auto xi = [&](int n, int h, int w, int c) -> double {
    if (h < 0 || h >= H || w < 0 || w >= W) return 0.0;
    return x[((static_cast<size_t>(n) * H + h) * W + w) * Ci + c];
  };
  for (int n = 0; n < N; ++n)
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo)
        for (int co = 0; co < Co; ++co) {
          double s = bias[static_cast<size_t>(co)];
          for (int dh = 0; dh < kh; ++dh)
            for (int dw = 0; dw < kw; ++dw)
              for (int ci = 0; ci < Ci; ++ci)
                s += xi(n, ho + dh - ph, wo + dw - pw, ci) *
                     k[((static_cast<size_t>(dh) * kw + dw) * Ci + ci) * Co + co];
          y[((static_cast<size_t>(n) * Ho + ho) * Wo + wo) * Co + co] = s;
        }
  return y;
}

inline std::vector<double> relu(std::vector<double> x) {
  for (auto& v : x) v = std::max(0.0, v);
  return x;
}

inline std::vector<double> dense(const std::vector<double>& x, int N, int In,
                                 const std::vector<double>& w, int Out,
                                 const std::vector<double>& b) {
  std::vector<double> y(static_cast<size_t>(N) * Out, 0.0);
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < Out; ++o) {
      double s = b[static_cast<size_t>(o)];
      for (int i = 0; i < In; ++i)
        s += x[static_cast<size_t>(n) * In + i] * w[static_cast<size_t>(i) * Out + o];
      y[static_cast<size_t>(n) * Out + o] = s;
    }
  return y;
}

inline std::vector<double> softmax_row(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> e(z.size());
  double s = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp(z[i] - mx);
    s += e[i];
  }
  for (auto& v : e) v /= s;
  return e;
}

// Scalar Adam recursion run independently of the library optimizer.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int64_t t = 0;
  double lr, b1, b2, eps;
  ScalarAdam(double lr_, double b1_ = 0.9, double b2_ = 0.999, double eps_ = 1e-8)
      : lr(lr_), b1(b1_), b2(b2_), eps(eps_) {}
  double step(double w, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return w - lr * mh / (std::sqrt(vh) + eps);
  }
};

// Brute-force median and MAD-based anomaly index, sorted-copy style.
inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<double> mad_index_brute(const std::vector<double>& values) {
  const double med = median_of(values);
  std::vector<double> dev;
  dev.reserve(values.size());
  for (double v : values) dev.push_back(std::fabs(v - med));
  const double mad = median_of(dev);
  std::vector<double> idx;
  idx.reserve(values.size());
  for (double v : values) idx.push_back(std::fabs(v - med) / (1.4826 * mad));
  return idx;
}

}  // namespace oracle
