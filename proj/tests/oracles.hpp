#pragma once

// Independent reference implementations used as test oracles. Everything here
// is written as directly as possible from first principles and stays separate
// from the library code paths it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "deer/common.hpp"

namespace oracle {

// naive triple-loop matrix product
template <class T>
std::vector<T> matmul(const std::vector<T>& a, const std::vector<T>& b, int m, int k, int n) {
  std::vector<T> c(size_t(m) * size_t(n), T(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int t = 0; t < k; ++t) c[size_t(i) * n + j] += a[size_t(i) * k + t] * b[size_t(t) * n + j];
  return c;
}

// direct exp/sum softmax of one vector
template <class T>
std::vector<T> softmax(const std::vector<T>& x) {
  std::vector<T> y(x.size());
  T denom = T(0);
  for (size_t i = 0; i < x.size(); ++i) denom += std::exp(x[i]);
  for (size_t i = 0; i < x.size(); ++i) y[i] = std::exp(x[i]) / denom;
  return y;
}

// scatter-accumulate transposed convolution, x [cin,h,w], k [cin,cout,kh,kw]
template <class T>
std::vector<T> transposed_conv2d(const std::vector<T>& x, const std::vector<T>& k, int cin, int h,
                                 int w, int cout, int kh, int kw, int stride, int& ho, int& wo) {
  ho = (h - 1) * stride + kh;
  wo = (w - 1) * stride + kw;
  std::vector<T> out(size_t(cout) * ho * wo, T(0));
  for (int ci = 0; ci < cin; ++ci)
    for (int co = 0; co < cout; ++co)
      for (int iy = 0; iy < h; ++iy)
        for (int ix = 0; ix < w; ++ix)
          for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj)
              out[(size_t(co) * ho + iy * stride + ki) * wo + ix * stride + kj] +=
                  x[(size_t(ci) * h + iy) * w + ix] * k[((size_t(ci) * cout + co) * kh + ki) * kw + kj];
  return out;
}

// recursive flood fill (8-connectivity), returns label map with -1 background
inline std::vector<int> flood_fill_labels(const std::vector<uint8_t>& mask, int w, int h) {
  std::vector<int> labels(mask.size(), -1);
  int next = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask[size_t(y) * w + x] || labels[size_t(y) * w + x] != -1) continue;
      std::deque<std::pair<int, int>> q{{x, y}};
      labels[size_t(y) * w + x] = next;
      while (!q.empty()) {
        auto [cx, cy] = q.front();
        q.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
            if (!mask[size_t(ny) * w + nx] || labels[size_t(ny) * w + nx] != -1) continue;
            labels[size_t(ny) * w + nx] = next;
            q.emplace_back(nx, ny);
          }
      }
      ++next;
    }
  }
  return labels;
}

// dense rasterised centroid of a polygon at the given resolution
inline deer::Vec2 raster_centroid(const std::vector<deer::Vec2>& poly, int res) {
  double minx = 1e30, miny = 1e30, maxx = -1e30, maxy = -1e30;
  for (auto& p : poly) {
    minx = std::min(minx, p.x);
    miny = std::min(miny, p.y);
    maxx = std::max(maxx, p.x);
    maxy = std::max(maxy, p.y);
  }
  auto inside = [&](double px, double py) {
    bool in = false;
    size_t n = poly.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
      if ((poly[i].y > py) != (poly[j].y > py) &&
          px < (poly[j].x - poly[i].x) * (py - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x)
        in = !in;
    }
    return in;
  };
  double sx = 0, sy = 0, cnt = 0;
  for (int iy = 0; iy < res; ++iy)
    for (int ix = 0; ix < res; ++ix) {
      double px = minx + (maxx - minx) * (ix + 0.5) / res;
      double py = miny + (maxy - miny) * (iy + 0.5) / res;
      if (inside(px, py)) {
        sx += px;
        sy += py;
        cnt += 1;
      }
    }
  return {sx / cnt, sy / cnt};
}

// plain textbook Adam, decoupled weight decay, for cross-checking the trainer
struct ReferenceAdam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
  std::vector<double> m, v;
  int64_t t = 0;

  void step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    if (m.empty()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
    }
    ++t;
    for (size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1 - beta1) * grads[i];
      v[i] = beta2 * v[i] + (1 - beta2) * grads[i] * grads[i];
      double mhat = m[i] / (1 - std::pow(beta1, double(t)));
      double vhat = v[i] / (1 - std::pow(beta2, double(t)));
      params[i] -= lr * weight_decay * params[i];
      params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
};

// Levenshtein distance straight from the recursive definition (memoised)
inline int edit_distance_recursive(const std::string& a, const std::string& b) {
  std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
  std::function<int(size_t, size_t)> rec = [&](size_t i, size_t j) -> int {
    if (i == a.size()) return int(b.size() - j);
    if (j == b.size()) return int(a.size() - i);
    int& m = memo[i][j];
    if (m >= 0) return m;
    int same = (a[i] == b[j]) ? rec(i + 1, j + 1) : 1 + rec(i + 1, j + 1);
    m = std::min({same, 1 + rec(i + 1, j), 1 + rec(i, j + 1)});
    return m;
  };
  return rec(0, 0);
}

// exhaustive one-to-one assignment maximising match count (n <= ~6)
inline int best_assignment_matches(const std::vector<std::vector<bool>>& ok) {
  size_t ng = ok.size();
  if (ng == 0) return 0;
  size_t np = ok[0].size();
  std::vector<int> perm(np);
  int best = 0;
  std::function<void(size_t, uint32_t, int)> rec = [&](size_t g, uint32_t used, int matched) {
    if (g == ng) {
      best = std::max(best, matched);
      return;
    }
    rec(g + 1, used, matched);  // leave gt g unmatched
    for (size_t p = 0; p < np; ++p) {
      if ((used >> p) & 1u) continue;
      if (ok[g][p]) rec(g + 1, used | (1u << p), matched + 1);
    }
  };
  rec(0, 0, 0);
  return best;
}

}  // namespace oracle
