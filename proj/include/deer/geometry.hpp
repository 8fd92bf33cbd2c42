#pragma once

// Polygon and score-map post-processing: binarization, connected components,
// boundary-contour extraction, offsetting with miter joins, reference-point
// rules, and rasterized IoU. Image coordinates are x-right / y-down; a
// polygon is CCW when its shoelace sum is positive.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deer/common.hpp"

namespace deer {

// ---------------------------------------------------------------------------
// Polygon
// ---------------------------------------------------------------------------

namespace geom {

inline double signed_area(const std::vector<Vec2>& v) {
  double s = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    const Vec2& a = v[i];
    const Vec2& b = v[(i + 1) % v.size()];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

}  // namespace geom

struct Polygon {
  std::vector<Vec2> v;

  Polygon() = default;
  explicit Polygon(std::vector<Vec2> pts) : v(std::move(pts)) {
    // drop consecutive duplicates (closing duplicate included)
    std::vector<Vec2> clean;
    for (auto& p : v) {
      if (clean.empty() || (clean.back() - p).norm() > 1e-12) clean.push_back(p);
    }
    while (clean.size() > 1 && (clean.front() - clean.back()).norm() <= 1e-12) clean.pop_back();
    v = std::move(clean);
    if (v.size() < 3) throw DegenerateRegionError("polygon needs at least 3 distinct vertices");
    if (geom::signed_area(v) < 0) std::reverse(v.begin() + 1, v.end());
  }

  size_t size() const { return v.size(); }

  double area() const { return geom::signed_area(v); }

  double perimeter() const {
    double s = 0;
    for (size_t i = 0; i < v.size(); ++i) s += (v[(i + 1) % v.size()] - v[i]).norm();
    return s;
  }

  // shoelace-moment centroid; falls back to the vertex mean for zero area
  Vec2 centroid() const {
    double a = geom::signed_area(v);
    if (std::abs(a) < 1e-12) {
      Vec2 m{0, 0};
      for (auto& p : v) m = m + p;
      return m * (1.0 / double(v.size()));
    }
    double cx = 0, cy = 0;
    for (size_t i = 0; i < v.size(); ++i) {
      const Vec2& p = v[i];
      const Vec2& q = v[(i + 1) % v.size()];
      double cr = p.x * q.y - q.x * p.y;
      cx += (p.x + q.x) * cr;
      cy += (p.y + q.y) * cr;
    }
    return {cx / (6 * a), cy / (6 * a)};
  }

  void bbox(Vec2& lo, Vec2& hi) const {
    lo = {1e300, 1e300};
    hi = {-1e300, -1e300};
    for (auto& p : v) {
      lo.x = std::min(lo.x, p.x);
      lo.y = std::min(lo.y, p.y);
      hi.x = std::max(hi.x, p.x);
      hi.y = std::max(hi.y, p.y);
    }
  }

  Polygon translated(Vec2 t) const {
    Polygon p = *this;
    for (auto& q : p.v) q = q + t;
    return p;
  }

  Polygon scaled(double sx, double sy) const {
    Polygon p = *this;
    for (auto& q : p.v) q = {q.x * sx, q.y * sy};
    return p;
  }
};

// even-odd ray-cast containment
inline bool point_in_polygon(const std::vector<Vec2>& poly, Vec2 p) {
  bool in = false;
  size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    if ((poly[i].y > p.y) != (poly[j].y > p.y) &&
        p.x < (poly[j].x - poly[i].x) * (p.y - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x)
      in = !in;
  }
  return in;
}

inline bool point_in_polygon(const Polygon& poly, Vec2 p) { return point_in_polygon(poly.v, p); }

inline double dist_point_segment(Vec2 p, Vec2 a, Vec2 b) {
  Vec2 ab = b - a;
  double len2 = ab.dot(ab);
  if (len2 < 1e-24) return (p - a).norm();
  double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + ab * t)).norm();
}

inline double dist_to_boundary(const Polygon& poly, Vec2 p) {
  double best = 1e300;
  for (size_t i = 0; i < poly.size(); ++i)
    best = std::min(best, dist_point_segment(p, poly.v[i], poly.v[(i + 1) % poly.size()]));
  return best;
}

// ---------------------------------------------------------------------------
// binary maps and connected components
// ---------------------------------------------------------------------------

struct Mask {
  int width = 0, height = 0;
  std::vector<uint8_t> data;  // row-major

  Mask() = default;
  Mask(int w, int h, uint8_t fill = 0) : width(w), height(h), data(size_t(w) * size_t(h), fill) {}

  uint8_t at(int x, int y) const { return data[size_t(y) * width + x]; }
  void set(int x, int y, uint8_t v) { data[size_t(y) * width + x] = v; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

// pixel true iff probability strictly above threshold
inline Mask binarize(const std::vector<float>& prob, int width, int height, double threshold) {
  if (int64_t(prob.size()) != int64_t(width) * height) throw DimensionError("binarize: map size mismatch");
  Mask m(width, height);
  for (size_t i = 0; i < prob.size(); ++i) m.data[i] = prob[i] > threshold ? 1 : 0;
  return m;
}

struct PixelComponent {
  std::vector<std::pair<int, int>> pixels;  // (x, y), row-major order
  int min_x = 0, min_y = 0;
};

// 8-connectivity; components ordered by (min_y, min_x)
inline std::vector<PixelComponent> connected_components(const Mask& mask) {
  std::vector<int> label(mask.data.size(), -1);
  std::vector<PixelComponent> comps;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y) || label[size_t(y) * mask.width + x] != -1) continue;
      int id = int(comps.size());
      PixelComponent comp;
      comp.min_x = x;
      comp.min_y = y;
      std::deque<std::pair<int, int>> queue{{x, y}};
      label[size_t(y) * mask.width + x] = id;
      while (!queue.empty()) {
        auto [cx, cy] = queue.front();
        queue.pop_front();
        comp.pixels.emplace_back(cx, cy);
        comp.min_x = std::min(comp.min_x, cx);
        comp.min_y = std::min(comp.min_y, cy);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = cx + dx, ny = cy + dy;
            if (!mask.contains(nx, ny) || !mask.at(nx, ny)) continue;
            if (label[size_t(ny) * mask.width + nx] != -1) continue;
            label[size_t(ny) * mask.width + nx] = id;
            queue.emplace_back(nx, ny);
          }
      }
      std::sort(comp.pixels.begin(), comp.pixels.end(),
                [](auto& a, auto& b) { return a.second != b.second ? a.second < b.second : a.first < b.first; });
      comps.push_back(std::move(comp));
    }
  }
  std::sort(comps.begin(), comps.end(), [](const PixelComponent& a, const PixelComponent& b) {
    return a.min_y != b.min_y ? a.min_y < b.min_y : a.min_x < b.min_x;
  });
  return comps;
}

// ---------------------------------------------------------------------------
// component boundary polygon. Pixel (x,y) covers the unit square
// [x,x+1]x[y,y+1]; the outer contour runs along pixel edges and is returned
// with collinear vertices removed.
// ---------------------------------------------------------------------------

inline Polygon component_to_polygon(const PixelComponent& comp) {
  if (comp.pixels.size() < 3)
    throw DegenerateRegionError("component of " + std::to_string(comp.pixels.size()) +
                                " pixels has no usable boundary polygon");

  struct Hash {
    size_t operator()(const std::pair<int, int>& p) const {
      return size_t(p.first) * 1000003u ^ size_t(p.second);
    }
  };
  std::unordered_map<std::pair<int, int>, bool, Hash> inside;
  inside.reserve(comp.pixels.size() * 2);
  for (auto& p : comp.pixels) inside[{p.first, p.second}] = true;
  auto is_in = [&](int x, int y) { return inside.count({x, y}) > 0; };

  // start on the top edge of the (min_y, min_x) pixel, walking east; the
  // interior stays on the walk's y-down right-hand side
  std::pair<int, int> start = *std::min_element(
      comp.pixels.begin(), comp.pixels.end(),
      [](auto& a, auto& b) { return a.second != b.second ? a.second < b.second : a.first < b.first; });
  int sx = start.first, sy = start.second;

  // directions: 0=E, 1=S, 2=W, 3=N
  const int dx[4] = {1, 0, -1, 0};
  const int dy[4] = {0, 1, 0, -1};

  auto edge_exists = [&](int cx, int cy, int dir) {
    // directed boundary edge leaving corner (cx,cy) in direction dir
    switch (dir) {
      case 0: return is_in(cx, cy) && !is_in(cx, cy - 1);          // east: pixel below in, above out
      case 1: return is_in(cx - 1, cy) && !is_in(cx, cy);          // south: pixel left in, right out
      case 2: return is_in(cx - 1, cy - 1) && !is_in(cx - 1, cy);  // west: pixel above in, below out
      case 3: return is_in(cx, cy - 1) && !is_in(cx - 1, cy - 1);  // north: pixel right in, left out
      default: return false;
    }
  };

  std::vector<Vec2> corners;
  int cx = sx, cy = sy, dir = 0;
  if (!edge_exists(cx, cy, dir)) throw DegenerateRegionError("contour start edge missing");
  int guard = int(comp.pixels.size()) * 8 + 16;
  do {
    corners.push_back({double(cx), double(cy)});
    cx += dx[dir];
    cy += dy[dir];
    // prefer the left turn, then straight, then right: left-first joins
    // diagonally-touching pixels into a single 8-connected contour
    int left = (dir + 3) % 4, right = (dir + 1) % 4;
    if (edge_exists(cx, cy, left))
      dir = left;
    else if (edge_exists(cx, cy, dir)) {
      // keep direction
    } else if (edge_exists(cx, cy, right))
      dir = right;
    else
      throw DegenerateRegionError("contour walk dead-ended");
    if (--guard < 0) throw DegenerateRegionError("contour walk did not close");
  } while (!(cx == sx && cy == sy && dir == 0));

  // collinear removal: the walk only moves axis-aligned, so a vertex is kept
  // when the direction changes there
  std::vector<Vec2> out;
  size_t n = corners.size();
  for (size_t i = 0; i < n; ++i) {
    Vec2 prev = corners[(i + n - 1) % n], cur = corners[i], next = corners[(i + 1) % n];
    Vec2 d1 = cur - prev, d2 = next - cur;
    if (std::abs(d1.x * d2.y - d1.y * d2.x) > 1e-12) out.push_back(cur);
  }
  return Polygon(std::move(out));
}

// ---------------------------------------------------------------------------
// offset distance D = A*r/L
// ---------------------------------------------------------------------------

inline double dilation_offset(const Polygon& poly, double r) {
  double perim = poly.perimeter();
  if (perim <= 1e-12) throw DegenerateRegionError("dilation_offset: zero perimeter");
  return poly.area() * r / perim;
}

// ---------------------------------------------------------------------------
// polygon offsetting: edges move along outward normals by d (inward for
// d < 0), joined by miters up to miter limit 2, then bevels. Rings that
// self-intersect are rebuilt by keeping the sub-edges bounding the positive
// winding region and returning the largest resulting loop.
// ---------------------------------------------------------------------------

namespace geom {

inline bool segments_properly_intersect(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
  auto orient = [](Vec2 p, Vec2 q, Vec2 r) {
    double v = (q - p).cross(r - p);
    return v > 1e-12 ? 1 : (v < -1e-12 ? -1 : 0);
  };
  int o1 = orient(a, b, c), o2 = orient(a, b, d), o3 = orient(c, d, a), o4 = orient(c, d, b);
  return o1 * o2 < 0 && o3 * o4 < 0;
}

inline bool ring_is_simple(const std::vector<Vec2>& ring) {
  size_t n = ring.size();
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
      if (segments_properly_intersect(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n])) return false;
    }
  }
  return true;
}

inline int winding_number(const std::vector<Vec2>& ring, Vec2 p) {
  int w = 0;
  size_t n = ring.size();
  for (size_t i = 0; i < n; ++i) {
    Vec2 a = ring[i], b = ring[(i + 1) % n];
    if (a.y <= p.y) {
      if (b.y > p.y && (b - a).cross(p - a) > 0) ++w;
    } else {
      if (b.y <= p.y && (b - a).cross(p - a) < 0) --w;
    }
  }
  return w;
}

// split the ring at all pairwise intersections, keep sub-edges that bound the
// positive-winding region, stitch loops, return them CCW
inline std::vector<std::vector<Vec2>> untangle_ring(const std::vector<Vec2>& ring) {
  size_t n = ring.size();
  Vec2 lo{1e300, 1e300}, hi{-1e300, -1e300};
  for (auto& p : ring) {
    lo.x = std::min(lo.x, p.x);
    lo.y = std::min(lo.y, p.y);
    hi.x = std::max(hi.x, p.x);
    hi.y = std::max(hi.y, p.y);
  }
  double scale = std::max({hi.x - lo.x, hi.y - lo.y, 1.0});
  double snap = scale * 1e-9;

  std::vector<std::pair<Vec2, Vec2>> sub;
  for (size_t i = 0; i < n; ++i) {
    Vec2 a = ring[i], b = ring[(i + 1) % n];
    Vec2 d1 = b - a;
    std::vector<double> ts{0.0, 1.0};
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      Vec2 c = ring[j], e = ring[(j + 1) % n];
      Vec2 d2 = e - c;
      double denom = d1.cross(d2);
      if (std::abs(denom) < 1e-14) {
        if (std::abs(d1.cross(c - a)) < snap) {
          double len2 = d1.dot(d1);
          if (len2 > 0) {
            for (Vec2 q : {c, e}) {
              double t = (q - a).dot(d1) / len2;
              if (t > 1e-9 && t < 1 - 1e-9) ts.push_back(t);
            }
          }
        }
        continue;
      }
      double t = (c - a).cross(d2) / denom;
      double u = (c - a).cross(d1) / denom;
      if (t > 1e-9 && t < 1 - 1e-9 && u > -1e-9 && u < 1 + 1e-9) ts.push_back(t);
    }
    std::sort(ts.begin(), ts.end());
    for (size_t k = 0; k + 1 < ts.size(); ++k) {
      if (ts[k + 1] - ts[k] < 1e-12) continue;
      Vec2 p = a + d1 * ts[k], q = a + d1 * ts[k + 1];
      if ((q - p).norm() > snap) sub.emplace_back(p, q);
    }
  }

  // keep boundary sub-edges of the positive-winding region
  std::vector<std::pair<Vec2, Vec2>> kept;
  for (auto& [a, b] : sub) {
    Vec2 mid = (a + b) * 0.5;
    Vec2 dir = b - a;
    double len = dir.norm();
    Vec2 left{-dir.y / len, dir.x / len};
    double eps = std::min(scale * 1e-7, len * 0.25);
    int wl = winding_number(ring, mid + left * eps);
    int wr = winding_number(ring, mid - left * eps);
    if (wl > 0 && wr <= 0) kept.push_back({a, b});
  }

  // stitch into loops; endpoints are matched on a snap grid
  auto key = [&](Vec2 p) {
    return std::make_pair(int64_t(std::llround(p.x / snap)), int64_t(std::llround(p.y / snap)));
  };
  std::map<std::pair<int64_t, int64_t>, std::vector<size_t>> outgoing;
  for (size_t i = 0; i < kept.size(); ++i) outgoing[key(kept[i].first)].push_back(i);

  std::vector<bool> used(kept.size(), false);
  std::vector<std::vector<Vec2>> loops;
  for (size_t s = 0; s < kept.size(); ++s) {
    if (used[s]) continue;
    std::vector<Vec2> loop;
    size_t cur = s;
    Vec2 incoming = kept[s].second - kept[s].first;
    int guard = int(kept.size()) + 2;
    while (true) {
      used[cur] = true;
      loop.push_back(kept[cur].first);
      auto it = outgoing.find(key(kept[cur].second));
      if (it == outgoing.end()) break;
      // pick the unused outgoing edge with the sharpest left turn
      size_t next = size_t(-1);
      double best = -1e300;
      for (size_t cand : it->second) {
        if (used[cand]) continue;
        Vec2 d = kept[cand].second - kept[cand].first;
        double ang = std::atan2(incoming.cross(d), incoming.dot(d));
        if (ang > best) {
          best = ang;
          next = cand;
        }
      }
      if (next == size_t(-1)) break;
      incoming = kept[next].second - kept[next].first;
      cur = next;
      if (--guard < 0) break;
    }
    if (loop.size() >= 3) loops.push_back(std::move(loop));
  }
  return loops;
}

}  // namespace geom

inline Polygon offset_polygon(const Polygon& poly, double d, double miter_limit = 2.0) {
  if (std::abs(d) < 1e-15) return poly;
  size_t n = poly.size();
  std::vector<Vec2> ring;
  ring.reserve(n * 2);
  for (size_t i = 0; i < n; ++i) {
    Vec2 prev = poly.v[(i + n - 1) % n], cur = poly.v[i], next = poly.v[(i + 1) % n];
    Vec2 e1 = cur - prev, e2 = next - cur;
    double l1 = e1.norm(), l2 = e2.norm();
    if (l1 < 1e-12 || l2 < 1e-12) continue;
    e1 = e1 * (1.0 / l1);
    e2 = e2 * (1.0 / l2);
    Vec2 n1{e1.y, -e1.x}, n2{e2.y, -e2.x};  // outward for CCW rings
    Vec2 p1 = cur + n1 * d;                 // end of previous offset edge
    Vec2 p2 = cur + n2 * d;                 // start of next offset edge
    double denom = e1.cross(e2);
    if (std::abs(denom) < 1e-12) {
      if (e1.dot(e2) > 0) {
        ring.push_back(p1);  // straight continuation
      } else {
        ring.push_back(p1);  // u-turn: bevel
        ring.push_back(p2);
      }
      continue;
    }
    // intersection of the two offset lines
    double t = (p2 - p1).cross(e2) / denom;
    Vec2 m = p1 + e1 * t;
    if ((m - cur).norm() <= miter_limit * std::abs(d)) {
      ring.push_back(m);
    } else {
      ring.push_back(p1);
      ring.push_back(p2);
    }
  }
  if (ring.size() < 3) throw DegenerateRegionError("offset collapsed the polygon");

  // drop consecutive duplicates
  std::vector<Vec2> clean;
  for (auto& p : ring)
    if (clean.empty() || (clean.back() - p).norm() > 1e-12) clean.push_back(p);
  while (clean.size() > 1 && (clean.front() - clean.back()).norm() <= 1e-12) clean.pop_back();
  if (clean.size() < 3) throw DegenerateRegionError("offset collapsed the polygon");

  // A shrink that crosses the inradius can still close into a positively
  // oriented ring (opposite offset lines swap sides), so shrink results are
  // validated geometrically: every vertex must sit inside the source polygon
  // at depth |d|.
  auto shrink_valid = [&](const std::vector<Vec2>& loop) {
    if (d > 0) return true;
    double need = std::abs(d) * (1 - 1e-6) - 1e-9;
    for (auto& p : loop) {
      if (!point_in_polygon(poly.v, p)) return false;
      if (dist_to_boundary(poly, p) < need) return false;
    }
    return true;
  };

  if (geom::ring_is_simple(clean)) {
    if (geom::signed_area(clean) <= 1e-12) throw DegenerateRegionError("offset inverted the polygon");
    if (!shrink_valid(clean)) throw DegenerateRegionError("shrink collapsed the polygon");
    return Polygon(std::move(clean));
  }

  auto loops = geom::untangle_ring(clean);
  const std::vector<Vec2>* best = nullptr;
  double best_area = 1e-12;
  for (auto& loop : loops) {
    double a = geom::signed_area(loop);
    if (a > best_area && shrink_valid(loop)) {
      best_area = a;
      best = &loop;
    }
  }
  if (!best) throw DegenerateRegionError("offset left no valid region");
  return Polygon(*best);
}

// ---------------------------------------------------------------------------
// reference-point rules
// ---------------------------------------------------------------------------

struct CornerRefs {
  Vec2 tl, tr, bl;
};

namespace geom {

inline std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x != b.x ? a.x < b.x : a.y < b.y;
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const Vec2& a, const Vec2& b) { return (a - b).norm() < 1e-12; }),
            pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Vec2> hull(2 * pts.size());
  size_t k = 0;
  for (size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && (hull[k - 1] - hull[k - 2]).cross(pts[i] - hull[k - 2]) <= 0) --k;
    hull[k++] = pts[i];
  }
  size_t lower = k + 1;
  for (size_t i = pts.size() - 1; i-- > 0;) {
    while (k >= lower && (hull[k - 1] - hull[k - 2]).cross(pts[i] - hull[k - 2]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

}  // namespace geom

// rotating-calipers minimum-area enclosing rectangle, corners in ring order
inline std::array<Vec2, 4> min_area_rect(const Polygon& poly) {
  auto hull = geom::convex_hull(poly.v);
  if (hull.size() < 3) {
    // degenerate: collinear points; emit a zero-height rectangle
    Vec2 lo, hi;
    poly.bbox(lo, hi);
    return {Vec2{lo.x, lo.y}, Vec2{hi.x, lo.y}, Vec2{hi.x, hi.y}, Vec2{lo.x, hi.y}};
  }
  double best_area = 1e300;
  std::array<Vec2, 4> best{};
  size_t n = hull.size();
  for (size_t i = 0; i < n; ++i) {
    Vec2 e = hull[(i + 1) % n] - hull[i];
    double len = e.norm();
    if (len < 1e-12) continue;
    Vec2 u = e * (1.0 / len);
    Vec2 w{-u.y, u.x};
    double minu = 1e300, maxu = -1e300, minw = 1e300, maxw = -1e300;
    for (auto& p : hull) {
      double pu = (p - hull[i]).dot(u), pw = (p - hull[i]).dot(w);
      minu = std::min(minu, pu);
      maxu = std::max(maxu, pu);
      minw = std::min(minw, pw);
      maxw = std::max(maxw, pw);
    }
    double area = (maxu - minu) * (maxw - minw);
    if (area < best_area) {
      best_area = area;
      best = {hull[i] + u * minu + w * minw, hull[i] + u * maxu + w * minw,
              hull[i] + u * maxu + w * maxw, hull[i] + u * minu + w * maxw};
    }
  }
  return best;
}

// Quadrilaterals use their stored vertex order (tl, tr, br, bl). Other
// polygons fall back to the minimum-area rectangle, with the corner nearest
// the first vertex taken as top-left.
inline CornerRefs corner_refs(const Polygon& poly) {
  if (poly.size() == 4) return {poly.v[0], poly.v[1], poly.v[3]};
  auto rect = min_area_rect(poly);
  size_t tl = 0;
  double best = 1e300;
  for (size_t i = 0; i < 4; ++i) {
    double dist = (rect[i] - poly.v[0]).norm();
    if (dist < best) {
      best = dist;
      tl = i;
    }
  }
  return {rect[tl], rect[(tl + 1) % 4], rect[(tl + 3) % 4]};
}

// q_ref = centroid + (eta_x, eta_y) * s/2 with s = min(|tl-tr|, |tl-bl|) and
// eta drawn per coordinate from Uniform(-1,1); x first, then y
inline Vec2 perturb_reference(const Polygon& poly, Rng& rng) {
  if (std::abs(poly.area()) < 1e-12) throw DegenerateRegionError("perturb_reference: degenerate polygon");
  CornerRefs c = corner_refs(poly);
  double s = std::min((c.tl - c.tr).norm(), (c.tl - c.bl).norm());
  double ex = rng.uniform(-1.0, 1.0);
  double ey = rng.uniform(-1.0, 1.0);
  Vec2 pc = poly.centroid();
  return {pc.x + ex * s / 2.0, pc.y + ey * s / 2.0};
}

inline Vec2 shift_reference(Vec2 p_ref, Vec2 p_tl, double beta) {
  if (beta < 0.0 || beta > 1.0) throw UsageError("shift_reference: beta must be in [0,1]");
  return {(1 - beta) * p_ref.x + beta * p_tl.x, (1 - beta) * p_ref.y + beta * p_tl.y};
}

enum class InnerPointMode { kTrain, kInfer };

// train: rejection-sample a uniform interior point (fallback: centroid);
// infer: midpoint of the longest intersection of the polygon with the
// vertical line through the bounding-box center
inline Vec2 inner_reference(const Polygon& poly, InnerPointMode mode, Rng& rng) {
  Vec2 lo, hi;
  poly.bbox(lo, hi);
  if (mode == InnerPointMode::kTrain) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Vec2 p{rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y)};
      if (point_in_polygon(poly, p)) return p;
    }
    return poly.centroid();
  }
  double cx = 0.5 * (lo.x + hi.x);
  for (int attempt = 0; attempt < 8; ++attempt) {
    std::vector<double> ys;
    size_t n = poly.size();
    for (size_t i = 0; i < n; ++i) {
      Vec2 a = poly.v[i], b = poly.v[(i + 1) % n];
      if ((a.x <= cx && b.x > cx) || (b.x <= cx && a.x > cx))
        ys.push_back(a.y + (cx - a.x) * (b.y - a.y) / (b.x - a.x));
    }
    std::sort(ys.begin(), ys.end());
    if (ys.size() >= 2) {
      double best_len = -1;
      Vec2 best{cx, poly.centroid().y};
      for (size_t i = 0; i + 1 < ys.size(); i += 2) {
        double len = ys[i + 1] - ys[i];
        if (len > best_len) {
          best_len = len;
          best = {cx, 0.5 * (ys[i] + ys[i + 1])};
        }
      }
      return best;
    }
    cx += (hi.x - lo.x) * 1e-6 * (attempt + 1);  // line grazed a vertex
  }
  return poly.centroid();
}

// ---------------------------------------------------------------------------
// rasterized polygon IoU
// ---------------------------------------------------------------------------

namespace geom {

// scanline span fill evaluated at subpixel centers; writes hits into `rows`
inline void raster_rows(const Polygon& poly, Vec2 lo, double step, int w, int h,
                        std::vector<uint8_t>& grid) {
  size_t n = poly.size();
  std::vector<double> xs;
  for (int iy = 0; iy < h; ++iy) {
    double y = lo.y + (iy + 0.5) * step;
    xs.clear();
    for (size_t i = 0; i < n; ++i) {
      Vec2 a = poly.v[i], b = poly.v[(i + 1) % n];
      if ((a.y <= y && b.y > y) || (b.y <= y && a.y > y))
        xs.push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (size_t s = 0; s + 1 < xs.size(); s += 2) {
      int x0 = int(std::ceil((xs[s] - lo.x) / step - 0.5));
      int x1 = int(std::floor((xs[s + 1] - lo.x) / step - 0.5));
      x0 = std::max(x0, 0);
      x1 = std::min(x1, w - 1);
      for (int ix = x0; ix <= x1; ++ix) grid[size_t(iy) * w + ix] |= 1;
    }
  }
}

}  // namespace geom

inline double polygon_iou(const Polygon& a, const Polygon& b, double raster_scale = 4.0) {
  Vec2 alo, ahi, blo, bhi;
  a.bbox(alo, ahi);
  b.bbox(blo, bhi);
  if (alo.x > bhi.x || blo.x > ahi.x || alo.y > bhi.y || blo.y > ahi.y) return 0.0;
  Vec2 lo{std::min(alo.x, blo.x), std::min(alo.y, blo.y)};
  Vec2 hi{std::max(ahi.x, bhi.x), std::max(ahi.y, bhi.y)};
  double step = 1.0 / raster_scale;
  int w = std::max(1, int(std::ceil((hi.x - lo.x) / step)));
  int h = std::max(1, int(std::ceil((hi.y - lo.y) / step)));
  // cap the grid so a pathological pair cannot allocate unbounded memory
  const int64_t max_cells = 16ll * 1024 * 1024;
  while (int64_t(w) * h > max_cells) {
    step *= 2;
    w = std::max(1, int(std::ceil((hi.x - lo.x) / step)));
    h = std::max(1, int(std::ceil((hi.y - lo.y) / step)));
  }
  std::vector<uint8_t> ga(size_t(w) * h, 0), gb(size_t(w) * h, 0);
  geom::raster_rows(a, lo, step, w, h, ga);
  geom::raster_rows(b, lo, step, w, h, gb);
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < ga.size(); ++i) {
    inter += (ga[i] & gb[i]);
    uni += (ga[i] | gb[i]);
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

// ---------------------------------------------------------------------------
// clipping and simplification helpers used by the data pipeline
// ---------------------------------------------------------------------------

// Sutherland-Hodgman against the axis-aligned rect [0,w]x[0,h]
inline std::vector<Vec2> clip_to_rect(const std::vector<Vec2>& poly, double w, double h) {
  auto clip_edge = [](const std::vector<Vec2>& in, auto inside, auto intersect) {
    std::vector<Vec2> out;
    size_t n = in.size();
    for (size_t i = 0; i < n; ++i) {
      Vec2 cur = in[i], prev = in[(i + n - 1) % n];
      bool cin = inside(cur), pin = inside(prev);
      if (cin) {
        if (!pin) out.push_back(intersect(prev, cur));
        out.push_back(cur);
      } else if (pin) {
        out.push_back(intersect(prev, cur));
      }
    }
    return out;
  };
  std::vector<Vec2> p = poly;
  auto lerp_x = [](Vec2 a, Vec2 b, double x) {
    double t = (x - a.x) / (b.x - a.x);
    return Vec2{x, a.y + t * (b.y - a.y)};
  };
  auto lerp_y = [](Vec2 a, Vec2 b, double y) {
    double t = (y - a.y) / (b.y - a.y);
    return Vec2{a.x + t * (b.x - a.x), y};
  };
  p = clip_edge(p, [&](Vec2 q) { return q.x >= 0; }, [&](Vec2 a, Vec2 b) { return lerp_x(a, b, 0); });
  if (p.empty()) return p;
  p = clip_edge(p, [&](Vec2 q) { return q.x <= w; }, [&](Vec2 a, Vec2 b) { return lerp_x(a, b, w); });
  if (p.empty()) return p;
  p = clip_edge(p, [&](Vec2 q) { return q.y >= 0; }, [&](Vec2 a, Vec2 b) { return lerp_y(a, b, 0); });
  if (p.empty()) return p;
  p = clip_edge(p, [&](Vec2 q) { return q.y <= h; }, [&](Vec2 a, Vec2 b) { return lerp_y(a, b, h); });
  return p;
}

// Douglas-Peucker on a closed ring, anchored at the two most distant vertices
inline Polygon simplify_polygon(const Polygon& poly, double tolerance) {
  const auto& v = poly.v;
  size_t n = v.size();
  if (n <= 4 || tolerance <= 0) return poly;
  size_t i0 = 0, i1 = 0;
  double best = -1;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      double dist = (v[i] - v[j]).norm();
      if (dist > best) {
        best = dist;
        i0 = i;
        i1 = j;
      }
    }
  std::vector<Vec2> kept;
  std::function<void(size_t, size_t)> rec = [&](size_t a, size_t b) {
    // chain from a to b (exclusive) walking forward cyclically
    size_t len = (b + n - a) % n;
    if (len < 2) return;
    double worst = -1;
    size_t worst_i = 0;
    for (size_t k = 1; k < len; ++k) {
      size_t idx = (a + k) % n;
      double dist = dist_point_segment(v[idx], v[a], v[b]);
      if (dist > worst) {
        worst = dist;
        worst_i = idx;
      }
    }
    if (worst > tolerance) {
      rec(a, worst_i);
      kept.push_back(v[worst_i]);
      rec(worst_i, b);
    }
  };
  kept.push_back(v[i0]);
  rec(i0, i1);
  kept.push_back(v[i1]);
  rec(i1, i0);
  if (kept.size() < 3) return poly;
  try {
    return Polygon(kept);
  } catch (const DegenerateRegionError&) {
    return poly;
  }
}

}  // namespace deer
