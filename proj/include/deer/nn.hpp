#pragma once

// Neural building blocks: bilinear map sampling, multi-scale deformable
// attention, plain multi-head attention, feed-forward and norm blocks, and
// the sinusoidal point encoding used to inject reference points.

#include <cmath>
#include <memory>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "deer/common.hpp"
#include "deer/tensor.hpp"

namespace deer {

// ---------------------------------------------------------------------------
// multi-scale token pack
// ---------------------------------------------------------------------------

template <class T>
struct MultiScaleValue {
  Tensor<T> tokens;                               // [total, d_model]
  std::vector<std::pair<int, int>> level_shapes;  // (height, width) per level
  std::vector<int64_t> level_offsets;             // flat start index per level

  int num_levels() const { return int(level_shapes.size()); }

  int64_t total() const {
    int64_t n = 0;
    for (auto& [h, w] : level_shapes) n += int64_t(h) * w;
    return n;
  }

  int64_t flat_index(int level, int y, int x) const {
    auto [h, w] = level_shapes[size_t(level)];
    if (y < 0 || y >= h || x < 0 || x >= w) throw UsageError("flat_index: position outside level grid");
    return level_offsets[size_t(level)] + int64_t(y) * w + x;
  }

  std::tuple<int, int, int> unflatten(int64_t flat) const {
    for (int l = num_levels() - 1; l >= 0; --l) {
      if (flat >= level_offsets[size_t(l)]) {
        int64_t rel = flat - level_offsets[size_t(l)];
        int w = level_shapes[size_t(l)].second;
        return {l, int(rel / w), int(rel % w)};
      }
    }
    throw UsageError("unflatten: negative index");
  }

  // pixel-center reference point of every token, normalized per level
  std::vector<Vec2> reference_points() const {
    std::vector<Vec2> pts;
    pts.reserve(size_t(total()));
    for (auto& [h, w] : level_shapes)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) pts.push_back({(x + 0.5) / w, (y + 0.5) / h});
    return pts;
  }

  std::vector<int> level_ids() const {
    std::vector<int> ids;
    ids.reserve(size_t(total()));
    for (int l = 0; l < num_levels(); ++l) {
      auto [h, w] = level_shapes[size_t(l)];
      ids.insert(ids.end(), size_t(h) * size_t(w), l);
    }
    return ids;
  }
};

template <class T>
MultiScaleValue<T> make_multi_scale_value(Tensor<T> tokens, std::vector<std::pair<int, int>> shapes) {
  MultiScaleValue<T> v;
  v.level_shapes = std::move(shapes);
  v.level_offsets.resize(v.level_shapes.size());
  int64_t off = 0;
  for (size_t l = 0; l < v.level_shapes.size(); ++l) {
    v.level_offsets[l] = off;
    off += int64_t(v.level_shapes[l].first) * v.level_shapes[l].second;
  }
  if (tokens.rank() != 2 || tokens.dim(0) != off)
    throw DimensionError("multi-scale tokens " + shape_str(tokens.shape()) + " do not cover " +
                         std::to_string(off) + " positions");
  v.tokens = std::move(tokens);
  return v;
}

// ---------------------------------------------------------------------------
// bilinear sampling. Pixel center i sits at normalized coordinate (i+0.5)/n;
// samples outside the map contribute zero.
// ---------------------------------------------------------------------------

// value: [h,w,d], p: [2] tensor holding (x,y) normalized -> [d]
template <class T>
Tensor<T> bilinear_sample(const Tensor<T>& value, const Tensor<T>& p) {
  if (value.rank() != 3) throw DimensionError("bilinear_sample: value must be [h,w,d]");
  if (p.numel() != 2) throw DimensionError("bilinear_sample: p must have 2 elements");
  int64_t h = value.dim(0), w = value.dim(1), d = value.dim(2);
  T px = p.data()[0] * T(w) - T(0.5);
  T py = p.data()[1] * T(h) - T(0.5);
  int64_t x0 = int64_t(std::floor(double(px))), y0 = int64_t(std::floor(double(py)));
  T fx = px - T(x0), fy = py - T(y0);

  std::vector<T> out(size_t(d), T(0));
  auto corner_w = [&](int dy, int dx) {
    return (dy == 0 ? (T(1) - fy) : fy) * (dx == 0 ? (T(1) - fx) : fx);
  };
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      int64_t yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      T cw = corner_w(dy, dx);
      const T* src = value.data() + (yy * w + xx) * d;
      for (int64_t c = 0; c < d; ++c) out[size_t(c)] += cw * src[c];
    }

  auto vn = value.node(), pn = p.node();
  return make_op<T>({d}, std::move(out), {value, p}, [vn, pn, h, w, d, px, py, x0, y0, fx, fy](Node<T>& self) {
    const T* g = self.grad.data();
    (void)px;
    (void)py;
    auto at = [&](int64_t yy, int64_t xx) -> const T* {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) return nullptr;
      return vn->value.data() + (yy * w + xx) * d;
    };
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          int64_t yy = y0 + dy, xx = x0 + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          T cw = (dy == 0 ? (T(1) - fy) : fy) * (dx == 0 ? (T(1) - fx) : fx);
          T* dst = vn->grad.data() + (yy * w + xx) * d;
          for (int64_t c = 0; c < d; ++c) dst[c] += cw * g[c];
        }
    }
    if (pn->requires_grad) {
      pn->ensure_grad();
      T zero_row[1] = {T(0)};
      (void)zero_row;
      T dpx = T(0), dpy = T(0);
      for (int64_t c = 0; c < d; ++c) {
        auto v_at = [&](int dy, int dx) -> T {
          const T* s = at(y0 + dy, x0 + dx);
          return s ? s[c] : T(0);
        };
        T v00 = v_at(0, 0), v01 = v_at(0, 1), v10 = v_at(1, 0), v11 = v_at(1, 1);
        dpx += g[c] * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
        dpy += g[c] * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
      }
      pn->grad[0] += dpx * T(w);
      pn->grad[1] += dpy * T(h);
    }
  });
}

// ---------------------------------------------------------------------------
// fused multi-scale deformable sampling.
//
// tokens_proj: [total, H*dh] with per-head column blocks
// offsets_raw: [Q, H*L*K*2], units of one pixel at each level
// attn:        [Q, H*L*K], softmax-normalized over (L,K) per head
// p_ref:       one normalized point per query
// output:      [Q, H*dh]; block h is sum_{l,k} attn * sample_h(p_ref + offset)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
struct DeformGeom {
  const std::vector<std::pair<int, int>>* shapes;
  const std::vector<int64_t>* offsets;
  int heads, points, dh;

  // sample head h of the projected token map at pixel-space (px,py) of level l
  void sample(const T* tokens, int64_t total, int l, int h, T px, T py, T* out) const {
    (void)total;
    int lh = (*shapes)[size_t(l)].first, lw = (*shapes)[size_t(l)].second;
    int64_t base = (*offsets)[size_t(l)];
    int64_t x0 = int64_t(std::floor(double(px))), y0 = int64_t(std::floor(double(py)));
    T fx = px - T(x0), fy = py - T(y0);
    int64_t stride = int64_t(heads) * dh;
    std::fill(out, out + dh, T(0));
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        int64_t yy = y0 + dy, xx = x0 + dx;
        if (yy < 0 || yy >= lh || xx < 0 || xx >= lw) continue;
        T cw = (dy == 0 ? (T(1) - fy) : fy) * (dx == 0 ? (T(1) - fx) : fx);
        const T* src = tokens + (base + yy * lw + xx) * stride + int64_t(h) * dh;
        for (int c = 0; c < dh; ++c) out[c] += cw * src[c];
      }
  }
};

}  // namespace detail

template <class T>
struct DeformAttnAux {
  // normalized sampling locations and weights, laid out [Q][H][L][K]
  std::vector<double> locations;  // 2 per entry (x,y)
  std::vector<double> weights;
  int queries = 0, heads = 0, levels = 0, points = 0;
};

template <class T>
Tensor<T> deform_sample_agg(const Tensor<T>& tokens_proj, const Tensor<T>& offsets_raw,
                            const Tensor<T>& attn, const std::vector<Vec2>& p_ref,
                            const std::vector<std::pair<int, int>>& level_shapes,
                            const std::vector<int64_t>& level_offsets, int heads, int points,
                            DeformAttnAux<T>* aux = nullptr) {
  int levels = int(level_shapes.size());
  int64_t q = offsets_raw.dim(0);
  int64_t hd = tokens_proj.dim(1);
  if (hd % heads != 0) throw DimensionError("deform_sample_agg: token width not divisible by heads");
  int dh = int(hd / heads);
  int64_t hlk = int64_t(heads) * levels * points;
  if (offsets_raw.dim(1) != hlk * 2 || attn.dim(0) != q || attn.dim(1) != hlk)
    throw DimensionError("deform_sample_agg: offsets " + shape_str(offsets_raw.shape()) + " / attn " +
                         shape_str(attn.shape()) + " inconsistent with H*L*K=" + std::to_string(hlk));
  if (int64_t(p_ref.size()) != q) throw DimensionError("deform_sample_agg: need one reference point per query");

  auto shapes = std::make_shared<std::vector<std::pair<int, int>>>(level_shapes);
  auto offs = std::make_shared<std::vector<int64_t>>(level_offsets);
  auto refs = std::make_shared<std::vector<Vec2>>(p_ref);

  std::vector<T> out(size_t(q * hd), T(0));
  const T* tp = tokens_proj.data();
  const T* orw = offsets_raw.data();
  const T* aw = attn.data();
  int64_t total = tokens_proj.dim(0);

  if (aux) {
    aux->queries = int(q);
    aux->heads = heads;
    aux->levels = levels;
    aux->points = points;
    aux->locations.assign(size_t(q * hlk * 2), 0.0);
    aux->weights.assign(size_t(q * hlk), 0.0);
  }

  detail::DeformGeom<T> geom{shapes.get(), offs.get(), heads, points, dh};
  parallel_for(q, [&](int64_t q0, int64_t q1) {
    std::vector<T> buf(static_cast<size_t>(dh));
    for (int64_t qq = q0; qq < q1; ++qq) {
      const Vec2 ref = (*refs)[size_t(qq)];
      for (int h = 0; h < heads; ++h) {
        T* dst = out.data() + qq * hd + int64_t(h) * dh;
        for (int l = 0; l < levels; ++l) {
          int lh = (*shapes)[size_t(l)].first, lw = (*shapes)[size_t(l)].second;
          for (int k = 0; k < points; ++k) {
            int64_t e = ((int64_t(h) * levels + l) * points + k);
            T dx = orw[qq * hlk * 2 + e * 2];
            T dy = orw[qq * hlk * 2 + e * 2 + 1];
            T px = T(ref.x) * T(lw) - T(0.5) + dx;
            T py = T(ref.y) * T(lh) - T(0.5) + dy;
            T w = aw[qq * hlk + e];
            geom.sample(tp, total, l, h, px, py, buf.data());
            for (int c = 0; c < dh; ++c) dst[c] += w * buf[size_t(c)];
            if (aux) {
              aux->locations[size_t((qq * hlk + e) * 2)] = (double(px) + 0.5) / lw;
              aux->locations[size_t((qq * hlk + e) * 2 + 1)] = (double(py) + 0.5) / lh;
              aux->weights[size_t(qq * hlk + e)] = double(w);
            }
          }
        }
      }
    }
  });

  auto tn = tokens_proj.node(), on = offsets_raw.node(), an = attn.node();
  return make_op<T>(
      {q, hd}, std::move(out), {tokens_proj, offsets_raw, attn},
      [tn, on, an, shapes, offs, refs, heads, points, levels, dh, hlk, q, hd](Node<T>& self) {
        const T* g = self.grad.data();
        const T* tp = tn->value.data();
        const T* orw = on->value.data();
        const T* aw = an->value.data();
        bool need_t = tn->requires_grad, need_o = on->requires_grad, need_a = an->requires_grad;
        if (need_t) tn->ensure_grad();
        if (need_o) on->ensure_grad();
        if (need_a) an->ensure_grad();
        int64_t stride = int64_t(heads) * dh;
        // token-grad scatter has overlapping targets, so backward stays serial
        std::vector<T> sample(static_cast<size_t>(dh));
        for (int64_t qq = 0; qq < q; ++qq) {
          const Vec2 ref = (*refs)[size_t(qq)];
          for (int h = 0; h < heads; ++h) {
            const T* gout = g + qq * hd + int64_t(h) * dh;
            for (int l = 0; l < levels; ++l) {
              int lh = (*shapes)[size_t(l)].first, lw = (*shapes)[size_t(l)].second;
              int64_t base = (*offs)[size_t(l)];
              for (int k = 0; k < points; ++k) {
                int64_t e = ((int64_t(h) * levels + l) * points + k);
                T dx = orw[qq * hlk * 2 + e * 2];
                T dy = orw[qq * hlk * 2 + e * 2 + 1];
                T px = T(ref.x) * T(lw) - T(0.5) + dx;
                T py = T(ref.y) * T(lh) - T(0.5) + dy;
                T w = aw[qq * hlk + e];
                int64_t x0 = int64_t(std::floor(double(px))), y0 = int64_t(std::floor(double(py)));
                T fx = px - T(x0), fy = py - T(y0);

                auto corner = [&](int dyy, int dxx) -> const T* {
                  int64_t yy = y0 + dyy, xx = x0 + dxx;
                  if (yy < 0 || yy >= lh || xx < 0 || xx >= lw) return nullptr;
                  return tp + (base + yy * lw + xx) * stride + int64_t(h) * dh;
                };
                if (need_a || need_o) {
                  std::fill(sample.begin(), sample.end(), T(0));
                  T dpx = T(0), dpy = T(0);
                  for (int c = 0; c < dh; ++c) {
                    const T *s00 = corner(0, 0), *s01 = corner(0, 1), *s10 = corner(1, 0), *s11 = corner(1, 1);
                    T v00 = s00 ? s00[c] : T(0), v01 = s01 ? s01[c] : T(0);
                    T v10 = s10 ? s10[c] : T(0), v11 = s11 ? s11[c] : T(0);
                    sample[size_t(c)] = (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) +
                                        fy * ((T(1) - fx) * v10 + fx * v11);
                    dpx += gout[c] * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
                    dpy += gout[c] * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
                  }
                  if (need_a) {
                    T da = T(0);
                    for (int c = 0; c < dh; ++c) da += gout[c] * sample[size_t(c)];
                    an->grad[size_t(qq * hlk + e)] += da;
                  }
                  if (need_o) {
                    on->grad[size_t(qq * hlk * 2 + e * 2)] += w * dpx;
                    on->grad[size_t(qq * hlk * 2 + e * 2 + 1)] += w * dpy;
                  }
                }
                if (need_t) {
                  for (int dyy = 0; dyy < 2; ++dyy)
                    for (int dxx = 0; dxx < 2; ++dxx) {
                      int64_t yy = y0 + dyy, xx = x0 + dxx;
                      if (yy < 0 || yy >= lh || xx < 0 || xx >= lw) continue;
                      T cw = (dyy == 0 ? (T(1) - fy) : fy) * (dxx == 0 ? (T(1) - fx) : fx);
                      T* dst = tn->grad.data() + size_t((base + yy * lw + xx) * stride + int64_t(h) * dh);
                      for (int c = 0; c < dh; ++c) dst[c] += w * cw * gout[c];
                    }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// parameter blocks
// ---------------------------------------------------------------------------

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
struct LinearBlock {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  LinearBlock() = default;
  LinearBlock(int64_t in, int64_t out, Rng& rng) {
    T limit = T(std::sqrt(6.0 / double(in + out)));
    weight = Tensor<T>::rand_uniform({in, out}, rng, -limit, limit, true);
    bias = Tensor<T>::zeros({out}, true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void params(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct LayerNormBlock {
  Tensor<T> gamma, beta;

  LayerNormBlock() = default;
  explicit LayerNormBlock(int64_t d) {
    gamma = Tensor<T>::filled({d}, T(1), true);
    beta = Tensor<T>::zeros({d}, true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, T(1e-5)); }

  void params(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <class T>
struct FeedForward {
  LinearBlock<T> fc1, fc2;

  FeedForward() = default;
  FeedForward(int64_t d, int64_t hidden, Rng& rng) : fc1(d, hidden, rng), fc2(hidden, d, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(x))); }

  void params(const std::string& prefix, NamedParams<T>& out) const {
    fc1.params(prefix + ".fc1", out);
    fc2.params(prefix + ".fc2", out);
  }
};

// ---------------------------------------------------------------------------
// multi-scale deformable attention block
// ---------------------------------------------------------------------------

template <class T>
struct DeformableAttention {
  int d_model = 0, heads = 0, points = 0, levels = 0;
  LinearBlock<T> value_proj;   // stacked W_h^k
  LinearBlock<T> out_proj;     // stacked W_h^o
  LinearBlock<T> offset_proj;  // query -> H*L*K*2 pixel offsets
  LinearBlock<T> weight_proj;  // query -> H*L*K logits

  DeformableAttention() = default;
  DeformableAttention(int d, int h, int k, int l, Rng& rng)
      : d_model(d), heads(h), points(k), levels(l),
        value_proj(d, d, rng),
        out_proj(d, d, rng),
        offset_proj(d, int64_t(h) * l * k * 2, rng),
        weight_proj(d, int64_t(h) * l * k, rng) {
    if (d % h != 0) throw ConfigError("deformable attention: d_model must be divisible by heads");
    // start from a unit star around the reference point with uniform weights
    std::fill(offset_proj.weight.vec().begin(), offset_proj.weight.vec().end(), T(0));
    std::fill(weight_proj.weight.vec().begin(), weight_proj.weight.vec().end(), T(0));
    std::fill(weight_proj.bias.vec().begin(), weight_proj.bias.vec().end(), T(0));
    for (int hh = 0; hh < h; ++hh)
      for (int ll = 0; ll < l; ++ll)
        for (int kk = 0; kk < k; ++kk) {
          double angle = 2.0 * M_PI * double(hh * k + kk) / double(h * k);
          int64_t e = ((int64_t(hh) * l + ll) * k + kk);
          offset_proj.bias.vec()[size_t(e * 2)] = T(std::cos(angle));
          offset_proj.bias.vec()[size_t(e * 2 + 1)] = T(std::sin(angle));
        }
  }

  Tensor<T> project_tokens(const Tensor<T>& tokens) const { return value_proj(tokens); }

  // query: [Q, d]; query_pos added only to the offset/weight projections
  Tensor<T> forward_projected(const Tensor<T>& query, const std::vector<Vec2>& p_ref,
                              const Tensor<T>& tokens_proj,
                              const std::vector<std::pair<int, int>>& level_shapes,
                              const std::vector<int64_t>& level_offsets,
                              DeformAttnAux<T>* aux = nullptr) const {
    int64_t qn = query.dim(0);
    if (query.dim(1) != d_model)
      throw DimensionError("deformable attention: query " + shape_str(query.shape()) + " vs d_model " +
                           std::to_string(d_model));
    if (int(level_shapes.size()) != levels)
      throw DimensionError("deformable attention: configured for " + std::to_string(levels) + " levels, got " +
                           std::to_string(level_shapes.size()));
    auto offsets = offset_proj(query);
    auto logits = weight_proj(query);
    auto attn = reshape(softmax(reshape(logits, {qn * heads, int64_t(levels) * points}), 1),
                        {qn, int64_t(heads) * levels * points});
    auto sampled = deform_sample_agg(tokens_proj, offsets, attn, p_ref, level_shapes, level_offsets,
                                     heads, points, aux);
    return out_proj(sampled);
  }

  Tensor<T> operator()(const Tensor<T>& query, const std::vector<Vec2>& p_ref,
                       const MultiScaleValue<T>& value, DeformAttnAux<T>* aux = nullptr) const {
    return forward_projected(query, p_ref, project_tokens(value.tokens), value.level_shapes,
                             value.level_offsets, aux);
  }

  void params(const std::string& prefix, NamedParams<T>& out) const {
    value_proj.params(prefix + ".value_proj", out);
    out_proj.params(prefix + ".out_proj", out);
    offset_proj.params(prefix + ".offset_proj", out);
    weight_proj.params(prefix + ".weight_proj", out);
  }
};

// ---------------------------------------------------------------------------
// plain multi-head attention
// ---------------------------------------------------------------------------

template <class T>
struct PlainAttnAux {
  std::vector<double> weights;  // [heads][Tq][Tk]
  int heads = 0, tq = 0, tk = 0;
};

template <class T>
struct MultiHeadAttention {
  int d_model = 0, heads = 0;
  LinearBlock<T> q_proj, k_proj, v_proj, out_proj;

  MultiHeadAttention() = default;
  MultiHeadAttention(int d, int h, Rng& rng)
      : d_model(d), heads(h), q_proj(d, d, rng), k_proj(d, d, rng), v_proj(d, d, rng), out_proj(d, d, rng) {
    if (d % h != 0) throw ConfigError("multi-head attention: d_model must be divisible by heads");
  }

  // mask: optional [Tq*Tk] bytes, nonzero = attend allowed
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                       const std::vector<uint8_t>* mask = nullptr, PlainAttnAux<T>* aux = nullptr) const {
    return forward_projected(query, k_proj(key), v_proj(value), mask, aux);
  }

  // key/value already projected; used when token projections are shared
  Tensor<T> forward_projected(const Tensor<T>& query, const Tensor<T>& k, const Tensor<T>& v,
                              const std::vector<uint8_t>* mask = nullptr,
                              PlainAttnAux<T>* aux = nullptr) const {
    if (query.dim(1) != d_model || k.dim(1) != d_model || v.dim(1) != d_model)
      throw DimensionError("multi-head attention: d_model mismatch, query " + shape_str(query.shape()));
    int64_t tq = query.dim(0), tk = k.dim(0);
    if (mask && int64_t(mask->size()) != tq * tk) throw DimensionError("multi-head attention: bad mask size");
    int64_t dh = d_model / heads;
    auto q = q_proj(query);
    std::vector<T> penalty;
    if (mask) {
      penalty.resize(size_t(tq * tk));
      for (size_t i = 0; i < penalty.size(); ++i) penalty[i] = (*mask)[i] ? T(0) : T(1e9);
    }
    if (aux) {
      aux->heads = heads;
      aux->tq = int(tq);
      aux->tk = int(tk);
      aux->weights.assign(size_t(heads) * tq * tk, 0.0);
    }
    std::vector<Tensor<T>> head_outs;
    head_outs.reserve(size_t(heads));
    T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
    for (int h = 0; h < heads; ++h) {
      auto qh = slice_cols(q, h * dh, (h + 1) * dh);
      auto kh = slice_cols(k, h * dh, (h + 1) * dh);
      auto vh = slice_cols(v, h * dh, (h + 1) * dh);
      auto logits = scale(matmul(qh, transpose2d(kh)), inv_sqrt);
      if (mask) logits = sub_const_vec(logits, penalty);
      auto attn = softmax(logits, 1);
      if (aux) {
        for (int64_t i = 0; i < tq * tk; ++i) aux->weights[size_t(h * tq * tk + i)] = double(attn.data()[i]);
      }
      head_outs.push_back(matmul(attn, vh));
    }
    return out_proj(concat_cols(head_outs));
  }

  void params(const std::string& prefix, NamedParams<T>& out) const {
    q_proj.params(prefix + ".q_proj", out);
    k_proj.params(prefix + ".k_proj", out);
    v_proj.params(prefix + ".v_proj", out);
    out_proj.params(prefix + ".out_proj", out);
  }
};

// ---------------------------------------------------------------------------
// sinusoidal encoding of a normalized point: x over the first d/2 channels,
// y over the rest, (sin, cos) interleaved per frequency
// ---------------------------------------------------------------------------

template <class T>
std::vector<T> sinusoidal_point_encoding(Vec2 p, int d_model) {
  if (d_model % 4 != 0) throw ConfigError("sinusoidal_point_encoding: d_model must be divisible by 4");
  int half = d_model / 2;
  std::vector<T> enc(static_cast<size_t>(d_model));
  for (int axis = 0; axis < 2; ++axis) {
    double coord = axis == 0 ? p.x : p.y;
    T* dst = enc.data() + axis * half;
    for (int i = 0; i < half / 2; ++i) {
      double freq = 2.0 * M_PI / std::pow(10000.0, 2.0 * i / double(half));
      dst[2 * i] = T(std::sin(coord * freq));
      dst[2 * i + 1] = T(std::cos(coord * freq));
    }
  }
  return enc;
}

template <class T>
Tensor<T> sinusoidal_point_encoding_tensor(const std::vector<Vec2>& pts, int d_model) {
  std::vector<T> data;
  data.reserve(pts.size() * size_t(d_model));
  for (auto& p : pts) {
    auto e = sinusoidal_point_encoding<T>(p, d_model);
    data.insert(data.end(), e.begin(), e.end());
  }
  return Tensor<T>::from({int64_t(pts.size()), d_model}, std::move(data));
}

}  // namespace deer
