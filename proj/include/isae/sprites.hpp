#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "isae/errors.hpp"
#include "isae/layout.hpp"
#include "isae/rng.hpp"
#include "isae/tensor.hpp"

// Procedural face sprites with exact part masks. Each sprite is painted
// back-to-front (background+hair, face, eyebrows, eyes, mouth); a part's mask
// is its visible coverage after occlusion, so the five masks partition every
// pixel. Both image and masks are quantized to the 8-bit grid at render time,
// which makes dataset round trips byte-exact.
namespace isae {

inline constexpr int kNumAttrs = 6;
inline const std::array<const char*, kNumAttrs> kAttrNames = {
    "mouth_open", "dark_hair", "pale_skin", "large_eyes", "thick_eyebrows", "round_face"};

enum AttrBit : std::uint32_t {
  kAttrMouthOpen = 1u << 0,
  kAttrDarkHair = 1u << 1,
  kAttrPaleSkin = 1u << 2,
  kAttrLargeEyes = 1u << 3,
  kAttrThickEyebrows = 1u << 4,
  kAttrRoundFace = 1u << 5,
};

inline int attr_index(const std::string& name) {
  for (int i = 0; i < kNumAttrs; ++i)
    if (name == kAttrNames[static_cast<std::size_t>(i)]) return i;
  throw ConfigError("unknown attribute '" + name + "'");
}

struct Sprite {
  Tensor<real> image;  // [3,32,32], values on the 1/255 grid
  Tensor<real> masks;  // [5,32,32], per-pixel sum exactly 1
  std::uint32_t attrs = 0;

  Sprite() : image({kImageC, kImageH, kImageW}), masks({kNumParts, kImageH, kImageW}) {}

  bool attr(int bit) const { return (attrs >> bit) & 1u; }
};

struct Range {
  double lo = 0.0, hi = 1.0;
  double sample(Rng& rng) const { return rng.uniform(lo, hi); }
  double mid() const { return 0.5 * (lo + hi); }
};

struct GenParams {
  std::uint64_t seed = 1;
  int count = 1;

  Range face_cx{14.5, 17.5};
  Range face_cy{15.5, 17.5};
  Range face_size{8.5, 10.5};   // base radius; rx/ry derived via elongation
  Range face_elong{0.0, 1.0};   // 0 round, 1 elongated
  Range skin_pale{0.0, 1.0};
  Range hair_light{0.0, 1.0};
  Range eye_radius{1.2, 2.4};
  Range eye_tint{0.0, 1.0};
  Range brow_mix{0.0, 1.0};     // independent part of eyebrow thickness
  Range mouth_openness{0.0, 1.0};
  Range mouth_tint{0.0, 1.0};
  Range bg_red{0.45, 0.75};
  Range bg_green{0.50, 0.80};
  Range bg_blue{0.65, 0.95};
};

// One sampled sprite record. Attributes are recorded from these parameters,
// never re-inferred from pixels.
struct SpriteParams {
  double cx = 16, cy = 16.5, size = 9.5, elong = 0.5;
  double skin_pale = 0.5, hair_light = 0.5;
  double eye_radius = 1.8, eye_tint = 0.5;
  double brow_mix = 0.5, brow_raw = 0.5;
  double mouth_openness = 0.5, mouth_tint = 0.5;
  double bg[3] = {0.6, 0.65, 0.8};
  bool mouth_open = false, dark_hair = false, pale_skin = false;
  bool large_eyes = false, thick_eyebrows = false, round_face = false;

  std::uint32_t attr_bits() const {
    std::uint32_t a = 0;
    if (mouth_open) a |= kAttrMouthOpen;
    if (dark_hair) a |= kAttrDarkHair;
    if (pale_skin) a |= kAttrPaleSkin;
    if (large_eyes) a |= kAttrLargeEyes;
    if (thick_eyebrows) a |= kAttrThickEyebrows;
    if (round_face) a |= kAttrRoundFace;
    return a;
  }
};

namespace sprite_detail {

struct Rgb {
  double r, g, b;
};

inline Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// Signed distances, negative inside; coverage uses a one-pixel soft edge.
inline double sd_circle(double x, double y, double cx, double cy, double r) {
  return std::hypot(x - cx, y - cy) - r;
}

inline double sd_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = x - cx, dy = y - cy;
  const double f = std::sqrt(dx * dx / (rx * rx) + dy * dy / (ry * ry));
  if (f < 1e-9) return -std::min(rx, ry);
  // First-order distance estimate: (f - 1) / |grad f|.
  const double gf = std::sqrt(dx * dx / (rx * rx * rx * rx) + dy * dy / (ry * ry * ry * ry)) / f;
  return (f - 1.0) / gf;
}

inline double sd_round_box(double x, double y, double cx, double cy, double hx, double hy,
                           double round_r) {
  const double qx = std::abs(x - cx) - hx, qy = std::abs(y - cy) - hy;
  const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
  return std::hypot(ox, oy) + std::min(std::max(qx, qy), 0.0) - round_r;
}

inline double coverage(double sd) { return std::clamp(0.5 - sd, 0.0, 1.0); }

}  // namespace sprite_detail

// Geometry derived from a parameter record; shared by the renderer and the
// canvas-bounds check.
struct SpriteGeometry {
  double rx, ry;                    // face half-axes
  double hair_rx, hair_ry, hair_cy, hair_cut;
  double eye_y, eye_dx, eye_r;
  double brow_y, brow_hw, brow_ht;
  double mouth_y, mouth_hw, mouth_hh;

  explicit SpriteGeometry(const SpriteParams& p) {
    rx = p.size * (1.00 - 0.14 * p.elong);
    ry = p.size * (1.02 + 0.16 * p.elong);
    hair_rx = rx + 1.8;
    hair_ry = ry + 1.4;
    hair_cy = p.cy - 0.12 * ry;
    hair_cut = p.cy + 0.05 * ry;  // hair region only above this line
    eye_y = p.cy - 0.22 * ry;
    eye_dx = 0.45 * rx;
    eye_r = p.eye_radius;
    brow_ht = 0.5 * (0.6 + 1.4 * p.brow_raw);
    brow_y = eye_y - eye_r - 1.3 - brow_ht;
    brow_hw = 0.28 * rx;
    mouth_y = p.cy + 0.45 * ry;
    mouth_hw = 0.32 * rx;
    mouth_hh = p.mouth_open ? (1.5 + 0.8 * p.mouth_openness) : (0.55 + 0.45 * p.mouth_openness);
  }

  // Every part must lie fully on the canvas (with the antialias margin).
  bool fits(const SpriteParams& p) const {
    const double m = 1.0;
    const bool face_ok = p.cx - hair_rx >= m && p.cx + hair_rx <= kImageW - m &&
                         hair_cy - hair_ry >= m && p.cy + ry <= kImageH - m;
    const bool brow_ok = brow_y - brow_ht >= m;
    const bool mouth_ok = mouth_y + mouth_hh <= kImageH - m;
    return face_ok && brow_ok && mouth_ok;
  }
};

inline SpriteParams sample_sprite_params(Rng& rng, const GenParams& gp) {
  SpriteParams p;
  p.cx = gp.face_cx.sample(rng);
  p.cy = gp.face_cy.sample(rng);
  p.size = gp.face_size.sample(rng);
  p.elong = gp.face_elong.sample(rng);
  p.skin_pale = gp.skin_pale.sample(rng);
  p.hair_light = gp.hair_light.sample(rng);
  p.eye_radius = gp.eye_radius.sample(rng);
  p.eye_tint = gp.eye_tint.sample(rng);
  p.brow_mix = gp.brow_mix.sample(rng);
  p.mouth_openness = gp.mouth_openness.sample(rng);
  p.mouth_tint = gp.mouth_tint.sample(rng);
  p.bg[0] = gp.bg_red.sample(rng);
  p.bg[1] = gp.bg_green.sample(rng);
  p.bg[2] = gp.bg_blue.sample(rng);

  // Eyebrow thickness leans on hair darkness so dark_hair and thick_eyebrows
  // form a correlated attribute pair (a deliberately "global" factor).
  p.brow_raw = 0.6 * (1.0 - p.hair_light) + 0.4 * p.brow_mix;

  p.mouth_open = p.mouth_openness > gp.mouth_openness.mid();
  p.dark_hair = p.hair_light < gp.hair_light.mid();
  p.pale_skin = p.skin_pale > gp.skin_pale.mid();
  p.large_eyes = p.eye_radius > gp.eye_radius.mid();
  p.thick_eyebrows = p.brow_raw > 0.5;  // median of 0.6*(1-h)+0.4*u
  p.round_face = p.elong < gp.face_elong.mid();
  return p;
}

inline Sprite render_sprite(const SpriteParams& p) {
  using namespace sprite_detail;
  const SpriteGeometry geo(p);

  const Rgb skin = mix({0.78, 0.56, 0.40}, {0.99, 0.91, 0.82}, p.skin_pale);
  const Rgb hair = mix({0.10, 0.07, 0.05}, {0.85, 0.72, 0.45}, p.hair_light);
  const Rgb brow = {hair.r * 0.7, hair.g * 0.7, hair.b * 0.7};
  const Rgb eye = mix({0.13, 0.16, 0.34}, {0.27, 0.16, 0.09}, p.eye_tint);
  const Rgb mouth = mix({0.60, 0.16, 0.20}, {0.88, 0.38, 0.42}, p.mouth_tint);
  const Rgb bg = {p.bg[0], p.bg[1], p.bg[2]};

  Sprite out;
  out.attrs = p.attr_bits();

  for (int py = 0; py < kImageH; ++py) {
    for (int px = 0; px < kImageW; ++px) {
      const double x = px + 0.5, y = py + 0.5;

      const double a_face = coverage(sd_ellipse(x, y, p.cx, p.cy, geo.rx, geo.ry));
      const double a_hair = coverage(
          std::max(sd_ellipse(x, y, p.cx, geo.hair_cy, geo.hair_rx, geo.hair_ry), y - geo.hair_cut));
      const double a_brow_raw = std::max(
          coverage(sd_round_box(x, y, p.cx - geo.eye_dx, geo.brow_y, geo.brow_hw, geo.brow_ht, 0.3)),
          coverage(sd_round_box(x, y, p.cx + geo.eye_dx, geo.brow_y, geo.brow_hw, geo.brow_ht, 0.3)));
      const double a_eye_raw =
          std::max(coverage(sd_circle(x, y, p.cx - geo.eye_dx, geo.eye_y, geo.eye_r)),
                   coverage(sd_circle(x, y, p.cx + geo.eye_dx, geo.eye_y, geo.eye_r)));
      const double a_mouth_raw =
          coverage(sd_ellipse(x, y, p.cx, geo.mouth_y, geo.mouth_hw, geo.mouth_hh));

      // Inner parts only exist on the face.
      const double ab = a_brow_raw * a_face;
      const double ae = a_eye_raw * a_face;
      const double am = a_mouth_raw * a_face;

      // Visible weight of each layer under back-to-front compositing; the
      // base layer has alpha 1, so the weights telescope to exactly 1.
      double w[kNumParts];
      w[4] = am;
      w[3] = ae * (1.0 - am);
      w[2] = ab * (1.0 - ae) * (1.0 - am);
      w[1] = a_face * (1.0 - ab) * (1.0 - ae) * (1.0 - am);
      w[0] = (1.0 - a_face) * (1.0 - ab) * (1.0 - ae) * (1.0 - am);

      const Rgb base = mix(bg, hair, a_hair);
      const Rgb col = {
          w[0] * base.r + w[1] * skin.r + w[2] * brow.r + w[3] * eye.r + w[4] * mouth.r,
          w[0] * base.g + w[1] * skin.g + w[2] * brow.g + w[3] * eye.g + w[4] * mouth.g,
          w[0] * base.b + w[1] * skin.b + w[2] * brow.b + w[3] * eye.b + w[4] * mouth.b,
      };

      const double ch[3] = {col.r, col.g, col.b};
      for (int c = 0; c < kImageC; ++c) {
        const int q = static_cast<int>(std::lround(std::clamp(ch[c], 0.0, 1.0) * 255.0));
        out.image.data[(static_cast<std::size_t>(c) * kImageH + py) * kImageW + px] =
            static_cast<real>(q) / real(255);
      }

      // Largest-remainder quantization: mask bytes sum to exactly 255, so the
      // stored floats (byte/255) partition each pixel exactly.
      int q[kNumParts];
      double rem[kNumParts];
      int total = 0;
      for (int i = 0; i < kNumParts; ++i) {
        const double t = std::clamp(w[i], 0.0, 1.0) * 255.0;
        q[i] = static_cast<int>(t);
        rem[i] = t - q[i];
        total += q[i];
      }
      int deficit = 255 - total;
      while (deficit > 0) {
        int best = 0;
        for (int i = 1; i < kNumParts; ++i)
          if (rem[i] > rem[best]) best = i;
        q[best] += 1;
        rem[best] = -1.0;
        --deficit;
      }
      while (deficit < 0) {  // cannot happen with a true partition; stay safe
        int best = 0;
        for (int i = 1; i < kNumParts; ++i)
          if (q[i] > q[best]) best = i;
        q[best] -= 1;
        ++deficit;
      }
      for (int i = 0; i < kNumParts; ++i)
        out.masks.data[(static_cast<std::size_t>(i) * kImageH + py) * kImageW + px] =
            static_cast<real>(q[i]) / real(255);
    }
  }
  return out;
}

// Sprite i always derives from substream(seed, i), so any generation order
// (or a future parallel split) produces identical bytes.
inline std::vector<Sprite> generate(const GenParams& gp) {
  if (gp.count < 1) throw ConfigError("generate: count must be >= 1");
  std::vector<Sprite> sprites;
  sprites.reserve(static_cast<std::size_t>(gp.count));
  for (int i = 0; i < gp.count; ++i) {
    Rng rng = Rng::substream(gp.seed, static_cast<std::uint64_t>(i));
    SpriteParams p;
    bool ok = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
      p = sample_sprite_params(rng, gp);
      if (SpriteGeometry(p).fits(p)) {
        ok = true;
        break;
      }
    }
    if (!ok)
      throw ConfigError("generate: sprite " + std::to_string(i) +
                        " has no on-canvas geometry after 100 attempts; check jitter ranges");
    sprites.push_back(render_sprite(p));
  }
  return sprites;
}

}  // namespace isae
