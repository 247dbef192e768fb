#pragma once

// Synthetic grounding scenes: flat-colored shapes on a plain background with
// a minimal referring expression that singles out exactly one of them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "refformer/boxes.hpp"
#include "refformer/rng.hpp"
#include "refformer/vocabulary.hpp"

namespace refformer {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { kCircle, kSquare, kTriangle };
enum class Color { kRed, kGreen, kBlue, kYellow };
enum class SizeClass { kBig, kSmall };
enum class Relation { kLeft, kRight, kTop, kBottom };

inline constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle};
inline constexpr std::array<Color, 4> kColors{Color::kRed, Color::kGreen, Color::kBlue, Color::kYellow};
inline constexpr std::array<Relation, 4> kRelations{Relation::kLeft, Relation::kRight, Relation::kTop,
                                                    Relation::kBottom};

inline std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

inline std::string to_string(Color c) {
  switch (c) {
    case Color::kRed: return "red";
    case Color::kGreen: return "green";
    case Color::kBlue: return "blue";
    case Color::kYellow: return "yellow";
  }
  return "?";
}

inline std::string to_string(SizeClass s) { return s == SizeClass::kBig ? "big" : "small"; }

inline std::array<float, 3> rgb(Color c) {
  switch (c) {
    case Color::kRed: return {0.90f, 0.12f, 0.10f};
    case Color::kGreen: return {0.10f, 0.75f, 0.20f};
    case Color::kBlue: return {0.15f, 0.30f, 0.95f};
    case Color::kYellow: return {0.95f, 0.90f, 0.10f};
  }
  return {0, 0, 0};
}

struct GeneratorConfig {
  std::size_t image_size = 64;
  std::size_t min_objects = 2;
  std::size_t max_objects = 5;
  std::size_t max_text_len = 12;
  std::size_t big_min = 20, big_max = 26;
  std::size_t small_min = 10, small_max = 15;
  std::size_t gap = 2;           // minimum free pixels between object boxes
  double dead_zone = 4.0;        // pixels; relation margin between centroids
  std::size_t max_attempts = 100;
  std::array<float, 3> background{0.08f, 0.08f, 0.08f};
};

struct SceneObject {
  ShapeKind shape = ShapeKind::kCircle;
  Color color = Color::kRed;
  SizeClass size = SizeClass::kBig;
  std::size_t x = 0, y = 0, extent = 0;  // top-left corner and side of the bounding square, pixels
  std::vector<std::uint8_t> mask;       // image_size^2
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // tight pixel extent, inclusive

  double centroid_x() const { return 0.5 * static_cast<double>(x0 + x1 + 1); }
  double centroid_y() const { return 0.5 * static_cast<double>(y0 + y1 + 1); }
};

/// A referring expression: optional attribute filters, then an optional
/// extremal relation among the objects that pass them.
struct Expression {
  std::optional<SizeClass> size;
  std::optional<Color> color;
  std::optional<ShapeKind> shape;
  std::optional<Relation> relation;

  std::size_t attribute_count() const { return size.has_value() + color.has_value() + shape.has_value(); }
  bool operator==(const Expression&) const = default;
};

inline std::vector<std::string> expression_words(const Expression& e) {
  std::vector<std::string> w{"the"};
  if (e.size) w.push_back(to_string(*e.size));
  if (e.color) w.push_back(to_string(*e.color));
  w.push_back(e.shape ? to_string(*e.shape) : "object");
  if (e.relation) {
    switch (*e.relation) {
      case Relation::kLeft: w.insert(w.end(), {"on", "the", "left"}); break;
      case Relation::kRight: w.insert(w.end(), {"on", "the", "right"}); break;
      case Relation::kTop: w.insert(w.end(), {"at", "the", "top"}); break;
      case Relation::kBottom: w.insert(w.end(), {"at", "the", "bottom"}); break;
    }
  }
  return w;
}

inline Expression parse_expression(const std::vector<std::string>& words) {
  Expression e;
  std::size_t i = 0;
  auto fail = [&] { return VocabularyError("parse_expression: malformed expression"); };
  if (i >= words.size() || words[i++] != "the") throw fail();
  if (i < words.size() && (words[i] == "big" || words[i] == "small"))
    e.size = words[i++] == "big" ? SizeClass::kBig : SizeClass::kSmall;
  for (Color c : kColors)
    if (i < words.size() && words[i] == to_string(c)) {
      e.color = c;
      ++i;
      break;
    }
  if (i >= words.size()) throw fail();
  if (words[i] != "object") {
    bool found = false;
    for (ShapeKind s : kShapes)
      if (words[i] == to_string(s)) {
        e.shape = s;
        found = true;
      }
    if (!found) throw fail();
  }
  ++i;
  if (i == words.size()) return e;
  if (i + 3 != words.size() || words[i + 1] != "the") throw fail();
  const std::string& prep = words[i];
  const std::string& dir = words[i + 2];
  if (prep == "on" && dir == "left") e.relation = Relation::kLeft;
  else if (prep == "on" && dir == "right") e.relation = Relation::kRight;
  else if (prep == "at" && dir == "top") e.relation = Relation::kTop;
  else if (prep == "at" && dir == "bottom") e.relation = Relation::kBottom;
  else throw fail();
  return e;
}

inline bool has_attributes(const SceneObject& o, const Expression& e) {
  return (!e.size || *e.size == o.size) && (!e.color || *e.color == o.color) && (!e.shape || *e.shape == o.shape);
}

/// Whole-scene caption for contrastive pretraining: "color shape" per
/// object, left to right, truncated to max_words.
inline std::vector<std::string> scene_caption(const std::vector<SceneObject>& objects, std::size_t max_words) {
  std::vector<const SceneObject*> order;
  for (const auto& o : objects) order.push_back(&o);
  std::stable_sort(order.begin(), order.end(),
                   [](const SceneObject* a, const SceneObject* b) { return a->centroid_x() < b->centroid_x(); });
  std::vector<std::string> words;
  for (const SceneObject* o : order) {
    if (words.size() + 2 > max_words) break;
    words.push_back(to_string(o->color));
    words.push_back(to_string(o->shape));
  }
  return words;
}

/// Indices of the objects the expression denotes. A relation picks the
/// candidate that is extreme by more than `dead_zone` pixels over every other
/// candidate.
inline std::vector<std::size_t> resolve(const Expression& e, const std::vector<SceneObject>& objects,
                                        double dead_zone) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (has_attributes(objects[i], e)) cand.push_back(i);
  if (!e.relation) return cand;
  auto key = [&](std::size_t i) {
    const SceneObject& o = objects[i];
    switch (*e.relation) {
      case Relation::kLeft: return o.centroid_x();
      case Relation::kRight: return -o.centroid_x();
      case Relation::kTop: return o.centroid_y();
      case Relation::kBottom: return -o.centroid_y();
    }
    return 0.0;
  };
  std::vector<std::size_t> out;
  for (std::size_t i : cand) {
    bool extreme = true;
    for (std::size_t j : cand)
      if (j != i && !(key(i) < key(j) - dead_zone)) extreme = false;
    if (extreme) out.push_back(i);
  }
  return out;
}

/// Candidate expressions for a referent, shortest first.
inline std::vector<Expression> candidate_expressions(const SceneObject& o) {
  std::vector<Expression> attrs;
  for (unsigned mask : {0b010u, 0b100u, 0b001u, 0b110u, 0b011u, 0b101u, 0b111u}) {
    Expression e;
    if (mask & 0b001u) e.size = o.size;
    if (mask & 0b100u) e.color = o.color;
    if (mask & 0b010u) e.shape = o.shape;
    attrs.push_back(e);
  }
  std::vector<Expression> out = attrs;
  Expression bare;
  for (Relation r : kRelations) {
    Expression e = bare;
    e.relation = r;
    out.push_back(e);
  }
  for (const Expression& a : attrs)
    for (Relation r : kRelations) {
      Expression e = a;
      e.relation = r;
      out.push_back(e);
    }
  return out;
}

struct GroundingSample {
  std::uint64_t seed = 0;
  std::vector<float> image;           // H x W x 3 in [0, 1]
  std::vector<std::string> words;
  std::vector<std::int32_t> tokens;   // padded to max_text_len
  Box box;                            // normalized tight box of `mask`
  std::vector<std::uint8_t> mask;     // H x W binary
  std::vector<SceneObject> objects;
  std::size_t referent = 0;
};

/// Rasterizes one shape into a binary mask by testing pixel centres.
inline std::vector<std::uint8_t> rasterize(ShapeKind shape, std::size_t x, std::size_t y, std::size_t extent,
                                           std::size_t image_size) {
  std::vector<std::uint8_t> m(image_size * image_size, 0);
  const double s = static_cast<double>(extent);
  const double ox = static_cast<double>(x), oy = static_cast<double>(y);
  for (std::size_t r = y; r < std::min(image_size, y + extent); ++r)
    for (std::size_t c = x; c < std::min(image_size, x + extent); ++c) {
      const double px = static_cast<double>(c) + 0.5 - ox, py = static_cast<double>(r) + 0.5 - oy;
      bool in = false;
      switch (shape) {
        case ShapeKind::kSquare: in = true; break;
        case ShapeKind::kCircle: {
          const double dx = px - s / 2, dy = py - s / 2;
          in = dx * dx + dy * dy <= s * s / 4;
          break;
        }
        case ShapeKind::kTriangle:
          // apex at top centre, base along the bottom edge
          in = std::abs(px - s / 2) <= 0.5 * py;
          break;
      }
      if (in) m[r * image_size + c] = 1;
    }
  return m;
}

/// Tight normalized (cx, cy, w, h) box of a binary mask.
inline Box mask_box(const std::vector<std::uint8_t>& mask, std::size_t image_size) {
  std::size_t x0 = image_size, y0 = image_size, x1 = 0, y1 = 0;
  for (std::size_t r = 0; r < image_size; ++r)
    for (std::size_t c = 0; c < image_size; ++c)
      if (mask[r * image_size + c]) {
        x0 = std::min(x0, c);
        x1 = std::max(x1, c);
        y0 = std::min(y0, r);
        y1 = std::max(y1, r);
      }
  if (x0 > x1) return {};
  const double n = static_cast<double>(image_size);
  return box_xyxy_to_cxcywh({x0 / n, y0 / n, (x1 + 1) / n, (y1 + 1) / n});
}

namespace detail {

inline bool place_objects(std::vector<SceneObject>& objects, const GeneratorConfig& cfg, Philox& rng) {
  for (std::size_t i = 0; i < objects.size(); ++i) {
    SceneObject& o = objects[i];
    bool ok = false;
    for (int tries = 0; tries < 50 && !ok; ++tries) {
      o.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.image_size - o.extent)));
      o.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.image_size - o.extent)));
      ok = true;
      for (std::size_t j = 0; j < i && ok; ++j) {
        const SceneObject& p = objects[j];
        const bool apart = o.x >= p.x + p.extent + cfg.gap || p.x >= o.x + o.extent + cfg.gap ||
                           o.y >= p.y + p.extent + cfg.gap || p.y >= o.y + o.extent + cfg.gap;
        ok = apart;
      }
    }
    if (!ok) return false;
  }
  return true;
}

}  // namespace detail

/// Generates one sample from its own seed.
inline GroundingSample generate_scene(std::uint64_t seed, const GeneratorConfig& cfg = {}) {
  if (cfg.min_objects < 2 || cfg.max_objects < cfg.min_objects)
    throw GenerationError("generate_scene: object count range must satisfy 2 <= min <= max");
  Philox rng(seed, 0);
  const std::size_t n = cfg.image_size;
  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const auto count = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.min_objects),
                                                                static_cast<std::int64_t>(cfg.max_objects)));
    std::vector<SceneObject> objects(count);
    for (SceneObject& o : objects) {
      o.shape = kShapes[static_cast<std::size_t>(rng.uniform_int(0, 2))];
      o.color = kColors[static_cast<std::size_t>(rng.uniform_int(0, 3))];
      o.size = rng.bernoulli(0.5) ? SizeClass::kBig : SizeClass::kSmall;
      o.extent = static_cast<std::size_t>(
          o.size == SizeClass::kBig
              ? rng.uniform_int(static_cast<std::int64_t>(cfg.big_min), static_cast<std::int64_t>(cfg.big_max))
              : rng.uniform_int(static_cast<std::int64_t>(cfg.small_min), static_cast<std::int64_t>(cfg.small_max)));
    }
    if (!detail::place_objects(objects, cfg, rng)) continue;
    for (SceneObject& o : objects) {
      o.mask = rasterize(o.shape, o.x, o.y, o.extent, n);
      o.x0 = n, o.y0 = n, o.x1 = 0, o.y1 = 0;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c)
          if (o.mask[r * n + c]) {
            o.x0 = std::min(o.x0, c), o.x1 = std::max(o.x1, c);
            o.y0 = std::min(o.y0, r), o.y1 = std::max(o.y1, r);
          }
    }
    const auto referent = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(count - 1)));
    std::optional<Expression> chosen;
    for (const Expression& e : candidate_expressions(objects[referent])) {
      const auto hits = resolve(e, objects, cfg.dead_zone);
      if (hits.size() == 1 && hits[0] == referent) {
        chosen = e;
        break;
      }
    }
    if (!chosen) continue;

    GroundingSample s;
    s.seed = seed;
    s.image.assign(n * n * 3, 0.0f);
    for (std::size_t p = 0; p < n * n; ++p)
      for (std::size_t ch = 0; ch < 3; ++ch) s.image[p * 3 + ch] = cfg.background[ch];
    for (const SceneObject& o : objects) {
      const auto col = rgb(o.color);
      for (std::size_t p = 0; p < n * n; ++p)
        if (o.mask[p])
          for (std::size_t ch = 0; ch < 3; ++ch) s.image[p * 3 + ch] = col[ch];
    }
    s.words = expression_words(*chosen);
    s.tokens = tokenize(s.words, cfg.max_text_len);
    s.mask = objects[referent].mask;
    s.box = mask_box(s.mask, n);
    s.objects = std::move(objects);
    s.referent = referent;
    return s;
  }
  throw GenerationError("generate_scene: no unambiguous expression after " + std::to_string(cfg.max_attempts) +
                        " attempts (seed " + std::to_string(seed) + ")");
}

/// Sample i of a dataset uses seed derive_seed(seed, i).
inline std::vector<GroundingSample> generate_dataset(std::uint64_t seed, std::size_t count,
                                                     const GeneratorConfig& cfg = {}) {
  std::vector<GroundingSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(derive_seed(seed, i), cfg));
  return out;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Deterministic 90/10 split; the validation part holds max(1, total/10) items.
inline Split dataset_split(std::size_t total, std::uint64_t seed) {
  if (total < 2) throw ContractError("dataset_split: need at least 2 samples");
  std::vector<std::size_t> perm(total);
  for (std::size_t i = 0; i < total; ++i) perm[i] = i;
  Philox rng(seed, 0x5e1f);
  for (std::size_t i = total - 1; i > 0; --i)
    std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  const std::size_t nval = std::max<std::size_t>(1, total / 10);
  Split s;
  s.val.assign(perm.begin(), perm.begin() + static_cast<long>(nval));
  s.train.assign(perm.begin() + static_cast<long>(nval), perm.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

}  // namespace refformer
