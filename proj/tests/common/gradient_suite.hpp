#pragma once

// Finite-difference checks for every differentiable primitive (float64) and
// for the full training objective (float32 tape against a float64
// central-difference oracle on the same parameters). Shared by the unit
// tests and the acceptance driver.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refformer/boxes.hpp"
#include "refformer/grad_check.hpp"
#include "refformer/losses.hpp"
#include "refformer/rng.hpp"
#include "refformer/train.hpp"

namespace refformer::testing {

struct OpGradResult {
  std::string name;
  std::size_t probes = 0;
  double max_rel_error = 0.0;
};

template <class T>
Tensor<T> random_tensor(const Shape& s, Philox& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(s));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(s, std::move(v));
}

/// Values with |x| in [margin, 1]: keeps kinks of relu/abs/clamp out of reach of the step.
inline Tensor<double> away_from_zero(const Shape& s, Philox& rng, double margin = 0.1) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(margin, 1.0);
  return Tensor<double>(s, std::move(v));
}

namespace detail {

using Inputs = std::vector<Tensor<double>>;
using MultiFn = std::function<Tensor<double>(const Inputs&)>;

/// Checks every coordinate of every input whose flag is set.
inline void check_all(OpGradResult& r, const MultiFn& f, Inputs inputs, const std::vector<bool>& differentiable,
                      double step = 1e-6) {
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i] = inputs[i].detach();
    inputs[i].set_requires_grad(differentiable[i]);
  }
  std::vector<GradProbe<double>> probes;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (differentiable[i])
      for (std::size_t j = 0; j < inputs[i].numel(); ++j) probes.push_back({inputs[i], j});
  const GradCheckReport rep = grad_check_probes<double>([&] { return f(inputs); }, probes, step);
  r.probes += probes.size();
  r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
}

}  // namespace detail

/// Runs `trials` random instances of every differentiable primitive.
inline std::vector<OpGradResult> primitive_gradient_suite(std::uint64_t seed, std::size_t trials = 20) {
  using detail::check_all;
  using detail::Inputs;
  std::vector<OpGradResult> out;
  Philox rng(seed, 0x6a4d);

  auto run = [&](const std::string& name, auto&& body) {
    OpGradResult r{name};
    for (std::size_t t = 0; t < trials; ++t) body(r);
    out.push_back(r);
  };
  auto unary = [&](const std::string& name, auto op, auto make) {
    run(name, [&](OpGradResult& r) {
      const Tensor<double> x = make();
      const Tensor<double> w = random_tensor<double>(op(x).shape(), rng);
      check_all(r, [&](const Inputs& in) { return sum(mul(op(in[0]), w)); }, {x}, {true});
    });
  };
  auto binary = [&](const std::string& name, auto op, auto make_a, auto make_b) {
    run(name, [&](OpGradResult& r) {
      const Tensor<double> a = make_a(), b = make_b();
      const Tensor<double> w = random_tensor<double>(op(a, b).shape(), rng);
      check_all(r, [&](const Inputs& in) { return sum(mul(op(in[0], in[1]), w)); }, {a, b}, {true, true});
    });
  };
  const Shape s23{2, 3};
  auto plain = [&] { return random_tensor<double>(s23, rng); };
  auto kinked = [&] { return away_from_zero(s23, rng); };
  auto positive = [&] { return random_tensor<double>(s23, rng, 0.5, 2.0); };
  auto row = [&] { return random_tensor<double>({3}, rng); };

  binary("add", [](auto& a, auto& b) { return add(a, b); }, plain, plain);
  binary("add_broadcast", [](auto& a, auto& b) { return add(a, b); }, plain, row);
  binary("sub", [](auto& a, auto& b) { return sub(a, b); }, plain, row);
  binary("mul", [](auto& a, auto& b) { return mul(a, b); }, plain, plain);
  binary("div", [](auto& a, auto& b) { return div(a, b); }, plain, positive);
  run("minimum", [&](OpGradResult& r) {
    const Tensor<double> a = plain(), gap = away_from_zero(s23, rng);
    const Tensor<double> b = add(a.detach(), gap);
    const Tensor<double> w = random_tensor<double>(s23, rng);
    check_all(r, [&](const Inputs& in) { return sum(mul(minimum(in[0], in[1]), w)); }, {a, b}, {true, true});
  });
  run("maximum", [&](OpGradResult& r) {
    const Tensor<double> a = plain(), gap = away_from_zero(s23, rng);
    const Tensor<double> b = add(a.detach(), gap);
    const Tensor<double> w = random_tensor<double>(s23, rng);
    check_all(r, [&](const Inputs& in) { return sum(mul(maximum(in[0], in[1]), w)); }, {a, b}, {true, true});
  });

  unary("neg", [](auto& x) { return neg(x); }, plain);
  unary("scale", [](auto& x) { return scale(x, 1.7); }, plain);
  unary("add_scalar", [](auto& x) { return add_scalar(x, -0.3); }, plain);
  unary("exp", [](auto& x) { return exp(x); }, plain);
  unary("log", [](auto& x) { return log(x); }, positive);
  unary("sqrt", [](auto& x) { return sqrt(x); }, positive);
  unary("square", [](auto& x) { return square(x); }, plain);
  unary("abs", [](auto& x) { return abs(x); }, kinked);
  unary("sigmoid", [](auto& x) { return sigmoid(x); }, [&] { return random_tensor<double>(s23, rng, -4, 4); });
  unary("tanh", [](auto& x) { return tanh(x); }, plain);
  unary("relu", [](auto& x) { return relu(x); }, kinked);
  unary("gelu", [](auto& x) { return gelu(x); }, [&] { return random_tensor<double>(s23, rng, -3, 3); });
  unary("clamp", [](auto& x) { return clamp(x, -0.05, 0.05); }, kinked);
  unary("sum", [](auto& x) { return sum(x); }, plain);
  unary("mean", [](auto& x) { return mean(x); }, plain);
  unary("sum_last", [](auto& x) { return sum_last(x); }, plain);
  unary("mean_last", [](auto& x) { return mean_last(x); }, plain);
  unary("softmax_last", [](auto& x) { return softmax(x, -1); }, [&] { return random_tensor<double>({2, 3, 4}, rng, -3, 3); });
  unary("softmax_axis0", [](auto& x) { return softmax(x, 0); }, [&] { return random_tensor<double>({3, 4}, rng, -3, 3); });
  unary("reshape", [](auto& x) { return reshape(x, Shape{3, 2}); }, plain);
  unary("slice", [](auto& x) { return slice(x, 1, 1, 3); }, plain);
  unary("broadcast_to", [](auto& x) { return broadcast_to(x, Shape{2, 4, 3}); },
        [&] { return random_tensor<double>({2, 1, 3}, rng); });
  unary("index_select", [](auto& x) { return index_select(x, {2, 0, 2}); },
        [&] { return random_tensor<double>({3, 2, 2}, rng); });
  unary("upsample_bilinear", [](auto& x) { return upsample(x, 5, 7, UpsampleMode::kBilinear); },
        [&] { return random_tensor<double>({2, 3, 2}, rng); });
  unary("upsample_nearest", [](auto& x) { return upsample(x, 6, 4, UpsampleMode::kNearest); },
        [&] { return random_tensor<double>({2, 3, 2}, rng); });

  binary("matmul", [](auto& a, auto& b) { return matmul(a, b); },
         [&] { return random_tensor<double>({2, 3, 4}, rng); }, [&] { return random_tensor<double>({4, 2}, rng); });
  binary("matmul_nt", [](auto& a, auto& b) { return matmul_nt(a, b); },
         [&] { return random_tensor<double>({2, 3, 4}, rng); }, [&] { return random_tensor<double>({2, 5, 4}, rng); });
  binary("concat", [](auto& a, auto& b) { return concat<double>({a, b}, 1); },
         [&] { return random_tensor<double>({2, 3}, rng); }, [&] { return random_tensor<double>({2, 5}, rng); });

  run("layer_norm", [&](OpGradResult& r) {
    const Tensor<double> x = random_tensor<double>({3, 5}, rng, -2, 2);
    const Tensor<double> g = random_tensor<double>({5}, rng, 0.5, 1.5), b = random_tensor<double>({5}, rng);
    const Tensor<double> w = random_tensor<double>({3, 5}, rng);
    check_all(r, [&](const Inputs& in) { return sum(mul(layer_norm(in[0], in[1], in[2]), w)); }, {x, g, b},
              {true, true, true});
  });
  run("attention", [&](OpGradResult& r) {
    const Tensor<double> q = random_tensor<double>({2, 3, 4}, rng), k = random_tensor<double>({2, 5, 4}, rng);
    const Tensor<double> v = random_tensor<double>({2, 5, 6}, rng);
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1, 0, 1, 1, 1};
    const Tensor<double> w = random_tensor<double>({2, 3, 6}, rng);
    check_all(r, [&](const Inputs& in) { return sum(mul(attention(in[0], in[1], in[2], 2, &mask), w)); }, {q, k, v},
              {true, true, true});
  });
  run("giou_tensor", [&](OpGradResult& r) {
    auto boxes = [&] {
      std::vector<double> v;
      for (int i = 0; i < 3; ++i)
        for (double x : {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)})
          v.push_back(x);
      return Tensor<double>({3, 4}, v);
    };
    const Tensor<double> a = boxes(), b = boxes();
    const Tensor<double> w = random_tensor<double>({3, 1}, rng);
    check_all(r, [&](const Inputs& in) { return sum(mul(giou_tensor(in[0], in[1]), w)); }, {a, b}, {true, true},
              1e-5);
  });
  run("focal_loss", [&](OpGradResult& r) {
    const Tensor<double> p = random_tensor<double>({2, 3, 3}, rng, 0.05, 0.95);
    std::vector<double> g(18);
    for (auto& x : g) x = rng.bernoulli(0.4) ? 1.0 : 0.0;
    const Tensor<double> gt({2, 3, 3}, g);
    check_all(r, [&](const Inputs& in) { return focal_loss(in[0], in[1]); }, {p, gt}, {true, false});
  });
  run("dice_loss", [&](OpGradResult& r) {
    const Tensor<double> p = random_tensor<double>({2, 3, 3}, rng, 0.05, 0.95);
    std::vector<double> g(18);
    for (auto& x : g) x = rng.bernoulli(0.4) ? 1.0 : 0.0;
    const Tensor<double> gt({2, 3, 3}, g);
    check_all(r, [&](const Inputs& in) { return dice_loss(in[0], in[1]); }, {p, gt}, {true, false});
  });
  run("contrastive_loss", [&](OpGradResult& r) {
    const Tensor<double> a = random_tensor<double>({4, 5}, rng), b = random_tensor<double>({4, 5}, rng);
    check_all(r, [&](const Inputs& in) { return contrastive_loss(in[0], in[1], 0.1); }, {a, b}, {true, true});
  });
  run("detection_loss", [&](OpGradResult& r) {
    const Tensor<double> boxes = random_tensor<double>({2, 3, 4}, rng, 0.2, 0.6);
    const Tensor<double> logits = random_tensor<double>({2, 3, 2}, rng, -2, 2);
    const std::vector<std::vector<Box>> targets{{{0.4, 0.5, 0.3, 0.2}}, {{0.6, 0.3, 0.2, 0.3}}};
    check_all(r, [&](const Inputs& in) { return detection_loss(in[0], in[1], targets, LossWeights{}).total; },
              {boxes, logits}, {true, true});
  });
  return out;
}

/// Float32 tape gradients of L_final for randomly chosen parameters of a
/// small model, against central differences of the identical parameters
/// evaluated in float64. Probes are drawn among coordinates whose gradient
/// is non-negligible (|g| >= 1e-4) so the relative metric is meaningful.
struct EndToEndResult {
  std::size_t probes = 0;
  double max_rel_error = 0.0;
};

inline ModelConfig small_model_config(bool seg_head) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.width = 32;
  c.layers = 4;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.qa_layers = {2, 4};
  c.qa_width = 16;
  c.qa_heads = 2;
  c.fusion_layers = {2, 4};
  c.decoder_heads = 2;
  c.seg_head = seg_head;
  return c;
}

template <class To, class From>
void copy_model(RefFormerModel<To>& dst, RefFormerModel<From>& src) {
  auto d = dst.named_parameters();
  auto s = src.named_parameters();
  if (d.size() != s.size()) throw ContractError("copy_model: parameter tables differ");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i].first != s[i].first) throw ContractError("copy_model: parameter order differs");
    auto out = d[i].second.mutable_data();
    const auto in = s[i].second.data();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<To>(in[j]);
  }
}

inline std::vector<GroundingSample> small_samples(std::uint64_t seed, std::size_t n, std::size_t image_size) {
  GeneratorConfig g;
  g.image_size = image_size;
  g.big_min = 10;
  g.big_max = 12;
  g.small_min = 5;
  g.small_max = 7;
  return generate_dataset(seed, n, g);
}

inline EndToEndResult end_to_end_float32_check(std::uint64_t seed, std::size_t probes = 20, bool seg_head = true) {
  const ModelConfig cfg = small_model_config(seg_head);
  const auto samples = small_samples(seed, 4, cfg.image_size);
  RefFormerModel<float> m32(cfg);
  RefFormerModel<double> m64(cfg);
  copy_model(m64, m32);
  m32.backbone.freeze();
  m64.backbone.freeze();
  const auto d32 = prepare<float>(samples, cfg);
  const auto d64 = prepare<double>(samples, cfg);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const Batch<float> b32 = make_batch(d32, idx, cfg, seg_head);
  const Batch<double> b64 = make_batch(d64, idx, cfg, seg_head);
  const LossWeights w;

  auto params32 = m32.named_parameters();
  auto params64 = m64.named_parameters();
  for (auto& [n, t] : params32) t.zero_grad();
  {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    tape.backward(final_loss(m32.forward(b32.patches, b32.tokens), b32, w).total);
  }
  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t p = 0; p < params32.size(); ++p) {
    if (!params32[p].second.has_grad()) continue;
    const auto g = params32[p].second.grad();
    for (std::size_t j = 0; j < g.size(); ++j)
      if (std::abs(g[j]) >= 1e-4f) candidates.emplace_back(p, j);
  }
  if (candidates.size() < probes) throw ContractError("end_to_end_float32_check: too few live coordinates");
  Philox rng(seed, 0xe2e);
  EndToEndResult r;
  NoGradScope<double> no_grad;
  for (std::size_t k = 0; k < probes; ++k) {
    const auto [p, j] = candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(candidates.size() - 1)))];
    const double analytic = params32[p].second.grad()[j];
    double& slot = params64[p].second.mutable_data()[j];
    const double original = slot, h = 1e-6;
    slot = original + h;
    const double plus = final_loss(m64.forward(b64.patches, b64.tokens), b64, w).total.item();
    slot = original - h;
    const double minus = final_loss(m64.forward(b64.patches, b64.tokens), b64, w).total.item();
    slot = original;
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic, (plus - minus) / (2 * h), 1e-6));
    ++r.probes;
  }
  for (auto& [n, t] : params32) t.zero_grad();
  return r;
}

/// Float64 variant: tape against central differences in float64.
inline EndToEndResult end_to_end_float64_check(std::uint64_t seed, std::size_t probes = 20, bool seg_head = true) {
  const ModelConfig cfg = small_model_config(seg_head);
  const auto samples = small_samples(seed, 4, cfg.image_size);
  RefFormerModel<double> m(cfg);
  m.backbone.freeze();
  const auto data = prepare<double>(samples, cfg);
  const Batch<double> b = make_batch(data, {0, 1, 2, 3}, cfg, seg_head);
  auto params = m.named_parameters();
  Philox rng(seed, 0xe2f);
  std::vector<GradProbe<double>> gp;
  std::vector<std::size_t> trainable;
  for (std::size_t p = 0; p < params.size(); ++p)
    if (params[p].second.requires_grad()) trainable.push_back(p);
  for (std::size_t k = 0; k < probes; ++k) {
    const std::size_t p = trainable[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(trainable.size() - 1)))];
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(params[p].second.numel() - 1)));
    gp.push_back({params[p].second, j});
  }
  const auto rep = grad_check_probes<double>(
      [&] { return final_loss(m.forward(b.patches, b.tokens), b, LossWeights{}).total; }, gp, 1e-6, 1e-7);
  return {gp.size(), rep.max_rel_error};
}

}  // namespace refformer::testing
