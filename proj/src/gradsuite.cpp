#include "nsfpn/gradsuite.hpp"

#include <algorithm>
#include <memory>

#include "nsfpn/lfp.hpp"
#include "nsfpn/model.hpp"
#include "nsfpn/sfs.hpp"
#include "nsfpn/train.hpp"
#include "nsfpn/wavelet.hpp"

namespace nsfpn {

namespace {

// Random projection of a tensor-valued output to a scalar.
Var project(Var out, Rng& rng) { return ops::weighted_sum(out, randn(out.shape(), rng)); }

Tensor4 binary_target(Shape s, Rng& rng) {
  Tensor4 t = rand_uniform(s, rng, 0.0, 1.0);
  for (double& v : t.vec()) v = v < 0.3 ? 1.0 : 0.0;
  return t;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Graph over leaves created from `inputs`; every build draws the same projection weights.
GradCheckResult check(std::uint64_t seed, const std::vector<Tensor4>& inputs, const Builder& body,
                      std::size_t max_per_param = 0) {
  auto store = std::make_shared<ParamStore>();
  for (std::size_t i = 0; i < inputs.size(); ++i) store->add("in" + std::to_string(i), inputs[i]);
  ScalarGraph fn = [store, body, seed](Tape& t) {
    std::vector<Var> vars;
    for (Param& p : *store) vars.push_back(t.param(p));
    Rng proj(seed ^ 0xabcdefULL);
    return project(body(t, vars), proj);
  };
  GradCheckOptions opt;
  opt.max_per_param = max_per_param;
  opt.seed = seed;
  return grad_check(fn, *store, opt);
}

Tensor4 rn(Shape s, Rng& rng, double sd = 1.0) { return randn(s, rng, sd); }

GradCase unary(const std::string& op, Var (*f)(Var)) {
  return {op, 1e-4, [f](std::uint64_t seed) {
            Rng rng(seed);
            return check(seed, {rn({2, 3, 4, 4}, rng, 1.5)}, [f](Tape&, const std::vector<Var>& v) { return f(v[0]); });
          }};
}

GradCase binary(const std::string& op, Var (*f)(Var, Var)) {
  return {op, 1e-4, [f](std::uint64_t seed) {
            Rng rng(seed);
            return check(seed, {rn({2, 3, 4, 4}, rng), rn({2, 3, 4, 4}, rng)},
                         [f](Tape&, const std::vector<Var>& v) { return f(v[0], v[1]); });
          }};
}

// Full-network cases share one construction per seed: parameters of a fresh model plus the
// image as an extra leaf; gates are recorded on the analytic pass and replayed afterwards.
GradCheckResult check_model(std::uint64_t seed, int size, bool with_head, std::size_t per_param) {
  model::NsFpnConfig cfg;
  auto net = std::make_shared<model::NsFpnModel>(cfg, seed);
  Rng rng(seed ^ 0x1234ULL);
  // Zero offsets put spiral points on pixel centres, where bilinear sampling has a kink.
  for (Param& p : net->params()) {
    if (p.name.ends_with(".eps")) p.value = rn(p.value.shape(), rng, 0.2);
    // The zero-initialized output projection would leave the other attention weights without gradient.
    if (p.name.ends_with(".attn.o.weight")) p.value = rn(p.value.shape(), rng, 0.125);
  }
  // A large constant logit offset (the foreground prior) only adds round-off to the differences.
  net->params().get("head.out.bias").value = rn({1, 1, 1, 1}, rng, 0.1);
  Param& image = net->params().add("image", rand_uniform({1, 1, size, size}, rng, 0.0, 1.0));
  auto cache = std::make_shared<lfp::GateCache>();
  ScalarGraph fn = [net, &image, cache, with_head, seed](Tape& t) {
    cache->rewind();
    Var x = t.param(image);
    Rng proj(seed ^ 0xabcdefULL);
    if (with_head) return project(net->forward(x, cache.get()), proj);
    const model::Pyramid y = net->nsfpn_forward(net->tiny_backbone(x), cache.get());
    Var total = project(y[0], proj);
    for (int i = 1; i < 4; ++i) total = ops::add(total, project(y[i], proj));
    return total;
  };
  GradCheckOptions opt;
  opt.max_per_param = per_param;
  opt.seed = seed;
  // Round-off dominates the central difference at 1e-5 through the whole network.
  opt.step = 1e-4;
  opt.noise_floor = 1e-8;
  // Parameters with identically zero gradient on the smallest levels: sigma where the detail bands
  // are 1x1 (a unit-sum kernel over one pixel) and the 7x7 attention taps that only ever see
  // padding when the low band is under 4x4. They stay covered by the single-module rows.
  for (int i = 1; i <= 4; ++i) {
    const int band = std::max(1, (size >> i) / 2);
    if (band == 1) opt.skip.push_back("lfp." + std::to_string(i) + ".sigma_raw");
    if (band < 4) opt.skip.push_back("lfp." + std::to_string(i) + ".attn.weight");
  }
  opt.after_analytic = [cache] { cache->freeze(); };
  return grad_check(fn, net->params(), opt);
}

}  // namespace

std::vector<GradCase> gradient_cases(bool with_model) {
  std::vector<GradCase> cases;
  cases.push_back({"scale", 1e-8, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({1, 1, 3, 3}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::sum(ops::scale(v[0], 3.0)); });
                   }});
  cases.push_back({"conv2d", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 5, 5}, rng), rn({4, 3, 3, 3}, rng, 0.3), rn({1, 4, 1, 1}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], 1, 1); });
                   }});
  cases.push_back({"conv2d_stride2", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({1, 2, 6, 6}, rng), rn({3, 2, 3, 3}, rng, 0.3), rn({1, 3, 1, 1}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], 2, 1); });
                   }});
  cases.push_back(binary("add", ops::add));
  cases.push_back(binary("sub", ops::sub));
  cases.push_back(binary("mul", ops::mul));
  cases.push_back({"mul_channel_broadcast", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 4, 4}, rng), rn({2, 1, 4, 4}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::mul_channel_broadcast(v[0], v[1]); });
                   }});
  cases.push_back(unary("sigmoid", ops::sigmoid));
  cases.push_back(unary("silu", ops::silu));
  cases.push_back(unary("softplus", ops::softplus));
  cases.push_back(unary("pool_channel_avg_max", ops::pool_channel_avg_max));
  cases.push_back({"select", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto mask = std::make_shared<std::vector<std::uint8_t>>(2 * 3 * 4 * 4);
                     for (auto& m : *mask) m = rng() % 2;
                     return check(seed, {rn({2, 3, 4, 4}, rng), rn({2, 3, 4, 4}, rng)},
                                  [mask](Tape&, const std::vector<Var>& v) { return ops::select(mask, v[0], v[1]); });
                   }});
  cases.push_back({"gaussian_kernel", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rand_uniform({1, 1, 1, 1}, rng, -1.0, 2.0)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::gaussian_kernel(v[0], 5); });
                   }});
  cases.push_back({"depthwise_conv_symmetric", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 6, 6}, rng), rn({1, 1, 3, 3}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::depthwise_conv_symmetric(v[0], v[1]); });
                   }});
  cases.push_back({"bilinear_sample", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 4, 5, 6}, rng), rand_uniform({2, 2, 7, 2}, rng, -0.95, 0.95)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::bilinear_sample(v[0], v[1]); });
                   }});
  cases.push_back({"to_tokens", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 4, 5}, rng)}, [](Tape&, const std::vector<Var>& v) {
                       return ops::from_tokens(ops::scale(ops::to_tokens(v[0]), 2.0), 4, 5);
                     });
                   }});
  cases.push_back({"linear", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 1, 5, 6}, rng), rn({1, 1, 4, 6}, rng), rn({1, 1, 1, 4}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); });
                   }});
  cases.push_back({"layer_norm", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({1, 1, 8, 16}, rng), rn({1, 1, 1, 16}, rng), rn({1, 1, 1, 16}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::layer_norm(v[0], v[1], v[2]); });
                   }});
  cases.push_back(unary("softmax", ops::softmax));
  cases.push_back({"attention", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 1, 5, 8}, rng), rn({2, 1, 6, 8}, rng), rn({2, 1, 6, 8}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return ops::attention(v[0], v[1], v[2], 2); });
                   }});
  cases.push_back(unary("upsample_nearest2x", ops::upsample_nearest2x));
  cases.push_back(unary("upsample_bilinear2x", ops::upsample_bilinear2x));
  cases.push_back({"sum", 1e-8, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 4, 4}, rng)}, [](Tape&, const std::vector<Var>& v) { return ops::sum(v[0]); });
                   }});
  cases.push_back({"mean", 1e-8, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 4, 4}, rng)}, [](Tape&, const std::vector<Var>& v) { return ops::mean(v[0]); });
                   }});
  cases.push_back({"bce_with_logits", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     const Tensor4 target = binary_target({2, 1, 6, 6}, rng);
                     return check(seed, {rn({2, 1, 6, 6}, rng, 2.0)}, [target](Tape&, const std::vector<Var>& v) {
                       return ops::bce_with_logits(v[0], target);
                     });
                   }});
  cases.push_back({"soft_iou_loss", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     const Tensor4 target = binary_target({2, 1, 6, 6}, rng);
                     return check(seed, {rn({2, 1, 6, 6}, rng, 2.0)}, [target](Tape&, const std::vector<Var>& v) {
                       return ops::soft_iou_loss(v[0], target);
                     });
                   }});
  cases.push_back({"dwt2", 1e-6, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 6, 8}, rng)}, [](Tape&, const std::vector<Var>& v) {
                       const wavelet::BandVars b = wavelet::dwt2(v[0]);
                       return ops::add(ops::add(b.ll, ops::scale(b.lh, 2.0)), ops::add(ops::scale(b.hl, -1.5), ops::scale(b.hh, 0.5)));
                     });
                   }});
  cases.push_back({"idwt2", 1e-6, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 3, 4}, rng), rn({2, 3, 3, 4}, rng), rn({2, 3, 3, 4}, rng), rn({2, 3, 3, 4}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return wavelet::idwt2({v[0], v[1], v[2], v[3]}); });
                   }});
  cases.push_back({"spatial_attention", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     return check(seed, {rn({2, 3, 6, 6}, rng), rn({1, 2, 7, 7}, rng, 0.2), rn({1, 1, 1, 1}, rng)},
                                  [](Tape&, const std::vector<Var>& v) { return lfp::spatial_attention(v[0], v[1], v[2]); });
                   }});
  cases.push_back({"modulate", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     const Shape s{2, 3, 4, 4};
                     return check(seed, {rn({2, 1, 4, 4}, rng), rn(s, rng), rn(s, rng), rn(s, rng), rn(s, rng)},
                                  [](Tape&, const std::vector<Var>& v) {
                                    const wavelet::BandVars m = lfp::modulate(v[0], {v[1], v[2], v[3], v[4]});
                                    return wavelet::idwt2(m);
                                  });
                   }});
  cases.push_back({"gated_gaussian", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     const Shape s{2, 3, 6, 6};
                     auto store = std::make_shared<ParamStore>();
                     for (int i = 0; i < 4; ++i) store->add("band" + std::to_string(i), rn(s, rng));
                     store->add("sigma_raw", Tensor4::scalar(0.5));
                     auto cache = std::make_shared<lfp::GateCache>();
                     ScalarGraph fn = [store, cache, seed](Tape& t) {
                       cache->rewind();
                       std::vector<Var> v;
                       for (Param& p : *store) v.push_back(t.param(p));
                       const lfp::LfpConfig cfg;
                       const wavelet::BandVars g =
                           lfp::gated_gaussian({v[0], v[1], v[2], v[3]}, ops::gaussian_kernel(v[4], cfg.kernel_size), cfg,
                                               cache.get());
                       Rng proj(seed ^ 0xabcdefULL);
                       return project(wavelet::idwt2(g), proj);
                     };
                     GradCheckOptions opt;
                     opt.seed = seed;
                     opt.after_analytic = [cache] { cache->freeze(); };
                     return grad_check(fn, *store, opt);
                   }});
  cases.push_back({"lfp_forward", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto store = std::make_shared<ParamStore>();
                     Param& x = store->add("x", rn({2, 4, 8, 8}, rng));
                     auto params = std::make_shared<lfp::LfpParams>(lfp::LfpParams::create(*store, "lfp", {}, rng));
                     auto cache = std::make_shared<lfp::GateCache>();
                     ScalarGraph fn = [store, params, cache, &x, seed](Tape& t) {
                       cache->rewind();
                       Rng proj(seed ^ 0xabcdefULL);
                       return project(lfp::lfp_forward(t.param(x), *params, cache.get()), proj);
                     };
                     GradCheckOptions opt;
                     opt.seed = seed;
                     opt.after_analytic = [cache] { cache->freeze(); };
                     return grad_check(fn, *store, opt);
                   }});
  cases.push_back({"sample_coords", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     sfs::SpiralConfig cfg;
                     cfg.heads = 2;
                     cfg.points = 3;
                     return check(seed, {rn({1, 2, 3, 2}, rng, 0.3)}, [cfg](Tape&, const std::vector<Var>& v) {
                       return sfs::sample_coords(v[0], cfg, 2, 6, 6);
                     });
                   }});
  cases.push_back({"sfs_sample", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     sfs::SpiralConfig cfg;
                     cfg.heads = 2;
                     cfg.points = 3;
                     return check(seed, {rn({2, 4, 6, 6}, rng), rn({1, 2, 3, 2}, rng, 0.3)},
                                  [cfg](Tape&, const std::vector<Var>& v) { return sfs::sfs_sample(v[0], v[1], cfg); });
                   }});
  cases.push_back({"mha_cross", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto store = std::make_shared<ParamStore>();
                     Param& q = store->add("q", rn({2, 1, 5, 8}, rng));
                     Param& kv = store->add("kv", rn({2, 1, 6, 8}, rng));
                     auto mha = std::make_shared<MhaParams>(MhaParams::create(*store, "mha", 8, 2, rng));
                     for (Param& p : *store) {
                       if (p.name.ends_with(".bias")) p.value = rn(p.value.shape(), rng, 0.3);
                     }
                     ScalarGraph fn = [store, mha, &q, &kv, seed](Tape& t) {
                       Rng proj(seed ^ 0xabcdefULL);
                       return project(mha_cross(t.param(q), t.param(kv), *mha), proj);
                     };
                     GradCheckOptions opt;
                     opt.seed = seed;
                     return grad_check(fn, *store, opt);
                   }});
  cases.push_back({"sfs_fuse", 1e-4, [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto store = std::make_shared<ParamStore>();
                     Param& x = store->add("x", rn({1, 8, 4, 4}, rng));
                     Param& y = store->add("y", rn({1, 8, 2, 2}, rng));
                     sfs::SpiralConfig cfg;
                     cfg.heads = 2;
                     cfg.points = 2;
                     cfg.grid_stride = 1;
                     auto params = std::make_shared<sfs::SfsParams>(sfs::SfsParams::create(*store, "sfs", 8, cfg, rng));
                     params->eps->value = rn(params->eps->value.shape(), rng, 0.2);
                     ScalarGraph fn = [store, params, &x, &y, seed](Tape& t) {
                       Rng proj(seed ^ 0xabcdefULL);
                       return project(sfs::sfs_fuse(t.param(x), t.param(y), *params), proj);
                     };
                     GradCheckOptions opt;
                     opt.seed = seed;
                     return grad_check(fn, *store, opt);
                   }});
  if (with_model) {
    cases.push_back({"nsfpn_forward", 1e-4, [](std::uint64_t seed) { return check_model(seed, 16, false, 3); }});
    cases.push_back({"seg_head", 1e-4, [](std::uint64_t seed) {
                       Rng rng(seed);
                       auto net = std::make_shared<model::NsFpnModel>(model::NsFpnConfig{}, seed);
                       Param& y1 = net->params().add("y1", rn({1, 64, 4, 4}, rng));
                       ScalarGraph fn = [net, &y1, seed](Tape& t) {
                         Rng proj(seed ^ 0xabcdefULL);
                         return project(net->seg_head(t.param(y1)), proj);
                       };
                       GradCheckOptions opt;
                       opt.seed = seed;
                       opt.max_per_param = 24;
                       return grad_check(fn, net->params(), opt);
                     }});
    cases.push_back({"model", 1e-4, [](std::uint64_t seed) { return check_model(seed, 16, true, 2); }});
  }
  return cases;
}

std::vector<GradRow> run_gradient_suite(std::uint64_t seed, bool with_model) {
  std::vector<GradRow> rows;
  for (const GradCase& c : gradient_cases(with_model)) {
    const GradCheckResult r = c.run(seed);
    rows.push_back({c.op, r.max_rel_error, c.tolerance, r.checked});
  }
  return rows;
}

}  // namespace nsfpn
