#include "nsfpn/attention.hpp"

#include <cmath>

namespace nsfpn {

MhaParams MhaParams::create(ParamStore& store, const std::string& prefix, int channels, int heads,
                            Rng& rng) {
  if (heads < 1 || channels < 1 || channels % heads != 0) {
    throw std::invalid_argument("mha: channels " + std::to_string(channels) +
                                " not divisible by heads " + std::to_string(heads));
  }
  MhaParams p;
  p.channels = channels;
  p.heads = heads;
  const double sd = 1.0 / std::sqrt(static_cast<double>(channels));
  auto proj = [&](const char* name, Param*& w, Param** b) {
    w = &store.add(prefix + "." + name + ".weight", randn(Shape{1, 1, channels, channels}, rng, sd));
    if (b != nullptr) *b = &store.add(prefix + "." + name + ".bias", Tensor4(Shape{1, 1, 1, channels}));
  };
  proj("q", p.wq, &p.bq);
  proj("k", p.wk, nullptr);
  proj("v", p.wv, &p.bv);
  proj("o", p.wo, &p.bo);
  return p;
}

Var mha_cross(Var queries, Var keyvalues, const MhaParams& params) {
  if (queries.shape().w != params.channels || keyvalues.shape().w != params.channels) {
    throw ShapeError("mha_cross: token width must be " + std::to_string(params.channels) +
                     ", got queries " + queries.shape().str() + " and keys " +
                     keyvalues.shape().str());
  }
  if (keyvalues.shape().h < 1) throw ShapeError("mha_cross: empty key set");
  Tape& t = queries.tape();
  Var q = ops::linear(queries, t.param(*params.wq), t.param(*params.bq));
  Var k = ops::linear(keyvalues, t.param(*params.wk), t.constant(Tensor4(Shape{1, 1, 1, params.channels})));
  Var v = ops::linear(keyvalues, t.param(*params.wv), t.param(*params.bv));
  Var o = ops::attention(q, k, v, params.heads);
  return ops::linear(o, t.param(*params.wo), t.param(*params.bo));
}

}  // namespace nsfpn
