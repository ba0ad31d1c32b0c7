#pragma once

#include <string>

#include "nsfpn/ops.hpp"

namespace nsfpn {

/// Projection set of a multi-head cross attention: Wq, Wk, Wv, Wo (each C x C). Q, V and the
/// output carry biases; a key bias only shifts every logit of a query equally, so K has none.
struct MhaParams {
  int channels = 0;
  int heads = 1;
  Param* wq = nullptr;
  Param* bq = nullptr;
  Param* wk = nullptr;
  Param* wv = nullptr;
  Param* bv = nullptr;
  Param* wo = nullptr;
  Param* bo = nullptr;

  /// Throws std::invalid_argument unless channels is divisible by heads.
  static MhaParams create(ParamStore& store, const std::string& prefix, int channels, int heads,
                          Rng& rng);
};

/// Wo * concat_h(softmax(Q_h K_h^T / sqrt(C/H)) V_h) + bo with Q = queries Wq^T + bq,
/// K = keyvalues Wk^T and V = keyvalues Wv^T + bv. queries: B x 1 x Nq x C, keyvalues: B x 1 x Nk x C.
Var mha_cross(Var queries, Var keyvalues, const MhaParams& params);

}  // namespace nsfpn
