#pragma once

// Rank-compression baselines.
//
// Both rank-compression comparison methods are represented by a single
// scheme: the server truncates each expert's merged delta A*B to the client's
// rank with an SVD, and zero-pads the returned factors back up to the global
// rank before aggregation. The self-pruning regularizer and sparsity-weighted
// aggregation of the published methods are not modelled.
//
// The trivial baseline needs no code here: every client simply trains at the
// same small global rank.

#include <cstddef>
#include <string>
#include <vector>

#include "flame/errors.hpp"
#include "flame/federation_types.hpp"
#include "flame/numerics.hpp"

namespace flame {

enum class CompressionKind { trivial_global_small_rank, svd_truncate_to_client_rank };

struct CompressionScheme {
  CompressionKind kind = CompressionKind::svd_truncate_to_client_rank;
  std::vector<std::size_t> client_ranks;
};

/// Rank-`client_rank` pair whose scaled product is the best approximation of
/// the scaled global delta.
inline LoraPair compress_pair(const LoraPair& global, std::size_t client_rank) {
  global.validate();
  const std::size_t r_global = global.rank();
  if (client_rank < 1 || client_rank > r_global) {
    throw DomainError("compress_for_client: rank " + std::to_string(client_rank) + " outside [1, " + std::to_string(r_global) + "]");
  }
  const Matrix product = matmul(global.a, global.b);
  LowRankFactors f = svd_truncate(product, client_rank);
  // Keep alpha / r constant so (alpha_i / r_i) L R = (alpha / r) trunc(A B).
  const double alpha = global.alpha * static_cast<double>(client_rank) / static_cast<double>(r_global);
  return LoraPair{std::move(f.left), std::move(f.right), alpha};
}

inline std::vector<LoraPair> compress_for_client(const GlobalState& global, std::size_t client_rank) {
  std::vector<LoraPair> out;
  out.reserve(global.loras.size());
  for (const auto& pair : global.loras) out.push_back(compress_pair(pair, client_rank));
  return out;
}

/// Zero-pads a rank-r_i pair to `global_rank`; the merged delta is unchanged.
inline LoraPair decompress_update(const LoraPair& client_pair, std::size_t global_rank) {
  client_pair.validate();
  const std::size_t r = client_pair.rank();
  if (r > global_rank) {
    throw DomainError("decompress_update: client rank " + std::to_string(r) + " exceeds global rank " + std::to_string(global_rank));
  }
  if (r == global_rank) return client_pair;
  LoraPair out{Matrix(client_pair.a.rows(), global_rank), Matrix(global_rank, client_pair.b.cols()),
               r == 0 ? client_pair.alpha : client_pair.alpha * static_cast<double>(global_rank) / static_cast<double>(r)};
  for (std::size_t i = 0; i < client_pair.a.rows(); ++i)
    for (std::size_t k = 0; k < r; ++k) out.a(i, k) = client_pair.a(i, k);
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t j = 0; j < client_pair.b.cols(); ++j) out.b(k, j) = client_pair.b(k, j);
  return out;
}

inline std::vector<LoraPair> decompress_update(const std::vector<LoraPair>& pairs, std::size_t global_rank) {
  std::vector<LoraPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(decompress_update(p, global_rank));
  return out;
}

}  // namespace flame
