#pragma once

#include "kalign/embedding_store.hpp"
#include "kalign/rng.hpp"
#include "kalign/types.hpp"

namespace kalign::synth {

Matrix gaussian_matrix(Index rows, Index cols, Rng& rng);

/// Haar-distributed orthogonal d x d matrix (QR of a Gaussian, signs fixed).
Matrix random_rotation(Index d, Rng& rng);

/// Orthogonal projector onto a uniformly random rank-r subspace of R^d.
Matrix random_projector(Index d, Index rank, Rng& rng);

struct CorpusOptions {
  Index n = 256;
  Index dim = 16;
  Index rank = 8;
  double noise = 0.05;
  double gain = 2.0;  // nonlinear corpus: target = tanh(gain * z)
  std::uint64_t seed = 0;
};

/// Target rows g ~ N(0, I); source rows Q (P g + noise * e) with P a random
/// rank-r projector and Q a random rotation. The source keeps the coarse
/// geometry of the target and loses the detail outside P's range.
PairedEmbeddings detail_loss_corpus(const CorpusOptions& options);

/// Same source construction from a latent z; the target is tanh(gain z), so the
/// two spaces are not related by any linear map.
PairedEmbeddings nonlinear_corpus(const CorpusOptions& options);

/// Labelled variant for the evaluation commands: latent rows are drawn
/// around `classes` random means; anchors are the class means mapped into
/// the source space.
struct LabelledCorpus {
  PairedEmbeddings paired;
  EmbeddingSet anchors;
};

LabelledCorpus labelled_corpus(const CorpusOptions& options, Index classes);

}  // namespace kalign::synth
