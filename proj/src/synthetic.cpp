#include "kalign/synthetic.hpp"

#include <string>

#include "kalign/error.hpp"

namespace kalign::synth {
namespace {

std::vector<std::string> item_ids(Index n) {
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids.push_back("item" + std::to_string(i));
  return ids;
}

EmbeddingSet make_set(Matrix data, const std::string& role, const CorpusOptions& o) {
  EmbeddingSet s;
  s.ids = item_ids(data.rows());
  s.data = std::move(data);
  s.meta = {{"encoder", "synthetic-" + role},
            {"seed", std::to_string(o.seed)},
            {"rank", std::to_string(o.rank)},
            {"noise", std::to_string(o.noise)}};
  return s;
}

void check(const CorpusOptions& o) {
  if (o.n < 2 || o.dim < 1 || o.rank < 0 || o.rank > o.dim || o.noise < 0.0) {
    throw ConfigError("synthetic corpus: need n >= 2, 0 <= rank <= dim, noise >= 0");
  }
}

struct Collapse {
  Matrix projector;
  Matrix rotation;
};

Collapse draw_collapse(const CorpusOptions& o, Rng& rng) {
  Collapse c;
  c.projector = random_projector(o.dim, o.rank, rng);
  c.rotation = random_rotation(o.dim, rng);
  return c;
}

Matrix collapse_rows(const Matrix& latent, const Collapse& c, double noise, Rng& rng) {
  const Matrix e = gaussian_matrix(latent.rows(), latent.cols(), rng);
  return (latent * c.projector.transpose() + noise * e) * c.rotation.transpose();
}

}  // namespace

Matrix gaussian_matrix(Index rows, Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

Matrix random_rotation(Index d, Rng& rng) {
  const Eigen::MatrixXd a = gaussian_matrix(d, d, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < d; ++j) {
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

Matrix random_projector(Index d, Index rank, Rng& rng) {
  const Matrix q = random_rotation(d, rng);
  const Eigen::MatrixXd basis = q.leftCols(rank);
  return basis * basis.transpose();
}

PairedEmbeddings detail_loss_corpus(const CorpusOptions& o) {
  check(o);
  Rng rng(o.seed);
  const Collapse c = draw_collapse(o, rng);
  Matrix target = gaussian_matrix(o.n, o.dim, rng);
  Matrix source = collapse_rows(target, c, o.noise, rng);
  return pair(make_set(std::move(source), "source", o), make_set(std::move(target), "target", o));
}

PairedEmbeddings nonlinear_corpus(const CorpusOptions& o) {
  check(o);
  Rng rng(o.seed);
  const Collapse c = draw_collapse(o, rng);
  const Matrix latent = gaussian_matrix(o.n, o.dim, rng);
  Matrix source = collapse_rows(latent, c, o.noise, rng);
  Matrix target = (o.gain * latent.array()).tanh().matrix();
  return pair(make_set(std::move(source), "source", o), make_set(std::move(target), "target", o));
}

LabelledCorpus labelled_corpus(const CorpusOptions& o, Index classes) {
  check(o);
  if (classes < 2) throw ConfigError("labelled corpus needs >= 2 classes");
  Rng rng(o.seed);
  const Collapse c = draw_collapse(o, rng);
  const Matrix means = 2.0 * gaussian_matrix(classes, o.dim, rng);
  std::vector<std::int64_t> labels(static_cast<std::size_t>(o.n));
  Matrix latent = gaussian_matrix(o.n, o.dim, rng);
  for (Index i = 0; i < o.n; ++i) {
    labels[i] = static_cast<std::int64_t>(uniform_below(rng, static_cast<std::uint64_t>(classes)));
    latent.row(i) += means.row(labels[i]);
  }
  Matrix source = collapse_rows(latent, c, o.noise, rng);

  LabelledCorpus out;
  auto src = make_set(std::move(source), "source", o);
  auto tgt = make_set(std::move(latent), "target", o);
  src.labels = labels;
  tgt.labels = labels;
  out.paired = pair(std::move(src), std::move(tgt));
  out.anchors.data = means * c.projector.transpose() * c.rotation.transpose();
  std::vector<std::string> names;
  for (Index k = 0; k < classes; ++k) names.push_back("class" + std::to_string(k));
  out.anchors.ids = names;
  out.anchors.meta = {{"encoder", "synthetic-anchors"}, {"seed", std::to_string(o.seed)}};
  return out;
}

}  // namespace kalign::synth
