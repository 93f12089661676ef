#include "mse2d/objectives.hpp"

#include <cmath>
#include <cstdint>
#include <set>
#include <string>

#include "mse2d/errors.hpp"
#include "mse2d/ops.hpp"

namespace mse2d {

namespace {

void require_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InputError("temperature tau must be positive");
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + ": expected [batch x dim], got " + shape_to_string(t.shape()));
}

std::vector<std::uint8_t> off_diagonal_mask(std::size_t n) {
  std::vector<std::uint8_t> keep(n * n, 1);
  for (std::size_t i = 0; i < n; ++i) keep[i * n + i] = 0;
  return keep;
}

}  // namespace

void SupervisionInfo::validate(std::size_t rows) const {
  if (anchors.empty()) throw InputError("supervision: no anchors");
  if (positives.size() != anchors.size()) {
    throw InputError("supervision: " + std::to_string(anchors.size()) + " anchors but " +
                     std::to_string(positives.size()) + " positives; every anchor needs exactly one positive");
  }
  auto check_rows = [rows](const std::vector<std::size_t>& idx, const char* what) {
    for (std::size_t r : idx) {
      if (r >= rows) throw InputError(std::string("supervision: ") + what + " row " + std::to_string(r) + " out of range");
    }
  };
  check_rows(anchors, "anchor");
  check_rows(positives, "positive");
  check_rows(negatives, "negative");
  switch (kind) {
    case SupervisionKind::pair_score:
      if (scores.size() != anchors.size()) throw InputError("supervision: pair_score needs one score per pair");
      for (double s : scores) {
        if (!std::isfinite(s)) throw InputError("supervision: non-finite gold score");
      }
      break;
    case SupervisionKind::triplet:
      if (negatives.size() != anchors.size()) throw InputError("supervision: triplet needs one negative per anchor");
      [[fallthrough]];
    case SupervisionKind::in_batch_positives: {
      if (anchors.size() < 2 && kind == SupervisionKind::in_batch_positives) {
        throw InputError("supervision: in-batch positives need at least 2 anchors");
      }
      std::set<std::size_t> seen(positives.begin(), positives.end());
      if (seen.size() != positives.size()) throw InputError("supervision: positive mapping is not injective");
      break;
    }
  }
}

Tensor contrastive_loss(const Tensor& embeddings, const SupervisionInfo& info, double tau) {
  require_matrix(embeddings, "contrastive_loss");
  require_tau(tau);
  if (info.kind == SupervisionKind::pair_score) throw InputError("contrastive_loss: pair_score supervision");
  info.validate(embeddings.dim(0));
  Tensor anchors = ops::gather_rows(embeddings, info.anchors);
  Tensor candidates = ops::gather_rows(embeddings, info.positives);
  if (info.kind == SupervisionKind::triplet) {
    candidates = ops::concat({candidates, ops::gather_rows(embeddings, info.negatives)}, 0);
  }
  Tensor logits = ops::scale(ops::cosine_matrix(anchors, candidates), 1.0 / tau);
  std::vector<std::size_t> target(info.anchors.size());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = i;
  Tensor log_probs = ops::take_per_row(ops::log_softmax(logits, 1), target);
  return ops::scale(ops::mean(log_probs), -1.0);
}

Tensor pair_cosine_loss(const Tensor& emb_a, const Tensor& emb_b, const std::vector<double>& gold) {
  require_matrix(emb_a, "pair_cosine_loss");
  require_matrix(emb_b, "pair_cosine_loss");
  if (emb_a.shape() != emb_b.shape()) {
    throw DimensionError("pair_cosine_loss: " + shape_to_string(emb_a.shape()) + " vs " + shape_to_string(emb_b.shape()));
  }
  if (gold.size() != emb_a.dim(0)) throw DimensionError("pair_cosine_loss: one gold score per pair required");
  Tensor predicted = ops::add_scalar(ops::scale(ops::cosine_similarity(emb_a, emb_b), 0.5), 0.5);
  Tensor diff = ops::sub(predicted, Tensor({gold.size()}, gold));
  return ops::mean(ops::mul(diff, diff));
}

Tensor base_loss(const Tensor& embeddings, const SupervisionInfo& info, double tau) {
  if (info.kind == SupervisionKind::pair_score) {
    info.validate(embeddings.dim(0));
    return pair_cosine_loss(ops::gather_rows(embeddings, info.anchors), ops::gather_rows(embeddings, info.positives),
                            info.scores);
  }
  return contrastive_loss(embeddings, info, tau);
}

Tensor similarity_distribution(const Tensor& embeddings, double tau) {
  require_matrix(embeddings, "similarity_distribution");
  require_tau(tau);
  const std::size_t n = embeddings.dim(0);
  if (n < 2) throw InputError("similarity_distribution: batch must hold at least 2 rows");
  const auto keep = off_diagonal_mask(n);
  return ops::softmax(ops::scale(ops::cosine_matrix(embeddings, embeddings), 1.0 / tau), 1, keep);
}

Tensor kl_alignment_loss(const Tensor& student_emb, const Tensor& teacher_emb, double tau) {
  require_matrix(student_emb, "kl_alignment_loss");
  require_matrix(teacher_emb, "kl_alignment_loss");
  if (student_emb.shape() != teacher_emb.shape()) {
    throw DimensionError("kl_alignment_loss: student " + shape_to_string(student_emb.shape()) + " vs teacher " +
                         shape_to_string(teacher_emb.shape()));
  }
  require_tau(tau);
  const std::size_t n = student_emb.dim(0);
  if (n < 2) throw InputError("kl_alignment_loss: batch must hold at least 2 rows");
  const auto keep = off_diagonal_mask(n);
  Tensor student_logits = ops::scale(ops::cosine_matrix(student_emb, student_emb), 1.0 / tau);
  const Tensor teacher = teacher_emb.detach();
  Tensor teacher_logits = ops::scale(ops::cosine_matrix(teacher, teacher), 1.0 / tau);
  Tensor log_q = ops::log_softmax(student_logits, 1, keep);
  Tensor q = ops::softmax(student_logits, 1, keep);
  Tensor log_p = ops::log_softmax(teacher_logits, 1, keep);
  return ops::scale(ops::sum(ops::mul(q, ops::sub(log_q, log_p))), 1.0 / static_cast<double>(n));
}

}  // namespace mse2d
