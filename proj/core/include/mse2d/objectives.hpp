#pragma once

#include <cstddef>
#include <vector>

#include "mse2d/tensor.hpp"

namespace mse2d {

inline constexpr double kDefaultTau = 0.05;

enum class SupervisionKind { pair_score, triplet, in_batch_positives };

// The auxiliary information a base loss consumes, expressed as row indices
// into the batch's embedding matrix.
struct SupervisionInfo {
  SupervisionKind kind = SupervisionKind::in_batch_positives;
  std::vector<std::size_t> anchors;
  std::vector<std::size_t> positives;  // positives[i] belongs to anchors[i]; second sentence for pair_score
  std::vector<std::size_t> negatives;  // triplet only; negatives[i] belongs to anchors[i]
  std::vector<double> scores;          // pair_score only, gold similarity in [0, 1]

  // Throws InputError unless the mapping is consistent with `rows` embeddings.
  void validate(std::size_t rows) const;
};

// InfoNCE over in-batch positives (plus explicit negatives for triplets),
// mean-reduced over anchors:
//   -log exp(cos(a_i, p_i)/tau) / sum_j exp(cos(a_i, c_j)/tau)
// where c ranges over all positives (and negatives).
Tensor contrastive_loss(const Tensor& embeddings, const SupervisionInfo& info, double tau = kDefaultTau);

// Mean squared error between (cos(a_i, b_i) + 1) / 2 and gold[i].
Tensor pair_cosine_loss(const Tensor& emb_a, const Tensor& emb_b, const std::vector<double>& gold);

// Dispatches on info.kind: pair_score -> pair_cosine_loss, otherwise
// contrastive_loss.
Tensor base_loss(const Tensor& embeddings, const SupervisionInfo& info, double tau = kDefaultTau);

// Row i: softmax over j != i of cos(x_i, x_j) / tau. Diagonal is exactly 0.
Tensor similarity_distribution(const Tensor& embeddings, double tau = kDefaultTau);

// Mean over rows of KL(q_i || p_i), q from the student, p from the teacher.
// The teacher is detached: no gradient reaches teacher_emb.
Tensor kl_alignment_loss(const Tensor& student_emb, const Tensor& teacher_emb, double tau = kDefaultTau);

}  // namespace mse2d
