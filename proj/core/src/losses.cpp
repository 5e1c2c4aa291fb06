#include "metricforge/losses.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <string>

#include "metricforge/errors.hpp"

namespace metricforge {

namespace {

// 1-D tensors are treated as a single row.
Tensor as_rows(const Tensor& t) {
  if (t.rank() == 1) return reshape(t, Shape{1, t.dim(0)});
  if (t.rank() != 2) throw ShapeError("loss: expected a vector or a matrix of row vectors, got " + shape_to_string(t.shape()));
  return t;
}

Tensor squared_distance_rows(const Tensor& x, const Tensor& y) { return row_sum(square(x - y)); }

void require_same_rows(const Tensor& a, const Tensor& b, const Tensor& c, const char* op) {
  if (a.shape() != b.shape() || a.shape() != c.shape()) {
    throw ShapeError(std::string(op) + ": inputs differ in shape " + shape_to_string(a.shape()) + ", " +
                     shape_to_string(b.shape()) + ", " + shape_to_string(c.shape()));
  }
}

}  // namespace

void LossWeights::validate() const {
  if (lambda_npair < 0 || lambda_soft < 0 || lambda_tri < 0 || lambda_ang < 0) {
    throw ContractError("loss weights must be non-negative");
  }
  if (!(triplet_margin >= 0)) throw ContractError("triplet margin must be non-negative");
  if (!(angular_alpha_deg > 0 && angular_alpha_deg < 90)) {
    throw ContractError("angular alpha must lie strictly between 0 and 90 degrees");
  }
}

Tensor triplet_loss(const Tensor& a, const Tensor& p, const Tensor& n, double margin) {
  const Tensor ra = as_rows(a), rp = as_rows(p), rn = as_rows(n);
  require_same_rows(ra, rp, rn, "triplet_loss");
  const Tensor pre = squared_distance_rows(ra, rp) - squared_distance_rows(ra, rn);
  return mean(relu(pre + margin));
}

Tensor tuplet_loss(const Tensor& f, const Tensor& f_pos, const Tensor& negatives) {
  const Tensor anchor = as_rows(f);
  const Tensor positive = as_rows(f_pos);
  const Tensor negs = as_rows(negatives);
  if (anchor.dim(0) != 1 || positive.dim(0) != 1) throw ShapeError("tuplet_loss: anchor and positive must be single rows");
  if (negs.dim(0) == 0) throw ContractError("tuplet_loss: at least one negative required");
  if (positive.dim(1) != anchor.dim(1) || negs.dim(1) != anchor.dim(1)) {
    throw ShapeError("tuplet_loss: embedding dimensions differ");
  }
  std::vector<Tensor> candidates{positive};
  for (std::size_t i = 0; i < negs.dim(0); ++i) {
    const std::size_t row[] = {i};
    candidates.push_back(gather_rows(negs, row));
  }
  const Tensor scores = matmul(anchor, transpose(stack_rows(candidates)));
  const std::size_t target[] = {0};
  return sum(nll_softmax(scores, target));
}

Tensor npair_loss(const Tensor& anchors, const Tensor& positives, const std::vector<int>& classes) {
  const Tensor fa = as_rows(anchors), fp = as_rows(positives);
  if (fa.shape() != fp.shape()) throw ShapeError("npair_loss: anchors and positives differ in shape");
  const std::size_t n = fa.dim(0);
  if (n < 2) throw ContractError("npair_loss: need at least two classes");
  if (!classes.empty()) {
    if (classes.size() != n) throw ContractError("npair_loss: one class label per pair required");
    if (std::set<int>(classes.begin(), classes.end()).size() != n) {
      throw ContractError("npair_loss: duplicate classes in n-pair tuple");
    }
  }
  // Row i scores anchor i against every positive; its own positive is the target.
  const Tensor scores = matmul(fa, transpose(fp));
  std::vector<std::size_t> targets(n);
  for (std::size_t i = 0; i < n; ++i) targets[i] = i;
  return sum(nll_softmax(scores, targets));
}

Tensor angular_loss(const Tensor& a, const Tensor& p, const Tensor& n, double alpha_deg) {
  if (!(alpha_deg > 0 && alpha_deg < 90)) {
    throw ContractError("angular_loss: alpha must lie strictly between 0 and 90 degrees");
  }
  const Tensor ra = as_rows(a), rp = as_rows(p), rn = as_rows(n);
  require_same_rows(ra, rp, rn, "angular_loss");
  const double t = std::tan(alpha_deg * std::numbers::pi / 180.0);
  const Tensor center = 0.5 * (ra + rp);
  const Tensor pre = squared_distance_rows(ra, rp) - (4.0 * t * t) * squared_distance_rows(rn, center);
  return mean(relu(pre));
}

Tensor softmax_ce_loss(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_ce_loss: logits must be B x C");
  if (labels.size() != logits.dim(0)) throw ShapeError("softmax_ce_loss: one label per row required");
  for (auto y : labels) {
    if (y >= logits.dim(1)) {
      throw ContractError("softmax_ce_loss: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(logits.dim(1)) + ")");
    }
  }
  return mean(nll_softmax(logits, labels));
}

LossBreakdown combined_loss(const BatchOutputs& batch, const LossWeights& w) {
  w.validate();
  LossBreakdown out;
  std::vector<Tensor> terms;

  const auto space = [&](bool normalized) -> const Tensor& {
    const Tensor& t = normalized ? batch.normalized : batch.raw;
    if (!t.defined()) throw ContractError("combined_loss: missing embeddings");
    return t;
  };

  if (batch.npair) {
    const auto& tuple = *batch.npair;
    const Tensor& emb = space(w.npair_on_normalized);
    const Tensor term = scale(npair_loss(gather_rows(emb, tuple.anchors), gather_rows(emb, tuple.positives), tuple.classes),
                              1.0 / static_cast<double>(tuple.anchors.size()));
    out.npair = term.item();
    terms.push_back(w.lambda_npair * term);
  } else if (w.lambda_npair > 0) {
    throw ContractError("combined_loss: n-pair weight is positive but no n-pair tuple was supplied");
  }

  std::vector<std::size_t> ia, ip, in;
  for (const auto& t : batch.triplets) {
    ia.push_back(t.anchor);
    ip.push_back(t.positive);
    in.push_back(t.negative);
  }
  if (!batch.triplets.empty()) {
    const Tensor& emb = space(w.triplet_on_normalized);
    const Tensor term = triplet_loss(gather_rows(emb, ia), gather_rows(emb, ip), gather_rows(emb, in), w.triplet_margin);
    out.triplet = term.item();
    terms.push_back(w.lambda_tri * term);
  } else if (w.lambda_tri > 0) {
    throw ContractError("combined_loss: triplet weight is positive but no triplets were supplied");
  }

  if (!batch.triplets.empty()) {
    const Tensor& emb = space(w.angular_on_normalized);
    const Tensor term = angular_loss(gather_rows(emb, ia), gather_rows(emb, ip), gather_rows(emb, in), w.angular_alpha_deg);
    out.angular = term.item();
    terms.push_back(w.lambda_ang * term);
  } else if (w.lambda_ang > 0) {
    throw ContractError("combined_loss: angular weight is positive but no triplets were supplied");
  }

  if (batch.logits.defined()) {
    const Tensor term = softmax_ce_loss(batch.logits, batch.class_labels);
    out.softmax = term.item();
    terms.push_back(w.lambda_soft * term);
  } else if (w.lambda_soft > 0) {
    throw ContractError("combined_loss: softmax weight is positive but no logits were supplied");
  }

  if (terms.empty()) throw ContractError("combined_loss: no loss inputs supplied");
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  out.total = total;
  out.total_value = total.item();
  return out;
}

}  // namespace metricforge
