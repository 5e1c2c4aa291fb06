#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "metricforge/tensor.hpp"

namespace metricforge {

// Weights and margins of the four-term objective
//   L = l_npair * L_npair + l_tri * L_tri + l_ang * L_ang + l_soft * L_soft.
struct LossWeights {
  double lambda_npair = 0.5;
  double lambda_soft = 0.1;
  double lambda_tri = 1.0;
  double lambda_ang = 1.0;
  double triplet_margin = 0.3;
  double angular_alpha_deg = 45.0;
  // Which embedding each metric term consumes.
  bool triplet_on_normalized = true;
  bool angular_on_normalized = true;
  bool npair_on_normalized = false;

  void validate() const;
};

struct TripletIndices {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;

  friend bool operator==(const TripletIndices&, const TripletIndices&) = default;
};

// One (anchor, positive) pair of batch rows per class.
struct NPairTuple {
  std::vector<std::size_t> anchors;
  std::vector<std::size_t> positives;
  std::vector<int> classes;
};

// Rows of a, p, n are triplets (a 1-D tensor is one row). Returns the mean of
// [|a-p|^2 + m - |a-n|^2]_+ over rows.
Tensor triplet_loss(const Tensor& a, const Tensor& p, const Tensor& n, double margin);

// log(1 + sum_i exp(f.f_i - f.f_pos)) for one anchor and its negatives [M x D].
Tensor tuplet_loss(const Tensor& f, const Tensor& f_pos, const Tensor& negatives);

// sum_i log(1 + sum_{j != i} exp(f_i.f_j+ - f_i.f_i+)) over N anchor/positive
// rows. When classes are given they must be distinct.
Tensor npair_loss(const Tensor& anchors, const Tensor& positives, const std::vector<int>& classes = {});

// Mean over rows of [|a-p|^2 - 4 tan^2(alpha) |n - (a+p)/2|^2]_+.
Tensor angular_loss(const Tensor& a, const Tensor& p, const Tensor& n, double alpha_deg);

// Mean negative log-likelihood of the labels under softmax(logits).
Tensor softmax_ce_loss(const Tensor& logits, const std::vector<std::size_t>& labels);

struct BatchOutputs {
  Tensor normalized;  // [B x D]
  Tensor raw;         // [B x D]
  Tensor logits;      // [B x C]; may be undefined when softmax is off
  std::vector<std::size_t> class_labels;
  std::vector<TripletIndices> triplets;
  std::optional<NPairTuple> npair;
};

struct LossBreakdown {
  Tensor total;
  double total_value = 0.0;
  double triplet = 0.0;
  double npair = 0.0;
  double angular = 0.0;
  double softmax = 0.0;
};

// Every term whose inputs are present is evaluated (and reported); a term with
// positive weight but missing inputs is a ContractError. Triplet and angular
// terms average over the triplets, the n-pair term over its N tuples.
LossBreakdown combined_loss(const BatchOutputs& batch, const LossWeights& weights);

}  // namespace metricforge
