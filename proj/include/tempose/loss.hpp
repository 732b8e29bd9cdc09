#pragma once

// Training objectives for the pose and future-feature heads.
//
// Quaternion tensors are [N,4] in (w,x,y,z) order, translations [N,3] in
// meters, one row per object instance. Per-object terms are averaged over
// the N rows.

#include <span>

#include "tempose/geom.hpp"
#include "tempose/tensor.hpp"

namespace tempose::loss {

using ad::Tensor;

// Rotation matrices of the normalized quaternions, row-major, [N,9].
Tensor rotation_matrices(const Tensor& q);

// Mean over objects of (1/m) sum_x ||(R(q_est)x + t_est) - (R(q_gt)x + t_gt)||^2.
Tensor pose_loss(const Tensor& q_est, const Tensor& t_est, const Tensor& q_gt, const Tensor& t_gt,
                 std::span<const geom::ObjectModel* const> models);

// Mean of |1 - ||q_est|||.
Tensor reg_loss(const Tensor& q_est);

// Mean of 1 - <q_est, q_gt>.
Tensor inner_prod_loss(const Tensor& q_est, const Tensor& q_gt);

struct FutureLoss {
  Tensor raw;         // sum over t of ||z_hat_t - z_tilde_{t+1}||^2, batch mean
  Tensor normalized;  // raw / (objects * feature dim)
};

// z_hat and z_tilde are [b,t,n,d] with t >= 2.
FutureLoss future_loss(const Tensor& z_hat, const Tensor& z_tilde);

struct LossBreakdown {
  double pose = 0.0;
  double reg = 0.0;
  double inner_prod = 0.0;
  double future = 0.0;      // normalized term that enters the total
  double future_raw = 0.0;  // unnormalized sum, reported only
  double total = 0.0;
  Tensor total_tensor;
};

struct LossInputs {
  Tensor q_est, t_est, q_gt, t_gt;
  std::span<const geom::ObjectModel* const> models;
  Tensor z_hat, z_tilde;
};

// Unweighted sum pose + reg + inner_prod + future, accumulated in that order.
LossBreakdown total_loss(const LossInputs& in);

}  // namespace tempose::loss
