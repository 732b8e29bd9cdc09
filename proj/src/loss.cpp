#include "tempose/loss.hpp"

#include <fmt/format.h>

#include <cmath>

namespace tempose::loss {

using ad::Scalar;
using ad::Shape;

namespace {

void expect_rows(const Tensor& t, std::size_t cols, const char* what) {
  if (t.rank() != 2 || t.dim(1) != cols) {
    throw ShapeError(fmt::format("{}: expected [N,{}], got {}", what, cols, ad::shape_str(t.shape())));
  }
}

Tensor points_tensor(const geom::ObjectModel& model) {
  std::vector<Scalar> v(model.size() * 3);
  for (std::size_t i = 0; i < model.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c)
      v[i * 3 + c] = static_cast<Scalar>(model.points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
  return Tensor({model.size(), 3}, std::move(v));
}

void check_nondegenerate(const Tensor& q, const char* what) {
  const auto d = q.data();
  for (std::size_t i = 0; i < q.dim(0); ++i) {
    double n2 = 0.0;
    for (std::size_t c = 0; c < 4; ++c) n2 += static_cast<double>(d[i * 4 + c]) * d[i * 4 + c];
    if (!(std::sqrt(n2) > geom::kDegenerateNorm)) {
      throw DegenerateRotationError(fmt::format("{} quaternion {} has near-zero norm", what, i));
    }
  }
}

}  // namespace

Tensor rotation_matrices(const Tensor& q) {
  expect_rows(q, 4, "rotation_matrices");
  const Tensor inv = ad::power(ad::sum_last(ad::power(q, 2)), Scalar(-0.5));
  const Tensor w = ad::mul(ad::slice(q, 1, 0, 1), inv);
  const Tensor x = ad::mul(ad::slice(q, 1, 1, 2), inv);
  const Tensor y = ad::mul(ad::slice(q, 1, 2, 3), inv);
  const Tensor z = ad::mul(ad::slice(q, 1, 3, 4), inv);
  const Tensor xx = ad::mul(x, x), yy = ad::mul(y, y), zz = ad::mul(z, z);
  const Tensor xy = ad::mul(x, y), xz = ad::mul(x, z), yz = ad::mul(y, z);
  const Tensor wx = ad::mul(w, x), wy = ad::mul(w, y), wz = ad::mul(w, z);
  auto one_minus_2 = [](const Tensor& a, const Tensor& b) {
    return ad::add_scalar(ad::scale(ad::add(a, b), Scalar(-2)), Scalar(1));
  };
  auto two_sum = [](const Tensor& a, const Tensor& b) { return ad::scale(ad::add(a, b), Scalar(2)); };
  auto two_diff = [](const Tensor& a, const Tensor& b) { return ad::scale(ad::sub(a, b), Scalar(2)); };
  return ad::concat({one_minus_2(yy, zz), two_diff(xy, wz), two_sum(xz, wy),
                     two_sum(xy, wz), one_minus_2(xx, zz), two_diff(yz, wx),
                     two_diff(xz, wy), two_sum(yz, wx), one_minus_2(xx, yy)},
                    1);
}

Tensor pose_loss(const Tensor& q_est, const Tensor& t_est, const Tensor& q_gt, const Tensor& t_gt,
                 std::span<const geom::ObjectModel* const> models) {
  expect_rows(q_est, 4, "pose_loss q_est");
  expect_rows(q_gt, 4, "pose_loss q_gt");
  expect_rows(t_est, 3, "pose_loss t_est");
  expect_rows(t_gt, 3, "pose_loss t_gt");
  const std::size_t n = q_est.dim(0);
  if (q_gt.dim(0) != n || t_est.dim(0) != n || t_gt.dim(0) != n || models.size() != n) {
    throw ShapeError(fmt::format("pose_loss: row counts disagree (q_est {}, q_gt {}, t_est {}, t_gt {}, models {})",
                                 n, q_gt.dim(0), t_est.dim(0), t_gt.dim(0), models.size()));
  }
  check_nondegenerate(q_est, "estimated");
  check_nondegenerate(q_gt, "ground-truth");

  const Tensor r_est = rotation_matrices(q_est);
  const Tensor r_gt = rotation_matrices(q_gt);
  const Tensor dr = ad::sub(r_est, r_gt);
  const Tensor dt = ad::sub(t_est, t_gt);
  std::vector<Tensor> per_object;
  per_object.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const geom::ObjectModel& model = *models[i];
    if (model.size() == 0) throw ValidationError("pose_loss: object model has no points");
    // (R~ - R) x + (t~ - t), for every model point at once.
    const Tensor d = ad::reshape(ad::slice(dr, 0, i, i + 1), {3, 3});
    const Tensor offset = ad::reshape(ad::slice(dt, 0, i, i + 1), {3});
    const Tensor diff = ad::add(ad::matmul(points_tensor(model), ad::transpose(d)), offset);
    per_object.push_back(
        ad::scale(ad::sum(ad::power(diff, 2)), Scalar(1) / static_cast<Scalar>(model.size())));
  }
  return ad::mean(ad::concat(per_object, 0));
}

Tensor reg_loss(const Tensor& q_est) {
  expect_rows(q_est, 4, "reg_loss");
  const Tensor norms = ad::sqrt(ad::sum_last(ad::power(q_est, 2)));
  return ad::mean(ad::abs(ad::add_scalar(ad::neg(norms), Scalar(1))));
}

Tensor inner_prod_loss(const Tensor& q_est, const Tensor& q_gt) {
  expect_rows(q_est, 4, "inner_prod_loss q_est");
  expect_rows(q_gt, 4, "inner_prod_loss q_gt");
  if (q_est.dim(0) != q_gt.dim(0)) {
    throw ShapeError(fmt::format("inner_prod_loss: {} vs {}", ad::shape_str(q_est.shape()),
                                 ad::shape_str(q_gt.shape())));
  }
  return ad::mean(ad::add_scalar(ad::neg(ad::sum_last(ad::mul(q_est, q_gt))), Scalar(1)));
}

FutureLoss future_loss(const Tensor& z_hat, const Tensor& z_tilde) {
  if (z_hat.shape() != z_tilde.shape() || z_hat.rank() != 4) {
    throw ShapeError(fmt::format("future_loss: expected matching [b,t,n,d], got {} and {}",
                                 ad::shape_str(z_hat.shape()), ad::shape_str(z_tilde.shape())));
  }
  const std::size_t b = z_hat.dim(0), t = z_hat.dim(1), n = z_hat.dim(2), d = z_hat.dim(3);
  if (t < 2) {
    throw InsufficientContextError(fmt::format("future loss needs at least 2 frames, got {}", t));
  }
  const Tensor diff = ad::sub(ad::slice(z_hat, 1, 0, t - 1), ad::slice(z_tilde, 1, 1, t));
  FutureLoss out;
  out.raw = ad::scale(ad::sum(ad::power(diff, 2)), Scalar(1) / static_cast<Scalar>(b));
  out.normalized = ad::scale(out.raw, Scalar(1) / static_cast<Scalar>(n * d));
  return out;
}

LossBreakdown total_loss(const LossInputs& in) {
  const Tensor pose = pose_loss(in.q_est, in.t_est, in.q_gt, in.t_gt, in.models);
  const Tensor reg = reg_loss(in.q_est);
  const Tensor inner = inner_prod_loss(in.q_est, in.q_gt);
  const FutureLoss future = future_loss(in.z_hat, in.z_tilde);

  LossBreakdown out;
  out.total_tensor = ad::add(ad::add(ad::add(pose, reg), inner), future.normalized);
  out.pose = pose.item();
  out.reg = reg.item();
  out.inner_prod = inner.item();
  out.future = future.normalized.item();
  out.future_raw = future.raw.item();
  out.total = out.total_tensor.item();
  return out;
}

}  // namespace tempose::loss
