#pragma once

#include <Eigen/SVD>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "egopose/pose.hpp"

namespace egopose {

/// Similarity transform from a Procrustes fit: target ~ scale * R * source + t.
template <class S>
struct AlignmentResult {
  S scale = S(1);
  Eigen::Matrix<S, 3, 3> rotation = Eigen::Matrix<S, 3, 3>::Identity();
  Eigen::Matrix<S, 3, 1> translation = Eigen::Matrix<S, 3, 1>::Zero();
  Pose3<S> aligned_source;
  S residual_mpjpe = S(0);
};

namespace detail {

template <class S>
void check_pair(const Pose3<S>& a, const Pose3<S>& b) {
  a.validate();
  b.validate();
  if (a.joint_set != b.joint_set)
    throw UnitMismatch("joint_set mismatch: " +
                       std::string(to_string(a.joint_set)) + " vs " +
                       to_string(b.joint_set));
  if (a.unit != b.unit)
    throw UnitMismatch("unit mismatch: " + std::string(to_string(a.unit)) +
                       " vs " + to_string(b.unit));
  if (a.num_joints() != b.num_joints())
    throw UnitMismatch("joint count mismatch: " +
                       std::to_string(a.num_joints()) + " vs " +
                       std::to_string(b.num_joints()));
}

}  // namespace detail

/// Mean Euclidean distance between corresponding joints, in the common
/// unit of the two poses.
template <class S>
S mpjpe(const Pose3<S>& pred, const Pose3<S>& gt) {
  detail::check_pair(pred, gt);
  return (pred.joints - gt.joints).rowwise().norm().mean();
}

/// Least-squares similarity fit of `source` onto `target` (Umeyama):
/// minimizes sum_k || s * R * source_k + t - target_k ||^2 with R in SO(3).
/// A reflection-flavored optimum is corrected by flipping the sign of the
/// smallest singular value, so mirrored poses keep a positive residual.
template <class S>
AlignmentResult<S> procrustes_align(const Pose3<S>& source,
                                    const Pose3<S>& target,
                                    bool with_scale = true) {
  detail::check_pair(source, target);
  const int k = source.num_joints();
  if (k < 3)
    throw InsufficientJoints("need at least 3 joints, got " + std::to_string(k));

  using Mat3 = Eigen::Matrix<S, 3, 3>;
  using Vec3 = Eigen::Matrix<S, 3, 1>;
  using MatK3 = Eigen::Matrix<S, Eigen::Dynamic, 3>;

  const Vec3 mu_src = source.joints.colwise().mean().transpose();
  const Vec3 mu_tgt = target.joints.colwise().mean().transpose();
  const MatK3 src_c = source.joints.rowwise() - mu_src.transpose();
  const MatK3 tgt_c = target.joints.rowwise() - mu_tgt.transpose();

  const S src_norm = src_c.norm();
  if (src_norm < S(1e-12))
    throw DegenerateSource("centered source norm below 1e-12");

  // Cross-covariance, then SVD; det sign decides the reflection fix.
  const Mat3 cov = tgt_c.transpose() * src_c / S(k);
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  Vec3 d = Vec3::Ones();
  if (u.determinant() * v.determinant() < S(0)) d(2) = S(-1);

  AlignmentResult<S> out;
  out.rotation = u * d.asDiagonal() * v.transpose();
  if (with_scale) {
    const S src_var = src_c.squaredNorm() / S(k);
    out.scale = svd.singularValues().dot(d) / src_var;
  }
  out.translation = mu_tgt - out.scale * out.rotation * mu_src;

  out.aligned_source = source;
  out.aligned_source.joints =
      (out.scale * (out.rotation * source.joints.transpose())).transpose();
  out.aligned_source.joints.rowwise() += out.translation.transpose();
  // Residual goes through mpjpe() itself so the two never disagree.
  out.residual_mpjpe = mpjpe(out.aligned_source, target);
  return out;
}

/// MPJPE after similarity alignment of the prediction onto ground truth.
template <class S>
S pa_mpjpe(const Pose3<S>& pred, const Pose3<S>& gt, bool with_scale = true) {
  return procrustes_align(pred, gt, with_scale).residual_mpjpe;
}

/// Mean per-joint velocity error in m/s. Velocities are forward finite
/// differences of the raw (unaligned) sequences, converted to meters.
template <class S>
S mpjve(const PoseSequence<S>& pred, const PoseSequence<S>& gt) {
  pred.validate();
  gt.validate();
  const size_t frames = pred.poses.size();
  if (gt.poses.size() != frames)
    throw InvalidSequence("sequence length mismatch: " +
                          std::to_string(frames) + " vs " +
                          std::to_string(gt.poses.size()));
  if (frames < 2) throw InvalidSequence("need at least 2 frames for velocity");
  if (pred.frame_interval_s != gt.frame_interval_s)
    throw InvalidSequence("frame_interval_s mismatch");
  if (pred.poses.front().joint_set != gt.poses.front().joint_set)
    throw UnitMismatch("joint_set mismatch between sequences");
  if (pred.poses.front().num_joints() != gt.poses.front().num_joints())
    throw UnitMismatch("joint count mismatch between sequences");

  const S pred_to_m = static_cast<S>(meters_per_unit(pred.poses.front().unit));
  const S gt_to_m = static_cast<S>(meters_per_unit(gt.poses.front().unit));
  const S dt = static_cast<S>(pred.frame_interval_s);

  S total = S(0);
  for (size_t f = 0; f + 1 < frames; ++f) {
    const auto vel_pred =
        (pred.poses[f + 1].joints - pred.poses[f].joints) * (pred_to_m / dt);
    const auto vel_gt =
        (gt.poses[f + 1].joints - gt.poses[f].joints) * (gt_to_m / dt);
    total += (vel_pred - vel_gt).rowwise().norm().sum();
  }
  const S count = S(frames - 1) * S(pred.poses.front().num_joints());
  return total / count;
}

/// Fraction of exact label matches; labels must lie in {0,1,2,3}.
inline double top1_accuracy(const std::vector<int>& pred_labels,
                            const std::vector<int>& gt_labels) {
  if (pred_labels.empty() || gt_labels.empty())
    throw EmptyInput("top1_accuracy requires non-empty label lists");
  if (pred_labels.size() != gt_labels.size())
    throw LabelError("label list length mismatch");
  int hits = 0;
  for (size_t i = 0; i < pred_labels.size(); ++i) {
    if (pred_labels[i] < 0 || pred_labels[i] > 3 || gt_labels[i] < 0 ||
        gt_labels[i] > 3)
      throw LabelError("labels must be in {0,1,2,3}");
    if (pred_labels[i] == gt_labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred_labels.size());
}

/// Aggregated evaluation results. Aggregates are arithmetic means of the
/// per-sample values when those are present.
struct MetricReport {
  double mpjpe = 0.0;
  Unit unit = Unit::mm;
  std::optional<double> pa_mpjpe;
  std::optional<double> mpjve_mps;
  std::optional<double> top1;
  int num_samples = 0;
  int missing_keys = 0;
  std::vector<std::string> keys;
  std::vector<double> per_sample_mpjpe;
  std::vector<double> per_sample_pa_mpjpe;
};

template <class S>
using PoseMap = std::map<std::string, Pose3<S>>;

/// Per-key MPJPE / PA-MPJPE over the intersection of the two key sets.
/// PA-MPJPE is reported only when the poses have >= 3 joints.
template <class S>
MetricReport batch_evaluate(const PoseMap<S>& preds, const PoseMap<S>& gts) {
  MetricReport report;
  double sum_mpjpe = 0.0;
  double sum_pa = 0.0;
  bool with_pa = true;
  for (const auto& [key, gt] : gts) {
    auto it = preds.find(key);
    if (it == preds.end()) {
      ++report.missing_keys;
      continue;
    }
    const double e = static_cast<double>(mpjpe(it->second, gt));
    report.keys.push_back(key);
    report.per_sample_mpjpe.push_back(e);
    sum_mpjpe += e;
    if (gt.num_joints() >= 3) {
      const double pa = static_cast<double>(pa_mpjpe(it->second, gt));
      report.per_sample_pa_mpjpe.push_back(pa);
      sum_pa += pa;
    } else {
      with_pa = false;
    }
    report.unit = gt.unit;
  }
  report.missing_keys +=
      static_cast<int>(preds.size()) - static_cast<int>(report.keys.size());
  report.num_samples = static_cast<int>(report.keys.size());
  if (report.num_samples == 0)
    throw NoOverlap("prediction and ground-truth key sets do not intersect");
  report.mpjpe = sum_mpjpe / report.num_samples;
  if (with_pa) report.pa_mpjpe = sum_pa / report.num_samples;
  return report;
}

}  // namespace egopose
