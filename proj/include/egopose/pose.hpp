#pragma once

#include <optional>
#include <string>
#include <vector>

#include "egopose/common.hpp"

namespace egopose {

enum class Unit { mm, cm, m };
enum class JointSet { HAND21, BODY17, GENERIC };

inline const char* to_string(Unit u) {
  switch (u) {
    case Unit::mm: return "mm";
    case Unit::cm: return "cm";
    case Unit::m: return "m";
  }
  return "?";
}

inline const char* to_string(JointSet js) {
  switch (js) {
    case JointSet::HAND21: return "HAND21";
    case JointSet::BODY17: return "BODY17";
    case JointSet::GENERIC: return "GENERIC";
  }
  return "?";
}

inline Unit unit_from_string(const std::string& s) {
  if (s == "mm") return Unit::mm;
  if (s == "cm") return Unit::cm;
  if (s == "m") return Unit::m;
  throw SchemaError("unknown unit '" + s + "'");
}

inline JointSet joint_set_from_string(const std::string& s) {
  if (s == "HAND21") return JointSet::HAND21;
  if (s == "BODY17") return JointSet::BODY17;
  if (s == "GENERIC") return JointSet::GENERIC;
  throw SchemaError("unknown joint_set '" + s + "'");
}

/// Joint count fixed by a named joint set, or -1 when unconstrained.
inline int expected_joints(JointSet js) {
  switch (js) {
    case JointSet::HAND21: return 21;
    case JointSet::BODY17: return 17;
    case JointSet::GENERIC: return -1;
  }
  return -1;
}

/// Factor converting coordinates in `u` to meters.
inline double meters_per_unit(Unit u) {
  switch (u) {
    case Unit::mm: return 1e-3;
    case Unit::cm: return 1e-2;
    case Unit::m: return 1.0;
  }
  return 1.0;
}

/// K x 3 joint coordinates tagged with a unit and a joint-set contract.
///
/// HAND21 order: wrist, then thumb/index/middle/ring/pinky chains of 4
/// joints each (proximal to tip). BODY17 follows the Human3.6M 17-joint
/// convention: pelvis, R-hip, R-knee, R-ankle, L-hip, L-knee, L-ankle,
/// spine, thorax, neck, head, L-shoulder, L-elbow, L-wrist, R-shoulder,
/// R-elbow, R-wrist. Orders are a file-format contract, not a metric
/// input.
template <class S>
struct Pose3 {
  Eigen::Matrix<S, Eigen::Dynamic, 3> joints;
  Unit unit = Unit::mm;
  JointSet joint_set = JointSet::GENERIC;

  int num_joints() const { return static_cast<int>(joints.rows()); }

  /// Throws InvalidPose on NaN/Inf or on a joint count that violates
  /// the joint-set contract.
  void validate() const {
    if (!joints.allFinite()) throw InvalidPose("non-finite joint coordinates");
    const int want = expected_joints(joint_set);
    if (want >= 0 && num_joints() != want) {
      throw InvalidPose("joint_set " + std::string(to_string(joint_set)) +
                        " requires " + std::to_string(want) + " joints, got " +
                        std::to_string(num_joints()));
    }
  }

  Pose3<S> converted_to(Unit target) const {
    Pose3<S> out = *this;
    const double f = meters_per_unit(unit) / meters_per_unit(target);
    out.joints *= static_cast<S>(f);
    out.unit = target;
    return out;
  }

  template <class T>
  Pose3<T> cast() const {
    Pose3<T> out;
    out.joints = joints.template cast<T>();
    out.unit = unit;
    out.joint_set = joint_set;
    return out;
  }
};

using Pose3d = Pose3<double>;
using Pose3f = Pose3<float>;

template <class S>
Pose3<S> make_pose(Eigen::Matrix<S, Eigen::Dynamic, 3> joints, Unit unit,
                   JointSet js) {
  Pose3<S> p{std::move(joints), unit, js};
  p.validate();
  return p;
}

/// Ordered poses with a fixed frame interval; the temporal axis for MPJVE.
template <class S>
struct PoseSequence {
  std::vector<Pose3<S>> poses;
  double frame_interval_s = 1.0;
  std::optional<std::vector<bool>> validity;

  void validate() const {
    if (poses.empty()) throw InvalidSequence("empty pose sequence");
    if (!(frame_interval_s > 0.0))
      throw InvalidSequence("frame_interval_s must be > 0");
    const auto& first = poses.front();
    for (const auto& p : poses) {
      p.validate();
      if (p.joint_set != first.joint_set || p.unit != first.unit ||
          p.num_joints() != first.num_joints()) {
        throw InvalidSequence("poses in a sequence must share joint_set, unit and K");
      }
    }
    if (validity && validity->size() != poses.size())
      throw InvalidSequence("validity mask length mismatch");
  }
};

using PoseSequenced = PoseSequence<double>;

}  // namespace egopose
