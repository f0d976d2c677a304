#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace egopose {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatXd = Mat<double>;
using VecXd = Vec<double>;
using MatXi = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

/// Base class of all domain errors. Subclasses carry the stable error
/// names used by the CLI exit-code mapping and the tests.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(kind + ": " + msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define EGOPOSE_DEFINE_ERROR(Name)                                    \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& msg) : Error(#Name, msg) {}      \
  }

EGOPOSE_DEFINE_ERROR(UnitMismatch);
EGOPOSE_DEFINE_ERROR(InvalidPose);
EGOPOSE_DEFINE_ERROR(InsufficientJoints);
EGOPOSE_DEFINE_ERROR(DegenerateSource);
EGOPOSE_DEFINE_ERROR(InvalidSequence);
EGOPOSE_DEFINE_ERROR(EmptyInput);
EGOPOSE_DEFINE_ERROR(NoOverlap);
EGOPOSE_DEFINE_ERROR(ZeroWeight);
EGOPOSE_DEFINE_ERROR(ShapeError);
EGOPOSE_DEFINE_ERROR(InvalidFeatures);
EGOPOSE_DEFINE_ERROR(InvalidInput);
EGOPOSE_DEFINE_ERROR(ParseError);
EGOPOSE_DEFINE_ERROR(SchemaError);
EGOPOSE_DEFINE_ERROR(LabelError);
EGOPOSE_DEFINE_ERROR(RangeError);
EGOPOSE_DEFINE_ERROR(DivergenceError);
EGOPOSE_DEFINE_ERROR(EmptyEnsemble);
EGOPOSE_DEFINE_ERROR(IoError);

#undef EGOPOSE_DEFINE_ERROR

}  // namespace egopose
