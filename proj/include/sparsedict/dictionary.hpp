#pragma once

#include <optional>

#include "sparsedict/types.hpp"

namespace sparsedict {

// A learned feature dictionary. Row i of `encoder` is feature f_i.
// In the tied case the same rows also decode; otherwise `decoder` holds
// the decoding rows and carries the unit-norm constraint.
struct Dictionary {
  Matrix encoder;                 // d_hid x d_in
  Vector bias;                    // d_hid
  std::optional<Matrix> decoder;  // d_hid x d_in, present iff untied

  bool tied() const { return !decoder.has_value(); }
  Index d_hid() const { return encoder.rows(); }
  Index d_in() const { return encoder.cols(); }

  const Matrix& decoder_rows() const { return decoder ? *decoder : encoder; }
  Matrix& decoder_rows() { return decoder ? *decoder : encoder; }

  // Throws DimensionError if the parts disagree or d_hid/d_in is zero.
  void validate() const;
};

}  // namespace sparsedict
