#include "sparsedict/dictionary.hpp"

namespace sparsedict {

void Dictionary::validate() const {
  if (encoder.rows() < 1 || encoder.cols() < 1) {
    throw DimensionError("dictionary needs d_hid >= 1 and d_in >= 1");
  }
  if (bias.size() != encoder.rows()) throw DimensionError("bias length must equal d_hid");
  if (decoder && (decoder->rows() != encoder.rows() || decoder->cols() != encoder.cols())) {
    throw DimensionError("decoder shape must equal encoder shape");
  }
}

}  // namespace sparsedict
