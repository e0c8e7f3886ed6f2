#pragma once

#include <string>

#include "cstn/tensor.hpp"
#include "cstn/types.hpp"

namespace cstn {

/// 8-bit RGB PNG of a [3,H,W] image; values are clamped to [0,1] and
/// rounded to 255 steps.
std::string encode_png(const Tensor& image);

std::string base64_encode(const std::string& bytes);

/// Escapes &, <, >, and double quotes for XML text and attribute values.
std::string xml_escape(const std::string& text);

/// One annotated sample as a standalone SVG: the image, the ground-truth
/// box in green, the default (untransformed) box in blue, the predicted
/// transformed box in red, and a caption bar underneath. Degenerate boxes
/// are omitted rather than drawn with zero extent.
std::string sample_to_svg(const Tensor& image, const BoxXYXY& gt_box, const BoxXYXY& default_box,
                          const BoxXYXY& transformed_box, const std::string& caption);

} // namespace cstn
