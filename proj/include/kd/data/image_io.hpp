#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <string>

#include "kd/core/error.hpp"
#include "kd/core/tensor.hpp"
#include "kd/data/batch.hpp"

namespace kd {

// Decodes an 8-bit JPEG/PNG into a (3,H,W) float tensor in [0,1], RGB order.
// Grayscale sources are promoted by channel replication (IMREAD_COLOR).
inline Tensor<float> decode_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("image: cannot decode '" + path + "'");
  const int64_t h = bgr.rows, w = bgr.cols;
  Tensor<float> out({3, h, w});
  float* r = out.ptr();
  float* g = out.ptr() + h * w;
  float* b = out.ptr() + 2 * h * w;
  for (int64_t y = 0; y < h; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      b[y * w + x] = static_cast<float>(row[x][0]) / 255.0f;
      g[y * w + x] = static_cast<float>(row[x][1]) / 255.0f;
      r[y * w + x] = static_cast<float>(row[x][2]) / 255.0f;
    }
  }
  return out;
}

// Loads manifest entries whose ids are image file paths.
class FolderImageProvider : public ImageProvider {
 public:
  Tensor<float> load(const ManifestEntry& entry) const override { return decode_image(entry.id); }
};

}  // namespace kd
