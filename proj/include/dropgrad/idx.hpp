#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "dropgrad/data.hpp"
#include "dropgrad/errors.hpp"
#include "dropgrad/tensor.hpp"

namespace dropgrad {

// IDX (MNIST) file format, big-endian:
//   images: magic 0x00000803, then count, rows, cols (u32), then u8 pixels
//   labels: magic 0x00000801, then count (u32), then u8 labels
// Pixels are scaled to [0,1] by /255 on load. Files ending in ".gz" are
// read through zlib's transparent gzip decompression.
inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

class IdxReader {
 public:
  explicit IdxReader(const std::string& path) : path_(path) {
    file_ = gzopen(path.c_str(), "rb");
    if (file_ == nullptr) throw IoError("cannot open '" + path + "'");
  }
  ~IdxReader() {
    if (file_ != nullptr) gzclose(file_);
  }
  IdxReader(const IdxReader&) = delete;
  IdxReader& operator=(const IdxReader&) = delete;

  std::uint32_t read_u32_be() {
    unsigned char b[4];
    read_exact(b, 4);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
  }

  void read_exact(void* dst, std::size_t n) {
    const int got = gzread(file_, dst, static_cast<unsigned>(n));
    if (got < 0 || static_cast<std::size_t>(got) != n) {
      throw IoError("truncated IDX file '" + path_ + "'");
    }
  }

 private:
  std::string path_;
  gzFile file_ = nullptr;
};

}  // namespace detail

template <typename Scalar>
Dataset<Scalar> load_idx(const std::string& images_path, const std::string& labels_path) {
  detail::IdxReader images(images_path);
  const std::uint32_t images_magic = images.read_u32_be();
  if (images_magic != kIdxImagesMagic) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "0x%08X", images_magic);
    throw IoError("bad magic " + std::string(buf) + " in images file '" + images_path +
                  "' (expected 0x00000803)");
  }
  const std::uint32_t count = images.read_u32_be();
  const std::uint32_t rows = images.read_u32_be();
  const std::uint32_t cols = images.read_u32_be();
  if (count == 0 || rows == 0 || cols == 0) {
    throw IoError("IDX images file '" + images_path + "' has zero extent");
  }

  detail::IdxReader labels(labels_path);
  const std::uint32_t labels_magic = labels.read_u32_be();
  if (labels_magic != kIdxLabelsMagic) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "0x%08X", labels_magic);
    throw IoError("bad magic " + std::string(buf) + " in labels file '" + labels_path +
                  "' (expected 0x00000801)");
  }
  const std::uint32_t label_count = labels.read_u32_be();
  if (label_count != count) {
    throw IoError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                  std::to_string(label_count) + " labels");
  }

  Dataset<Scalar> ds;
  ds.inputs = DenseTensor<Scalar>({count, 1, rows, cols});
  ds.labels.resize(count);
  ds.source = "idx:" + images_path;

  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> buf(pixels);
  for (std::size_t i = 0; i < count; ++i) {
    images.read_exact(buf.data(), pixels);
    Scalar* dst = ds.inputs.data() + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p) {
      dst[p] = static_cast<Scalar>(buf[p]) / Scalar(255);
    }
  }
  std::vector<unsigned char> lab(count);
  labels.read_exact(lab.data(), count);
  std::int32_t max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = static_cast<std::int32_t>(lab[i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

namespace detail {

inline void write_u32_be(std::FILE* f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  if (std::fwrite(b, 1, 4, f) != 4) throw IoError("short write to IDX file");
}

}  // namespace detail

// Writes a [N x 1 x H x W] dataset with values in [0,1] as an IDX pair
// (pixels quantized to u8). Used for fixtures and generated datasets.
template <typename Scalar>
void save_idx(const Dataset<Scalar>& ds, const std::string& images_path,
              const std::string& labels_path) {
  if (ds.inputs.rank() != 4 || ds.inputs.extent(1) != 1) {
    throw ConfigError("save_idx expects [N x 1 x H x W] inputs");
  }
  const std::size_t count = ds.inputs.extent(0);
  const std::size_t rows = ds.inputs.extent(2);
  const std::size_t cols = ds.inputs.extent(3);

  std::FILE* fi = std::fopen(images_path.c_str(), "wb");
  if (fi == nullptr) throw IoError("cannot write '" + images_path + "'");
  detail::write_u32_be(fi, kIdxImagesMagic);
  detail::write_u32_be(fi, static_cast<std::uint32_t>(count));
  detail::write_u32_be(fi, static_cast<std::uint32_t>(rows));
  detail::write_u32_be(fi, static_cast<std::uint32_t>(cols));
  std::vector<unsigned char> buf(rows * cols);
  for (std::size_t i = 0; i < count; ++i) {
    const Scalar* src = ds.inputs.data() + i * rows * cols;
    for (std::size_t p = 0; p < buf.size(); ++p) {
      const double v = std::clamp(static_cast<double>(src[p]), 0.0, 1.0);
      buf[p] = static_cast<unsigned char>(v * 255.0 + 0.5);
    }
    if (std::fwrite(buf.data(), 1, buf.size(), fi) != buf.size()) {
      std::fclose(fi);
      throw IoError("short write to '" + images_path + "'");
    }
  }
  std::fclose(fi);

  std::FILE* fl = std::fopen(labels_path.c_str(), "wb");
  if (fl == nullptr) throw IoError("cannot write '" + labels_path + "'");
  detail::write_u32_be(fl, kIdxLabelsMagic);
  detail::write_u32_be(fl, static_cast<std::uint32_t>(count));
  for (std::size_t i = 0; i < count; ++i) {
    const auto b = static_cast<unsigned char>(ds.labels[i]);
    if (std::fwrite(&b, 1, 1, fl) != 1) {
      std::fclose(fl);
      throw IoError("short write to '" + labels_path + "'");
    }
  }
  std::fclose(fl);
}

}  // namespace dropgrad
