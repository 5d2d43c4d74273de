#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "pewire/errors.hpp"
#include "pewire/rng.hpp"
#include "pewire/tensor.hpp"

namespace pewire {

enum class DatasetKind { kMnistIdx, kCifar10Binary, kSyntheticQuadrant };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::kMnistIdx: return "mnist-idx";
    case DatasetKind::kCifar10Binary: return "cifar10-binary";
    case DatasetKind::kSyntheticQuadrant: return "synthetic-quadrant";
  }
  return "?";
}

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "mnist-idx") return DatasetKind::kMnistIdx;
  if (s == "cifar10-binary") return DatasetKind::kCifar10Binary;
  if (s == "synthetic-quadrant") return DatasetKind::kSyntheticQuadrant;
  throw config_error("unknown dataset kind '" + s + "'");
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kSyntheticQuadrant;
  std::string path;  // directory holding the standard files (file-based kinds)
  uint64_t seed = 1;  // synthetic generator stream
  int train_size = 2048;
  int eval_size = 512;
  std::vector<double> mean{0.5};  // per-channel normalization
  std::vector<double> stddev{0.5};
  // Synthetic geometry. block_size is the bright-square side and should match
  // the model patch size so the square covers exactly one patch.
  int image_size = 32;
  int channels = 1;
  int block_size = 4;
};

enum class Split { kTrain, kEval };

// Normalized images, deterministic order.
struct Dataset {
  std::vector<Tensor> images;  // [C,H,W] float32
  std::vector<int> labels;
  int num_classes = 0;
  int channels = 0;
  int height = 0;
  int width = 0;

  int size() const { return static_cast<int>(images.size()); }
};

namespace detail {

inline uint32_t read_u32_be(std::istream& in, long long offset, const std::string& file) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw format_error(file + ": truncated while reading u32", offset);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

inline std::vector<uint8_t> read_bytes(std::istream& in, size_t n, long long offset,
                                       const std::string& file) {
  std::vector<uint8_t> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw format_error(file + ": truncated payload", offset + in.gcount());
  return buf;
}

inline Tensor normalize_u8(const std::vector<uint8_t>& raw, int c, int h, int w,
                           const std::vector<double>& mean, const std::vector<double>& stddev) {
  if (static_cast<int>(mean.size()) != c || static_cast<int>(stddev.size()) != c)
    throw config_error("normalization constants must have one entry per channel (" +
                       std::to_string(c) + ")");
  Tensor img({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const float mu = static_cast<float>(mean[ch]);
    const float inv = static_cast<float>(1.0 / stddev[ch]);
    for (int i = 0; i < h * w; ++i) {
      const float v = static_cast<float>(raw[(size_t)ch * h * w + i]) / 255.0f;
      img.data[(size_t)ch * h * w + i] = (v - mu) * inv;
    }
  }
  return img;
}

// IDX image/label pair per the published byte layout (big-endian header).
inline void load_idx_pair(const std::string& image_file, const std::string& label_file, int count,
                          const DatasetSpec& spec, Dataset& out) {
  std::ifstream imgs(image_file, std::ios::binary);
  if (!imgs) throw io_error("cannot open " + image_file);
  const uint32_t magic = read_u32_be(imgs, 0, image_file);
  if (magic != 0x00000803u)
    throw format_error(image_file + ": bad IDX image magic 0x" + std::to_string(magic), 0);
  const uint32_t total = read_u32_be(imgs, 4, image_file);
  const uint32_t rows = read_u32_be(imgs, 8, image_file);
  const uint32_t cols = read_u32_be(imgs, 12, image_file);
  if (static_cast<uint32_t>(count) > total)
    throw format_error(image_file + ": requested " + std::to_string(count) + " images, file has " +
                       std::to_string(total), 4);

  std::ifstream lbls(label_file, std::ios::binary);
  if (!lbls) throw io_error("cannot open " + label_file);
  const uint32_t lmagic = read_u32_be(lbls, 0, label_file);
  if (lmagic != 0x00000801u)
    throw format_error(label_file + ": bad IDX label magic 0x" + std::to_string(lmagic), 0);
  const uint32_t ltotal = read_u32_be(lbls, 4, label_file);
  if (ltotal != total)
    throw format_error(label_file + ": label count " + std::to_string(ltotal) +
                       " != image count " + std::to_string(total), 4);

  const size_t pix = (size_t)rows * cols;
  for (int i = 0; i < count; ++i) {
    const auto raw = read_bytes(imgs, pix, 16 + (long long)i * pix, image_file);
    out.images.push_back(normalize_u8(raw, 1, (int)rows, (int)cols, spec.mean, spec.stddev));
  }
  const auto raw_labels = read_bytes(lbls, (size_t)count, 8, label_file);
  for (int i = 0; i < count; ++i) {
    const int lbl = raw_labels[i];
    if (lbl >= 10) throw format_error(label_file + ": label " + std::to_string(lbl) + " out of range", 8 + i);
    out.labels.push_back(lbl);
  }
  out.num_classes = 10;
  out.channels = 1;
  out.height = (int)rows;
  out.width = (int)cols;
}

// CIFAR-10 binary batches: each record is 1 label byte + 3072 pixel bytes
// (RGB planes, row-major).
inline void load_cifar_records(const std::vector<std::string>& files, int count,
                               const DatasetSpec& spec, Dataset& out) {
  constexpr int kRecord = 1 + 3 * 32 * 32;
  int remaining = count;
  for (const std::string& file : files) {
    if (remaining == 0) break;
    std::ifstream in(file, std::ios::binary);
    if (!in) throw io_error("cannot open " + file);
    long long offset = 0;
    while (remaining > 0) {
      uint8_t label = 0;
      in.read(reinterpret_cast<char*>(&label), 1);
      if (!in) break;  // end of this batch file
      if (label >= 10) throw format_error(file + ": label byte " + std::to_string(label) + " out of range", offset);
      const auto raw = read_bytes(in, kRecord - 1, offset + 1, file);
      out.images.push_back(normalize_u8(raw, 3, 32, 32, spec.mean, spec.stddev));
      out.labels.push_back(label);
      offset += kRecord;
      --remaining;
    }
  }
  if (remaining > 0)
    throw format_error("cifar10: requested " + std::to_string(count) + " records, found only " +
                       std::to_string(count - remaining));
  out.num_classes = 10;
  out.channels = 3;
  out.height = 32;
  out.width = 32;
}

}  // namespace detail

// Raw (pre-normalization) synthetic-quadrant sample: uniform low noise
// everywhere, one bright block-aligned square in a random patch of quadrant
// q, label q (0=TL, 1=TR, 2=BL, 3=BR). With GAP and no PE the classes are
// indistinguishable by construction: the patch multiset carries no label
// signal, only patch position does.
inline std::vector<uint8_t> synthetic_quadrant_sample(Rng& rng, int image_size, int channels,
                                                      int block, int* label_out) {
  const int side = image_size / block, half = side / 2;
  const int q = static_cast<int>(rng.below(4));
  const int pr = (q >> 1) * half + static_cast<int>(rng.below(half));
  const int pc = (q & 1) * half + static_cast<int>(rng.below(half));
  std::vector<uint8_t> img((size_t)channels * image_size * image_size);
  for (auto& px : img) px = static_cast<uint8_t>(rng.below(64));
  for (int c = 0; c < channels; ++c)
    for (int py = 0; py < block; ++py)
      for (int px = 0; px < block; ++px)
        img[((size_t)c * image_size + pr * block + py) * image_size + pc * block + px] =
            static_cast<uint8_t>(224 + rng.below(32));
  *label_out = q;
  return img;
}

inline Dataset load_dataset(const DatasetSpec& spec, Split split) {
  const int count = split == Split::kTrain ? spec.train_size : spec.eval_size;
  if (count < 1) throw config_error("dataset split size must be >= 1");
  Dataset out;
  switch (spec.kind) {
    case DatasetKind::kMnistIdx: {
      const std::string stem = split == Split::kTrain ? "train" : "t10k";
      detail::load_idx_pair(spec.path + "/" + stem + "-images-idx3-ubyte",
                            spec.path + "/" + stem + "-labels-idx1-ubyte", count, spec, out);
      break;
    }
    case DatasetKind::kCifar10Binary: {
      std::vector<std::string> files;
      if (split == Split::kTrain)
        for (int i = 1; i <= 5; ++i) files.push_back(spec.path + "/data_batch_" + std::to_string(i) + ".bin");
      else
        files.push_back(spec.path + "/test_batch.bin");
      detail::load_cifar_records(files, count, spec, out);
      break;
    }
    case DatasetKind::kSyntheticQuadrant: {
      if (spec.image_size % spec.block_size != 0 || (spec.image_size / spec.block_size) % 2 != 0)
        throw config_error("synthetic-quadrant: image_size/block_size must be a positive even patch grid");
      // Distinct fixed stream offsets keep the splits independent.
      Rng rng(split == Split::kTrain ? spec.seed : spec.seed + 0x9e3779b97f4a7c15ULL);
      for (int i = 0; i < count; ++i) {
        int label = 0;
        const auto raw = synthetic_quadrant_sample(rng, spec.image_size, spec.channels,
                                                   spec.block_size, &label);
        out.images.push_back(detail::normalize_u8(raw, spec.channels, spec.image_size,
                                                  spec.image_size, spec.mean, spec.stddev));
        out.labels.push_back(label);
      }
      out.num_classes = 4;
      out.channels = spec.channels;
      out.height = spec.image_size;
      out.width = spec.image_size;
      break;
    }
  }
  return out;
}

}  // namespace pewire
