#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mimofan/network.hpp"
#include "mimofan/tensor.hpp"

namespace mimofan {

// ---------------------------------------------------------------------------
// PGM / PPM

enum class PgmContent {
  intensity,  ///< bytes scaled to [0, 1] by 1/255
  mask,       ///< bytes >= 128 become 1, the rest 0
};

/// Parses a binary P5 PGM with maxval 255 into a (1, 1, h, w) tensor.
/// Errors are ParseErrors carrying the byte offset of the problem.
Tensor<float> parse_pgm(std::span<const std::uint8_t> bytes, PgmContent content = PgmContent::intensity);
Tensor<float> read_pgm(const std::filesystem::path& path, PgmContent content = PgmContent::intensity);

/// Encodes a single-channel (1, 1, h, w) tensor with values in [0, 1] as P5 bytes.
std::vector<std::uint8_t> encode_pgm(const Tensor<float>& image);
void write_pgm(const Tensor<float>& image, const std::filesystem::path& path);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// Segmentation overlay: grayscale image, true positives red, false positives
/// blue, false negatives green. Inputs are (1, 1, h, w); returns h*w pixels.
std::vector<Rgb> overlay_pixels(const Tensor<float>& image, const Tensor<float>& pred, const Tensor<float>& truth);
std::vector<std::uint8_t> encode_ppm(std::span<const Rgb> pixels, std::size_t height, std::size_t width);
void render_overlay(const Tensor<float>& image, const Tensor<float>& pred, const Tensor<float>& truth,
                    const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset manifest

struct ManifestRow {
  std::string case_id;
  std::filesystem::path image;
  std::filesystem::path mask;
};

/// CSV with header `case_id,image,mask`. Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::filesystem::path path;
  std::vector<ManifestRow> rows;

  std::vector<std::string> case_ids() const;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct Case {
  std::string id;
  Tensor<float> image;
  Tensor<float> mask;
};

/// Loads every case; validates shapes agree and are divisible by 2^(scales-1).
std::vector<Case> load_dataset(const DatasetManifest& manifest, int scales);

/// Writes `cases` synthetic organ-like ellipse images and exact masks plus a
/// manifest under `out_dir`. Fully determined by `seed`.
DatasetManifest synth_dataset(int cases, int size, std::uint64_t seed, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// Raw checkpoint contents: "MFAN", u32 version, u32-length config text,
/// u32 tensor count, then per tensor a u32-length name, four u32 dims and
/// little-endian float32 values. Batch-norm running statistics are stored as
/// ordinary tensors whose names end in `.running_mean` / `.running_var`.
struct Checkpoint {
  std::string config;
  std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

template <typename Scalar>
Checkpoint to_checkpoint(const ModelParams<Scalar>& params);

/// Rebuilds parameters; every tensor of the configured layout must be present with its shape.
ModelParams<float> from_checkpoint(const Checkpoint& checkpoint);

template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& params, const std::filesystem::path& path);
ModelParams<float> load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace mimofan
