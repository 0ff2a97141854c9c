#pragma once

// CT slice ingestion, HU preprocessing, five-area augmentation, dataset
// splitting and the synthetic phantom generator.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdse/anchors.hpp"
#include "pdse/detection_ops.hpp"
#include "pdse/rng.hpp"
#include "pdse/tensor.hpp"

namespace pdse {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CTSlice {
  std::string image_id;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint16_t> pixels;  // row-major raw values
  std::optional<double> spacing_mm;
  std::vector<GroundTruth> annotations;
};

/// Raw ("PDSERAW1", u32 H, u32 W, u16 LE pixels) or 16-bit grayscale PNG,
/// chosen by file signature. Throws DataError on other bit depths, colour
/// images, truncation or unknown formats.
CTSlice load_slice(const std::filesystem::path& path);
void save_slice_raw(const std::filesystem::path& path, const CTSlice& slice);
void save_slice_png16(const std::filesystem::path& path, const CTSlice& slice);
/// 8-bit RGB, row-major interleaved.
void save_png_rgb8(const std::filesystem::path& path, std::int64_t height, std::int64_t width,
                   const std::vector<std::uint8_t>& rgb);
struct PngInfo {
  std::int64_t height = 0, width = 0;
  int bit_depth = 0;
  int channels = 0;
};
/// Header fields of any PNG file.
PngInfo read_png_info(const std::filesystem::path& path);

constexpr double kHuOffset = 32768.0;
constexpr double kHuMin = -1024.0;
constexpr double kHuMax = 3071.0;

/// (clamp(raw - 32768, -1024, 3071) + 1024) / 4095 as [1,H,W].
template <typename T>
BasicTensor<T> hu_normalize(const CTSlice& slice);
double hu_normalize_value(std::uint16_t raw);

struct AugmentConfig {
  double crop_fraction = 0.6;
  std::int64_t output_size = 128;
  double min_area_fraction = 0.25;
};

struct AugmentedSample {
  BasicTensor<float> image;  // [1,S,S]
  std::vector<GroundTruth> annotations;
  Box crop;  // window in source pixel coordinates
};

/// Four corner windows and one centre window of crop_fraction * H by
/// crop_fraction * W, each resized (bilinear) to output_size. A window is
/// kept when at least one annotation centre lies inside it; its annotations
/// are clipped to the window, dropped when less than min_area_fraction of the
/// original area survives, and mapped to output coordinates.
std::vector<AugmentedSample> five_area_augment(const BasicTensor<float>& image,
                                               const std::vector<GroundTruth>& annotations,
                                               const AugmentConfig& config = {});

/// Bilinear resize of [C,H,W] with half-pixel centres.
BasicTensor<float> resize_bilinear(const BasicTensor<float>& image, std::int64_t out_h, std::int64_t out_w);

struct DatasetSplit {
  std::vector<std::string> train, val, test;
};

/// Seeded shuffle, then round(0.70 n) / round(0.15 n) / remainder. Requires
/// at least 10 distinct ids.
DatasetSplit split_dataset(const std::vector<std::string>& image_ids, std::uint64_t seed);

/// Header `image_id,x1,y1,x2,y2,class_id`.
void write_annotations_csv(std::ostream& out, const std::map<std::string, std::vector<GroundTruth>>& annotations);
std::map<std::string, std::vector<GroundTruth>> read_annotations_csv(std::istream& in);

struct PhantomClassAppearance {
  double hu_center = 0.0;
  double hu_jitter = 30.0;   // per-lesion mean offset, uniform +-
  double texture_sigma = 20.0;
};

struct PhantomSpec {
  std::int64_t count = 500;
  std::int64_t height = 128;
  std::int64_t width = 128;
  std::uint64_t seed = 1;
  double background_hu = -600.0;
  double background_amplitude = 80.0;  // smooth field, +-
  double background_noise = 15.0;      // per-pixel sigma
  int background_grid = 8;
  double min_semi_axis = 5.0;
  double max_semi_axis = 16.0;
  int min_lesions = 1;
  int max_lesions = 3;
  std::vector<PhantomClassAppearance> classes = default_classes();
  std::string output_dir = "phantoms";

  static std::vector<PhantomClassAppearance> default_classes();
  void validate() const;
};

struct PhantomLesion {
  double cy = 0, cx = 0, a = 0, b = 0, angle = 0;  // semi-axes a (along angle) and b
  int class_id = 0;
  Box box;
};

/// Tight axis-aligned box of a rotated ellipse.
Box ellipse_bounding_box(double cy, double cx, double a, double b, double angle);

/// One phantom image in memory.
struct PhantomImage {
  CTSlice slice;
  std::vector<PhantomLesion> lesions;
};

/// Lesion count and classes for every image, drawn from a reshuffled bag of
/// the nine classes so class totals differ by at most one per bag cycle.
std::vector<std::vector<int>> plan_phantom_classes(const PhantomSpec& spec);

/// A pure function of (spec, index, classes). A lesion that cannot be placed
/// without overlap is skipped.
PhantomImage render_phantom(const PhantomSpec& spec, std::int64_t index, const std::vector<int>& classes);

struct DatasetManifest {
  int format_version = 1;
  std::uint64_t seed = 0;
  std::int64_t height = 0, width = 0;
  std::vector<std::string> image_ids;
  std::vector<std::string> files;  // relative to the manifest directory
  std::string annotations_file = "annotations.csv";
  DatasetSplit split;
  std::string content_hash;  // FNV-1a 64 over image files then annotations, hex
};

/// Unknown keys are rejected; missing keys keep their defaults.
PhantomSpec phantom_spec_from_json(const std::string& text);

/// Writes images, annotations.csv and manifest.json under spec.output_dir.
DatasetManifest generate_phantoms(const PhantomSpec& spec);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);

/// Loaded dataset: slices by id with annotations attached.
struct Dataset {
  std::filesystem::path root;
  DatasetManifest manifest;
  std::map<std::string, std::vector<GroundTruth>> annotations;

  CTSlice load(const std::string& image_id) const;
  /// "train", "val", "test", or "all" (every image in manifest order).
  const std::vector<std::string>& split(const std::string& name) const;
};

Dataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace pdse
