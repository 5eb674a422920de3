#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mla/tensor.hpp"

namespace mla {

enum class Split { kTrain, kQuery, kGallery };
std::string split_name(Split split);

// One image with its ground-truth labels. Labels are for the generator and
// the evaluator only; training consumes UnlabeledImages.
struct ImageRecord {
  Tensor pixels;  // [h, w, 3] in [0, 1]
  int pid = 0;
  int camid = 0;
  Split split = Split::kTrain;
  std::string path;  // relative to the dataset root, e.g. "train/0003_c1_0007.ppm"
};

// Pixels only; the training data path never sees identities or cameras.
struct UnlabeledImages {
  Tensor pixels;  // [n, h, w, 3]
  std::size_t size() const { return pixels.defined() ? pixels.dim(0) : 0; }
};

UnlabeledImages unlabeled_view(const std::vector<ImageRecord>& records, Split split);
std::vector<ImageRecord> select_split(const std::vector<ImageRecord>& records, Split split);
Tensor stack_pixels(const std::vector<ImageRecord>& records);

// Procedural pedestrians on camera-keyed backgrounds. Outside the figure a
// pixel is background_strength * texture(camera) + (1 - background_strength) * 0.5.
struct SynthSpec {
  int num_ids = 32;
  int images_per_id = 8;  // per camera
  int num_cameras = 2;
  std::size_t height = 64;
  std::size_t width = 32;
  double background_strength = 0.8;
  double noise_sigma = 0.03;
  double jitter = 1.0;  // scales per-image placement and colour jitter
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// Each identity has images_per_id * num_cameras images. Image k is shot by
// camera k mod num_cameras and goes to train for k mod 5 in {0,1,2}, query
// for 3, gallery for 4.
int camera_for_index(const SynthSpec& spec, int image_index);
Split split_for_index(int image_index);

struct RenderedImage {
  std::vector<double> pixels;     // h * w * 3, unquantized
  std::vector<bool> figure_mask;  // h * w, true on the pedestrian
};
RenderedImage render_synthetic(const SynthSpec& spec, int pid, int camera, int image_index);

std::string synth_filename(int pid, int camid, int image_index);

// Writes train/, query/, gallery/ PPM files and manifest.csv under out_dir.
// Returns the number of images written.
std::size_t synth_generate(const SynthSpec& spec, const std::filesystem::path& out_dir);

struct ParsedName {
  int pid;
  int camid;
  int index;
};
// `<pid>_c<camid>_<idx>.ppm`; throws FormatError naming the file otherwise.
ParsedName parse_image_filename(const std::string& filename);

// Loads train/, query/, gallery/ (missing subdirectories are empty), sorted
// lexicographically by relative path. Throws IoError if `dir` does not exist.
std::vector<ImageRecord> load_dataset(const std::filesystem::path& dir);

struct PpmImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;  // height * width * 3
};
void write_ppm(const std::filesystem::path& path, const PpmImage& image);
PpmImage read_ppm(const std::filesystem::path& path);
PpmImage to_ppm(std::span<const double> pixels, std::size_t height, std::size_t width);

}  // namespace mla
