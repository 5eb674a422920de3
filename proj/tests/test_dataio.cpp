#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "mla/dataio.hpp"
#include "mla/errors.hpp"

using namespace mla;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthSpec small_spec() {
  SynthSpec s;
  s.num_ids = 4;
  s.images_per_id = 5;
  s.seed = 3;
  return s;
}

double rms(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace

TEST_CASE("camera and split assignment by image index") {
  SynthSpec s;
  CHECK(camera_for_index(s, 0) == 0);
  CHECK(camera_for_index(s, 1) == 1);
  CHECK(camera_for_index(s, 6) == 0);
  CHECK(split_for_index(0) == Split::kTrain);
  CHECK(split_for_index(2) == Split::kTrain);
  CHECK(split_for_index(3) == Split::kQuery);
  CHECK(split_for_index(4) == Split::kGallery);
  CHECK(split_for_index(5) == Split::kTrain);
  // 16 images per identity split 10 / 3 / 3 with both cameras in every split.
  std::set<std::pair<int, int>> seen;
  int counts[3] = {0, 0, 0};
  for (int k = 0; k < s.images_per_id * s.num_cameras; ++k) {
    const auto split = split_for_index(k);
    ++counts[static_cast<int>(split)];
    seen.insert({static_cast<int>(split), camera_for_index(s, k)});
  }
  CHECK(counts[0] == 10);
  CHECK(counts[1] == 3);
  CHECK(counts[2] == 3);
  CHECK(seen.size() == 6);
}

TEST_CASE("synthetic dataset settings are validated") {
  SynthSpec s;
  CHECK_NOTHROW(s.validate());
  s.num_cameras = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SynthSpec{};
  s.background_strength = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SynthSpec{};
  s.images_per_id = 2;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SynthSpec{};
  s.height = 8;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("without background the camera does not matter") {
  SynthSpec s;
  s.background_strength = 0.0;
  s.noise_sigma = 0.0;
  s.jitter = 0.0;
  for (int pid : {0, 5, 17}) {
    const auto a = render_synthetic(s, pid, 0, 0);
    const auto b = render_synthetic(s, pid, 1, 1);
    CHECK(a.pixels == b.pixels);
  }
}

TEST_CASE("same camera shares the exact background") {
  SynthSpec s;
  s.background_strength = 1.0;
  s.noise_sigma = 0.0;
  s.jitter = 0.0;
  const auto a = render_synthetic(s, 2, 1, 1);
  const auto b = render_synthetic(s, 9, 1, 3);
  std::size_t shared = 0;
  for (std::size_t p = 0; p < s.height * s.width; ++p) {
    if (a.figure_mask[p] || b.figure_mask[p]) continue;
    ++shared;
    for (std::size_t c = 0; c < 3; ++c) CHECK(a.pixels[p * 3 + c] == b.pixels[p * 3 + c]);
  }
  CHECK(shared > s.height * s.width / 3);
  // Different cameras do not share it.
  const auto other = render_synthetic(s, 9, 0, 2);
  std::size_t differing = 0;
  for (std::size_t p = 0; p < s.height * s.width; ++p)
    if (!other.figure_mask[p] && !b.figure_mask[p] && other.pixels[p * 3] != b.pixels[p * 3]) ++differing;
  CHECK(differing > 0);
}

TEST_CASE("pixels stay in the unit range") {
  SynthSpec s;
  s.noise_sigma = 0.2;
  const auto r = render_synthetic(s, 1, 0, 0);
  for (double v : r.pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("camera confound at full background strength") {
  SynthSpec s;
  s.background_strength = 1.0;
  double same_cam = 0.0, same_pid = 0.0;
  int n_cam = 0, n_pid = 0;
  for (int a = 0; a < s.num_ids; ++a) {
    for (int k = 0; k < 4; ++k) {
      const auto img = render_synthetic(s, a, camera_for_index(s, k), k);
      // Same camera, next identity.
      const int b = (a + 1) % s.num_ids;
      same_cam += rms(img.pixels, render_synthetic(s, b, camera_for_index(s, k), k).pixels);
      ++n_cam;
      // Same identity, other camera.
      same_pid += rms(img.pixels, render_synthetic(s, a, camera_for_index(s, k + 1), k + 1).pixels);
      ++n_pid;
    }
  }
  CHECK(same_cam / n_cam < same_pid / n_pid);
}

TEST_CASE("camera confound at the default background strength") {
  SynthSpec s;
  double same_cam = 0.0, same_pid = 0.0;
  for (int a = 0; a < s.num_ids; ++a) {
    const auto img = render_synthetic(s, a, 0, 0);
    same_cam += rms(img.pixels, render_synthetic(s, (a + 1) % s.num_ids, 0, 2).pixels);
    same_pid += rms(img.pixels, render_synthetic(s, a, 1, 1).pixels);
  }
  CHECK(same_cam < same_pid);
}

TEST_CASE("filename parsing") {
  const auto p = parse_image_filename("0003_c1_0007.ppm");
  CHECK(p.pid == 3);
  CHECK(p.camid == 1);
  CHECK(p.index == 7);
  CHECK(synth_filename(3, 1, 7) == "0003_c1_0007.ppm");
  for (const char* bad : {"3_1_7.ppm", "0003_c1_0007.png", "a003_c1_0007.ppm", "0003_c1_0007.ppm.bak", "", "0003c1_7.ppm"}) {
    CHECK_THROWS_AS(parse_image_filename(bad), FormatError);
  }
  try {
    parse_image_filename("bogus.ppm");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("bogus.ppm") != std::string::npos);
  }
}

TEST_CASE("PPM round-trip is bit exact") {
  TempDir dir("mla_ppm_test");
  PpmImage img{3, 2, {}};
  for (int i = 0; i < 18; ++i) img.rgb.push_back(static_cast<std::uint8_t>(i * 14));
  write_ppm(dir.path / "a.ppm", img);
  const auto back = read_ppm(dir.path / "a.ppm");
  CHECK(back.height == 3);
  CHECK(back.width == 2);
  CHECK(back.rgb == img.rgb);
  CHECK(slurp(dir.path / "a.ppm").rfind("P6\n", 0) == 0);
}

TEST_CASE("malformed PPM files are format errors") {
  TempDir dir("mla_ppm_bad");
  std::ofstream(dir.path / "p3.ppm") << "P3\n1 1\n255\n0 0 0\n";
  std::ofstream(dir.path / "short.ppm", std::ios::binary) << "P6\n2 2\n255\n" << std::string(5, 'x');
  std::ofstream(dir.path / "maxval.ppm", std::ios::binary) << "P6\n1 1\n65535\n" << std::string(6, 'x');
  CHECK_THROWS_AS(read_ppm(dir.path / "p3.ppm"), FormatError);
  CHECK_THROWS_AS(read_ppm(dir.path / "short.ppm"), FormatError);
  CHECK_THROWS_AS(read_ppm(dir.path / "maxval.ppm"), FormatError);
}

TEST_CASE("quantization rounds to the nearest level") {
  const std::vector<double> px{0.0, 1.0, 0.5, 0.2, 0.9999, 0.0019};
  const auto img = to_ppm(px, 1, 2);
  CHECK(img.rgb == std::vector<std::uint8_t>{0, 255, 128, 51, 255, 0});
}

TEST_CASE("generation is deterministic and loads back") {
  TempDir a("mla_synth_a"), b("mla_synth_b");
  const auto spec = small_spec();
  const std::size_t n = synth_generate(spec, a.path);
  CHECK(n == 40);
  synth_generate(spec, b.path);
  for (const auto& entry : fs::recursive_directory_iterator(a.path)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a.path);
    CHECK(slurp(entry.path()) == slurp(b.path / rel));
  }

  const auto records = load_dataset(a.path);
  CHECK(records.size() == 40);
  std::set<int> pids;
  std::set<std::pair<int, int>> per_split;
  for (const auto& r : records) {
    pids.insert(r.pid);
    per_split.insert({static_cast<int>(r.split), r.pid});
    CHECK(r.pixels.shape() == Shape{64, 32, 3});
  }
  CHECK(pids.size() == 4);
  CHECK(per_split.size() == 12);  // every identity in every split
  for (std::size_t i = 1; i < records.size(); ++i) CHECK(records[i - 1].path < records[i].path);

  // Loaded pixels are the quantized rendering.
  const auto& r0 = records.front();
  const auto parsed = parse_image_filename(fs::path(r0.path).filename().string());
  const auto rendered = render_synthetic(spec, parsed.pid, parsed.camid - 1, parsed.index);
  const auto q = to_ppm(rendered.pixels, spec.height, spec.width);
  for (std::size_t i = 0; i < q.rgb.size(); ++i) CHECK(r0.pixels.data()[i] == q.rgb[i] / 255.0);

  const std::string manifest = slurp(a.path / "manifest.csv");
  CHECK(manifest.rfind("path,pid,camid,split\n", 0) == 0);
  CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 41);
}

TEST_CASE("splits and the unlabeled view") {
  TempDir a("mla_synth_split");
  synth_generate(small_spec(), a.path);
  const auto records = load_dataset(a.path);
  CHECK(select_split(records, Split::kTrain).size() == 24);
  CHECK(select_split(records, Split::kQuery).size() == 8);
  CHECK(select_split(records, Split::kGallery).size() == 8);
  const auto view = unlabeled_view(records, Split::kTrain);
  CHECK(view.size() == 24);
  CHECK(view.pixels.shape() == Shape{24, 64, 32, 3});
  CHECK(stack_pixels(select_split(records, Split::kTrain)).data()[0] == view.pixels.data()[0]);
}

TEST_CASE("empty or missing subdirectories give empty splits") {
  TempDir a("mla_empty_ds");
  fs::create_directories(a.path / "train");
  CHECK(load_dataset(a.path).empty());
  CHECK(unlabeled_view(load_dataset(a.path), Split::kTrain).size() == 0);
}

TEST_CASE("loader errors") {
  CHECK_THROWS_AS(load_dataset(fs::temp_directory_path() / "mla_does_not_exist_xyz"), IoError);
  TempDir a("mla_bad_names");
  fs::create_directories(a.path / "train");
  write_ppm(a.path / "train" / "photo.ppm", PpmImage{1, 1, {0, 0, 0}});
  try {
    load_dataset(a.path);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("photo.ppm") != std::string::npos);
  }
}

TEST_CASE("generation into an unwritable location is an I/O error") {
  TempDir a("mla_unwritable");
  std::ofstream(a.path / "file") << "x";
  CHECK_THROWS_AS(synth_generate(small_spec(), a.path / "file" / "sub"), IoError);
}
