#include "mla/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <random>
#include <regex>
#include <sstream>

#include "mla/errors.hpp"

namespace fs = std::filesystem;

namespace mla {

std::string split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kQuery: return "query";
    case Split::kGallery: return "gallery";
  }
  return "train";
}

std::vector<ImageRecord> select_split(const std::vector<ImageRecord>& records, Split split) {
  std::vector<ImageRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [split](const ImageRecord& r) { return r.split == split; });
  return out;
}

Tensor stack_pixels(const std::vector<ImageRecord>& records) {
  if (records.empty()) throw ContractError("cannot stack an empty image list");
  const Shape& s = records.front().pixels.shape();
  std::vector<double> v;
  v.reserve(records.size() * records.front().pixels.numel());
  for (const auto& r : records) {
    if (r.pixels.shape() != s) throw DimensionError("image " + r.path + " has shape " + shape_str(r.pixels.shape()));
    v.insert(v.end(), r.pixels.data().begin(), r.pixels.data().end());
  }
  return Tensor::from({records.size(), s[0], s[1], s[2]}, std::move(v));
}

UnlabeledImages unlabeled_view(const std::vector<ImageRecord>& records, Split split) {
  auto subset = select_split(records, split);
  if (subset.empty()) return {};
  return {stack_pixels(subset)};
}

void SynthSpec::validate() const {
  if (num_ids < 1) throw ConfigError("num_ids must be positive");
  if (images_per_id < 1) throw ConfigError("images_per_id must be positive");
  if (num_cameras < 2) throw ConfigError("num_cameras must be at least 2 for cross-camera evaluation");
  if (images_per_id * num_cameras < 5) throw ConfigError("each identity needs at least 5 images to appear in every split");
  if (height < 16 || width < 8) throw ConfigError("image must be at least 16x8");
  if (background_strength < 0 || background_strength > 1) throw ConfigError("background_strength must be in [0,1]");
  if (noise_sigma < 0 || jitter < 0) throw ConfigError("noise_sigma and jitter must be non-negative");
}

int camera_for_index(const SynthSpec& spec, int image_index) { return image_index % spec.num_cameras; }

Split split_for_index(int image_index) {
  switch (image_index % 5) {
    case 3: return Split::kQuery;
    case 4: return Split::kGallery;
    default: return Split::kTrain;
  }
}

namespace {

struct Rgb {
  double r, g, b;
};

using Engine = std::mt19937_64;

Engine keyed_engine(std::uint64_t seed, std::uint64_t domain, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{seed, domain, a, b};
  return Engine(seq);
}

Rgb draw_colour(Engine& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  const double r = u(rng), g = u(rng), b = u(rng);
  return {r, g, b};
}

struct Background {
  Rgb stripe_a, stripe_b, floor;
  int period;
  int orientation;  // 0 horizontal, 1 vertical, 2 diagonal
  double floor_start;

  Rgb at(std::size_t y, std::size_t x, std::size_t height) const {
    if (static_cast<double>(y) >= floor_start * static_cast<double>(height)) return floor;
    std::size_t t = orientation == 0 ? y : (orientation == 1 ? x : x + y);
    return (t / static_cast<std::size_t>(period)) % 2 == 0 ? stripe_a : stripe_b;
  }
};

Background camera_background(const SynthSpec& spec, int camera) {
  auto rng = keyed_engine(spec.seed, 1, static_cast<std::uint64_t>(camera));
  Background bg;
  bg.stripe_a = draw_colour(rng, 0.0, 1.0);
  bg.stripe_b = draw_colour(rng, 0.0, 1.0);
  bg.floor = draw_colour(rng, 0.1, 0.9);
  bg.period = std::uniform_int_distribution<int>(3, 8)(rng);
  bg.orientation = std::uniform_int_distribution<int>(0, 2)(rng);
  bg.floor_start = std::uniform_real_distribution<double>(0.7, 0.85)(rng);
  return bg;
}

struct Figure {
  Rgb head, torso, legs;
  double torso_frac;  // torso height / image height
  double width_frac;  // torso width / image width
  double leg_frac;    // single leg width / image width
};

Figure identity_figure(const SynthSpec& spec, int pid) {
  auto rng = keyed_engine(spec.seed, 2, static_cast<std::uint64_t>(pid));
  Figure f;
  f.torso = draw_colour(rng, 0.0, 1.0);
  f.legs = draw_colour(rng, 0.0, 1.0);
  f.head = draw_colour(rng, 0.45, 0.95);
  f.torso_frac = std::uniform_real_distribution<double>(0.28, 0.40)(rng);
  f.width_frac = std::uniform_real_distribution<double>(0.34, 0.50)(rng);
  f.leg_frac = std::uniform_real_distribution<double>(0.10, 0.16)(rng);
  return f;
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

RenderedImage render_synthetic(const SynthSpec& spec, int pid, int camera, int image_index) {
  const std::size_t H = spec.height, W = spec.width;
  const Background bg = camera_background(spec, camera);
  const Figure fig = identity_figure(spec, pid);
  auto rng = keyed_engine(spec.seed, 3, static_cast<std::uint64_t>(pid), static_cast<std::uint64_t>(image_index));

  const int shift_range = static_cast<int>(std::lround(2.0 * spec.jitter));
  std::uniform_int_distribution<int> shift(-shift_range, shift_range);
  const int dx = shift(rng), dy = shift(rng);
  std::uniform_real_distribution<double> tint(-0.04 * spec.jitter, 0.04 * spec.jitter);
  auto jitter_colour = [&](Rgb c) { return Rgb{clamp01(c.r + tint(rng)), clamp01(c.g + tint(rng)), clamp01(c.b + tint(rng))}; };
  const Rgb head = jitter_colour(fig.head), torso = jitter_colour(fig.torso), legs = jitter_colour(fig.legs);

  const double h = static_cast<double>(H), w = static_cast<double>(W);
  const double cx = w / 2.0 + dx;
  const double radius = 0.07 * h;
  const double head_cy = 0.06 * h + radius + dy;
  const double torso_top = head_cy + radius;
  const double torso_bottom = torso_top + fig.torso_frac * h;
  const double half_width = fig.width_frac * w / 2.0;
  const double leg_bottom = 0.95 * h + dy;
  const double leg_w = fig.leg_frac * w;
  const double gap = 0.04 * w;

  RenderedImage out;
  out.pixels.resize(H * W * 3);
  out.figure_mask.assign(H * W, false);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      const Rgb* colour = nullptr;
      if ((px - cx) * (px - cx) + (py - head_cy) * (py - head_cy) <= radius * radius) {
        colour = &head;
      } else if (py >= torso_top && py < torso_bottom && std::abs(px - cx) <= half_width) {
        colour = &torso;
      } else if (py >= torso_bottom && py < leg_bottom &&
                 ((px >= cx - gap / 2 - leg_w && px < cx - gap / 2) || (px >= cx + gap / 2 && px < cx + gap / 2 + leg_w))) {
        colour = &legs;
      }
      Rgb c;
      if (colour) {
        c = *colour;
        out.figure_mask[y * W + x] = true;
      } else {
        const Rgb t = bg.at(y, x, H);
        const double s = spec.background_strength;
        c = {s * t.r + (1 - s) * 0.5, s * t.g + (1 - s) * 0.5, s * t.b + (1 - s) * 0.5};
      }
      double* p = &out.pixels[(y * W + x) * 3];
      p[0] = c.r;
      p[1] = c.g;
      p[2] = c.b;
      if (spec.noise_sigma > 0) {
        for (int ch = 0; ch < 3; ++ch) p[ch] = clamp01(p[ch] + noise(rng));
      }
    }
  return out;
}

std::string synth_filename(int pid, int camid, int image_index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d_c%d_%04d.ppm", pid, camid, image_index);
  return buf;
}

PpmImage to_ppm(std::span<const double> pixels, std::size_t height, std::size_t width) {
  if (pixels.size() != height * width * 3) throw DimensionError("pixel buffer does not match image extent");
  PpmImage img{height, width, std::vector<std::uint8_t>(pixels.size())};
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    img.rgb[i] = static_cast<std::uint8_t>(std::lround(clamp01(pixels[i]) * 255.0));
  }
  return img;
}

void write_ppm(const fs::path& path, const PpmImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

PpmImage read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto bad = [&](const std::string& why) { return FormatError("bad PPM " + path.string() + ": " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw bad("expected a number");
    return static_cast<std::size_t>(std::stoul(bytes.substr(start, pos - start)));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw bad("missing P6 magic");
  pos = 2;
  PpmImage img;
  img.width = number();
  img.height = number();
  const std::size_t maxval = number();
  if (maxval != 255) throw bad("maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw bad("missing header terminator");
  ++pos;
  const std::size_t n = img.width * img.height * 3;
  if (img.width == 0 || img.height == 0 || bytes.size() - pos != n) throw bad("pixel payload size mismatch");
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

std::size_t synth_generate(const SynthSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  for (auto split : {Split::kTrain, Split::kQuery, Split::kGallery}) {
    fs::create_directories(out_dir / split_name(split), ec);
    if (ec) throw IoError("cannot create " + (out_dir / split_name(split)).string() + ": " + ec.message());
  }
  std::ostringstream manifest;
  manifest << "path,pid,camid,split\n";
  std::size_t written = 0;
  for (int pid = 0; pid < spec.num_ids; ++pid)
    for (int k = 0; k < spec.images_per_id * spec.num_cameras; ++k) {
      const int camera = camera_for_index(spec, k);
      const Split split = split_for_index(k);
      const auto rel = fs::path(split_name(split)) / synth_filename(pid, camera + 1, k);
      const auto img = render_synthetic(spec, pid, camera, k);
      write_ppm(out_dir / rel, to_ppm(img.pixels, spec.height, spec.width));
      manifest << rel.generic_string() << ',' << pid << ',' << camera + 1 << ',' << split_name(split) << '\n';
      ++written;
    }
  std::ofstream out(out_dir / "manifest.csv", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (out_dir / "manifest.csv").string());
  out << manifest.str();
  return written;
}

ParsedName parse_image_filename(const std::string& filename) {
  static const std::regex grammar(R"(^(\d+)_c(\d+)_(\d+)\.ppm$)");
  std::smatch m;
  if (!std::regex_match(filename, m, grammar)) {
    throw FormatError("malformed image filename '" + filename + "' (expected <pid>_c<camid>_<idx>.ppm)");
  }
  return {std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3])};
}

std::vector<ImageRecord> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  std::vector<ImageRecord> records;
  for (auto split : {Split::kTrain, Split::kQuery, Split::kGallery}) {
    const auto sub = dir / split_name(split);
    if (!fs::is_directory(sub)) continue;
    for (const auto& entry : fs::directory_iterator(sub)) {
      if (!entry.is_regular_file()) continue;
      const auto name = entry.path().filename().string();
      const auto parsed = parse_image_filename(name);
      const auto img = read_ppm(entry.path());
      std::vector<double> px(img.rgb.size());
      for (std::size_t i = 0; i < px.size(); ++i) px[i] = img.rgb[i] / 255.0;
      ImageRecord r;
      r.pixels = Tensor::from({img.height, img.width, 3}, std::move(px));
      r.pid = parsed.pid;
      r.camid = parsed.camid;
      r.split = split;
      r.path = (fs::path(split_name(split)) / name).generic_string();
      records.push_back(std::move(r));
    }
  }
  std::sort(records.begin(), records.end(), [](const ImageRecord& a, const ImageRecord& b) { return a.path < b.path; });
  return records;
}

}  // namespace mla
