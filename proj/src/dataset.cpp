#include "bdlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "bdlab/binio.hpp"
#include "bdlab/model.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

void LabeledDataset::validate() const {
  if (class_count < 1) throw ValidationError("dataset: class_count must be >= 1");
  if (height < 1 || width < 1 || channels < 1)
    throw ValidationError("dataset: bad image shape");
  const int64_t n = pixels_per_image();
  for (size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    if (static_cast<int64_t>(im.pixels.size()) != n)
      throw ValidationError("dataset: image " + std::to_string(i) + " has wrong pixel count");
    if (im.label < 0 || im.label >= class_count)
      throw ValidationError("dataset: image " + std::to_string(i) + " label out of range");
    for (float p : im.pixels)
      if (!(p >= 0.0f && p <= 1.0f))
        throw ValidationError("dataset: image " + std::to_string(i) + " pixel outside [0,1]");
  }
}

namespace {

struct Hsv {
  double h, s, v;
};

void hsv_to_rgb(const Hsv& in, double rgb[3]) {
  const double h = in.h * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = in.v * (1 - in.s);
  const double q = in.v * (1 - in.s * f);
  const double t = in.v * (1 - in.s * (1 - f));
  switch (i) {
    case 0: rgb[0] = in.v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = in.v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = in.v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = in.v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = in.v; break;
    default: rgb[0] = in.v; rgb[1] = p; rgb[2] = q; break;
  }
}

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0) / 255.0);
}

// Shape families, one per class index. "Spread" families (checker,
// gradient, stripes) cover the whole image so a small patch never carries
// the entire class evidence.
enum class Family {
  Disk,
  Ring,
  Checker,
  Gradient,
  Wedge,
  HBar,
  Cross,
  VBar,
  DiagStripes,
  CornerBlob,
};

LabeledImage draw_image(const SynthSpec& spec, int cls, std::mt19937_64& rng) {
  const int H = spec.height, W = spec.width, C = spec.channels;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);

  // an ambiguous draw is a genuine image of some other class (geometry and
  // color) that keeps this class's label: an irreducible confusion floor
  // with no preferred flip direction
  const bool ambiguous = u01(rng) < spec.ambiguity;
  const int geom_cls =
      ambiguous ? (cls + 1 + static_cast<int>(rng() % (spec.class_count - 1))) % spec.class_count
                : cls;
  const auto family = static_cast<Family>(geom_cls % 10);
  const double m = std::min(H, W);

  // randomized instance geometry, ranges overlapping across families
  const double margin = 0.10 * m;
  const double cy = margin + u01(rng) * (H - 2 * margin);
  const double cx = margin + u01(rng) * (W - 2 * margin);
  const double scale = 0.26 + 0.14 * u01(rng);          // relative to min dim
  const double inner = 0.35 + 0.25 * u01(rng);          // ring hole fraction
  const double thick = (0.07 + 0.09 * u01(rng)) * m;    // bars/cross arms
  const int block = 3 + static_cast<int>(rng() % 2);    // checker/stripes
  const int phase = static_cast<int>(rng() % 2);
  const bool flip = rng() % 2 == 0;

  const double brightness = 0.55 + 0.45 * u01(rng);
  double color[3];
  hsv_to_rgb({static_cast<double>(geom_cls) / spec.class_count, 0.6, brightness}, color);
  const double bg = 0.10 + 0.15 * u01(rng);
  // per-image contrast: dim instances sit near the decision boundary
  const double contrast = 0.24 + 0.76 * u01(rng);
  for (double& ch : color) ch = bg + contrast * (ch - bg);

  auto member = [&](int y, int x) -> double {  // shape coverage in [0,1]
    const double dy = y - cy, dx = x - cx;
    switch (family) {
      case Family::Disk:
        return dy * dy + dx * dx <= scale * m * scale * m ? 1.0 : 0.0;
      case Family::HBar:
        return std::fabs(dy) <= thick ? 1.0 : 0.0;
      case Family::Cross:
        return (std::fabs(dy) <= thick * 0.8 || std::fabs(dx) <= thick * 0.8) ? 1.0 : 0.0;
      case Family::Checker: {
        // checkered disk: textured but compact, so no class evidence sits
        // at the image corners
        const double r = 1.35 * scale * m;
        if (dy * dy + dx * dx > r * r) return 0.0;
        return ((y / block + x / block) % 2 == phase) ? 0.9 : 0.15;
      }
      case Family::Gradient: {
        // radial fade from a bright core
        const double r = std::sqrt(dy * dy + dx * dx) / (1.6 * scale * m);
        return std::max(0.0, 1.0 - r);
      }
      case Family::Ring: {
        const double r2 = dy * dy + dx * dx;
        const double ro = scale * m, ri = inner * ro;
        return (r2 <= ro * ro && r2 >= ri * ri) ? 1.0 : 0.0;
      }
      case Family::VBar:
        return std::fabs(dx) <= thick ? 1.0 : 0.0;
      case Family::DiagStripes:
        return (((x + (flip ? y : W - y)) / block) % 2 == phase) ? 0.8 : 0.0;
      case Family::Wedge:
        return (dy >= 0 && std::fabs(dx) <= 0.9 * dy) ? 1.0 : 0.0;
      case Family::CornerBlob: {
        const double ay = flip ? y : H - 1 - y;
        const double ax = phase ? x : W - 1 - x;
        return ay * ay + ax * ax <= 1.8 * scale * m * scale * m ? 1.0 : 0.0;
      }
    }
    return 0.0;
  };

  std::vector<double> canvas(static_cast<size_t>(H) * W * C);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double a = member(y, x);
      for (int c = 0; c < C; ++c) {
        const double fg = C == 3 ? color[c] : brightness;
        canvas[(static_cast<size_t>(y) * W + x) * C + c] = bg * (1.0 - a) + fg * a;
      }
    }
  }

  // class-irrelevant clutter: a few soft colored blobs anywhere in the
  // frame (corners included), like incidental objects in natural scenes
  const int n_distract = static_cast<int>(rng() % 3);
  for (int d = 0; d < n_distract; ++d) {
    const double dcy = u01(rng) * (H - 1);
    const double dcx = u01(rng) * (W - 1);
    const double rad = 1.2 + 1.3 * u01(rng);
    double dcol[3];
    hsv_to_rgb({u01(rng), 0.3 + 0.6 * u01(rng), 0.4 + 0.6 * u01(rng)}, dcol);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double dist2 = (y - dcy) * (y - dcy) + (x - dcx) * (x - dcx);
        const double a = 0.85 * std::exp(-dist2 / (rad * rad));
        if (a < 0.02) continue;
        for (int c = 0; c < C; ++c) {
          const double fg = C == 3 ? dcol[c] : (dcol[0] + dcol[1] + dcol[2]) / 3.0;
          auto& px = canvas[(static_cast<size_t>(y) * W + x) * C + c];
          px = px * (1.0 - a) + fg * a;
        }
      }
  }

  LabeledImage img;
  img.label = cls;
  img.pixels.resize(canvas.size());
  for (size_t i = 0; i < canvas.size(); ++i) img.pixels[i] = quantize(canvas[i] + noise(rng));
  return img;
}

}  // namespace

LabeledDataset synth_dataset(const SynthSpec& spec, uint64_t seed) {
  if (spec.class_count < 3 || spec.class_count > 10)
    throw ValidationError("synth_dataset: class_count must be in [3,10]");
  if (spec.height != spec.width || spec.height < 16 || spec.height > 32)
    throw ValidationError("synth_dataset: image must be square with side in [16,32]");
  if (spec.channels != 1 && spec.channels != 3)
    throw ValidationError("synth_dataset: channels must be 1 or 3");
  if (spec.per_class_count < 1) throw ValidationError("synth_dataset: per_class_count must be >= 1");

  LabeledDataset ds;
  ds.name = "synth-k" + std::to_string(spec.class_count) + "-" + std::to_string(spec.height) + "x" +
            std::to_string(spec.width) + "x" + std::to_string(spec.channels);
  ds.class_count = spec.class_count;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.channels = spec.channels;
  ds.images.reserve(static_cast<size_t>(spec.class_count) * spec.per_class_count);
  for (int cls = 0; cls < spec.class_count; ++cls) {
    auto rng = make_rng(derive_seed(seed, 0xda7a, static_cast<uint64_t>(cls)));
    for (int i = 0; i < spec.per_class_count; ++i) ds.images.push_back(draw_image(spec, cls, rng));
  }
  return ds;
}

void save_dataset(const LabeledDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("BDL1", 4);
  binio::write_u32(os, static_cast<uint32_t>(ds.class_count));
  binio::write_u32(os, static_cast<uint32_t>(ds.height));
  binio::write_u32(os, static_cast<uint32_t>(ds.width));
  binio::write_u32(os, static_cast<uint32_t>(ds.channels));
  binio::write_u32(os, static_cast<uint32_t>(ds.images.size()));
  std::vector<unsigned char> buf;
  for (const auto& im : ds.images) {
    binio::write_u16(os, static_cast<uint16_t>(im.label));
    buf.resize(im.pixels.size());
    for (size_t i = 0; i < im.pixels.size(); ++i) {
      const float p = im.pixels[i];
      if (!(p >= 0.0f && p <= 1.0f))
        throw IoError("save_dataset: pixel outside [0,1] in " + path);
      buf[i] = static_cast<unsigned char>(std::lround(p * 255.0f));
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  if (!os) throw IoError("write failed: " + path);
}

LabeledDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  binio::expect_magic(is, "BDL1", path);
  LabeledDataset ds;
  ds.name = path;
  ds.class_count = static_cast<int>(binio::read_u32(is, "class count"));
  ds.height = static_cast<int>(binio::read_u32(is, "height"));
  ds.width = static_cast<int>(binio::read_u32(is, "width"));
  ds.channels = static_cast<int>(binio::read_u32(is, "channels"));
  const uint32_t n = binio::read_u32(is, "image count");
  if (ds.height < 1 || ds.width < 1 || ds.channels < 1 || ds.height > 4096 || ds.width > 4096 ||
      ds.channels > 4)
    throw IoError("malformed header: implausible shape in " + path);
  const size_t px = static_cast<size_t>(ds.height) * ds.width * ds.channels;
  std::vector<unsigned char> buf;
  ds.images.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    auto& im = ds.images[i];
    im.label = binio::read_u16(is, "label");
    if (ds.class_count > 0 && im.label >= ds.class_count)
      throw IoError("malformed record: label out of range in " + path);
    binio::read_bytes(is, buf, px, "pixels");
    im.pixels.resize(px);
    for (size_t j = 0; j < px; ++j) im.pixels[j] = static_cast<float>(buf[j]) / 255.0f;
  }
  return ds;
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double test_fraction,
                                                uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ValidationError("split: test_fraction must be in (0,1)");
  LabeledDataset train = ds, test = ds;
  train.images.clear();
  test.images.clear();
  train.name = ds.name + "-train";
  test.name = ds.name + "-test";

  std::vector<std::vector<size_t>> by_class(static_cast<size_t>(ds.class_count));
  for (size_t i = 0; i < ds.images.size(); ++i)
    by_class[static_cast<size_t>(ds.images[i].label)].push_back(i);

  for (int cls = 0; cls < ds.class_count; ++cls) {
    auto& idx = by_class[static_cast<size_t>(cls)];
    if (idx.empty()) continue;
    const auto n_test = static_cast<size_t>(std::llround(static_cast<double>(idx.size()) * test_fraction));
    if (n_test == 0)
      throw ValidationError("split: class " + std::to_string(cls) + " would get zero test items");
    if (n_test >= idx.size())
      throw ValidationError("split: class " + std::to_string(cls) + " would get zero train items");
    auto rng = make_rng(derive_seed(seed, 0x5b117, static_cast<uint64_t>(cls)));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (size_t j = 0; j < idx.size(); ++j)
      (j < n_test ? test : train).images.push_back(ds.images[idx[j]]);
  }
  return {std::move(train), std::move(test)};
}

CleanDetectionSets clean_detection_set(const ClassifierModel& model, const LabeledDataset& ds,
                                       int n_per_class, uint64_t seed) {
  if (n_per_class < 1) throw ValidationError("clean_detection_set: n_per_class must be >= 1");
  ds.validate();
  const std::vector<int> preds = predict_labels(model, ds);
  CleanDetectionSets out;
  out.requested_per_class = n_per_class;
  out.class_count = ds.class_count;
  out.height = ds.height;
  out.width = ds.width;
  out.channels = ds.channels;
  out.per_class.resize(static_cast<size_t>(ds.class_count));
  for (int cls = 0; cls < ds.class_count; ++cls) {
    std::vector<size_t> ok;
    for (size_t i = 0; i < ds.images.size(); ++i)
      if (ds.images[i].label == cls && preds[i] == cls) ok.push_back(i);
    if (ok.empty())
      throw ComputeError("clean_detection_set: no correctly classified images for class " +
                         std::to_string(cls));
    auto rng = make_rng(derive_seed(seed, 0xc1ea0, static_cast<uint64_t>(cls)));
    std::shuffle(ok.begin(), ok.end(), rng);
    const size_t take = std::min(ok.size(), static_cast<size_t>(n_per_class));
    auto& dst = out.per_class[static_cast<size_t>(cls)];
    dst.reserve(take);
    for (size_t j = 0; j < take; ++j) dst.push_back(ds.images[ok[j]]);
  }
  return out;
}

}  // namespace bdlab
