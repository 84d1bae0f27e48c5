#include "bdlab/poison.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

#include "bdlab/binio.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

void PerceptiblePattern::validate() const {
  if (height < 1 || width < 1 || channels < 1) throw ValidationError("pattern: bad shape");
  if (static_cast<int64_t>(pixels.size()) != static_cast<int64_t>(height) * width * channels)
    throw ValidationError("pattern: pixel count does not match shape");
  for (float p : pixels)
    if (!(p >= 0.0f && p <= 1.0f)) throw ValidationError("pattern: pixel outside [0,1]");
  if (!stencil.empty() && static_cast<int64_t>(stencil.size()) != static_cast<int64_t>(height) * width)
    throw ValidationError("pattern: stencil size does not match shape");
}

PerceptiblePattern make_builtin_pattern(int height, int width, int channels) {
  // saturated palette laid out in 2x2 blocks; visually unlike any of the
  // synthetic class textures
  static const float palette[8][3] = {
      {1.f, 0.f, 0.f}, {0.f, 1.f, 0.f}, {0.f, 0.f, 1.f}, {1.f, 1.f, 0.f},
      {1.f, 0.f, 1.f}, {0.f, 1.f, 1.f}, {1.f, 1.f, 1.f}, {0.f, 0.f, 0.f},
  };
  PerceptiblePattern p;
  p.name = "builtin-multicolor";
  p.height = height;
  p.width = width;
  p.channels = channels;
  p.pixels.resize(static_cast<size_t>(height) * width * channels);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int cell = (y / 2) * ((width + 1) / 2) + (x / 2);
      const float* rgb = palette[cell % 8];
      for (int c = 0; c < channels; ++c) {
        const float v = channels == 3 ? rgb[c] : (rgb[0] + rgb[1] + rgb[2]) / 3.0f;
        p.pixels[(static_cast<size_t>(y) * width + x) * channels + c] =
            static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
      }
    }
  }
  return p;
}

PerceptiblePattern make_dotted_pattern(int height, int width, int channels) {
  if (height < 4 || width < 4)
    throw ValidationError("dotted pattern needs at least a 4x4 block");
  static const float palette[4][3] = {
      {1.f, 0.f, 0.f}, {0.f, 1.f, 0.f}, {0.f, 0.f, 1.f}, {1.f, 1.f, 0.f}};
  PerceptiblePattern p;
  p.name = "builtin-dots";
  p.height = height;
  p.width = width;
  p.channels = channels;
  p.pixels.assign(static_cast<size_t>(height) * width * channels, 0.0f);
  p.stencil.assign(static_cast<size_t>(height) * width, 0);
  // dots at the corners of the centered inner block, two pixels apart
  const int r0 = height / 2 - 2, c0 = width / 2 - 2;
  const int at[4][2] = {{r0, c0}, {r0, c0 + 2}, {r0 + 2, c0}, {r0 + 2, c0 + 2}};
  for (int d = 0; d < 4; ++d) {
    const int y = at[d][0], x = at[d][1];
    p.stencil[static_cast<size_t>(y) * width + x] = 1;
    for (int ch = 0; ch < channels; ++ch) {
      const float v = channels == 3 ? palette[d][ch]
                                    : (palette[d][0] + palette[d][1] + palette[d][2]) / 3.0f;
      p.pixels[(static_cast<size_t>(y) * width + x) * channels + ch] =
          static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
    }
  }
  return p;
}

void save_pattern(const PerceptiblePattern& p, const std::string& path) {
  p.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("BDL1", 4);
  binio::write_u32(os, 0);  // K=0 marks a pattern container
  binio::write_u32(os, static_cast<uint32_t>(p.height));
  binio::write_u32(os, static_cast<uint32_t>(p.width));
  binio::write_u32(os, static_cast<uint32_t>(p.channels));
  binio::write_u32(os, 1);
  binio::write_u16(os, 0);
  for (float v : p.pixels) {
    const auto b = static_cast<unsigned char>(std::lround(v * 255.0f));
    os.write(reinterpret_cast<const char*>(&b), 1);
  }
  // stenciled patterns carry their shape plane after the pixels
  if (!p.stencil.empty())
    os.write(reinterpret_cast<const char*>(p.stencil.data()),
             static_cast<std::streamsize>(p.stencil.size()));
  if (!os) throw IoError("write failed: " + path);
}

PerceptiblePattern load_pattern(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  binio::expect_magic(is, "BDL1", path);
  const uint32_t k = binio::read_u32(is, "sentinel");
  if (k != 0) throw IoError("not a pattern container (K != 0): " + path);
  PerceptiblePattern p;
  p.name = path;
  p.height = static_cast<int>(binio::read_u32(is, "height"));
  p.width = static_cast<int>(binio::read_u32(is, "width"));
  p.channels = static_cast<int>(binio::read_u32(is, "channels"));
  const uint32_t n = binio::read_u32(is, "record count");
  if (n != 1) throw IoError("pattern container must hold one record: " + path);
  binio::read_u16(is, "label");
  const size_t px = static_cast<size_t>(p.height) * p.width * p.channels;
  std::vector<unsigned char> buf;
  binio::read_bytes(is, buf, px, "pattern pixels");
  p.pixels.resize(px);
  for (size_t i = 0; i < px; ++i) p.pixels[i] = static_cast<float>(buf[i]) / 255.0f;
  // optional trailing stencil plane
  const size_t plane = static_cast<size_t>(p.height) * p.width;
  std::vector<unsigned char> sbuf(plane);
  if (is.read(reinterpret_cast<char*>(sbuf.data()), static_cast<std::streamsize>(plane))) {
    p.stencil.assign(sbuf.begin(), sbuf.end());
    for (auto b : p.stencil)
      if (b > 1) throw IoError("malformed stencil plane in " + path);
  }
  p.validate();
  return p;
}

void AttackSpec::validate(const LabeledDataset& train) const {
  pattern.validate();
  if (source_classes.empty()) throw ValidationError("attack: needs at least one source class");
  std::set<int> uniq(source_classes.begin(), source_classes.end());
  if (uniq.size() != source_classes.size())
    throw ValidationError("attack: duplicate source classes");
  for (int s : source_classes)
    if (s < 0 || s >= train.class_count)
      throw ValidationError("attack: source class out of range");
  if (target_class < 0 || target_class >= train.class_count)
    throw ValidationError("attack: target class out of range");
  if (uniq.count(target_class))
    throw ValidationError("attack: target class must not be a source class");
  if (poison_count_per_source < 1)
    throw ValidationError("attack: poison_count_per_source must be >= 1");
  if (pattern.height > train.height || pattern.width > train.width)
    throw ValidationError("attack: pattern larger than the images");
  if (pattern.channels != train.channels)
    throw ValidationError("attack: pattern channel count differs from the images");
  std::vector<int> counts(static_cast<size_t>(train.class_count), 0);
  for (const auto& im : train.images) counts[static_cast<size_t>(im.label)] += 1;
  for (int s : source_classes)
    if (counts[static_cast<size_t>(s)] < poison_count_per_source)
      throw ValidationError("attack: class " + std::to_string(s) + " has only " +
                            std::to_string(counts[static_cast<size_t>(s)]) + " items for " +
                            std::to_string(poison_count_per_source) + " poisons");
}

std::string PoisonRecord::to_json() const {
  nlohmann::json j;
  j["target_label"] = target_label;
  j["indices"] = indices;
  j["original_labels"] = original_labels;
  auto& a = j["anchors"] = nlohmann::json::array();
  for (const auto& [r, c] : anchors) a.push_back({r, c});
  return j.dump(2);
}

PoisonRecord PoisonRecord::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  PoisonRecord r;
  r.target_label = j.at("target_label").get<int>();
  r.indices = j.at("indices").get<std::vector<int64_t>>();
  r.original_labels = j.at("original_labels").get<std::vector<int>>();
  for (const auto& a : j.at("anchors")) r.anchors.emplace_back(a.at(0).get<int>(), a.at(1).get<int>());
  return r;
}

std::vector<float> embed_perceptible(const std::vector<float>& x, int h, int w, int c,
                                     const PerceptiblePattern& v, const Mask& m) {
  if (m.height != h || m.width != w) throw ShapeError("embed: mask plane differs from image");
  if (v.channels != c) throw ShapeError("embed: pattern channels differ from image");
  if (m.anchor_row < 0 || m.anchor_col < 0 || m.anchor_row + m.support_h > h ||
      m.anchor_col + m.support_w > w)
    throw ShapeError("embed: mask support exceeds image bounds");
  if (m.support_h > v.height || m.support_w > v.width)
    throw ShapeError("embed: mask support larger than the pattern");
  std::vector<float> out = x;
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      if (!m.bits[static_cast<size_t>(y) * w + xx]) continue;
      const int py = y - m.anchor_row, px = xx - m.anchor_col;
      if (py < 0 || px < 0 || py >= v.height || px >= v.width)
        throw ShapeError("embed: mask bit outside the pattern placement");
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<size_t>(y) * w + xx) * c + ch] =
            v.pixels[(static_cast<size_t>(py) * v.width + px) * v.channels + ch];
    }
  }
  return out;
}

Mask place_mask(int pattern_h, int pattern_w, const std::vector<uint8_t>& stencil, int image_h,
                int image_w, Placement placement, int anchor_row, int anchor_col, uint64_t seed) {
  if (pattern_h > image_h || pattern_w > image_w)
    throw ValidationError("place_mask: pattern larger than image");
  Mask m;
  m.height = image_h;
  m.width = image_w;
  m.support_h = pattern_h;
  m.support_w = pattern_w;
  if (placement == Placement::Random) {
    auto rng = make_rng(seed);
    std::uniform_int_distribution<int> dr(0, image_h - pattern_h);
    std::uniform_int_distribution<int> dc(0, image_w - pattern_w);
    m.anchor_row = dr(rng);
    m.anchor_col = dc(rng);
  } else {
    m.anchor_row = anchor_row;
    m.anchor_col = anchor_col;
  }
  if (m.anchor_row < 0 || m.anchor_col < 0 || m.anchor_row + pattern_h > image_h ||
      m.anchor_col + pattern_w > image_w)
    throw ValidationError("place_mask: anchor leaves the image");
  m.bits.assign(static_cast<size_t>(image_h) * image_w, 0);
  for (int y = 0; y < pattern_h; ++y)
    for (int x = 0; x < pattern_w; ++x) {
      const uint8_t s = stencil.empty() ? 1 : stencil[static_cast<size_t>(y) * pattern_w + x];
      m.bits[static_cast<size_t>(m.anchor_row + y) * image_w + (m.anchor_col + x)] = s;
    }
  return m;
}

std::vector<float> embed_imperceptible(const std::vector<float>& x,
                                       const std::vector<float>& perturbation, double p_norm,
                                       double epsilon) {
  if (x.size() != perturbation.size())
    throw ShapeError("embed_imperceptible: perturbation size differs from image");
  double norm = 0.0;
  if (std::isinf(p_norm)) {
    for (float u : perturbation) norm = std::max(norm, std::fabs(static_cast<double>(u)));
  } else if (p_norm == 0.0) {
    for (float u : perturbation) norm += u != 0.0f ? 1.0 : 0.0;
  } else {
    for (float u : perturbation) norm += std::pow(std::fabs(static_cast<double>(u)), p_norm);
    norm = std::pow(norm, 1.0 / p_norm);
  }
  if (!(norm < epsilon))
    throw ValidationError("embed_imperceptible: ||u||_p = " + std::to_string(norm) +
                          " violates the bound " + std::to_string(epsilon));
  std::vector<float> out(x.size());
  for (size_t i = 0; i < x.size(); ++i)
    out[i] = std::clamp(x[i] + perturbation[i], 0.0f, 1.0f);
  return out;
}

std::pair<LabeledDataset, PoisonRecord> craft_attack(const LabeledDataset& train,
                                                     const AttackSpec& spec) {
  spec.validate(train);
  LabeledDataset out = train;
  out.name = train.name + "-poisoned";
  PoisonRecord rec;
  rec.target_label = spec.target_class;

  for (size_t si = 0; si < spec.source_classes.size(); ++si) {
    const int s = spec.source_classes[si];
    std::vector<size_t> candidates;
    for (size_t i = 0; i < train.images.size(); ++i)
      if (train.images[i].label == s) candidates.push_back(i);
    auto rng = make_rng(derive_seed(spec.seed, 0xa77ac4, static_cast<uint64_t>(s)));
    std::shuffle(candidates.begin(), candidates.end(), rng);
    for (int k = 0; k < spec.poison_count_per_source; ++k) {
      const size_t idx = candidates[static_cast<size_t>(k)];
      const Mask m = place_mask(
          spec.pattern.height, spec.pattern.width, spec.pattern.stencil, train.height, train.width,
          spec.placement, spec.fixed_anchor_row, spec.fixed_anchor_col,
          derive_seed(spec.seed, 0x91ace, static_cast<uint64_t>(s), static_cast<uint64_t>(k)));
      auto& im = out.images[idx];
      im.pixels = embed_perceptible(im.pixels, train.height, train.width, train.channels,
                                    spec.pattern, m);
      im.label = spec.target_class;
      rec.indices.push_back(static_cast<int64_t>(idx));
      rec.anchors.emplace_back(m.anchor_row, m.anchor_col);
      rec.original_labels.push_back(s);
    }
  }
  return {std::move(out), std::move(rec)};
}

std::vector<float> gaussian_noise_field(size_t count, double sigma_sq, uint64_t seed) {
  if (sigma_sq < 0.0) throw ValidationError("noise: sigma_sq must be >= 0");
  std::vector<float> field(count, 0.0f);
  if (sigma_sq == 0.0) return field;
  auto rng = make_rng(seed);
  std::normal_distribution<double> d(0.0, std::sqrt(sigma_sq));
  for (auto& v : field) v = static_cast<float>(d(rng));
  return field;
}

PerceptiblePattern perturb_pattern_noise(const PerceptiblePattern& v, double sigma_sq,
                                         uint64_t seed) {
  PerceptiblePattern out = v;
  const auto field = gaussian_noise_field(v.pixels.size(), sigma_sq, seed);
  for (size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = std::clamp(out.pixels[i] + field[i], 0.0f, 1.0f);
  return out;
}

PerceptiblePattern crop_pattern(const PerceptiblePattern& v, double area_fraction) {
  if (!(area_fraction > 0.0 && area_fraction <= 1.0))
    throw ValidationError("crop_pattern: area_fraction must be in (0,1]");
  if (area_fraction == 1.0) return v;
  const double lin = std::sqrt(area_fraction);
  const int nh = std::max(1, static_cast<int>(std::lround(v.height * lin)));
  const int nw = std::max(1, static_cast<int>(std::lround(v.width * lin)));
  const int r0 = (v.height - nh) / 2;
  const int c0 = (v.width - nw) / 2;
  PerceptiblePattern out;
  out.name = v.name + "-crop";
  out.height = nh;
  out.width = nw;
  out.channels = v.channels;
  out.pixels.resize(static_cast<size_t>(nh) * nw * v.channels);
  if (!v.stencil.empty()) out.stencil.resize(static_cast<size_t>(nh) * nw);
  for (int y = 0; y < nh; ++y)
    for (int x = 0; x < nw; ++x) {
      for (int c = 0; c < v.channels; ++c)
        out.pixels[(static_cast<size_t>(y) * nw + x) * v.channels + c] =
            v.pixels[(static_cast<size_t>(y + r0) * v.width + (x + c0)) * v.channels + c];
      if (!v.stencil.empty())
        out.stencil[static_cast<size_t>(y) * nw + x] =
            v.stencil[static_cast<size_t>(y + r0) * v.width + (x + c0)];
    }
  return out;
}

BackdoorVariant BackdoorVariant::noisy(double s2) {
  BackdoorVariant v;
  v.kind = Kind::Noisy;
  v.sigma_sq = s2;
  return v;
}

BackdoorVariant BackdoorVariant::cropped(double f) {
  BackdoorVariant v;
  v.kind = Kind::Cropped;
  v.area_fraction = f;
  return v;
}

BackdoorVariant BackdoorVariant::fixed_anchor(int r, int c) {
  BackdoorVariant v;
  v.kind = Kind::FixedAnchor;
  v.anchor_row = r;
  v.anchor_col = c;
  return v;
}

BackdoorVariant BackdoorVariant::shifted(int dr, int dc) {
  BackdoorVariant v;
  v.kind = Kind::Shifted;
  v.shift_rows = dr;
  v.shift_cols = dc;
  return v;
}

LabeledDataset make_backdoor_test_set(const LabeledDataset& test, const AttackSpec& spec,
                                      const BackdoorVariant& variant) {
  spec.pattern.validate();
  LabeledDataset out = test;
  out.name = test.name + "-backdoor";
  out.images.clear();
  std::set<int> sources(spec.source_classes.begin(), spec.source_classes.end());

  uint64_t item = 0;
  for (const auto& im : test.images) {
    if (!sources.count(im.label)) continue;
    PerceptiblePattern pat = spec.pattern;
    const uint64_t iseed = derive_seed(spec.seed, 0x7e57, item);
    switch (variant.kind) {
      case BackdoorVariant::Kind::Noisy:
        // independent noise per test image, drawn before placement
        pat = perturb_pattern_noise(pat, variant.sigma_sq, derive_seed(iseed, 1));
        break;
      case BackdoorVariant::Kind::Cropped:
        pat = crop_pattern(pat, variant.area_fraction);
        break;
      default:
        break;
    }
    Mask m;
    switch (variant.kind) {
      case BackdoorVariant::Kind::FixedAnchor:
        m = place_mask(pat.height, pat.width, pat.stencil, test.height, test.width,
                       Placement::Fixed, variant.anchor_row, variant.anchor_col, 0);
        break;
      case BackdoorVariant::Kind::Shifted: {
        const int r = spec.fixed_anchor_row + variant.shift_rows;
        const int c = spec.fixed_anchor_col + variant.shift_cols;
        m = place_mask(pat.height, pat.width, pat.stencil, test.height, test.width,
                       Placement::Fixed, r, c, 0);
        break;
      }
      default:
        m = place_mask(pat.height, pat.width, pat.stencil, test.height, test.width,
                       Placement::Random, 0, 0, derive_seed(iseed, 2));
        break;
    }
    LabeledImage shot = im;  // original label retained for bookkeeping
    shot.pixels = embed_perceptible(im.pixels, test.height, test.width, test.channels, pat, m);
    out.images.push_back(std::move(shot));
    ++item;
  }
  return out;
}

}  // namespace bdlab
