#include "bdlab/mamf.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <numeric>
#include <thread>

#include "bdlab/adam.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

Corner corner_from_string(const std::string& s) {
  if (s == "top_left") return Corner::TopLeft;
  if (s == "top_right") return Corner::TopRight;
  if (s == "bottom_left") return Corner::BottomLeft;
  if (s == "bottom_right") return Corner::BottomRight;
  throw ValidationError("unknown support anchor '" + s + "'");
}

std::string corner_to_string(Corner c) {
  switch (c) {
    case Corner::TopLeft: return "top_left";
    case Corner::TopRight: return "top_right";
    case Corner::BottomLeft: return "bottom_left";
    case Corner::BottomRight: return "bottom_right";
  }
  return "top_left";
}

void DetectionConfig::validate(int image_width) const {
  if (!(r_min > 0.0 && r_min <= r_max && r_max < 1.0))
    throw ValidationError("detection: need 0 < r_min <= r_max < 1");
  if (std::ceil(r_min * image_width) < 1.0)
    throw ValidationError("detection: r_min yields an empty support");
  if (!(pi > 0.0 && pi <= 1.0)) throw ValidationError("detection: pi must be in (0,1]");
  if (epochs < 1 || batch < 1) throw ValidationError("detection: epochs and batch must be >= 1");
  if (!(lr > 0.0f)) throw ValidationError("detection: lr must be > 0");
  if (max_width_count < 0) throw ValidationError("detection: max_width_count must be >= 0");
}

std::vector<int> support_widths(int image_width, double r_min, double r_max, int max_width_count) {
  const int lo = static_cast<int>(std::ceil(r_min * image_width));
  const int hi = static_cast<int>(std::floor(r_max * image_width));
  if (lo > hi)
    throw ValidationError("support_widths: empty range [" + std::to_string(lo) + "," +
                          std::to_string(hi) + "] for W=" + std::to_string(image_width));
  std::vector<int> widths;
  for (int w = std::max(1, lo); w <= hi; ++w) widths.push_back(w);
  if (max_width_count > 0 && static_cast<int>(widths.size()) > max_width_count) {
    std::vector<int> sub;
    const int L = max_width_count;
    const int n = static_cast<int>(widths.size());
    for (int i = 0; i < L; ++i) {
      const int j = L == 1 ? 0 : static_cast<int>(std::lround(static_cast<double>(i) * (n - 1) / (L - 1)));
      if (sub.empty() || sub.back() != widths[static_cast<size_t>(j)])
        sub.push_back(widths[static_cast<size_t>(j)]);
    }
    widths = std::move(sub);
  }
  return widths;
}

Mask make_support_mask(int image_h, int image_w, int w, Corner anchor) {
  if (w < 1 || w > image_h || w > image_w)
    throw ValidationError("make_support_mask: width " + std::to_string(w) + " does not fit");
  int r0 = 0, c0 = 0;
  switch (anchor) {
    case Corner::TopLeft: break;
    case Corner::TopRight: c0 = image_w - w; break;
    case Corner::BottomLeft: r0 = image_h - w; break;
    case Corner::BottomRight: r0 = image_h - w; c0 = image_w - w; break;
  }
  Mask m;
  m.height = image_h;
  m.width = image_w;
  m.anchor_row = r0;
  m.anchor_col = c0;
  m.support_h = w;
  m.support_w = w;
  m.bits.assign(static_cast<size_t>(image_h) * image_w, 0);
  for (int y = 0; y < w; ++y)
    for (int x = 0; x < w; ++x)
      m.bits[static_cast<size_t>(r0 + y) * image_w + (c0 + x)] = 1;
  return m;
}

namespace {

// One reusable graph for a (model, mask, target) estimation problem.
struct EstimationGraph {
  Graph g;
  int x = -1;
  int v = -1;
  int probs = -1;
  int objective = -1;
  int h = 0, w = 0, c = 0;

  EstimationGraph(const ClassifierModel& model, const Mask& support, int target) {
    h = model.input_h;
    w = model.input_w;
    c = model.input_c;
    x = g.input("x");
    Tensor v0({h, w, c}, 0.5f);  // mid-gray start, centroid of the box
    v = g.param("v", v0);
    Tensor mt({h, w});
    for (size_t i = 0; i < mt.data.size(); ++i) mt.data[i] = static_cast<float>(support.bits[i]);
    const int m = g.frozen("support", mt);
    const int blended = g.blend(x, v, m);
    auto hd = append_forward(g, model, blended, /*trainable=*/false);
    probs = hd.probs;
    objective = g.mean(g.select_class(hd.probs, target));
  }

  void bind_batch(const std::vector<const LabeledImage*>& images, size_t begin, size_t end) {
    const int n = static_cast<int>(end - begin);
    Tensor xb({n, h, w, c});
    const int64_t px = static_cast<int64_t>(h) * w * c;
    for (size_t i = begin; i < end; ++i)
      std::copy(images[i]->pixels.begin(), images[i]->pixels.end(),
                xb.data.begin() + static_cast<int64_t>(i - begin) * px);
    g.bind(x, xb);
  }

  // mean objective over the full set, at the current v
  double full_objective(const std::vector<const LabeledImage*>& images, int batch) {
    double sum = 0.0;
    for (size_t begin = 0; begin < images.size(); begin += static_cast<size_t>(batch)) {
      const size_t end = std::min(images.size(), begin + static_cast<size_t>(batch));
      bind_batch(images, begin, end);
      sum += static_cast<double>(g.forward(objective).data[0]) * static_cast<double>(end - begin);
    }
    return sum / static_cast<double>(images.size());
  }

  // Eq.-style misclassification fraction at the current v
  double full_rho(const std::vector<const LabeledImage*>& images, int batch, int target) {
    int64_t hits = 0;
    for (size_t begin = 0; begin < images.size(); begin += static_cast<size_t>(batch)) {
      const size_t end = std::min(images.size(), begin + static_cast<size_t>(batch));
      bind_batch(images, begin, end);
      const auto& p = g.forward(probs);
      const int K = p.shape[1];
      for (int i = 0; i < static_cast<int>(end - begin); ++i) {
        int arg = 0;
        for (int k = 1; k < K; ++k)
          if (p.data[static_cast<size_t>(i) * K + k] > p.data[static_cast<size_t>(i) * K + arg])
            arg = k;
        if (arg == target) ++hits;
      }
    }
    return static_cast<double>(hits) / static_cast<double>(images.size());
  }
};

Tensor masked_pattern(const Tensor& v, const Mask& support) {
  Tensor out = v;
  const int c = v.shape[2];
  for (int p = 0; p < support.height * support.width; ++p)
    if (!support.bits[static_cast<size_t>(p)])
      for (int ch = 0; ch < c; ++ch) out.data[static_cast<size_t>(p) * c + ch] = 0.0f;
  out.requires_grad = false;
  out.grad.clear();
  return out;
}

PatternEstimate run_estimation(EstimationGraph& eg, const std::vector<const LabeledImage*>& images,
                               int target, const Mask& support, const EstimationOpt& opt,
                               uint64_t seed) {
  if (images.empty()) throw ValidationError("estimate_pattern: empty source set");
  Tensor& v = eg.g.tensor(eg.v);
  std::fill(v.data.begin(), v.data.end(), 0.5f);

  AdamState adam;
  adam.lr = opt.lr;
  adam.init({&v});

  PatternEstimate est;
  est.objective_initial = eg.full_objective(images, opt.batch);

  std::vector<size_t> order(images.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::vector<const LabeledImage*> shuffled(images.size());

  int epoch = 0;
  for (; epoch < opt.epochs; ++epoch) {
    auto rng = make_rng(derive_seed(seed, 0xe57, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t i = 0; i < order.size(); ++i) shuffled[i] = images[order[i]];
    for (size_t begin = 0; begin < shuffled.size(); begin += static_cast<size_t>(opt.batch)) {
      const size_t end = std::min(shuffled.size(), begin + static_cast<size_t>(opt.batch));
      eg.bind_batch(shuffled, begin, end);
      const float obj = eg.g.forward(eg.objective).data[0];
      if (std::isnan(obj)) throw ComputeError("estimate_pattern: NaN objective");
      eg.g.backward(eg.objective);
      adam_step<float>({&v}, adam, /*ascent=*/true);
      for (auto& p : v.data) p = std::clamp(p, 0.0f, 1.0f);  // box projection
    }
    if (opt.early_stop && (epoch % 5 == 4 || epoch + 1 == opt.epochs)) {
      if (eg.full_rho(images, opt.batch, target) >= 1.0) {
        ++epoch;
        break;
      }
    }
  }
  est.epochs_run = epoch;
  est.objective_final = eg.full_objective(images, opt.batch);
  est.v = masked_pattern(v, support);
  return est;
}

}  // namespace

PatternEstimate estimate_pattern(const ClassifierModel& model,
                                 const std::vector<LabeledImage>& source_images, int target,
                                 const Mask& support, const EstimationOpt& opt, uint64_t seed) {
  if (target < 0 || target >= model.class_count)
    throw ValidationError("estimate_pattern: target class out of range");
  EstimationGraph eg(model, support, target);
  std::vector<const LabeledImage*> ptrs;
  ptrs.reserve(source_images.size());
  for (const auto& im : source_images) ptrs.push_back(&im);
  return run_estimation(eg, ptrs, target, support, opt, seed);
}

double mamf(const ClassifierModel& model, const std::vector<LabeledImage>& source_images,
            const Tensor& v_star, const Mask& support, int target) {
  if (source_images.empty()) throw ValidationError("mamf: empty source set");
  EstimationGraph eg(model, support, target);
  eg.g.tensor(eg.v).data = v_star.data;
  std::vector<const LabeledImage*> ptrs;
  ptrs.reserve(source_images.size());
  for (const auto& im : source_images) ptrs.push_back(&im);
  return eg.full_rho(ptrs, 64, target);
}

MamfResult scan(const ClassifierModel& model, const CleanDetectionSets& clean_sets,
                const DetectionConfig& cfg) {
  cfg.validate(model.input_w);
  const int K = model.class_count;
  if (static_cast<int>(clean_sets.per_class.size()) != K)
    throw ValidationError("scan: clean sets do not cover every class");
  for (int s = 0; s < K; ++s)
    if (clean_sets.per_class[static_cast<size_t>(s)].empty())
      throw ValidationError("scan: class " + std::to_string(s) + " has an empty clean set");

  MamfResult res;
  res.class_count = K;
  res.widths = support_widths(model.input_w, cfg.r_min, cfg.r_max, cfg.max_width_count);
  res.pi_used = cfg.pi;
  const size_t L = res.widths.size();
  res.rho.assign(static_cast<size_t>(K) * K, std::vector<double>(L, 0.0));
  res.objective_initial = res.rho;
  res.objective_final = res.rho;
  res.patterns.assign(static_cast<size_t>(K) * K, {});
  for (auto& v : res.patterns) v.resize(L);
  res.rho_bar.assign(static_cast<size_t>(K) * K, 0.0);

  int min_count = clean_sets.requested_per_class;
  for (const auto& v : clean_sets.per_class)
    min_count = std::min(min_count, static_cast<int>(v.size()));
  if (min_count < 10) {
    res.small_clean_set_warning = true;
    std::cerr << "[mamf] warning: only " << min_count
              << " clean images in the smallest class set; a high rho* is easier to reach, "
                 "consider a smaller detection threshold\n";
  }

  struct Problem {
    int s, t;
    size_t wi;
  };
  std::vector<Problem> problems;
  problems.reserve(static_cast<size_t>(K) * (K - 1) * L);
  for (int s = 0; s < K; ++s)
    for (int t = 0; t < K; ++t) {
      if (s == t) continue;
      for (size_t wi = 0; wi < L; ++wi) problems.push_back({s, t, wi});
    }

  const EstimationOpt opt{cfg.lr, cfg.epochs, cfg.batch, cfg.early_stop};

  auto run_problem = [&](const Problem& pr) {
    const auto& imgs = clean_sets.per_class[static_cast<size_t>(pr.s)];
    std::vector<const LabeledImage*> ptrs;
    ptrs.reserve(imgs.size());
    for (const auto& im : imgs) ptrs.push_back(&im);
    const Mask support = make_support_mask(model.input_h, model.input_w,
                                           res.widths[pr.wi], cfg.anchor);
    EstimationGraph eg(model, support, pr.t);
    const uint64_t pseed = derive_seed(cfg.seed, static_cast<uint64_t>(pr.s),
                                       static_cast<uint64_t>(pr.t),
                                       static_cast<uint64_t>(res.widths[pr.wi]));
    PatternEstimate est;
    try {
      est = run_estimation(eg, ptrs, pr.t, support, opt, pseed);
    } catch (const std::exception& e) {
      throw ComputeError("scan: pair (" + std::to_string(pr.s) + "," + std::to_string(pr.t) +
                         ") width " + std::to_string(res.widths[pr.wi]) + ": " + e.what());
    }
    eg.g.tensor(eg.v).data = est.v.data;
    const double rho = eg.full_rho(ptrs, opt.batch, pr.t);
    const size_t cell = res.idx(pr.s, pr.t);
    res.rho[cell][pr.wi] = rho;
    res.objective_initial[cell][pr.wi] = est.objective_initial;
    res.objective_final[cell][pr.wi] = est.objective_final;
    res.patterns[cell][pr.wi] = std::move(est.v);
  };

  const int threads = std::max(1, cfg.threads);
  if (threads == 1) {
    for (const auto& pr : problems) run_problem(pr);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    for (int tix = 0; tix < threads; ++tix) {
      pool.emplace_back([&, tix]() {
        try {
          for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= problems.size()) break;
            run_problem(problems[i]);
          }
        } catch (...) {
          errors[static_cast<size_t>(tix)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  res.rho_star = -1.0;
  res.tie = false;
  for (int s = 0; s < K; ++s)
    for (int t = 0; t < K; ++t) {
      if (s == t) continue;
      const size_t cell = res.idx(s, t);
      double mean = 0.0;
      for (double r : res.rho[cell]) mean += r;
      mean /= static_cast<double>(L);
      res.rho_bar[cell] = mean;
      if (mean > res.rho_star) {
        res.rho_star = mean;
        res.argmax_source = s;
        res.argmax_target = t;
        res.tie = false;
      } else if (mean == res.rho_star) {
        res.tie = true;  // lexicographic winner already kept
      }
    }
  res.decision_attacked = res.rho_star > cfg.pi;
  return res;
}

Decision infer(const MamfResult& result, double pi) {
  Decision d;
  d.attacked = result.rho_star > pi;
  if (d.attacked) {
    d.source = result.argmax_source;
    d.target = result.argmax_target;
  }
  return d;
}

double adaptive_r_max(const ClassifierModel& model, const CleanDetectionSets& clean_sets,
                      const DetectionConfig& cfg, double pair_fraction, double rho_floor) {
  const int K = model.class_count;
  const int W = model.input_w;
  const EstimationOpt opt{cfg.lr, cfg.epochs, cfg.batch, cfg.early_stop};
  const int lo = std::max(1, static_cast<int>(std::ceil(cfg.r_min * W)));
  for (int w = lo; w < W; ++w) {
    int reached = 0, total = 0;
    const Mask support = make_support_mask(model.input_h, W, w, cfg.anchor);
    for (int s = 0; s < K; ++s)
      for (int t = 0; t < K; ++t) {
        if (s == t) continue;
        const auto& imgs = clean_sets.per_class[static_cast<size_t>(s)];
        auto est = estimate_pattern(model, imgs, t, support, opt,
                                    derive_seed(cfg.seed, 0xada97, static_cast<uint64_t>(w),
                                                static_cast<uint64_t>(s * K + t)));
        const double rho = mamf(model, imgs, est.v, support, t);
        ++total;
        if (rho >= rho_floor) ++reached;
      }
    if (static_cast<double>(reached) >= pair_fraction * total)
      return static_cast<double>(w) / static_cast<double>(W);
  }
  return cfg.r_max;
}

nlohmann::json mamf_to_json(const MamfResult& r) {
  nlohmann::json j;
  j["class_count"] = r.class_count;
  j["widths"] = r.widths;
  j["rho_star"] = r.rho_star;
  j["argmax_source"] = r.argmax_source;
  j["argmax_target"] = r.argmax_target;
  j["tie"] = r.tie;
  j["decision_attacked"] = r.decision_attacked;
  j["pi"] = r.pi_used;
  j["small_clean_set_warning"] = r.small_clean_set_warning;
  auto rho = nlohmann::json::array();
  auto rho_bar = nlohmann::json::array();
  auto oi = nlohmann::json::array();
  auto of = nlohmann::json::array();
  for (int s = 0; s < r.class_count; ++s)
    for (int t = 0; t < r.class_count; ++t) {
      if (s == t) continue;
      const size_t cell = r.idx(s, t);
      rho.push_back({{"source", s}, {"target", t}, {"rho", r.rho[cell]}});
      rho_bar.push_back({{"source", s}, {"target", t}, {"rho_bar", r.rho_bar[cell]}});
      oi.push_back(r.objective_initial[cell]);
      of.push_back(r.objective_final[cell]);
    }
  j["rho"] = std::move(rho);
  j["rho_bar"] = std::move(rho_bar);
  j["objective_initial"] = std::move(oi);
  j["objective_final"] = std::move(of);
  return j;
}

MamfResult mamf_from_json(const nlohmann::json& j) {
  MamfResult r;
  r.class_count = j.at("class_count").get<int>();
  r.widths = j.at("widths").get<std::vector<int>>();
  r.rho_star = j.at("rho_star").get<double>();
  r.argmax_source = j.at("argmax_source").get<int>();
  r.argmax_target = j.at("argmax_target").get<int>();
  r.tie = j.at("tie").get<bool>();
  r.decision_attacked = j.at("decision_attacked").get<bool>();
  r.pi_used = j.at("pi").get<double>();
  r.small_clean_set_warning = j.value("small_clean_set_warning", false);
  const size_t cells = static_cast<size_t>(r.class_count) * r.class_count;
  r.rho.assign(cells, std::vector<double>(r.widths.size(), 0.0));
  r.rho_bar.assign(cells, 0.0);
  for (const auto& e : j.at("rho")) {
    const int s = e.at("source").get<int>(), t = e.at("target").get<int>();
    r.rho[r.idx(s, t)] = e.at("rho").get<std::vector<double>>();
  }
  for (const auto& e : j.at("rho_bar")) {
    const int s = e.at("source").get<int>(), t = e.at("target").get<int>();
    r.rho_bar[r.idx(s, t)] = e.at("rho_bar").get<double>();
  }
  return r;
}

}  // namespace bdlab
