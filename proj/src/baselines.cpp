#include "bdlab/baselines.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "bdlab/adam.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

void NcConfig::validate() const {
  if (lambda_grid.empty()) throw ValidationError("nc: empty lambda grid");
  for (double l : lambda_grid)
    if (l < 0.0) throw ValidationError("nc: lambda must be >= 0");
  if (!(phi > 0.0 && phi <= 1.0)) throw ValidationError("nc: phi must be in (0,1]");
  if (epochs < 1 || batch < 1) throw ValidationError("nc: epochs and batch must be >= 1");
  if (!(lr > 0.0f)) throw ValidationError("nc: lr must be > 0");
}

NcPerTarget nc_reverse_engineer(const ClassifierModel& model,
                                const std::vector<LabeledImage>& nontarget_images, int target,
                                double lambda, const NcConfig& cfg, uint64_t seed) {
  if (nontarget_images.empty()) throw ValidationError("nc: empty image set");
  const int H = model.input_h, W = model.input_w, C = model.input_c;

  Graph g;
  const int x = g.input("x");
  // logits start at 0 so mask and pattern start at 0.5
  const int a = g.param("mask_logits", Tensor({H, W}, 0.0f));
  const int b = g.param("pattern_logits", Tensor({H, W, C}, 0.0f));
  const int m = g.sigmoid(a);
  const int v = g.sigmoid(b);
  const int blended = g.blend(x, v, m);
  auto hd = append_forward(g, model, blended, /*trainable=*/false);
  const int ce = g.cross_entropy(hd.probs);
  const int loss = g.add(g.mean(ce), g.scale(g.sum(m), static_cast<float>(lambda)));

  std::vector<Tensor*> params{&g.tensor(a), &g.tensor(b)};
  AdamState adam;
  adam.lr = cfg.lr;
  adam.init(params);

  const int64_t px = static_cast<int64_t>(H) * W * C;
  std::vector<size_t> order(nontarget_images.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Tensor xb;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto rng = make_rng(derive_seed(seed, 0x2c, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch));
      const int n = static_cast<int>(end - begin);
      xb.shape = {n, H, W, C};
      xb.data.resize(static_cast<size_t>(n) * px);
      std::vector<int> labels(static_cast<size_t>(n), target);
      for (size_t i = begin; i < end; ++i)
        std::copy(nontarget_images[order[i]].pixels.begin(),
                  nontarget_images[order[i]].pixels.end(),
                  xb.data.begin() + static_cast<int64_t>(i - begin) * px);
      g.bind(x, xb);
      g.bind_labels(ce, labels);
      const float l = g.forward(loss).data[0];
      if (std::isnan(l)) throw ComputeError("nc: NaN loss");
      g.backward(loss);
      adam_step(params, adam);
    }
  }

  NcPerTarget out;
  out.target = target;
  out.lambda = lambda;
  // re-evaluate the sigmoids so mask/pattern reflect the final logits
  g.forward(m);
  g.forward(v);
  out.mask = g.tensor(m);
  out.mask.requires_grad = false;
  out.mask.grad.clear();
  out.pattern = g.tensor(v);
  out.pattern.requires_grad = false;
  out.pattern.grad.clear();
  double l1 = 0.0;
  for (float mv : out.mask.data) l1 += mv;
  out.mask_l1 = l1;

  // achieved fraction with the final continuous mask applied
  int64_t hits = 0;
  for (size_t begin = 0; begin < nontarget_images.size(); begin += 64) {
    const size_t end = std::min(nontarget_images.size(), begin + size_t{64});
    const int n = static_cast<int>(end - begin);
    xb.shape = {n, H, W, C};
    xb.data.resize(static_cast<size_t>(n) * px);
    for (size_t i = begin; i < end; ++i)
      std::copy(nontarget_images[i].pixels.begin(), nontarget_images[i].pixels.end(),
                xb.data.begin() + static_cast<int64_t>(i - begin) * px);
    g.bind(x, xb);
    const auto& p = g.forward(hd.probs);
    const int K = p.shape[1];
    for (int i = 0; i < n; ++i) {
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (p.data[static_cast<size_t>(i) * K + k] > p.data[static_cast<size_t>(i) * K + arg])
          arg = k;
      if (arg == target) ++hits;
    }
  }
  out.achieved_fraction = static_cast<double>(hits) / static_cast<double>(nontarget_images.size());
  return out;
}

std::vector<double> mad_anomaly_index(const std::vector<double>& values) {
  if (values.size() < 3) throw ValidationError("mad_anomaly_index: needs at least 3 values");
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const double med = median(values);
  std::vector<double> dev;
  dev.reserve(values.size());
  for (double v : values) dev.push_back(std::fabs(v - med));
  const double mad = median(dev);
  if (mad == 0.0) throw ComputeError("mad_anomaly_index: degenerate (MAD = 0)");
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(std::fabs(v - med) / (1.4826 * mad));
  return out;
}

NcResult nc_detect(const ClassifierModel& model, const CleanDetectionSets& clean_sets,
                   const NcConfig& cfg) {
  cfg.validate();
  const int K = model.class_count;
  if (static_cast<int>(clean_sets.per_class.size()) != K)
    throw ValidationError("nc_detect: clean sets do not cover every class");

  NcResult res;
  res.config = cfg;
  res.per_lambda.resize(cfg.lambda_grid.size());

  struct Job {
    size_t li;
    int target;
  };
  std::vector<Job> jobs;
  for (size_t li = 0; li < cfg.lambda_grid.size(); ++li) {
    res.per_lambda[li].lambda = cfg.lambda_grid[li];
    res.per_lambda[li].per_target.resize(static_cast<size_t>(K));
    for (int t = 0; t < K; ++t) jobs.push_back({li, t});
  }

  auto run_job = [&](const Job& job) {
    std::vector<LabeledImage> nontarget;
    for (int s = 0; s < K; ++s) {
      if (s == job.target) continue;
      const auto& set = clean_sets.per_class[static_cast<size_t>(s)];
      nontarget.insert(nontarget.end(), set.begin(), set.end());
    }
    res.per_lambda[job.li].per_target[static_cast<size_t>(job.target)] = nc_reverse_engineer(
        model, nontarget, job.target, cfg.lambda_grid[job.li], cfg,
        derive_seed(cfg.seed, 0x2cde7, job.li, static_cast<uint64_t>(job.target)));
  };

  const int threads = std::max(1, cfg.threads);
  if (threads == 1) {
    for (const auto& job : jobs) run_job(job);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    for (int tix = 0; tix < threads; ++tix) {
      pool.emplace_back([&, tix]() {
        try {
          for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= jobs.size()) break;
            run_job(jobs[i]);
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

  double best_index = -1.0;
  for (auto& lam : res.per_lambda) {
    lam.anomaly_index.assign(static_cast<size_t>(K), std::numeric_limits<double>::quiet_NaN());
    // MAD population: targets that reached the phi misclassification level
    std::vector<int> qualifying;
    std::vector<double> l1s;
    for (int t = 0; t < K; ++t) {
      const auto& pt = lam.per_target[static_cast<size_t>(t)];
      if (pt.achieved_fraction >= cfg.phi) {
        qualifying.push_back(t);
        l1s.push_back(pt.mask_l1);
      } else {
        lam.excluded_targets.push_back(t);
      }
    }
    if (qualifying.size() < 3) {
      lam.too_few_for_mad = true;
      continue;
    }
    std::vector<double> idx;
    try {
      idx = mad_anomaly_index(l1s);
    } catch (const ComputeError&) {
      lam.degenerate_mad = true;
      continue;
    }
    std::vector<double> sorted = l1s;
    std::sort(sorted.begin(), sorted.end());
    const double med = sorted.size() % 2 == 1
                           ? sorted[sorted.size() / 2]
                           : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
    for (size_t q = 0; q < qualifying.size(); ++q) {
      const int t = qualifying[q];
      lam.anomaly_index[static_cast<size_t>(t)] = idx[q];
      if (idx[q] > 2.0 && l1s[q] < med) {
        lam.flagged_targets.push_back(t);
        res.decision_attacked = true;
        if (idx[q] > best_index) {
          best_index = idx[q];
          res.inferred_target = t;
        }
      }
    }
  }
  return res;
}

nlohmann::json nc_to_json(const NcResult& r) {
  nlohmann::json j;
  j["decision_attacked"] = r.decision_attacked;
  j["inferred_target"] = r.inferred_target;
  j["phi"] = r.config.phi;
  j["lambda_grid"] = r.config.lambda_grid;
  auto arr = nlohmann::json::array();
  for (const auto& lr : r.per_lambda) {
    nlohmann::json e;
    e["lambda"] = lr.lambda;
    e["excluded_targets"] = lr.excluded_targets;
    e["flagged_targets"] = lr.flagged_targets;
    e["degenerate_mad"] = lr.degenerate_mad;
    e["too_few_for_mad"] = lr.too_few_for_mad;
    auto pt = nlohmann::json::array();
    for (const auto& p : lr.per_target) {
      nlohmann::json q;
      q["target"] = p.target;
      q["mask_l1"] = p.mask_l1;
      q["achieved_fraction"] = p.achieved_fraction;
      const double ai = lr.anomaly_index.empty()
                            ? std::numeric_limits<double>::quiet_NaN()
                            : lr.anomaly_index[static_cast<size_t>(p.target)];
      if (std::isnan(ai))
        q["anomaly_index"] = nullptr;
      else
        q["anomaly_index"] = ai;
      pt.push_back(std::move(q));
    }
    e["per_target"] = std::move(pt);
    arr.push_back(std::move(e));
  }
  j["per_lambda"] = std::move(arr);
  return j;
}

// ---- fine-pruning ----

std::vector<double> penult_mean_activations(const ClassifierModel& model,
                                            const LabeledDataset& clean_set) {
  if (clean_set.images.empty()) throw ValidationError("fp: empty clean set");
  Graph g;
  const int x = g.input("x");
  auto hd = append_forward(g, model, x, /*trainable=*/false);
  if (hd.penult < 0) throw ValidationError("fp: model has no penultimate activation");
  const int64_t px = clean_set.pixels_per_image();
  std::vector<double> sums;
  Tensor xb;
  for (size_t begin = 0; begin < clean_set.images.size(); begin += 128) {
    const size_t end = std::min(clean_set.images.size(), begin + size_t{128});
    const int n = static_cast<int>(end - begin);
    xb.shape = {n, clean_set.height, clean_set.width, clean_set.channels};
    xb.data.resize(static_cast<size_t>(n) * px);
    for (size_t i = begin; i < end; ++i)
      std::copy(clean_set.images[i].pixels.begin(), clean_set.images[i].pixels.end(),
                xb.data.begin() + static_cast<int64_t>(i - begin) * px);
    g.bind(x, xb);
    g.forward(hd.probs);
    const auto& act = g.tensor(hd.penult);
    const int J = act.shape[1];
    if (sums.empty()) sums.assign(static_cast<size_t>(J), 0.0);
    for (int i = 0; i < n; ++i)
      for (int jx = 0; jx < J; ++jx)
        sums[static_cast<size_t>(jx)] += act.data[static_cast<size_t>(i) * J + jx];
  }
  for (auto& s : sums) s /= static_cast<double>(clean_set.images.size());
  return sums;
}

ClassifierModel fp_prune(const ClassifierModel& model, const LabeledDataset& clean_set, int k) {
  const int width = model.penultimate_width();
  if (k < 0 || k >= width)
    throw ValidationError("fp_prune: k must be in [0, " + std::to_string(width) + ")");
  const auto means = penult_mean_activations(model, clean_set);
  std::vector<int> order(means.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int lhs, int rhs) { return means[static_cast<size_t>(lhs)] < means[static_cast<size_t>(rhs)]; });
  ClassifierModel pruned = model;
  pruned.penult_mask.assign(static_cast<size_t>(width), 1.0f);
  for (int i = 0; i < k; ++i) pruned.penult_mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0.0f;
  return pruned;
}

PruneCurve fp_sweep(const ClassifierModel& model, const LabeledDataset& clean_test,
                    const LabeledDataset& backdoor_test, int target, int stride) {
  if (clean_test.images.empty() || backdoor_test.images.empty())
    throw ValidationError("fp_sweep: empty test set");
  if (stride < 1) throw ValidationError("fp_sweep: stride must be >= 1");
  const int width = model.penultimate_width();
  // activation ranking is computed once; pruning k is a prefix of it
  const auto means = penult_mean_activations(model, clean_test);
  std::vector<int> order(means.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int lhs, int rhs) { return means[static_cast<size_t>(lhs)] < means[static_cast<size_t>(rhs)]; });

  PruneCurve curve;
  ClassifierModel pruned = model;
  for (int k = 0; k < width; k += stride) {
    pruned.penult_mask.assign(static_cast<size_t>(width), 1.0f);
    for (int i = 0; i < k; ++i)
      pruned.penult_mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0.0f;
    PruneCurvePoint pt;
    pt.pruned = k;
    pt.clean_accuracy = clean_accuracy(pruned, clean_test);
    pt.attack_success_rate = attack_success_rate(pruned, backdoor_test, target);
    curve.points.push_back(pt);
  }
  return curve;
}

nlohmann::json prune_curve_to_json(const PruneCurve& c) {
  auto j = nlohmann::json::array();
  for (const auto& p : c.points)
    j.push_back({{"pruned", p.pruned},
                 {"clean_accuracy", p.clean_accuracy},
                 {"attack_success_rate", p.attack_success_rate}});
  return j;
}

// ---- blurring ----

BlurFilter blur_filter_from_string(const std::string& s) {
  if (s == "average" || s == "avg") return BlurFilter::Average;
  if (s == "median" || s == "med") return BlurFilter::Median;
  throw ValidationError("unknown blur filter '" + s + "'");
}

LabeledImage blur_image(const LabeledImage& image, int h, int w, int c, BlurFilter filter,
                        int size) {
  if (size < 2) throw ValidationError("blur_image: size must be >= 2");
  if (size > h || size > w) throw ValidationError("blur_image: filter larger than the image");
  // window offsets [-floor((f-1)/2), +floor(f/2)], reflective borders
  const int lo = -((size - 1) / 2);
  const int hi = size / 2;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
  };
  LabeledImage out = image;
  std::vector<float> window;
  window.reserve(static_cast<size_t>(size) * size);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        window.clear();
        for (int dy = lo; dy <= hi; ++dy)
          for (int dx = lo; dx <= hi; ++dx) {
            const int sy = reflect(y + dy, h);
            const int sx = reflect(x + dx, w);
            window.push_back(image.pixels[(static_cast<size_t>(sy) * w + sx) * c + ch]);
          }
        float v;
        if (filter == BlurFilter::Average) {
          double s = 0.0;
          for (float wv : window) s += wv;
          v = static_cast<float>(s / static_cast<double>(window.size()));
        } else {
          std::sort(window.begin(), window.end());
          const size_t n = window.size();
          v = n % 2 == 1 ? window[n / 2] : 0.5f * (window[n / 2 - 1] + window[n / 2]);
        }
        out.pixels[(static_cast<size_t>(y) * w + x) * c + ch] = std::clamp(v, 0.0f, 1.0f);
      }
  return out;
}

bool blur_detect(const ClassifierModel& model, const LabeledImage& image, BlurFilter filter,
                 int size) {
  const LabeledImage blurred =
      blur_image(image, model.input_h, model.input_w, model.input_c, filter, size);
  return predict(model, image).second != predict(model, blurred).second;
}

BlurEval blur_eval(const ClassifierModel& model, const LabeledDataset& clean_test,
                   const LabeledDataset& backdoor_test, BlurFilter filter, int size) {
  BlurEval ev;
  auto run_set = [&](const LabeledDataset& ds, bool is_backdoor) {
    std::vector<LabeledImage> blurred;
    blurred.reserve(ds.images.size());
    for (const auto& im : ds.images)
      blurred.push_back(blur_image(im, ds.height, ds.width, ds.channels, filter, size));
    const auto preds = predict_labels(model, ds);
    LabeledDataset bd = ds;
    bd.images = std::move(blurred);
    const auto preds_blurred = predict_labels(model, bd);
    int64_t flagged = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
      BlurRow row;
      row.id = static_cast<int>(ev.rows.size());
      row.clean_label = ds.images[i].label;
      row.pred = preds[i];
      row.pred_blurred = preds_blurred[i];
      row.flagged = preds[i] != preds_blurred[i];
      row.is_backdoor = is_backdoor;
      if (row.flagged) ++flagged;
      ev.rows.push_back(row);
    }
    return preds.empty() ? 0.0 : static_cast<double>(flagged) / static_cast<double>(preds.size());
  };
  ev.fpr = run_set(clean_test, false);
  ev.tpr = run_set(backdoor_test, true);
  return ev;
}

void write_blur_csv(const std::string& path, const BlurEval& eval) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "id,set,clean_label,pred,pred_blurred,flag\n";
  for (const auto& r : eval.rows)
    os << r.id << "," << (r.is_backdoor ? "backdoor" : "clean") << "," << r.clean_label << ","
       << r.pred << "," << r.pred_blurred << "," << (r.flagged ? 1 : 0) << "\n";
}

}  // namespace bdlab
