#include "bdlab/harness.hpp"

#include <sys/types.h>
#include <signal.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "bdlab/rng.hpp"

namespace fs = std::filesystem;

namespace bdlab {

uint64_t fnv1a64_bytes(const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot hash missing file: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    const auto got = is.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void ExperimentConfig::validate() const {
  if (dataset.load_path.empty()) {
    SynthSpec s{dataset.classes, dataset.height, dataset.width, dataset.channels,
                dataset.per_class, dataset.noise_sigma, dataset.ambiguity};
    if (s.class_count < 3 || s.class_count > 10)
      throw ValidationError("config: dataset.classes must be in [3,10]");
  }
  if (!(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0))
    throw ValidationError("config: dataset.test_fraction must be in (0,1)");
  for (int s : attack.source_classes)
    if (s < 0 || s >= dataset.classes)
      throw ValidationError("config: attack source class out of range");
  if (attack.target_class < 0 || attack.target_class >= dataset.classes)
    throw ValidationError("config: attack target class out of range");
  for (int s : attack.source_classes)
    if (s == attack.target_class)
      throw ValidationError("config: target class listed as a source class");
  if (attack.poison_per_source < 1)
    throw ValidationError("config: attack.poison_per_source must be >= 1");
  if (attack.placement != "random" && attack.placement != "fixed")
    throw ValidationError("config: attack.placement must be 'random' or 'fixed'");
  if (model.epochs < 0) throw ValidationError("config: model.epochs must be >= 0");
  if (detection.enabled) {
    DetectionConfig d;
    d.r_min = detection.r_min;
    d.r_max = detection.r_max;
    d.pi = detection.pi;
    d.lr = detection.lr;
    d.epochs = detection.epochs;
    d.batch = detection.batch;
    d.max_width_count = detection.max_width_count;
    d.validate(dataset.width);
    corner_from_string(detection.anchor);
    if (detection.n_per_class < 1)
      throw ValidationError("config: detection.n_per_class must be >= 1");
  }
  if (blur.enabled) blur_filter_from_string(blur.filter);
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["dataset"] = {{"classes", dataset.classes},
                  {"height", dataset.height},
                  {"width", dataset.width},
                  {"channels", dataset.channels},
                  {"per_class", dataset.per_class},
                  {"test_fraction", dataset.test_fraction},
                  {"noise_sigma", dataset.noise_sigma},
                  {"ambiguity", dataset.ambiguity},
                  {"load_path", dataset.load_path}};
  j["attack"] = {{"pattern", attack.pattern},
                 {"pattern_h", attack.pattern_h},
                 {"pattern_w", attack.pattern_w},
                 {"source_classes", attack.source_classes},
                 {"target_class", attack.target_class},
                 {"poison_per_source", attack.poison_per_source},
                 {"placement", attack.placement},
                 {"fixed_anchor_row", attack.fixed_anchor_row},
                 {"fixed_anchor_col", attack.fixed_anchor_col}};
  j["model"] = {{"arch", model.arch}, {"lr", model.lr}, {"batch", model.batch}, {"epochs", model.epochs}};
  j["detection"] = {{"enabled", detection.enabled},
                    {"r_min", detection.r_min},
                    {"r_max", detection.r_max},
                    {"anchor", detection.anchor},
                    {"pi", detection.pi},
                    {"lr", detection.lr},
                    {"epochs", detection.epochs},
                    {"batch", detection.batch},
                    {"n_per_class", detection.n_per_class},
                    {"max_width_count", detection.max_width_count},
                    {"early_stop", detection.early_stop}};
  j["nc"] = {{"enabled", nc.enabled},
             {"lambda_grid", nc.lambda_grid},
             {"phi", nc.phi},
             {"lr", nc.lr},
             {"epochs", nc.epochs},
             {"batch", nc.batch},
             {"include_clean_model", nc.include_clean_model}};
  j["fp"] = {{"enabled", fp.enabled}, {"stride", fp.stride}};
  j["blur"] = {{"enabled", blur.enabled}, {"filter", blur.filter}, {"size", blur.size}};
  j["robustness"] = {{"enabled", robustness.enabled},
                     {"noise_sigma_sq", robustness.noise_sigma_sq},
                     {"crop_fractions", robustness.crop_fractions}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset.classes = d.value("classes", c.dataset.classes);
    c.dataset.height = d.value("height", c.dataset.height);
    c.dataset.width = d.value("width", c.dataset.width);
    c.dataset.channels = d.value("channels", c.dataset.channels);
    c.dataset.per_class = d.value("per_class", c.dataset.per_class);
    c.dataset.test_fraction = d.value("test_fraction", c.dataset.test_fraction);
    c.dataset.noise_sigma = d.value("noise_sigma", c.dataset.noise_sigma);
    c.dataset.ambiguity = d.value("ambiguity", c.dataset.ambiguity);
    c.dataset.load_path = d.value("load_path", c.dataset.load_path);
  }
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    c.attack.pattern = a.value("pattern", c.attack.pattern);
    c.attack.pattern_h = a.value("pattern_h", c.attack.pattern_h);
    c.attack.pattern_w = a.value("pattern_w", c.attack.pattern_w);
    c.attack.source_classes = a.value("source_classes", c.attack.source_classes);
    c.attack.target_class = a.value("target_class", c.attack.target_class);
    c.attack.poison_per_source = a.value("poison_per_source", c.attack.poison_per_source);
    c.attack.placement = a.value("placement", c.attack.placement);
    c.attack.fixed_anchor_row = a.value("fixed_anchor_row", c.attack.fixed_anchor_row);
    c.attack.fixed_anchor_col = a.value("fixed_anchor_col", c.attack.fixed_anchor_col);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.arch = m.value("arch", c.model.arch);
    c.model.lr = m.value("lr", c.model.lr);
    c.model.batch = m.value("batch", c.model.batch);
    c.model.epochs = m.value("epochs", c.model.epochs);
  }
  if (j.contains("detection")) {
    const auto& d = j.at("detection");
    c.detection.enabled = d.value("enabled", c.detection.enabled);
    c.detection.r_min = d.value("r_min", c.detection.r_min);
    c.detection.r_max = d.value("r_max", c.detection.r_max);
    c.detection.anchor = d.value("anchor", c.detection.anchor);
    c.detection.pi = d.value("pi", c.detection.pi);
    c.detection.lr = d.value("lr", c.detection.lr);
    c.detection.epochs = d.value("epochs", c.detection.epochs);
    c.detection.batch = d.value("batch", c.detection.batch);
    c.detection.n_per_class = d.value("n_per_class", c.detection.n_per_class);
    c.detection.max_width_count = d.value("max_width_count", c.detection.max_width_count);
    c.detection.early_stop = d.value("early_stop", c.detection.early_stop);
  }
  if (j.contains("nc")) {
    const auto& n = j.at("nc");
    c.nc.enabled = n.value("enabled", c.nc.enabled);
    c.nc.lambda_grid = n.value("lambda_grid", c.nc.lambda_grid);
    c.nc.phi = n.value("phi", c.nc.phi);
    c.nc.lr = n.value("lr", c.nc.lr);
    c.nc.epochs = n.value("epochs", c.nc.epochs);
    c.nc.batch = n.value("batch", c.nc.batch);
    c.nc.include_clean_model = n.value("include_clean_model", c.nc.include_clean_model);
  }
  if (j.contains("fp")) {
    c.fp.enabled = j.at("fp").value("enabled", c.fp.enabled);
    c.fp.stride = j.at("fp").value("stride", c.fp.stride);
  }
  if (j.contains("blur")) {
    c.blur.enabled = j.at("blur").value("enabled", c.blur.enabled);
    c.blur.filter = j.at("blur").value("filter", c.blur.filter);
    c.blur.size = j.at("blur").value("size", c.blur.size);
  }
  if (j.contains("robustness")) {
    const auto& r = j.at("robustness");
    c.robustness.enabled = r.value("enabled", c.robustness.enabled);
    c.robustness.noise_sigma_sq = r.value("noise_sigma_sq", c.robustness.noise_sigma_sq);
    c.robustness.crop_fractions = r.value("crop_fractions", c.robustness.crop_fractions);
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config parse error in " + path + ": " + e.what());
  }
  auto c = from_json(j);
  c.validate();
  return c;
}

ExperimentConfig canonical_desk_config() { return ExperimentConfig{}; }

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json j = deterministic_json();
  j["timings"] = timings;
  return j;
}

nlohmann::json ExperimentReport::deterministic_json() const {
  nlohmann::json j;
  j["config"] = config;
  j["metrics"] = metrics;
  j["mamf_attacked"] = mamf_attacked;
  j["mamf_clean"] = mamf_clean;
  j["nc"] = nc;
  j["fp"] = fp;
  j["blur"] = blur;
  j["robustness"] = robustness;
  return j;
}

namespace {

constexpr const char* kStageOrder[] = {"dataset", "benchmark", "attack", "attacked",
                                       "metrics", "mamf",      "nc",     "fp",
                                       "blur",    "robustness", "report"};

int stage_index(const std::string& name) {
  for (size_t i = 0; i < std::size(kStageOrder); ++i)
    if (name == kStageOrder[i]) return static_cast<int>(i);
  throw ValidationError("unknown stage '" + name + "'");
}

struct LockFile {
  fs::path path;
  explicit LockFile(const fs::path& dir) : path(dir / ".lock") {
    if (fs::exists(path)) {
      std::ifstream is(path);
      pid_t owner = 0;
      is >> owner;
      if (owner > 0 && kill(owner, 0) == 0 && owner != getpid())
        throw ValidationError("experiment directory is locked by running process " +
                              std::to_string(owner) + ": " + path.string());
    }
    std::ofstream os(path);
    os << getpid() << "\n";
  }
  ~LockFile() {
    std::error_code ec;
    fs::remove(path, ec);
  }
};

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot open for writing: " + p.string());
  os << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open: " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text(p)); }

// Stage bookkeeping: stages.json records per-stage output file hashes plus
// the config hash; a rerun reuses a stage only when everything matches.
class StageLedger {
 public:
  StageLedger(fs::path dir, const std::string& config_hash) : dir_(std::move(dir)) {
    const fs::path p = dir_ / "stages.json";
    if (fs::exists(p)) {
      try {
        manifest_ = nlohmann::json::parse(read_text(p));
      } catch (...) {
        manifest_ = nlohmann::json::object();
      }
    }
    if (!manifest_.is_object() || manifest_.value("config_hash", "") != config_hash) {
      manifest_ = nlohmann::json::object();
      manifest_["config_hash"] = config_hash;
      manifest_["stages"] = nlohmann::json::object();
    }
  }

  bool reusable(const std::string& stage) const {
    const auto& stages = manifest_.at("stages");
    if (!stages.contains(stage)) return false;
    for (const auto& [rel, hash] : stages.at(stage).at("files").items()) {
      const fs::path p = dir_ / rel;
      if (!fs::exists(p)) return false;
      if (hex64(fnv1a64_file(p.string())) != hash.get<std::string>()) return false;
    }
    return true;
  }

  void record(const std::string& stage, const std::vector<std::string>& files,
              double wall_seconds) {
    nlohmann::json entry;
    entry["files"] = nlohmann::json::object();
    for (const auto& rel : files)
      entry["files"][rel] = hex64(fnv1a64_file((dir_ / rel).string()));
    entry["wall_seconds"] = wall_seconds;
    manifest_["stages"][stage] = std::move(entry);
    write_text(dir_ / "stages.json", manifest_.dump(2) + "\n");
  }

  double recorded_wall(const std::string& stage) const {
    const auto& stages = manifest_.at("stages");
    if (stages.contains(stage)) return stages.at(stage).value("wall_seconds", 0.0);
    return 0.0;
  }

 private:
  fs::path dir_;
  nlohmann::json manifest_;
};

AttackSpec make_attack_spec(const ExperimentConfig& cfg, const LabeledDataset& train) {
  AttackSpec spec;
  if (cfg.attack.pattern == "dots" || cfg.attack.pattern == "builtin")
    spec.pattern = make_dotted_pattern(cfg.attack.pattern_h, cfg.attack.pattern_w, train.channels);
  else if (cfg.attack.pattern == "blocks")
    spec.pattern = make_builtin_pattern(cfg.attack.pattern_h, cfg.attack.pattern_w, train.channels);
  else
    spec.pattern = load_pattern(cfg.attack.pattern);
  spec.source_classes = cfg.attack.source_classes;
  spec.target_class = cfg.attack.target_class;
  spec.poison_count_per_source = cfg.attack.poison_per_source;
  spec.placement = cfg.attack.placement == "fixed" ? Placement::Fixed : Placement::Random;
  if (spec.placement == Placement::Fixed) {
    spec.fixed_anchor_row = cfg.attack.fixed_anchor_row >= 0 ? cfg.attack.fixed_anchor_row
                                                             : train.height - spec.pattern.height;
    spec.fixed_anchor_col = cfg.attack.fixed_anchor_col >= 0 ? cfg.attack.fixed_anchor_col : 0;
  }
  spec.seed = derive_seed(cfg.seed, 0xa77ac4);
  return spec;
}

DetectionConfig make_detection_config(const ExperimentConfig& cfg, uint64_t scan_seed) {
  DetectionConfig d;
  d.r_min = cfg.detection.r_min;
  d.r_max = cfg.detection.r_max;
  d.anchor = corner_from_string(cfg.detection.anchor);
  d.pi = cfg.detection.pi;
  d.lr = cfg.detection.lr;
  d.epochs = cfg.detection.epochs;
  d.batch = cfg.detection.batch;
  d.max_width_count = cfg.detection.max_width_count;
  d.early_stop = cfg.detection.early_stop;
  d.seed = scan_seed;
  d.threads = cfg.threads;
  return d;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const std::string& last_stage) {
  cfg.validate();
  const int last = stage_index(last_stage);
  fs::create_directories(out_dir);
  fs::create_directories(fs::path(out_dir) / "models");
  fs::create_directories(fs::path(out_dir) / "figures");
  const fs::path dir(out_dir);
  LockFile lock(dir);

  const std::string config_dump = cfg.to_json().dump(2);
  write_text(dir / "config.json", config_dump + "\n");
  StageLedger ledger(dir, hex64(fnv1a64_bytes(config_dump.data(), config_dump.size())));

  ExperimentReport report;
  report.config = cfg.to_json();

  // in-memory pipeline state
  LabeledDataset train_set, test_set, poisoned_set;
  AttackSpec attack_spec;
  PoisonRecord record;
  std::optional<ClassifierModel> benchmark, attacked;

  auto stage = [&](const std::string& name, const std::vector<std::string>& outputs,
                   auto&& compute, auto&& reload) {
    if (stage_index(name) > last) return false;
    if (ledger.reusable(name)) {
      reload();
      report.timings[name] = {{"wall_seconds", ledger.recorded_wall(name)}, {"reused", true}};
      return true;
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      compute();
    } catch (const std::exception& e) {
      throw ComputeError("stage '" + name + "' failed: " + e.what());
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ledger.record(name, outputs, wall);
    report.timings[name] = {{"wall_seconds", wall}, {"reused", false}};
    return true;
  };

  // ---- dataset ----
  stage(
      "dataset", {"train.bdl", "test.bdl"},
      [&]() {
        LabeledDataset full;
        if (!cfg.dataset.load_path.empty()) {
          full = load_dataset(cfg.dataset.load_path);
        } else {
          SynthSpec s{cfg.dataset.classes, cfg.dataset.height, cfg.dataset.width,
                      cfg.dataset.channels, cfg.dataset.per_class, cfg.dataset.noise_sigma,
                      cfg.dataset.ambiguity};
          full = synth_dataset(s, derive_seed(cfg.seed, 0xda7a));
        }
        auto [tr, te] = split(full, cfg.dataset.test_fraction, derive_seed(cfg.seed, 0x5b117));
        train_set = std::move(tr);
        test_set = std::move(te);
        save_dataset(train_set, (dir / "train.bdl").string());
        save_dataset(test_set, (dir / "test.bdl").string());
      },
      [&]() {
        train_set = load_dataset((dir / "train.bdl").string());
        test_set = load_dataset((dir / "test.bdl").string());
      });

  // ---- benchmark model ----
  stage(
      "benchmark", {"models/benchmark.bdm", "models/benchmark.bdm.json"},
      [&]() {
        auto m = build_cnn(cfg.model.arch, train_set.height, train_set.width, train_set.channels,
                           train_set.class_count, derive_seed(cfg.seed, 0x3017));
        TrainHyper h{cfg.model.lr, cfg.model.batch, cfg.model.epochs};
        train(m, train_set, h, derive_seed(cfg.seed, 0x7a19, 0));
        m.clean_test_accuracy = clean_accuracy(m, test_set);
        save_model(m, (dir / "models/benchmark.bdm").string());
        benchmark = std::move(m);
      },
      [&]() { benchmark = load_model((dir / "models/benchmark.bdm").string()); });

  // ---- attack crafting ----
  stage(
      "attack", {"poisoned.bdl", "pattern.bdl", "poison_record.json"},
      [&]() {
        attack_spec = make_attack_spec(cfg, train_set);
        auto [poisoned, rec] = craft_attack(train_set, attack_spec);
        poisoned_set = std::move(poisoned);
        record = std::move(rec);
        save_dataset(poisoned_set, (dir / "poisoned.bdl").string());
        save_pattern(attack_spec.pattern, (dir / "pattern.bdl").string());
        write_text(dir / "poison_record.json", record.to_json() + "\n");
      },
      [&]() {
        attack_spec = make_attack_spec(cfg, train_set);
        attack_spec.pattern = load_pattern((dir / "pattern.bdl").string());
        poisoned_set = load_dataset((dir / "poisoned.bdl").string());
        record = PoisonRecord::from_json(read_text(dir / "poison_record.json"));
      });

  // ---- attacked model ----
  stage(
      "attacked", {"models/attacked.bdm", "models/attacked.bdm.json"},
      [&]() {
        auto m = build_cnn(cfg.model.arch, train_set.height, train_set.width, train_set.channels,
                           train_set.class_count, derive_seed(cfg.seed, 0x3017));
        TrainHyper h{cfg.model.lr, cfg.model.batch, cfg.model.epochs};
        train(m, poisoned_set, h, derive_seed(cfg.seed, 0x7a19, 0));
        m.clean_test_accuracy = clean_accuracy(m, test_set);
        save_model(m, (dir / "models/attacked.bdm").string());
        attacked = std::move(m);
      },
      [&]() { attacked = load_model((dir / "models/attacked.bdm").string()); });

  auto exact_variant = [&]() {
    return attack_spec.placement == Placement::Fixed
               ? BackdoorVariant::fixed_anchor(attack_spec.fixed_anchor_row,
                                               attack_spec.fixed_anchor_col)
               : BackdoorVariant::exact();
  };

  // ---- table-style metrics ----
  stage(
      "metrics", {"metrics.json"},
      [&]() {
        const auto backdoor_test = make_backdoor_test_set(test_set, attack_spec, exact_variant());
        nlohmann::json m;
        m["benchmark_accuracy"] = benchmark->clean_test_accuracy;
        m["attacked_accuracy"] = attacked->clean_test_accuracy;
        m["attack_success_rate"] =
            attack_success_rate(*attacked, backdoor_test, attack_spec.target_class);
        m["benchmark_attack_success_rate"] =
            attack_success_rate(*benchmark, backdoor_test, attack_spec.target_class);
        m["chance_level"] = 1.0 / train_set.class_count;
        m["backdoor_test_size"] = backdoor_test.images.size();
        const auto collateral = collateral_damage(*attacked, test_set, attack_spec.pattern,
                                                  attack_spec.target_class,
                                                  derive_seed(cfg.seed, 0xc0d4));
        auto arr = nlohmann::json::array();
        for (size_t c = 0; c < collateral.size(); ++c) {
          if (std::isnan(collateral[c]))
            arr.push_back(nullptr);
          else
            arr.push_back(collateral[c]);
        }
        m["collateral_damage"] = std::move(arr);
        write_text(dir / "metrics.json", m.dump(2) + "\n");
        report.metrics = std::move(m);
      },
      [&]() { report.metrics = read_json(dir / "metrics.json"); });

  // ---- MAMF detection on both models ----
  if (cfg.detection.enabled) {
    stage(
        "mamf", {"mamf_attacked.json", "mamf_clean.json"},
        [&]() {
          const auto sets_attacked = clean_detection_set(*attacked, test_set,
                                                         cfg.detection.n_per_class,
                                                         derive_seed(cfg.seed, 0xc1ea0, 1));
          const auto sets_clean = clean_detection_set(*benchmark, test_set,
                                                      cfg.detection.n_per_class,
                                                      derive_seed(cfg.seed, 0xc1ea0, 0));
          const auto res_attacked =
              scan(*attacked, sets_attacked, make_detection_config(cfg, derive_seed(cfg.seed, 0x5ca9, 1)));
          const auto res_clean =
              scan(*benchmark, sets_clean, make_detection_config(cfg, derive_seed(cfg.seed, 0x5ca9, 0)));
          report.mamf_attacked = mamf_to_json(res_attacked);
          report.mamf_clean = mamf_to_json(res_clean);
          write_text(dir / "mamf_attacked.json", report.mamf_attacked.dump(2) + "\n");
          write_text(dir / "mamf_clean.json", report.mamf_clean.dump(2) + "\n");
        },
        [&]() {
          report.mamf_attacked = read_json(dir / "mamf_attacked.json");
          report.mamf_clean = read_json(dir / "mamf_clean.json");
        });
  }

  // ---- NC baseline ----
  if (cfg.nc.enabled) {
    stage(
        "nc", {"nc.json"},
        [&]() {
          NcConfig nc;
          nc.lambda_grid = cfg.nc.lambda_grid;
          nc.phi = cfg.nc.phi;
          nc.lr = cfg.nc.lr;
          nc.epochs = cfg.nc.epochs;
          nc.batch = cfg.nc.batch;
          nc.threads = cfg.threads;
          nc.seed = derive_seed(cfg.seed, 0x2cde7, 1);
          const auto sets_attacked = clean_detection_set(*attacked, test_set,
                                                         cfg.detection.n_per_class,
                                                         derive_seed(cfg.seed, 0xc1ea0, 1));
          nlohmann::json out;
          out["attacked"] = nc_to_json(nc_detect(*attacked, sets_attacked, nc));
          if (cfg.nc.include_clean_model) {
            NcConfig ncc = nc;
            ncc.seed = derive_seed(cfg.seed, 0x2cde7, 0);
            const auto sets_clean = clean_detection_set(*benchmark, test_set,
                                                        cfg.detection.n_per_class,
                                                        derive_seed(cfg.seed, 0xc1ea0, 0));
            out["clean"] = nc_to_json(nc_detect(*benchmark, sets_clean, ncc));
          }
          write_text(dir / "nc.json", out.dump(2) + "\n");
          report.nc = std::move(out);
        },
        [&]() { report.nc = read_json(dir / "nc.json"); });
  }

  // ---- fine-pruning baseline ----
  if (cfg.fp.enabled) {
    stage(
        "fp", {"fp.json"},
        [&]() {
          const auto backdoor_test = make_backdoor_test_set(test_set, attack_spec, exact_variant());
          const auto curve =
              fp_sweep(*attacked, test_set, backdoor_test, attack_spec.target_class, cfg.fp.stride);
          nlohmann::json out;
          out["curve"] = prune_curve_to_json(curve);
          out["penultimate_width"] = attacked->penultimate_width();
          write_text(dir / "fp.json", out.dump(2) + "\n");
          report.fp = std::move(out);
        },
        [&]() { report.fp = read_json(dir / "fp.json"); });
  }

  // ---- blurring baseline ----
  if (cfg.blur.enabled) {
    stage(
        "blur", {"blur.json", "blur.csv"},
        [&]() {
          const auto backdoor_test = make_backdoor_test_set(test_set, attack_spec, exact_variant());
          const auto filter = blur_filter_from_string(cfg.blur.filter);
          const auto ev = blur_eval(*attacked, test_set, backdoor_test, filter, cfg.blur.size);
          write_blur_csv((dir / "blur.csv").string(), ev);
          nlohmann::json out;
          out["filter"] = cfg.blur.filter;
          out["size"] = cfg.blur.size;
          out["fpr"] = ev.fpr;
          out["tpr"] = ev.tpr;
          write_text(dir / "blur.json", out.dump(2) + "\n");
          report.blur = std::move(out);
        },
        [&]() { report.blur = read_json(dir / "blur.json"); });
  }

  // ---- robustness suites ----
  if (cfg.robustness.enabled) {
    stage(
        "robustness", {"robustness.json"},
        [&]() {
          nlohmann::json out;
          const int target = attack_spec.target_class;
          out["exact"] = attack_success_rate(
              *attacked, make_backdoor_test_set(test_set, attack_spec, exact_variant()), target);
          auto noise = nlohmann::json::array();
          for (double s2 : cfg.robustness.noise_sigma_sq) {
            const auto ds = make_backdoor_test_set(test_set, attack_spec, BackdoorVariant::noisy(s2));
            noise.push_back({{"sigma_sq", s2},
                             {"attack_success_rate", attack_success_rate(*attacked, ds, target)}});
          }
          out["noise"] = std::move(noise);
          auto crop = nlohmann::json::array();
          for (double f : cfg.robustness.crop_fractions) {
            const auto ds = make_backdoor_test_set(test_set, attack_spec, BackdoorVariant::cropped(f));
            crop.push_back({{"area_fraction", f},
                            {"attack_success_rate", attack_success_rate(*attacked, ds, target)}});
          }
          out["crop"] = std::move(crop);
          if (attack_spec.placement == Placement::Fixed) {
            // same anchor / random / one row up / one column right
            nlohmann::json fl;
            fl["same_anchor"] = attack_success_rate(
                *attacked,
                make_backdoor_test_set(test_set, attack_spec,
                                       BackdoorVariant::fixed_anchor(attack_spec.fixed_anchor_row,
                                                                     attack_spec.fixed_anchor_col)),
                target);
            fl["random"] = attack_success_rate(
                *attacked, make_backdoor_test_set(test_set, attack_spec, BackdoorVariant::exact()),
                target);
            fl["row_up"] = attack_success_rate(
                *attacked,
                make_backdoor_test_set(test_set, attack_spec, BackdoorVariant::shifted(-1, 0)),
                target);
            fl["col_right"] = attack_success_rate(
                *attacked,
                make_backdoor_test_set(test_set, attack_spec, BackdoorVariant::shifted(0, 1)),
                target);
            out["fixed_location"] = std::move(fl);
          }
          write_text(dir / "robustness.json", out.dump(2) + "\n");
          report.robustness = std::move(out);
        },
        [&]() { report.robustness = read_json(dir / "robustness.json"); });
  }

  // ---- report + figure data ----
  stage(
      "report", {"report.json"},
      [&]() {
        // every enabled stage must have produced its section
        if (report.metrics.is_null()) throw ComputeError("report: metrics section missing");
        if (cfg.detection.enabled && (report.mamf_attacked.is_null() || report.mamf_clean.is_null()))
          throw ComputeError("report: mamf sections missing");
        if (cfg.nc.enabled && report.nc.is_null()) throw ComputeError("report: nc section missing");
        if (cfg.fp.enabled && report.fp.is_null()) throw ComputeError("report: fp section missing");
        if (cfg.blur.enabled && report.blur.is_null())
          throw ComputeError("report: blur section missing");
        if (cfg.robustness.enabled && report.robustness.is_null())
          throw ComputeError("report: robustness section missing");
        write_text(dir / "report.json", report.to_json().dump(2) + "\n");
        emit_figure_data(report, out_dir);
      },
      [&]() {
        const auto j = read_json(dir / "report.json");
        // keep the in-memory report in sync with what is on disk
        report.metrics = j.value("metrics", report.metrics);
        report.mamf_attacked = j.value("mamf_attacked", report.mamf_attacked);
        report.mamf_clean = j.value("mamf_clean", report.mamf_clean);
        report.nc = j.value("nc", report.nc);
        report.fp = j.value("fp", report.fp);
        report.blur = j.value("blur", report.blur);
        report.robustness = j.value("robustness", report.robustness);
      });

  return report;
}

void emit_figure_data(const ExperimentReport& report, const std::string& out_dir) {
  const fs::path figdir = fs::path(out_dir) / "figures";
  fs::create_directories(figdir);

  if (!report.mamf_attacked.is_null() && !report.mamf_clean.is_null()) {
    const auto ra = mamf_from_json(report.mamf_attacked);
    const auto rc = mamf_from_json(report.mamf_clean);
    std::ofstream curve(figdir / "mamf_curve.csv");
    curve << "width,rho_attacked,rho_clean\n";
    const auto& rho_a = ra.rho[ra.idx(ra.argmax_source, ra.argmax_target)];
    const auto& rho_c = rc.rho[rc.idx(rc.argmax_source, rc.argmax_target)];
    for (size_t i = 0; i < ra.widths.size(); ++i)
      curve << ra.widths[i] << "," << rho_a[i] << "," << rho_c[i] << "\n";

    std::ofstream bars(figdir / "rho_star_bars.csv");
    bars << "model,rho_star\n";
    bars << "attacked," << ra.rho_star << "\n";
    bars << "clean," << rc.rho_star << "\n";
  }

  if (!report.fp.is_null()) {
    std::ofstream prune(figdir / "prune_curve.csv");
    prune << "pruned,clean_accuracy,attack_success_rate\n";
    for (const auto& p : report.fp.at("curve"))
      prune << p.at("pruned").get<int>() << "," << p.at("clean_accuracy").get<double>() << ","
            << p.at("attack_success_rate").get<double>() << "\n";
  }

  if (!report.blur.is_null()) {
    std::ofstream roc(figdir / "blur_roc.csv");
    roc << "filter,size,fpr,tpr\n";
    roc << report.blur.at("filter").get<std::string>() << "," << report.blur.at("size").get<int>()
        << "," << report.blur.at("fpr").get<double>() << "," << report.blur.at("tpr").get<double>()
        << "\n";
  }
}

}  // namespace bdlab
