#include "tempose/cli.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <toml.hpp>

#include "tempose/eval.hpp"
#include "tempose/metrics.hpp"

namespace tempose::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// -- config --------------------------------------------------------------------------

namespace {

class TableReader {
 public:
  TableReader(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

  template <class T>
  void read(const char* key, T& dst) {
    known_.insert(key);
    if (table_ == nullptr) return;
    const toml::node* node = table_->get(key);
    if (node == nullptr) return;
    if constexpr (std::is_same_v<T, bool>) {
      const auto v = node->value<bool>();
      if (!v) fail(key, "a boolean");
      dst = *v;
    } else if constexpr (std::is_integral_v<T>) {
      if (!node->is_integer()) fail(key, "an integer");
      dst = static_cast<T>(*node->value<std::int64_t>());
    } else {
      if (!node->is_number()) fail(key, "a number");
      dst = *node->value<double>();
    }
  }

  // Returns true when the key was present.
  template <class T>
  bool read_flag(const char* key, T& dst) {
    const bool present = table_ != nullptr && table_->contains(key);
    read(key, dst);
    return present;
  }

  void finish() const {
    if (table_ == nullptr) return;
    for (const auto& [k, v] : *table_) {
      const std::string key(k.str());
      if (key == "seed") throw ConfigError(fmt::format("[{}] seed: the seed is set with --seed only", name_));
      if (!known_.count(key)) {
        const auto line = k.source().begin.line;
        throw ConfigError(fmt::format("[{}] unknown key '{}' (line {})", name_, key, line));
      }
    }
  }

 private:
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError(fmt::format("[{}] {} must be {}", name_, key, what));
  }

  const toml::table* table_;
  std::string name_;
  std::set<std::string> known_;
};

}  // namespace

ordered_json RunConfig::to_json() const {
  ordered_json s;
  s["objects"] = synth.objects;
  s["feature_dim"] = synth.feature_dim;
  s["keyframes"] = synth.keyframes;
  s["frames_per_segment"] = synth.frames_per_segment;
  s["keyframe_max_angle"] = synth.keyframe_max_angle;
  s["keyframe_max_shift"] = synth.keyframe_max_shift;
  s["orientation_range"] = synth.orientation_range;
  s["feature_noise"] = synth.feature_noise;
  s["image_width"] = synth.image_width;
  s["image_height"] = synth.image_height;
  s["fx"] = synth.intrinsics.fx;
  s["fy"] = synth.intrinsics.fy;
  s["px"] = synth.intrinsics.px;
  s["py"] = synth.intrinsics.py;
  s["num_classes"] = synth.num_classes;
  s["model_points"] = synth.model_points;
  s["train_sequences"] = train_sequences;
  s["val_sequences"] = val_sequences;
  ordered_json t = train.to_json();
  t.erase("seed");
  ordered_json j;
  j["synth"] = std::move(s);
  j["model"] = model.to_json();
  j["train"] = std::move(t);
  return j;
}

RunConfig parse_config(const std::string& toml_text, const std::string& origin) {
  toml::table root;
  try {
    root = toml::parse(toml_text, origin);
  } catch (const toml::parse_error& e) {
    throw ConfigError(fmt::format("{}: {} (line {})", origin, e.description(), e.source().begin.line));
  }
  for (const auto& [k, v] : root) {
    const std::string key(k.str());
    if (key == "seed") throw ConfigError("seed: the seed is set with --seed only");
    if (key != "synth" && key != "model" && key != "train") {
      throw ConfigError(fmt::format("{}: unknown section '{}' (line {})", origin, key, k.source().begin.line));
    }
    if (!v.is_table()) throw ConfigError(fmt::format("{}: '{}' must be a table", origin, key));
  }

  RunConfig rc;
  TableReader s(root["synth"].as_table(), "synth");
  auto& sc = rc.synth;
  s.read("objects", sc.objects);
  s.read("feature_dim", sc.feature_dim);
  s.read("keyframes", sc.keyframes);
  s.read("frames_per_segment", sc.frames_per_segment);
  s.read("keyframe_max_angle", sc.keyframe_max_angle);
  s.read("keyframe_max_shift", sc.keyframe_max_shift);
  s.read("orientation_range", sc.orientation_range);
  s.read("feature_noise", sc.feature_noise);
  s.read("image_width", sc.image_width);
  s.read("image_height", sc.image_height);
  s.read("fx", sc.intrinsics.fx);
  s.read("fy", sc.intrinsics.fy);
  s.read("px", sc.intrinsics.px);
  s.read("py", sc.intrinsics.py);
  s.read("num_classes", sc.num_classes);
  s.read("model_points", sc.model_points);
  s.read("train_sequences", rc.train_sequences);
  s.read("val_sequences", rc.val_sequences);
  s.finish();

  TableReader m(root["model"].as_table(), "model");
  auto& mc = rc.model;
  rc.model_dim_given = m.read_flag("d_model", mc.d_model);
  m.read("n_heads", mc.n_heads);
  m.read("n_layers", mc.n_layers);
  m.read("mlp_multiple", mc.mlp_multiple);
  m.read("max_context", mc.max_context);
  m.read("dropout", mc.dropout);
  m.read("attention_window", mc.attention_window);
  m.finish();

  TableReader t(root["train"].as_table(), "train");
  auto& tc = rc.train;
  t.read("lr", tc.lr);
  t.read("weight_decay", tc.weight_decay);
  t.read("beta1", tc.beta1);
  t.read("beta2", tc.beta2);
  t.read("eps", tc.eps);
  t.read("decoupled_weight_decay", tc.decoupled_weight_decay);
  t.read("plateau_factor", tc.plateau_factor);
  t.read("plateau_patience", tc.plateau_patience);
  t.read("min_delta", tc.min_delta);
  t.read("clip_len", tc.clip_len);
  t.read("epochs", tc.epochs);
  t.read("batch_size", tc.batch_size);
  t.read("steps_per_epoch", tc.steps_per_epoch);
  t.read("val_clips", tc.val_clips);
  t.read("max_stride", tc.max_stride);
  t.read("jitter", tc.jitter);
  t.read("jitter_max", tc.jitter_max);
  t.finish();

  sc.validate();
  tc.validate();
  if (rc.train_sequences < 1 || rc.val_sequences < 1) {
    throw ConfigError("synth: train_sequences and val_sequences must be >= 1");
  }
  return rc;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
  ordered_json j;
  j["command"] = m.command;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["outputs"] = m.outputs;
  j["wall_clock_seconds"] = m.wall_clock_seconds;
  j["code_version"] = m.code_version;
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("cannot write " + tmp.string());
  }
  fs::rename(tmp, dir / "manifest.json");
}

// -- commands --------------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::string> list_outputs(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json" || rel == "manifest.json.tmp") continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void finish_manifest(const fs::path& dir, const std::string& command, const std::string& config_hash,
                     std::uint64_t seed, Clock::time_point start) {
  RunManifest m;
  m.command = command;
  m.config_hash = config_hash;
  m.seed = seed;
  m.outputs = list_outputs(dir);
  m.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  write_manifest(dir, m);
}

std::string hash_hex(const std::string& text) { return fmt::format("{:016x}", fnv1a64(text)); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& seed, std::ostream& err) {
  if (seed) return *seed;
  const char* strict = std::getenv("TEMPOSE_STRICT");
  if (strict != nullptr && std::string(strict) == "1") {
    throw ConfigError("--seed is required when TEMPOSE_STRICT=1");
  }
  const auto t = static_cast<std::uint64_t>(std::chrono::system_clock::now().time_since_epoch().count());
  fmt::print(err, "tempose: no --seed given, using time seed {}\n", t);
  return t;
}

std::map<int, const geom::ObjectModel*> model_map(const std::vector<geom::ObjectModel>& models) {
  std::map<int, const geom::ObjectModel*> m;
  for (const auto& o : models) m[o.class_id] = &o;
  return m;
}

void write_report_files(const fs::path& dir, const metrics::Report& report, bool svg, const std::string& title) {
  write_text(dir / "report.csv", metrics::report_csv(report));
  write_text(dir / "curve_add.csv", metrics::curve_csv(report.add_curve));
  write_text(dir / "curve_adds.csv", metrics::curve_csv(report.adds_curve));
  if (svg) {
    write_text(dir / "curves.svg",
               metrics::curve_svg({{"ADD", &report.add_curve}, {"ADD-S", &report.adds_curve}}, title));
  }
}

const metrics::ObjectScore& pooled_row(const metrics::Report& r) { return r.rows.back(); }

struct SynthArgs {
  fs::path config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a, std::ostream& out, std::ostream& err) {
  const auto start = Clock::now();
  RunConfig rc = load_config(a.config);
  rc.synth.seed = resolve_seed(a.seed, err);
  data::Dataset ds;
  ds.models = data::synth_object_models(rc.synth);
  for (int i = 0; i < rc.train_sequences; ++i) ds.train.push_back(data::synth_sequence(rc.synth, ds.models, i));
  for (int i = 0; i < rc.val_sequences; ++i) {
    ds.val.push_back(data::synth_sequence(rc.synth, ds.models, rc.train_sequences + i));
  }
  for (const auto& split : {&ds.train, &ds.val}) {
    for (const auto& s : *split) {
      const auto issues = data::bbox_consistency_issues(s);
      if (!issues.empty()) throw ValidationError("synthetic box inconsistent with projection: " + issues.front());
    }
  }
  fs::create_directories(a.out);
  data::write_dataset(a.out, ds);
  finish_manifest(a.out, "synth-gen", hash_hex(rc.to_json()["synth"].dump()), rc.synth.seed, start);
  fmt::print(out, "wrote {} train and {} val sequences of {} frames to {}\n", ds.train.size(), ds.val.size(),
             rc.synth.frames_per_sequence(), a.out.string());
  return 0;
}

struct TrainArgs {
  fs::path config, data, out;
  std::optional<fs::path> resume;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const auto start = Clock::now();
  RunConfig rc = load_config(a.config);
  rc.train.seed = resolve_seed(a.seed, err);
  const data::Dataset ds = data::read_dataset(a.data);
  if (ds.train.empty()) throw ValidationError("no training sequences in " + a.data.string());
  const int d = ds.train.front().feature_dim;
  if (!rc.model_dim_given) {
    rc.model.d_model = d;
  } else if (rc.model.d_model != d) {
    throw ShapeError(fmt::format("model d_model {} does not match data feature dim {}", rc.model.d_model, d));
  }
  rc.model.validate();
  fs::create_directories(a.out);
  ordered_json resolved = rc.to_json();
  resolved["seed"] = rc.train.seed;
  write_text(a.out / "config.json", resolved.dump(2) + '\n');

  train::TrainOptions opts;
  opts.out_dir = a.out;
  opts.resume = a.resume;
  opts.on_epoch = [&](const train::EpochLog& e) {
    fmt::print(out, "epoch {:3d}  train {:.6f}  val {:.6f}  lr {:.3g}{}\n", e.epoch, e.train_loss, e.val_loss, e.lr,
               e.best ? "  *" : "");
  };
  train::run_training(rc.model, rc.train, ds, opts);
  auto hashed = rc.to_json();
  hashed.erase("synth");
  finish_manifest(a.out, "train", hash_hex(hashed.dump()), rc.train.seed, start);
  return 0;
}

struct EvalArgs {
  fs::path checkpoint, data, out;
  std::vector<int> context_lens;
  std::string split = "val";
  std::optional<int> first_target;
  bool gt_as_pred = false;
  bool svg = false;
  std::optional<std::uint64_t> seed;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& /*err*/) {
  const auto start = Clock::now();
  const auto ck = model::load_checkpoint(a.checkpoint);
  const auto params = model::params_from_checkpoint(ck);
  const data::Dataset ds = data::read_dataset(a.data);
  const auto& seqs = a.split == "train" ? ds.train : ds.val;
  if (seqs.empty()) throw ValidationError(fmt::format("no {} sequences in {}", a.split, a.data.string()));

  std::vector<int> lens = a.context_lens;
  if (lens.empty()) {
    lens.push_back(ck.meta.contains("train_config") ? ck.meta["train_config"].value("clip_len", 5) : 5);
  }
  std::sort(lens.begin(), lens.end());
  lens.erase(std::unique(lens.begin(), lens.end()), lens.end());

  eval::EvalOptions eo;
  eo.first_target = a.first_target.value_or(lens.back() - 1);
  eo.threads = eval::thread_budget(1);
  eo.gt_as_pred = a.gt_as_pred;
  const auto models = model_map(ds.models);
  const auto K = seqs.front().frames.empty() ? geom::CameraIntrinsics{} : seqs.front().frames.front().intrinsics;

  fs::create_directories(a.out);
  std::string sweep = "context_len,ADD_AUC,ADDS_AUC,records\n";
  for (int L : lens) {
    eo.context_len = L;
    eval::RecordsFile rf;
    rf.records = eval::evaluate(ck.config, params, seqs, ds.models, eo);
    rf.header = eval::make_records_header(K, (a.data / "models.jsonl").generic_string(), L);
    const auto report = metrics::build_report(rf.records, models);
    const fs::path dir = a.out / fmt::format("ctx{}", L);
    fs::create_directories(dir);
    eval::save_records(dir / "records.jsonl", rf);
    write_report_files(dir, report, a.svg, fmt::format("context {}", L));
    const auto& all = pooled_row(report);
    sweep += fmt::format("{},{:.4f},{:.4f},{}\n", L, all.add_auc, all.adds_auc, rf.records.size());
    fmt::print(out, "context {:2d}  ADD AUC {:.4f}  ADD-S AUC {:.4f}  ({} records)\n", L, all.add_auc, all.adds_auc,
               rf.records.size());
  }
  write_text(a.out / "sweep.csv", sweep);
  ordered_json h;
  h["checkpoint"] = hash_hex(model::serialize_checkpoint(ck));
  h["context_lens"] = lens;
  h["first_target"] = eo.first_target;
  h["split"] = a.split;
  h["gt_as_pred"] = a.gt_as_pred;
  finish_manifest(a.out, "eval", hash_hex(h.dump()), a.seed.value_or(0), start);
  return 0;
}

struct ReportArgs {
  std::vector<fs::path> records;
  std::optional<fs::path> models;
  fs::path out;
  bool svg = false;
  std::optional<std::uint64_t> seed;
};

int cmd_report(const ReportArgs& a, std::ostream& out, std::ostream& /*err*/) {
  const auto start = Clock::now();
  std::vector<eval::RecordsFile> files;
  for (const auto& p : a.records) files.push_back(eval::load_records(p));
  const auto merged = eval::merge_records(files);
  fs::path models_path;
  if (a.models) {
    models_path = *a.models;
  } else if (merged.header.contains("models") && merged.header["models"].is_string()) {
    models_path = merged.header["models"].get<std::string>();
  } else {
    throw ConfigError("records carry no model registry path; pass --models");
  }
  const auto models = geom::load_object_models(models_path);
  const auto report = metrics::build_report(merged.records, model_map(models));
  fs::create_directories(a.out);
  write_report_files(a.out, report, a.svg, "merged report");
  fmt::print(out, "{}", metrics::report_csv(report));
  ordered_json h;
  for (const auto& f : files) h.push_back(hash_hex(eval::records_to_string(f)));
  finish_manifest(a.out, "report", hash_hex(h.dump()), a.seed.value_or(0), start);
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"tempose: temporal 6D object pose estimation from video features"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kCodeVersion);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-gen", "generate a synthetic dataset");
  synth->add_option("--config", sa.config, "TOML config")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--seed", sa.seed, "random seed");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train the decoder and heads");
  tr->add_option("--config", ta.config, "TOML config")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", ta.data, "dataset directory")->required();
  tr->add_option("--out", ta.out, "output directory")->required();
  tr->add_option("--resume", ta.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  tr->add_option("--seed", ta.seed, "random seed");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out sequences");
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ea.data, "dataset directory")->required();
  ev->add_option("--out", ea.out, "output directory")->required();
  ev->add_option("--context-len", ea.context_lens, "context lengths, e.g. 2,5,7,10")
      ->delimiter(',')
      ->check(CLI::PositiveNumber);
  ev->add_option("--split", ea.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--first-target", ea.first_target, "first evaluated frame position")->check(CLI::NonNegativeNumber);
  ev->add_flag("--gt-as-pred", ea.gt_as_pred, "score ground truth as the estimate");
  ev->add_flag("--svg", ea.svg, "also write curves.svg");
  ev->add_option("--seed", ea.seed, "recorded in the manifest");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "merge records files into one report");
  rep->add_option("--records", ra.records, "records files")->required()->check(CLI::ExistingFile);
  rep->add_option("--models", ra.models, "model registry (models.jsonl)")->check(CLI::ExistingFile);
  rep->add_option("--out", ra.out, "output directory")->required();
  rep->add_flag("--svg", ra.svg, "also write curves.svg");
  rep->add_option("--seed", ra.seed, "recorded in the manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*synth) return cmd_synth(sa, out, err);
    if (*tr) return cmd_train(ta, out, err);
    if (*ev) return cmd_eval(ea, out, err);
    if (*rep) return cmd_report(ra, out, err);
  } catch (const ConfigError& e) {
    fmt::print(err, "tempose: config error: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(err, "tempose: error: {}\n", e.what());
    return 1;
  }
  return 1;
}

}  // namespace tempose::cli
