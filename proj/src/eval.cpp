#include "tempose/eval.hpp"

#include <fmt/format.h>

#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

namespace tempose::eval {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::vector<metrics::EvalRecord> evaluate_sequence(const model::DecoderConfig& cfg, const model::ParamStore& params,
                                                   const std::vector<data::VideoSequence>& sequences,
                                                   std::size_t si, const std::vector<geom::ObjectModel>& models,
                                                   const EvalOptions& opts) {
  const auto& seq = sequences[si];
  const auto L = static_cast<std::size_t>(opts.context_len);
  const std::size_t first = opts.first_target < 0 ? L - 1 : static_cast<std::size_t>(opts.first_target);
  std::vector<metrics::EvalRecord> out;
  std::vector<data::Clip> clips;
  auto flush = [&] {
    if (clips.empty()) return;
    const auto batch = data::make_batch(clips, sequences, models);
    const std::size_t n = batch.features.objects();
    model::ForwardOutput fwd;
    if (!opts.gt_as_pred) fwd = model::forward(batch.features, batch.views, cfg, params);
    for (std::size_t b = 0; b < clips.size(); ++b) {
      for (std::size_t o = 0; o < n; ++o) {
        const std::size_t row = (b * L + (L - 1)) * n + o;
        metrics::EvalRecord r;
        r.class_id = batch.class_ids[row];
        r.sequence = batch.sequence_ids[row];
        r.frame = batch.frames[row];
        r.ground_truth = batch.gt_poses[row];
        if (opts.gt_as_pred) {
          r.estimate = r.ground_truth;
        } else {
          r.estimate = model::pose_at(fwd, row);
          r.estimate.rotation = r.estimate.rotation.normalized().canonical();
        }
        out.push_back(std::move(r));
      }
    }
    clips.clear();
  };
  for (std::size_t p = std::max(first, L - 1); p < seq.size(); ++p) {
    data::Clip c;
    c.sequence = si;
    c.stride = 1;
    for (std::size_t k = 0; k < L; ++k) c.positions.push_back(p + 1 - L + k);
    clips.push_back(std::move(c));
    if (clips.size() >= static_cast<std::size_t>(opts.batch_size)) flush();
  }
  flush();
  return out;
}

ordered_json pose_json(const geom::Pose& p) {
  const auto& q = p.rotation;
  const auto& t = p.translation;
  return ordered_json{{"quat", {q.w, q.x, q.y, q.z}}, {"t", {t.x(), t.y(), t.z()}}};
}

geom::Pose pose_from(const json& j) {
  const auto q = j.at("quat").get<std::vector<double>>();
  const auto t = j.at("t").get<std::vector<double>>();
  if (q.size() != 4 || t.size() != 3) throw ValidationError("pose needs quat[4] and t[3]");
  geom::Pose p;
  p.rotation = {q[0], q[1], q[2], q[3]};
  p.translation = {t[0], t[1], t[2]};
  return p;
}

}  // namespace

int thread_budget(int fallback) {
  const char* v = std::getenv("TEMPOSE_THREADS");
  if (v == nullptr) return fallback;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) return fallback;
  return static_cast<int>(std::min<long>(n, 256));
}

std::vector<metrics::EvalRecord> evaluate(const model::DecoderConfig& cfg, const model::ParamStore& params,
                                          const std::vector<data::VideoSequence>& sequences,
                                          const std::vector<geom::ObjectModel>& models, const EvalOptions& opts) {
  if (opts.context_len < 1) throw ConfigError("context length must be >= 1");
  if (opts.context_len > cfg.max_context) {
    throw ContextOverflowError(
        fmt::format("context length {} exceeds the checkpoint's max context {}", opts.context_len, cfg.max_context));
  }
  if (opts.batch_size < 1) throw ConfigError("eval batch size must be >= 1");
  for (const auto& s : sequences) {
    if (s.feature_dim != cfg.d_model) {
      throw ShapeError(fmt::format("checkpoint expects feature dim {} but sequence {} has feature dim {}",
                                   cfg.d_model, s.id, s.feature_dim));
    }
  }

  std::vector<std::vector<metrics::EvalRecord>> parts(sequences.size());
  const int threads = std::max(1, std::min<int>(opts.threads, static_cast<int>(sequences.size())));
  if (threads <= 1) {
    for (std::size_t i = 0; i < sequences.size(); ++i)
      parts[i] = evaluate_sequence(cfg, params, sequences, i, models, opts);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next++; i < sequences.size(); i = next++)
            parts[i] = evaluate_sequence(cfg, params, sequences, i, models, opts);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<metrics::EvalRecord> all;
  for (auto& p : parts) all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  metrics::sort_records(all);
  return all;
}

ordered_json make_records_header(const geom::CameraIntrinsics& K, const std::string& models_path, int context_len) {
  ordered_json h;
  h["schema"] = kRecordsSchema;
  h["intrinsics"] = ordered_json{{"fx", K.fx}, {"fy", K.fy}, {"px", K.px}, {"py", K.py}};
  h["models"] = models_path;
  h["context_len"] = context_len;
  return h;
}

std::string records_to_string(const RecordsFile& file) {
  std::string out = file.header.dump() + '\n';
  for (const auto& r : file.records) {
    ordered_json j;
    j["class_id"] = r.class_id;
    j["sequence"] = r.sequence;
    j["frame"] = r.frame;
    j["est"] = pose_json(r.estimate);
    j["gt"] = pose_json(r.ground_truth);
    out += j.dump() + '\n';
  }
  return out;
}

RecordsFile records_from_string(const std::string& text) {
  RecordsFile file;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    try {
      if (!have_header) {
        const auto schema = j.value("schema", std::string());
        if (schema != kRecordsSchema) {
          throw VersionError(fmt::format("records schema '{}' is not supported (expected {})", schema, kRecordsSchema));
        }
        file.header = std::move(j);
        have_header = true;
        continue;
      }
      metrics::EvalRecord r;
      r.class_id = j.at("class_id").get<int>();
      r.sequence = j.at("sequence").get<std::string>();
      r.frame = j.at("frame").get<int>();
      r.estimate = pose_from(j.at("est"));
      r.ground_truth = pose_from(j.at("gt"));
      file.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad record: ") + e.what(), line_no);
    }
  }
  if (!have_header) throw ParseError("records file has no header", line_no);
  return file;
}

void save_records(const std::filesystem::path& path, const RecordsFile& file) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << records_to_string(file);
  if (!out) throw IoError("failed writing " + path.string());
}

RecordsFile load_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return records_from_string(ss.str());
}

RecordsFile merge_records(const std::vector<RecordsFile>& files) {
  if (files.empty()) throw EmptyInputError("no records files to merge");
  RecordsFile merged;
  merged.header = files.front().header;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto& h = files[i].header;
    if (h.value("schema", std::string()) != merged.header.value("schema", std::string())) {
      throw ValidationError(fmt::format("records file {} has schema {}, first file has {}", i, h.value("schema", ""),
                                        merged.header.value("schema", "")));
    }
    if (h.value("intrinsics", ordered_json()) != merged.header.value("intrinsics", ordered_json())) {
      throw ValidationError(fmt::format("records file {} has intrinsics {}, first file has {}", i,
                                        h.value("intrinsics", ordered_json()).dump(),
                                        merged.header.value("intrinsics", ordered_json()).dump()));
    }
    if (h.value("context_len", ordered_json()) != merged.header.value("context_len", ordered_json())) {
      merged.header["context_len"] = nullptr;
    }
    merged.records.insert(merged.records.end(), files[i].records.begin(), files[i].records.end());
  }
  metrics::sort_records(merged.records);
  return merged;
}

}  // namespace tempose::eval
