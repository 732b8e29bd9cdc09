#pragma once

// Sliding-window inference over held-out sequences and the records file
// that carries estimates to the report step.

#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "tempose/data.hpp"
#include "tempose/metrics.hpp"
#include "tempose/model.hpp"

namespace tempose::eval {

inline constexpr const char* kRecordsSchema = "tempose-records/1";

struct EvalOptions {
  int context_len = 5;
  // First frame position evaluated in every sequence; -1 uses context_len - 1.
  int first_target = -1;
  int threads = 1;
  int batch_size = 16;
  bool gt_as_pred = false;
};

// For each target position p >= first_target, runs the decoder on the
// contiguous clip [p - L + 1, p] and records the pose of the last frame.
// Output is sorted with metrics::sort_records.
std::vector<metrics::EvalRecord> evaluate(const model::DecoderConfig& cfg, const model::ParamStore& params,
                                          const std::vector<data::VideoSequence>& sequences,
                                          const std::vector<geom::ObjectModel>& models, const EvalOptions& opts);

struct RecordsFile {
  nlohmann::ordered_json header;  // schema, intrinsics, models, context_len
  std::vector<metrics::EvalRecord> records;
};

nlohmann::ordered_json make_records_header(const geom::CameraIntrinsics& K, const std::string& models_path,
                                           int context_len);
std::string records_to_string(const RecordsFile& file);
RecordsFile records_from_string(const std::string& text);
void save_records(const std::filesystem::path& path, const RecordsFile& file);
RecordsFile load_records(const std::filesystem::path& path);

// Concatenates files after checking schema and intrinsics agree.
RecordsFile merge_records(const std::vector<RecordsFile>& files);

// Reads TEMPOSE_THREADS; falls back to `fallback` when unset or invalid.
int thread_budget(int fallback = 1);

}  // namespace tempose::eval
