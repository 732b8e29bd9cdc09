#pragma once

// `tempose` command line: synth-gen, train, eval, report.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "tempose/data.hpp"
#include "tempose/model.hpp"
#include "tempose/train.hpp"

namespace tempose::cli {

inline constexpr const char* kCodeVersion = "0.1.0";

// TOML with optional [synth], [model] and [train] tables. Unknown keys are errors.
struct RunConfig {
  data::SynthConfig synth;
  int train_sequences = 16;
  int val_sequences = 4;
  model::DecoderConfig model;
  bool model_dim_given = false;
  train::TrainConfig train;

  nlohmann::ordered_json to_json() const;
};

RunConfig parse_config(const std::string& toml_text, const std::string& origin = "config");
RunConfig load_config(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes);

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;  // relative to the output directory
  double wall_clock_seconds = 0.0;
  std::string code_version = kCodeVersion;
};

// Writes <dir>/manifest.json through a temporary file and rename.
void write_manifest(const std::filesystem::path& dir, const RunManifest& m);

// Process entry point; returns the exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tempose::cli
