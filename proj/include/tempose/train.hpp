#pragma once

// Adam with weight decay, reduce-on-plateau learning rate, and the
// checkpointed training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tempose/data.hpp"
#include "tempose/loss.hpp"
#include "tempose/model.hpp"

namespace tempose::train {

using ad::Scalar;

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool decoupled_weight_decay = false;
  double plateau_factor = 0.9;
  int plateau_patience = 3;
  double min_delta = 0.0;
  int clip_len = 5;
  int epochs = 20;
  int batch_size = 8;
  int steps_per_epoch = 50;
  int val_clips = 32;
  int max_stride = 10;
  bool jitter = true;
  double jitter_max = 0.10;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct Moments {
  std::vector<Scalar> m;
  std::vector<Scalar> v;
};

struct TrainState {
  std::int64_t step = 0;
  int epoch = 0;  // completed epochs
  double lr = 0.0;
  std::optional<double> best_metric;
  int bad_epochs = 0;
  std::vector<std::pair<std::string, Moments>> moments;  // parameter order
};

TrainState init_state(const model::ParamStore& params, const TrainConfig& cfg);

// One Adam update of a flat parameter with bias correction at step `step` (1-based).
void adam_update(std::span<Scalar> theta, std::span<const Scalar> grad, Moments& mom, std::int64_t step,
                 double lr, const TrainConfig& cfg, const std::string& name = "parameter");

// Advances state.step and updates every parameter from its gradient
// (parameters without a gradient see zeros).
void adam_step(model::ParamStore& params, TrainState& state, const TrainConfig& cfg);

// Returns true when the learning rate was reduced.
bool plateau_step(TrainState& state, double val_metric, const TrainConfig& cfg);

// -- checkpoint embedding ----------------------------------------------------------

model::Checkpoint make_train_checkpoint(const model::DecoderConfig& mcfg, const model::ParamStore& params,
                                        const TrainState& state, const TrainConfig& cfg);
TrainState state_from_checkpoint(const model::Checkpoint& ck, const model::ParamStore& params);

// -- loop ----------------------------------------------------------------------------

struct StepLog {
  std::int64_t step = 0;
  double pose = 0, reg = 0, inner_prod = 0, future = 0, total = 0, lr = 0;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;
  bool best = false;
};

std::string step_csv_header();
std::string step_csv_row(const StepLog& s);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::optional<std::filesystem::path> resume;
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  model::ParamStore params;
  TrainState state;
  std::vector<EpochLog> epochs;
  std::vector<std::filesystem::path> outputs;
};

// Loss of one batch; builds its own tape when `params` track gradients.
loss::LossBreakdown batch_loss(const data::Batch& batch, const model::DecoderConfig& mcfg,
                               const model::ParamStore& params, const model::RunOptions& run);

// Mean total loss over fixed held-out clips.
double validation_loss(const data::Dataset& ds, const model::DecoderConfig& mcfg, const model::ParamStore& params,
                       const TrainConfig& cfg);

// Runs cfg.epochs epochs (continuing from a resume checkpoint if given).
// Writes <out>/train_log.csv, <out>/epochs.csv, <out>/checkpoints/epoch_NNN.vpck
// and <out>/best.vpck.
TrainResult run_training(const model::DecoderConfig& mcfg, const TrainConfig& cfg, const data::Dataset& ds,
                         const TrainOptions& opts = {});

}  // namespace tempose::train
