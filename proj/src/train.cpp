#include "tempose/train.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "tempose/random.hpp"

namespace tempose::train {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError(fmt::format("train: lr must be > 0, got {}", lr));
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: adam betas must be in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train: eps must be > 0");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
    throw ConfigError(fmt::format("train: plateau factor must be in (0, 1), got {}", plateau_factor));
  }
  if (plateau_patience < 1) throw ConfigError("train: plateau patience must be >= 1");
  if (!(min_delta >= 0.0)) throw ConfigError("train: min_delta must be >= 0");
  if (clip_len < 2) throw ConfigError("train: clip_len must be >= 2 for the future-feature term");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (steps_per_epoch < 1) throw ConfigError("train: steps_per_epoch must be >= 1");
  if (val_clips < 1) throw ConfigError("train: val_clips must be >= 1");
  if (max_stride < 1) throw ConfigError("train: max_stride must be >= 1");
  if (!(jitter_max >= 0.0)) throw ConfigError("train: jitter_max must be >= 0");
}

ordered_json TrainConfig::to_json() const {
  ordered_json j;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["eps"] = eps;
  j["decoupled_weight_decay"] = decoupled_weight_decay;
  j["plateau_factor"] = plateau_factor;
  j["plateau_patience"] = plateau_patience;
  j["min_delta"] = min_delta;
  j["clip_len"] = clip_len;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["steps_per_epoch"] = steps_per_epoch;
  j["val_clips"] = val_clips;
  j["max_stride"] = max_stride;
  j["jitter"] = jitter;
  j["jitter_max"] = jitter_max;
  j["seed"] = seed;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.decoupled_weight_decay = j.value("decoupled_weight_decay", c.decoupled_weight_decay);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  c.clip_len = j.value("clip_len", c.clip_len);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.val_clips = j.value("val_clips", c.val_clips);
  c.max_stride = j.value("max_stride", c.max_stride);
  c.jitter = j.value("jitter", c.jitter);
  c.jitter_max = j.value("jitter_max", c.jitter_max);
  c.seed = j.value("seed", c.seed);
  return c;
}

TrainState init_state(const model::ParamStore& params, const TrainConfig& cfg) {
  TrainState st;
  st.lr = cfg.lr;
  for (const auto& [name, t] : params) {
    st.moments.push_back({name, Moments{std::vector<Scalar>(t.size(), 0), std::vector<Scalar>(t.size(), 0)}});
  }
  return st;
}

void adam_update(std::span<Scalar> theta, std::span<const Scalar> grad, Moments& mom, std::int64_t step, double lr,
                 const TrainConfig& cfg, const std::string& name) {
  if (grad.size() != theta.size() || mom.m.size() != theta.size() || mom.v.size() != theta.size()) {
    throw ShapeError(fmt::format("adam: {} has {} values, gradient {}, moments {}/{}", name, theta.size(),
                                 grad.size(), mom.m.size(), mom.v.size()));
  }
  if (step < 1) throw Error("adam: step must be >= 1");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grad[i]))) {
      throw NonFiniteError(fmt::format("non-finite gradient in {} at index {}", name, i));
    }
  }
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  const double wd = cfg.weight_decay;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double th = theta[i];
    double g = grad[i];
    if (cfg.decoupled_weight_decay) {
      th -= lr * wd * th;
    } else {
      g += wd * th;
    }
    const double m = b1 * mom.m[i] + (1.0 - b1) * g;
    const double v = b2 * mom.v[i] + (1.0 - b2) * g * g;
    mom.m[i] = static_cast<Scalar>(m);
    mom.v[i] = static_cast<Scalar>(v);
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    theta[i] = static_cast<Scalar>(th - lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

void adam_step(model::ParamStore& params, TrainState& state, const TrainConfig& cfg) {
  if (state.moments.size() != params.size()) {
    throw ShapeError(fmt::format("adam: {} moment buffers for {} parameters", state.moments.size(), params.size()));
  }
  ++state.step;
  std::size_t k = 0;
  std::vector<Scalar> zeros;
  for (auto& [name, t] : params) {
    auto& [mname, mom] = state.moments[k++];
    if (mname != name) throw ShapeError(fmt::format("adam: moment buffer {} does not match parameter {}", mname, name));
    std::span<const Scalar> g;
    if (t.has_grad()) {
      g = t.grad();
    } else {
      zeros.assign(t.size(), 0);
      g = zeros;
    }
    adam_update(t.mutable_data(), g, mom, state.step, state.lr, cfg, name);
  }
}

bool plateau_step(TrainState& state, double val_metric, const TrainConfig& cfg) {
  if (!std::isfinite(val_metric)) throw NonFiniteError(fmt::format("validation metric is {}", val_metric));
  if (!state.best_metric || val_metric < *state.best_metric - cfg.min_delta) {
    state.best_metric = val_metric;
    state.bad_epochs = 0;
    return false;
  }
  if (++state.bad_epochs >= cfg.plateau_patience) {
    state.lr *= cfg.plateau_factor;
    state.bad_epochs = 0;
    return true;
  }
  return false;
}

// -- checkpoints -----------------------------------------------------------------------

model::Checkpoint make_train_checkpoint(const model::DecoderConfig& mcfg, const model::ParamStore& params,
                                        const TrainState& state, const TrainConfig& cfg) {
  model::Checkpoint ck = model::make_checkpoint(mcfg, params);
  ordered_json st;
  st["step"] = state.step;
  st["epoch"] = state.epoch;
  st["lr"] = state.lr;
  st["best_metric"] = state.best_metric ? ordered_json(*state.best_metric) : ordered_json(nullptr);
  st["bad_epochs"] = state.bad_epochs;
  ck.meta["train_config"] = cfg.to_json();
  ck.meta["train_state"] = std::move(st);
  for (const auto& [name, mom] : state.moments) {
    const auto& shape = params.get(name).shape();
    ck.tensors.emplace_back("adam_m/" + name, ad::Tensor(shape, mom.m));
    ck.tensors.emplace_back("adam_v/" + name, ad::Tensor(shape, mom.v));
  }
  return ck;
}

TrainState state_from_checkpoint(const model::Checkpoint& ck, const model::ParamStore& params) {
  if (!ck.meta.contains("train_state")) throw ValidationError("checkpoint carries no optimizer state");
  const auto& st = ck.meta.at("train_state");
  TrainState state;
  state.step = st.at("step").get<std::int64_t>();
  state.epoch = st.at("epoch").get<int>();
  state.lr = st.at("lr").get<double>();
  if (!st.at("best_metric").is_null()) state.best_metric = st.at("best_metric").get<double>();
  state.bad_epochs = st.at("bad_epochs").get<int>();
  for (const auto& [name, t] : params) {
    const ad::Tensor* m = ck.find("adam_m/" + name);
    const ad::Tensor* v = ck.find("adam_v/" + name);
    if (m == nullptr || v == nullptr) throw ValidationError("checkpoint lacks moment buffers for " + name);
    if (m->shape() != t.shape() || v->shape() != t.shape()) {
      throw ShapeError(fmt::format("moment buffers for {} are {}, parameter is {}", name, ad::shape_str(m->shape()),
                                   ad::shape_str(t.shape())));
    }
    state.moments.push_back({name, Moments{std::vector<Scalar>(m->data().begin(), m->data().end()),
                                           std::vector<Scalar>(v->data().begin(), v->data().end())}});
  }
  return state;
}

// -- loop --------------------------------------------------------------------------------

std::string step_csv_header() { return "step,pose,reg,inner_prod,future,total,lr\n"; }

std::string step_csv_row(const StepLog& s) {
  return fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", s.step, s.pose, s.reg, s.inner_prod,
                     s.future, s.total, s.lr);
}

namespace {

std::string epoch_csv_header() { return "epoch,train_loss,val_loss,lr,best\n"; }

std::string epoch_csv_row(const EpochLog& e) {
  return fmt::format("{},{:.17g},{:.17g},{:.17g},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr, e.best ? 1 : 0);
}

// Keeps the header and the rows whose first column is <= last; used when resuming.
void truncate_log(const std::filesystem::path& path, const std::string& header, std::int64_t last) {
  std::string kept = header;
  std::ifstream in(path);
  if (in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (std::stoll(line.substr(0, comma)) <= last) kept += line + '\n';
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
  if (!out) throw IoError("cannot write " + path.string());
}

void append(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::app);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

std::vector<data::Clip> validation_clips(const data::Dataset& ds, const TrainConfig& cfg) {
  if (ds.val.empty()) throw ValidationError("training needs at least one validation sequence");
  std::mt19937_64 rng(derive_seed(cfg.seed, streams::kValidation));
  std::vector<data::Clip> clips;
  data::ClipSampling sampling{cfg.max_stride, 0};
  for (int i = 0; i < cfg.val_clips; ++i) {
    const std::size_t s = static_cast<std::size_t>(i) % ds.val.size();
    clips.push_back(data::sample_clip(ds.val[s], cfg.clip_len, rng, sampling, s));
  }
  return clips;
}

}  // namespace

loss::LossBreakdown batch_loss(const data::Batch& batch, const model::DecoderConfig& mcfg,
                               const model::ParamStore& params, const model::RunOptions& run) {
  const model::ForwardOutput out = model::forward(batch.features, batch.views, mcfg, params, run);
  loss::LossInputs in{out.quaternion, out.translation, batch.q_gt, batch.t_gt, batch.models,
                      out.z_hat.values, out.z_tilde.values};
  return loss::total_loss(in);
}

double validation_loss(const data::Dataset& ds, const model::DecoderConfig& mcfg, const model::ParamStore& params,
                       const TrainConfig& cfg) {
  const auto clips = validation_clips(ds, cfg);
  double sum = 0.0;
  for (std::size_t b = 0; b < clips.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t e = std::min(clips.size(), b + static_cast<std::size_t>(cfg.batch_size));
    const std::vector<data::Clip> part(clips.begin() + static_cast<std::ptrdiff_t>(b),
                                       clips.begin() + static_cast<std::ptrdiff_t>(e));
    const auto batch = data::make_batch(part, ds.val, ds.models);
    sum += batch_loss(batch, mcfg, params, {}).total * static_cast<double>(e - b);
  }
  return sum / static_cast<double>(clips.size());
}

TrainResult run_training(const model::DecoderConfig& mcfg, const TrainConfig& cfg, const data::Dataset& ds,
                         const TrainOptions& opts) {
  cfg.validate();
  mcfg.validate();
  if (ds.train.empty()) throw ValidationError("training needs at least one training sequence");
  if (cfg.clip_len > mcfg.max_context) {
    throw ContextOverflowError(
        fmt::format("clip_len {} exceeds the decoder's max context {}", cfg.clip_len, mcfg.max_context));
  }

  TrainResult result;
  if (opts.resume) {
    const auto ck = model::load_checkpoint(*opts.resume);
    if (!(ck.config == mcfg)) throw ConfigError("resume checkpoint was trained with a different decoder config");
    result.params = model::params_from_checkpoint(ck);
    result.state = state_from_checkpoint(ck, result.params);
  } else {
    result.params = model::init_params(mcfg, derive_seed(cfg.seed, streams::kInit));
    result.state = init_state(result.params, cfg);
  }
  auto& params = result.params;
  auto& state = result.state;
  for (auto& [name, t] : params) t.set_requires_grad(true);

  const bool write = !opts.out_dir.empty();
  const auto log_path = opts.out_dir / "train_log.csv";
  const auto epoch_path = opts.out_dir / "epochs.csv";
  const auto ck_dir = opts.out_dir / "checkpoints";
  if (write) {
    std::filesystem::create_directories(ck_dir);
    truncate_log(log_path, step_csv_header(), state.step);
    truncate_log(epoch_path, epoch_csv_header(), state.epoch);
    result.outputs.push_back(log_path);
    result.outputs.push_back(epoch_path);
  }

  const data::ClipSampling sampling{cfg.max_stride, 0};
  while (state.epoch < cfg.epochs) {
    double epoch_sum = 0.0;
    std::string rows;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      std::mt19937_64 rng(derive_seed(cfg.seed, streams::kEpoch, static_cast<std::uint64_t>(state.step)));
      std::uniform_int_distribution<std::size_t> pick(0, ds.train.size() - 1);
      std::vector<data::Clip> clips;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const std::size_t si = pick(rng);
        clips.push_back(data::sample_clip(ds.train[si], cfg.clip_len, rng, sampling, si));
      }
      data::BatchOptions bopts{cfg.jitter, cfg.jitter_max, &rng};
      const auto batch = data::make_batch(clips, ds.train, ds.models, bopts);

      params.zero_grad();
      ad::Tape tape;
      loss::LossBreakdown lb;
      {
        ad::Tape::Scope scope(tape);
        lb = batch_loss(batch, mcfg, params, {true, &rng});
      }
      if (!std::isfinite(lb.total)) {
        throw NonFiniteError(fmt::format(
            "non-finite loss at step {}: pose={} reg={} inner_prod={} future={} total={}", state.step + 1, lb.pose,
            lb.reg, lb.inner_prod, lb.future, lb.total));
      }
      tape.backward(lb.total_tensor);
      const double lr_used = state.lr;
      adam_step(params, state, cfg);

      const StepLog sl{state.step, lb.pose, lb.reg, lb.inner_prod, lb.future, lb.total, lr_used};
      rows += step_csv_row(sl);
      if (opts.on_step) opts.on_step(sl);
      epoch_sum += lb.total;
    }

    ++state.epoch;
    EpochLog el;
    el.epoch = state.epoch;
    el.train_loss = epoch_sum / cfg.steps_per_epoch;
    el.val_loss = validation_loss(ds, mcfg, params, cfg);
    el.best = !state.best_metric || el.val_loss < *state.best_metric - cfg.min_delta;
    plateau_step(state, el.val_loss, cfg);
    el.lr = state.lr;
    result.epochs.push_back(el);

    if (write) {
      append(log_path, rows);
      append(epoch_path, epoch_csv_row(el));
      const auto ck = make_train_checkpoint(mcfg, params, state, cfg);
      const auto path = ck_dir / fmt::format("epoch_{:03d}.vpck", state.epoch);
      model::save_checkpoint(path, ck);
      result.outputs.push_back(path);
      if (el.best) {
        model::save_checkpoint(opts.out_dir / "best.vpck", ck);
        if (std::find(result.outputs.begin(), result.outputs.end(), opts.out_dir / "best.vpck") ==
            result.outputs.end())
          result.outputs.push_back(opts.out_dir / "best.vpck");
      }
    }
    if (opts.on_epoch) opts.on_epoch(el);
  }
  return result;
}

}  // namespace tempose::train
