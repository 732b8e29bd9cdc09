#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "fixtures.hpp"
#include "tempose/random.hpp"
#include "tempose/train.hpp"

using namespace tempose;
using namespace tempose::train;
using ad::Scalar;
using ad::Tensor;
using tempose::testing::tiny_dataset;
using tempose::testing::tiny_decoder;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("tempose_train_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

TrainConfig quick_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.seed = seed;
  c.lr = 1e-3;
  c.clip_len = 3;
  c.epochs = 2;
  c.batch_size = 2;
  c.steps_per_epoch = 6;
  c.val_clips = 4;
  return c;
}

void expect_params_equal(const model::ParamStore& a, const model::ParamStore& b) {
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, t] : a) {
    const Tensor& u = b.get(name);
    for (std::size_t i = 0; i < t.size(); ++i) ASSERT_EQ(t[i], u[i]) << name << "[" << i << "]";
  }
}

}  // namespace

TEST(Adam, FirstStepOnScalar) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<Scalar> theta{1.0};
  const std::vector<Scalar> grad{1.0};
  Moments mom{{0.0}, {0.0}};
  adam_update(theta, grad, mom, 1, cfg.lr, cfg);
  EXPECT_NEAR(theta[0], 1.0 - 1e-4 / (1.0 + 1e-8), 1e-12);
  EXPECT_NEAR(mom.m[0], 0.1, 1e-15);
  EXPECT_NEAR(mom.v[0], 0.001, 1e-15);
}

TEST(Adam, FirstStepWithL2Decay) {
  TrainConfig cfg;  // wd = 1e-6 folded into the gradient
  std::vector<Scalar> theta{1.0};
  Moments mom{{0.0}, {0.0}};
  adam_update(theta, std::vector<Scalar>{1.0}, mom, 1, cfg.lr, cfg);
  const double g = 1.0 + 1e-6;
  EXPECT_NEAR(theta[0], 1.0 - 1e-4 * g / (g + 1e-8), 1e-12);
}

TEST(Adam, DecoupledDecayShrinksWithoutGradient) {
  TrainConfig cfg;
  cfg.decoupled_weight_decay = true;
  cfg.weight_decay = 0.01;
  std::vector<Scalar> theta{2.0};
  Moments mom{{0.0}, {0.0}};
  adam_update(theta, std::vector<Scalar>{0.0}, mom, 1, 0.1, cfg);
  EXPECT_NEAR(theta[0], 2.0 - 0.1 * 0.01 * 2.0, 1e-15);
}

TEST(Adam, NullUpdateWithoutDecay) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  auto params = model::init_params(tiny_decoder(), 3);
  const auto before = params.clone();
  TrainState state = init_state(params, cfg);
  for (int k = 0; k < 3; ++k) {
    params.zero_grad();
    adam_step(params, state, cfg);
  }
  EXPECT_EQ(state.step, 3);
  expect_params_equal(params, before);
}

TEST(Adam, IdenticalParametersGetIdenticalUpdates) {
  TrainConfig cfg;
  std::vector<Scalar> a{0.3, -1.2, 4.0}, b = a;
  Moments ma{{0, 0, 0}, {0, 0, 0}}, mb = ma;
  const std::vector<Scalar> g{0.5, -0.25, 1e-3};
  for (int s = 1; s <= 4; ++s) {
    adam_update(a, g, ma, s, 1e-3, cfg);
    adam_update(b, g, mb, s, 1e-3, cfg);
  }
  EXPECT_EQ(a, b);
}

TEST(Adam, RejectsBadGradients) {
  TrainConfig cfg;
  std::vector<Scalar> theta{1.0, 2.0};
  Moments mom{{0, 0}, {0, 0}};
  EXPECT_THROW(adam_update(theta, std::vector<Scalar>{1.0}, mom, 1, 1e-3, cfg, "w"), ShapeError);
  try {
    adam_update(theta, std::vector<Scalar>{1.0, std::numeric_limits<Scalar>::quiet_NaN()}, mom, 1, 1e-3, cfg,
                "decoder.layer0.attn.q.w");
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.layer0.attn.q.w"), std::string::npos);
  }
}

TEST(Plateau, ImprovingKeepsRate) {
  TrainConfig cfg;
  TrainState s;
  s.lr = cfg.lr;
  for (double m : {5.0, 4.0, 3.0}) EXPECT_FALSE(plateau_step(s, m, cfg));
  EXPECT_EQ(s.lr, cfg.lr);
}

TEST(Plateau, FlatMetricReducesOnceThenAgain) {
  TrainConfig cfg;
  TrainState s;
  s.lr = cfg.lr;
  std::vector<bool> reduced;
  for (int k = 0; k < 5; ++k) reduced.push_back(plateau_step(s, 3.0, cfg));
  EXPECT_EQ(reduced, (std::vector<bool>{false, false, false, true, false}));
  EXPECT_EQ(s.lr, cfg.lr * 0.9);
  EXPECT_FALSE(plateau_step(s, 3.0, cfg));
  EXPECT_TRUE(plateau_step(s, 3.0, cfg));
  EXPECT_EQ(s.lr, cfg.lr * 0.9 * 0.9);
  EXPECT_NEAR(s.lr, cfg.lr * 0.81, 1e-18);
}

TEST(Plateau, MinDeltaAndNonIncreasingRate) {
  TrainConfig cfg;
  cfg.min_delta = 0.5;
  TrainState s;
  s.lr = 1.0;
  double last = s.lr;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    const bool r = plateau_step(s, u(rng), cfg);
    EXPECT_LE(s.lr, last);
    if (r) EXPECT_EQ(s.lr, last * 0.9);
    last = s.lr;
  }
  EXPECT_LT(s.lr, 1.0);
}

TEST(TrainConfigTest, ValidationAndJson) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& x) { x.lr = 0; }, [](TrainConfig& x) { x.plateau_factor = 1.0; },
           [](TrainConfig& x) { x.plateau_factor = 0.0; }, [](TrainConfig& x) { x.plateau_patience = 0; },
           [](TrainConfig& x) { x.clip_len = 1; }, [](TrainConfig& x) { x.batch_size = 0; }}) {
    TrainConfig bad;
    mutate(bad);
    EXPECT_THROW(bad.validate(), ConfigError);
  }
  c.lr = 3e-4;
  c.seed = 77;
  c.decoupled_weight_decay = true;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json().dump(), c.to_json().dump());
}

TEST(Training, FewStepsOnOneBatchLowerTheLoss) {
  const auto ds = tiny_dataset(4);
  const auto mcfg = tiny_decoder();
  TrainConfig cfg;
  cfg.seed = 4;
  auto params = model::init_params(mcfg, derive_seed(cfg.seed, streams::kInit));
  std::mt19937_64 rng(4);
  std::vector<data::Clip> clips{data::sample_clip(ds.train[0], 5, rng), data::sample_clip(ds.train[1], 5, rng, {}, 1)};
  const auto batch = data::make_batch(clips, ds.train, ds.models);
  const double before = batch_loss(batch, mcfg, params, {}).total;
  TrainState state = init_state(params, cfg);
  for (int k = 0; k < 10; ++k) {
    params.zero_grad();
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    const auto lb = batch_loss(batch, mcfg, params, {});
    tape.backward(lb.total_tensor);
    adam_step(params, state, cfg);
  }
  EXPECT_LT(batch_loss(batch, mcfg, params, {}).total, before);
}

TEST(Training, WritesLogsAndCheckpoints) {
  const auto ds = tiny_dataset(5);
  const auto dir = scratch("files");
  const auto r = run_training(tiny_decoder(), quick_config(5), ds, {dir});
  EXPECT_EQ(r.state.step, 12);
  EXPECT_EQ(r.state.epoch, 2);
  ASSERT_EQ(r.epochs.size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.vpck"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "epoch_002.vpck"));
  std::istringstream log(slurp(dir / "train_log.csv"));
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line + "\n", step_csv_header());
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 12);
  std::filesystem::remove_all(dir);
}

TEST(Training, SameSeedGivesIdenticalLogs) {
  const auto ds = tiny_dataset(6);
  const auto a = scratch("same_a"), b = scratch("same_b");
  run_training(tiny_decoder(), quick_config(6), ds, {a});
  run_training(tiny_decoder(), quick_config(6), ds, {b});
  EXPECT_EQ(slurp(a / "train_log.csv"), slurp(b / "train_log.csv"));
  EXPECT_EQ(slurp(a / "epochs.csv"), slurp(b / "epochs.csv"));
  EXPECT_EQ(slurp(a / "best.vpck"), slurp(b / "best.vpck"));
  const auto c = scratch("same_c");
  run_training(tiny_decoder(), quick_config(7), ds, {c});
  EXPECT_NE(slurp(a / "train_log.csv"), slurp(c / "train_log.csv"));
  for (const auto& p : {a, b, c}) std::filesystem::remove_all(p);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const auto ds = tiny_dataset(8);
  const auto full = scratch("resume_full"), part = scratch("resume_part");
  const auto mcfg = tiny_decoder();
  const auto cfg = quick_config(8);
  const auto uninterrupted = run_training(mcfg, cfg, ds, {full});

  TrainConfig first = cfg;
  first.epochs = 1;
  run_training(mcfg, first, ds, {part});
  TrainOptions opts{part};
  opts.resume = part / "checkpoints" / "epoch_001.vpck";
  const auto resumed = run_training(mcfg, cfg, ds, opts);

  expect_params_equal(resumed.params, uninterrupted.params);
  EXPECT_EQ(resumed.state.step, uninterrupted.state.step);
  EXPECT_EQ(resumed.state.lr, uninterrupted.state.lr);
  EXPECT_EQ(slurp(part / "train_log.csv"), slurp(full / "train_log.csv"));
  EXPECT_EQ(slurp(part / "checkpoints" / "epoch_002.vpck"), slurp(full / "checkpoints" / "epoch_002.vpck"));
  std::filesystem::remove_all(full);
  std::filesystem::remove_all(part);
}

TEST(Training, CheckpointSaveLoadSaveIsByteIdentical) {
  const auto ds = tiny_dataset(9);
  const auto mcfg = tiny_decoder();
  const auto r = run_training(mcfg, quick_config(9), ds);
  const auto ck = make_train_checkpoint(mcfg, r.params, r.state, quick_config(9));
  const std::string bytes = model::serialize_checkpoint(ck);
  const auto parsed = model::parse_checkpoint(bytes);
  const auto params = model::params_from_checkpoint(parsed);
  const auto state = state_from_checkpoint(parsed, params);
  EXPECT_EQ(state.step, r.state.step);
  EXPECT_EQ(state.bad_epochs, r.state.bad_epochs);
  EXPECT_EQ(state.best_metric, r.state.best_metric);
  EXPECT_EQ(model::serialize_checkpoint(make_train_checkpoint(mcfg, params, state, quick_config(9))), bytes);
}

TEST(Training, NonFiniteLossAbortsWithStep) {
  const auto ds = tiny_dataset(10);
  const auto mcfg = tiny_decoder();
  const auto cfg = quick_config(10);
  auto params = model::init_params(mcfg, 10);
  params.get("pose_head.depth.b").mutable_data()[0] = std::numeric_limits<Scalar>::quiet_NaN();
  const auto dir = scratch("nan");
  model::save_checkpoint(dir / "start.vpck", make_train_checkpoint(mcfg, params, init_state(params, cfg), cfg));
  TrainOptions opts;
  opts.resume = dir / "start.vpck";
  try {
    run_training(mcfg, cfg, ds, opts);
    FAIL();
  } catch (const NonFiniteError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("step 1"), std::string::npos) << m;
    EXPECT_NE(m.find("pose="), std::string::npos) << m;
  }
  std::filesystem::remove_all(dir);
}
