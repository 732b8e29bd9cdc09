#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "tempose/data.hpp"

using namespace tempose;
using namespace tempose::data;

namespace {

SynthConfig small_config(std::uint64_t seed = 1) {
  SynthConfig c;
  c.seed = seed;
  c.objects = 2;
  c.feature_dim = 8;
  c.keyframes = 3;
  c.frames_per_segment = 10;
  c.model_points = 16;
  return c;
}

VideoSequence one_frame_sequence() {
  VideoSequence s;
  s.id = "single";
  s.feature_dim = 4;
  FrameAnnotation f;
  f.frame = 3;
  f.intrinsics = {600, 610, 320, 240};
  ObjectAnnotation o;
  o.class_id = 2;
  o.pose = {geom::Quaternion{0.5, 0.5, -0.5, 0.5}, geom::Vec3(0.1, -0.05, 1.25)};
  const geom::Vec2 c = geom::project_center(o.pose.translation, f.intrinsics);
  o.bbox = {c.x(), c.y(), 40.0, 30.5};
  f.objects.push_back(o);
  s.frames.push_back(f);
  return s;
}

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("tempose_data_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Synth, SameSeedIsBitwiseIdentical) {
  for (double sigma : {0.0, 0.1}) {
    SynthConfig cfg = small_config(5);
    cfg.feature_noise = sigma;
    const auto models = synth_object_models(cfg);
    const auto a = synth_sequence(cfg, models, 2);
    const auto b = synth_sequence(cfg, models, 2);
    EXPECT_EQ(sequences_to_string({a}), sequences_to_string({b}));
    ASSERT_EQ(a.features.size(), b.features.size());
    for (std::size_t i = 0; i < a.features.size(); ++i) EXPECT_EQ(a.features[i], b.features[i]);
  }
}

TEST(Synth, NoiselessFeaturesAreAFunctionOfTheAnnotation) {
  SynthConfig cfg = small_config(6);
  cfg.feature_noise = 0.0;
  const auto models = synth_object_models(cfg);
  const auto seq = synth_sequence(cfg, models, 0);
  const FeatureEmbedder emb(cfg.feature_dim, cfg.seed, cfg.image_width, cfg.image_height);
  for (std::size_t f = 0; f < seq.size(); ++f)
    for (std::size_t o = 0; o < seq.frames[f].objects.size(); ++o) {
      const auto v = emb.embed(seq.frames[f].objects[o]);
      for (int k = 0; k < cfg.feature_dim; ++k) EXPECT_EQ(seq.features[f][o * cfg.feature_dim + k], v[k]);
    }
}

TEST(Synth, IndicesGiveDifferentSequences) {
  const SynthConfig cfg = small_config(7);
  const auto models = synth_object_models(cfg);
  EXPECT_NE(sequences_to_string({synth_sequence(cfg, models, 0)}),
            sequences_to_string({synth_sequence(cfg, models, 1)}));
}

TEST(Synth, RotationStepIsBoundedPerFrame) {
  SynthConfig cfg = small_config();
  cfg.objects = 1;
  cfg.keyframes = 3;
  cfg.frames_per_segment = 8;
  cfg.keyframe_max_angle = 0.8;
  const double bound = cfg.keyframe_max_angle / cfg.frames_per_segment;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    cfg.seed = seed;
    const auto models = synth_object_models(cfg);
    const auto seq = synth_sequence(cfg, models, 0);
    for (std::size_t f = 1; f < seq.size(); ++f) {
      const double a = geom::rotation_angle_between(seq.frames[f - 1].objects[0].pose.rotation,
                                                    seq.frames[f].objects[0].pose.rotation);
      worst = std::max(worst, a);
    }
  }
  EXPECT_LE(worst, bound + 1e-9);
  EXPECT_GT(worst, 0.5 * bound);
}

TEST(Synth, DepthStaysInRangeAndBoxesAreConsistent) {
  SynthConfig cfg = small_config(8);
  const auto models = synth_object_models(cfg);
  for (int i = 0; i < 20; ++i) {
    const auto seq = synth_sequence(cfg, models, i);
    EXPECT_NO_THROW(seq.validate());
    EXPECT_TRUE(bbox_consistency_issues(seq).empty());
    for (const auto& f : seq.frames)
      for (const auto& o : f.objects) {
        EXPECT_GE(o.pose.translation.z(), 0.5);
        EXPECT_LE(o.pose.translation.z(), 3.0);
        EXPECT_NEAR(o.pose.rotation.norm(), 1.0, 1e-12);
      }
  }
}

TEST(Synth, CenteredBallBoxCenterIsTheProjectedCenter) {
  const int m = 200;
  geom::PointSet p(m, 3);
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < m; ++i) {
    const double y = 1.0 - 2.0 * (i + 0.5) / m, r = std::sqrt(1.0 - y * y);
    p.row(i) << 0.02 * r * std::cos(golden * i), 0.02 * y, 0.02 * r * std::sin(golden * i);
  }
  const auto ball = geom::make_object_model(1, "ball", p, true);
  const geom::CameraIntrinsics K{600, 600, 320, 240};
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-0.4, 0.4), z(0.5, 3.0);
  for (int k = 0; k < 500; ++k) {
    const geom::Pose pose{geom::Quaternion{u(rng), u(rng), u(rng), 1.0}.normalized(),
                          geom::Vec3(u(rng), u(rng) * 0.7, z(rng))};
    const auto box = project_bbox(ball, pose, K);
    const auto c = geom::project_center(pose.translation, K);
    EXPECT_LE((box.center() - c).norm(), 1.0);
  }
}

TEST(Synth, ConfigValidation) {
  SynthConfig c = small_config();
  c.feature_dim = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.feature_noise = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(SampleClip, ForcedUnitStrideIsContiguous) {
  const SynthConfig cfg = small_config();
  const auto seq = synth_sequence(cfg, synth_object_models(cfg), 0);
  std::mt19937_64 rng(1);
  for (int k = 0; k < 50; ++k) {
    const Clip c = sample_clip(seq, 5, rng, {10, 1});
    EXPECT_EQ(c.stride, 1);
    for (std::size_t i = 1; i < c.positions.size(); ++i) EXPECT_EQ(c.positions[i], c.positions[i - 1] + 1);
  }
}

TEST(SampleClip, StrideTenSpansForty) {
  SynthConfig cfg = small_config();
  cfg.keyframes = 6;
  const auto seq = synth_sequence(cfg, synth_object_models(cfg), 0);
  std::mt19937_64 rng(2);
  const Clip c = sample_clip(seq, 5, rng, {10, 10});
  EXPECT_EQ(c.positions.back() - c.positions.front(), 40u);
}

TEST(SampleClip, StridesAreUniform) {
  SynthConfig cfg = small_config();
  cfg.keyframes = 6;
  const auto seq = synth_sequence(cfg, synth_object_models(cfg), 0);
  std::mt19937_64 rng(3);
  std::map<int, int> counts;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) ++counts[sample_clip(seq, 5, rng).stride];
  ASSERT_EQ(counts.size(), 10u);
  for (const auto& [s, n] : counts) {
    EXPECT_GE(s, 1);
    EXPECT_LE(s, 10);
    EXPECT_NEAR(static_cast<double>(n) / draws, 0.1, 0.01) << "stride " << s;
  }
}

TEST(SampleClip, ReproducibleAndTooShortMessage) {
  const SynthConfig cfg = small_config();
  const auto seq = synth_sequence(cfg, synth_object_models(cfg), 0);
  std::mt19937_64 a(4), b(4);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(sample_clip(seq, 2, a).positions, sample_clip(seq, 2, b).positions);
  try {
    sample_clip(seq, 5, a, {10, 10});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("at least 41"), std::string::npos) << e.what();
  }
}

TEST(Jitter, Boundaries) {
  const geom::BoundingBox b{100, 80, 40, 20};
  EXPECT_EQ(jitter_bbox(b, 0.0, 0.0), b);
  const auto big = jitter_bbox(b, 0.10, 0.10);
  EXPECT_DOUBLE_EQ(big.width, 44.0);
  EXPECT_DOUBLE_EQ(big.height, 22.0);
  EXPECT_EQ(big.cx, 100);
  EXPECT_EQ(big.cy, 80);
}

TEST(Jitter, MeanScaleAndNeverShrinks) {
  const geom::BoundingBox b{100, 80, 40, 20};
  std::mt19937_64 rng(5);
  double sum = 0;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    const auto j = jitter_bbox(b, rng);
    EXPECT_GE(j.width, b.width);
    EXPECT_GE(j.height, b.height);
    EXPECT_LE(j.width, b.width * 1.10 + 1e-12);
    EXPECT_EQ(j.center(), b.center());
    sum += j.width / b.width;
  }
  EXPECT_NEAR(sum / draws, 1.05, 0.005);
}

TEST(Batch, ShapesAndAnnotations) {
  const SynthConfig cfg = small_config();
  const auto models = synth_object_models(cfg);
  const std::vector<VideoSequence> seqs{synth_sequence(cfg, models, 0), synth_sequence(cfg, models, 1)};
  std::mt19937_64 rng(6);
  const std::vector<Clip> clips{sample_clip(seqs[0], 3, rng, {2, 0}, 0), sample_clip(seqs[1], 3, rng, {2, 0}, 1)};
  const Batch b = make_batch(clips, seqs, models);
  EXPECT_EQ(b.features.values.shape(), (ad::Shape{2, 3, 2, 8}));
  EXPECT_EQ(b.views.size(), 12u);
  EXPECT_EQ(b.q_gt.shape(), (ad::Shape{12, 4}));
  const auto& obj = seqs[1].frames[clips[1].positions[2]].objects[1];
  EXPECT_EQ(b.class_ids[11], obj.class_id);
  EXPECT_EQ(b.t_gt[11 * 3 + 2], obj.pose.translation.z());
  EXPECT_EQ(b.views[11].bbox_center, obj.bbox.center());
}

TEST(Batch, MissingAndMixedFeaturesAreRejected) {
  const SynthConfig cfg = small_config();
  const auto models = synth_object_models(cfg);
  std::vector<VideoSequence> seqs{synth_sequence(cfg, models, 0)};
  std::mt19937_64 rng(7);
  const std::vector<Clip> clips{sample_clip(seqs[0], 3, rng, {1, 1})};

  auto mixed = seqs;
  mixed[0].feature_source[clips[0].positions[1]] = FeatureSource::loaded;
  EXPECT_THROW(make_batch(clips, mixed, models), ValidationError);

  auto missing = seqs;
  missing[0].features[clips[0].positions[0]].clear();
  missing[0].feature_source[clips[0].positions[0]] = FeatureSource::none;
  EXPECT_THROW(make_batch(clips, missing, models), MissingFeatureError);

  auto unknown = seqs;
  unknown[0].frames[clips[0].positions[0]].objects[0].class_id = 99;
  EXPECT_THROW(make_batch(clips, unknown, models), ValidationError);
}

TEST(Interchange, EmptyTextGivesNoSequences) {
  EXPECT_TRUE(sequences_from_string("").empty());
  const auto dir = scratch("empty");
  std::ofstream(dir / "e.jsonl").close();
  EXPECT_TRUE(load_sequences(dir / "e.jsonl").empty());
  std::filesystem::remove_all(dir);
}

TEST(Interchange, SingleFrameRoundtrip) {
  const auto s = one_frame_sequence();
  const std::string text = sequences_to_string({s});
  const auto back = sequences_from_string(text);
  ASSERT_EQ(back.size(), 1u);
  ASSERT_EQ(back[0].frames.size(), 1u);
  const auto& o = back[0].frames[0].objects.at(0);
  EXPECT_EQ(back[0].id, "single");
  EXPECT_EQ(back[0].feature_dim, 4);
  EXPECT_EQ(back[0].frames[0].frame, 3);
  EXPECT_EQ(back[0].frames[0].intrinsics, s.frames[0].intrinsics);
  EXPECT_EQ(o.class_id, 2);
  EXPECT_EQ(o.bbox, s.frames[0].objects[0].bbox);
  EXPECT_EQ(o.pose.rotation, s.frames[0].objects[0].pose.rotation);
  EXPECT_EQ(o.pose.translation, s.frames[0].objects[0].pose.translation);
  EXPECT_EQ(sequences_to_string(back), text);
}

TEST(Interchange, ParseErrors) {
  const std::string header = R"({"schema":"tempose/1","d":4,"intrinsics":{"fx":600,"fy":600,"px":320,"py":240}})";
  const std::string frame0 =
      R"({"frame":0,"objects":[{"class_id":1,"bbox":[320,240,10,10],"pose":{"quat":[1,0,0,0],"t":[0,0,1]}}]})";
  const std::string frame1 =
      R"({"frame":1,"objects":[{"class_id":1,"bbox":[320,240,10,10],"pose":{"quat":[1,0,0,0],"t":[0,0,1]}}]})";

  try {
    sequences_from_string(header + "\n" + frame0 + "\n{not json\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  try {
    sequences_from_string(header + "\n" + R"({"frame":0,"objects":[{"class_id":1}]})" + "\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(sequences_from_string(R"({"schema":"tempose/9","d":4,"intrinsics":{}})"), VersionError);
  try {
    sequences_from_string(header + "\n" + frame1 + "\n" + frame0 + "\n");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("frame index 0"), std::string::npos) << e.what();
  }
}

TEST(Features, SaveLoadAndMissingFile) {
  const SynthConfig cfg = small_config(11);
  const auto models = synth_object_models(cfg);
  const auto seq = synth_sequence(cfg, models, 0);
  const auto dir = scratch("features");
  save_features(dir, seq);
  VideoSequence loaded = seq;
  for (auto& f : loaded.features) f.clear();
  load_features(dir, loaded);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    EXPECT_EQ(loaded.features[i], seq.features[i]);
    EXPECT_EQ(loaded.feature_source[i], FeatureSource::loaded);
  }
  std::filesystem::remove(dir / "000004.tnsr");
  EXPECT_THROW(load_features(dir, loaded), MissingFeatureError);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, WriteReadRoundtrip) {
  const SynthConfig cfg = small_config(12);
  Dataset ds;
  ds.models = synth_object_models(cfg);
  ds.train = {synth_sequence(cfg, ds.models, 0), synth_sequence(cfg, ds.models, 1)};
  ds.val = {synth_sequence(cfg, ds.models, 2)};
  const auto dir = scratch("dataset");
  write_dataset(dir, ds);
  const Dataset back = read_dataset(dir);
  ASSERT_EQ(back.models.size(), ds.models.size());
  EXPECT_EQ(sequences_to_string(back.train), sequences_to_string(ds.train));
  EXPECT_EQ(sequences_to_string(back.val), sequences_to_string(ds.val));
  for (std::size_t i = 0; i < ds.train[1].size(); ++i) EXPECT_EQ(back.train[1].features[i], ds.train[1].features[i]);
  EXPECT_THROW(read_dataset(dir / "nope"), IoError);
  std::filesystem::remove_all(dir);
}
