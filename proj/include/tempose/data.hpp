#pragma once

// Synthetic pose videos, the JSON-lines interchange format, clip sampling
// and bounding-box augmentation.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tempose/geom.hpp"
#include "tempose/model.hpp"

namespace tempose::data {

inline constexpr const char* kSchema = "tempose/1";

struct ObjectAnnotation {
  int class_id = 0;
  geom::BoundingBox bbox;
  geom::Pose pose;
};

struct FrameAnnotation {
  int frame = 0;
  geom::CameraIntrinsics intrinsics;
  std::vector<ObjectAnnotation> objects;
};

enum class FeatureSource : std::uint8_t { none, synthetic, loaded };

struct VideoSequence {
  std::string id;
  int feature_dim = 0;
  std::vector<FrameAnnotation> frames;
  // Per frame: objects x feature_dim values, row-major, in annotation order.
  std::vector<std::vector<double>> features;
  std::vector<FeatureSource> feature_source;

  std::size_t size() const { return frames.size(); }
  bool has_features() const;
  // Strictly increasing frame indices, valid intrinsics, boxes and depths.
  void validate() const;
};

// Messages for objects whose box center is farther than half the box extent
// from the projected translation.
std::vector<std::string> bbox_consistency_issues(const VideoSequence& seq);

// -- synthetic generation -----------------------------------------------------

struct SynthConfig {
  int objects = 2;             // n per frame
  int feature_dim = 32;        // d
  int keyframes = 6;
  int frames_per_segment = 20;
  double keyframe_max_angle = 1.0;  // radians between consecutive keyframes
  double keyframe_max_shift = 0.25;  // meters per axis between consecutive keyframes
  double orientation_range = 2.0;   // radians from identity, keeps w > 0
  double feature_noise = 0.1;       // sigma
  std::uint64_t seed = 0;
  int image_width = 640;
  int image_height = 480;
  geom::CameraIntrinsics intrinsics{600.0, 600.0, 320.0, 240.0};
  int num_classes = 4;
  int model_points = 64;

  void validate() const;
  int frames_per_sequence() const { return (keyframes - 1) * frames_per_segment + 1; }
};

// Fixed seeded linear map from (unit quaternion, scaled translation,
// normalized box) to a d-dimensional feature; stands in for an image encoder.
class FeatureEmbedder {
 public:
  static constexpr int kInputDim = 11;

  FeatureEmbedder(int feature_dim, std::uint64_t seed, int image_width, int image_height);
  int feature_dim() const { return feature_dim_; }

  std::vector<double> input_vector(const ObjectAnnotation& obj) const;
  std::vector<double> embed(const ObjectAnnotation& obj) const;

 private:
  int feature_dim_;
  int image_width_, image_height_;
  std::vector<double> matrix_;  // feature_dim x kInputDim
};

// Class models: boxes, a cylinder and a ball, centered on the origin.
std::vector<geom::ObjectModel> synth_object_models(const SynthConfig& cfg);

// Sequence `index` of the stream defined by cfg.seed. Features are filled
// with embedder output plus Gaussian noise of std cfg.feature_noise.
VideoSequence synth_sequence(const SynthConfig& cfg, const std::vector<geom::ObjectModel>& models,
                             int index = 0);

// Box of the projected model points.
geom::BoundingBox project_bbox(const geom::ObjectModel& model, const geom::Pose& pose,
                               const geom::CameraIntrinsics& K);

// Replaces the features of every frame with synthetic embeddings.
void embed_features(VideoSequence& seq, const FeatureEmbedder& embedder, double noise_std,
                    std::mt19937_64& rng);

// -- sampling and augmentation -------------------------------------------------

struct Clip {
  std::size_t sequence = 0;          // index into the caller's sequence list
  std::vector<std::size_t> positions;  // indices into VideoSequence::frames
  int stride = 1;
};

struct ClipSampling {
  int max_stride = 10;
  int forced_stride = 0;  // > 0 pins the stride
};

Clip sample_clip(const VideoSequence& seq, int clip_len, std::mt19937_64& rng,
                 const ClipSampling& sampling = {}, std::size_t sequence_index = 0);

// Scales width and height by (1 + u_w) and (1 + u_h); the center is kept.
geom::BoundingBox jitter_bbox(const geom::BoundingBox& b, double u_w, double u_h);
// u_w, u_h ~ Uniform[0, max_fraction].
geom::BoundingBox jitter_bbox(const geom::BoundingBox& b, std::mt19937_64& rng, double max_fraction = 0.10);

// -- batching -------------------------------------------------------------------

struct Batch {
  model::FeatureSeq features;  // [b,t,n,d]
  std::vector<model::ObjectView> views;
  std::vector<const geom::ObjectModel*> models;
  std::vector<geom::Pose> gt_poses;
  std::vector<int> class_ids;
  std::vector<int> frames;
  std::vector<std::string> sequence_ids;
  ad::Tensor q_gt;  // [N,4]
  ad::Tensor t_gt;  // [N,3]
};

struct BatchOptions {
  bool jitter = false;
  double jitter_max = 0.10;
  std::mt19937_64* rng = nullptr;
};

// All clips must share t and n; every frame must carry features of one source.
Batch make_batch(const std::vector<Clip>& clips, const std::vector<VideoSequence>& sequences,
                 const std::vector<geom::ObjectModel>& models, const BatchOptions& opts = {});

// -- files ---------------------------------------------------------------------

// One or more sequences; each begins with a header line.
std::vector<VideoSequence> load_sequences(const std::filesystem::path& path);
void save_sequences(const std::filesystem::path& path, const std::vector<VideoSequence>& seqs);
std::string sequences_to_string(const std::vector<VideoSequence>& seqs);
std::vector<VideoSequence> sequences_from_string(const std::string& text);

// <dir>/<frame:06>.tnsr, each [objects, d].
void save_features(const std::filesystem::path& dir, const VideoSequence& seq);
void load_features(const std::filesystem::path& dir, VideoSequence& seq);

struct Dataset {
  std::vector<geom::ObjectModel> models;
  std::vector<VideoSequence> train;
  std::vector<VideoSequence> val;
};

// <dir>/models.jsonl, <dir>/{train,val}/<id>.jsonl, <dir>/{train,val}/features/<id>/.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace tempose::data
