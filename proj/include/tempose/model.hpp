#pragma once

// Causal video decoder with the pose-regression and future-feature heads.
//
// Tokens are the n object features of each of the t frames, flattened
// frame-major to t*n tokens per sample. A token of frame i attends to every
// token of frame j when j <= i (and i - j < attention_window if the window
// is limited). Objects of one frame get the same positional embedding.

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tempose/geom.hpp"
#include "tempose/tensor.hpp"

namespace tempose::model {

using ad::Scalar;
using ad::Tensor;

enum class FeatureKind { encoder, decoded, predicted };

// b x t x n x d features.
struct FeatureSeq {
  Tensor values;
  FeatureKind kind = FeatureKind::encoder;

  static FeatureSeq make(Tensor values, FeatureKind kind);
  std::size_t batch() const { return values.dim(0); }
  std::size_t frames() const { return values.dim(1); }
  std::size_t objects() const { return values.dim(2); }
  std::size_t dim() const { return values.dim(3); }
};

struct DecoderConfig {
  int d_model = 32;
  int n_heads = 2;
  int n_layers = 2;
  int mlp_multiple = 4;
  int max_context = 16;
  double dropout = 0.0;
  // Frames a token may look back over, counting its own; 0 = unlimited.
  int attention_window = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static DecoderConfig from_json(const nlohmann::json& j);
  bool operator==(const DecoderConfig&) const = default;
};

// Named parameters in a fixed insertion order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  // Deep copy with fresh storage; requires-grad flags are preserved.
  ParamStore clone() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit
// layer-norm scales, zero positional embeddings.
ParamStore init_params(const DecoderConfig& cfg, std::uint64_t seed);

// Frame-level visibility: open(i, j) iff j <= i and, with a window w > 0, i - j < w.
class AttentionMask {
 public:
  AttentionMask(std::size_t frames, std::size_t objects_per_frame, int window = 0);
  std::size_t tokens() const { return frames_ * objects_; }
  bool open(std::size_t query_token, std::size_t key_token) const;
  // One byte per (query, key) token pair, 1 where attention is blocked.
  const std::vector<std::uint8_t>& blocked() const { return blocked_; }

 private:
  std::size_t frames_, objects_;
  std::vector<std::uint8_t> blocked_;
};

AttentionMask causal_mask(std::size_t frames, std::size_t objects_per_frame = 1, int window = 0);

struct RunOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

FeatureSeq decode(const FeatureSeq& features, const DecoderConfig& cfg, const ParamStore& params,
                  const RunOptions& opts = {});

struct PoseHeadOutput {
  Tensor quat_xyz;  // [N,3]
  Tensor delta_c;   // [N,2] pixels
  Tensor t_z;       // [N,1] meters, exp of the raw depth output
};

// Per-token head over [N,d] rows.
PoseHeadOutput pose_head(const Tensor& z, const ParamStore& params);

FeatureSeq future_head(const FeatureSeq& z_tilde, const ParamStore& params);

// Per object instance, in (b, t, n) order.
struct ObjectView {
  geom::Vec2 bbox_center;
  geom::CameraIntrinsics intrinsics;
};

struct ForwardOutput {
  FeatureSeq z_tilde;
  FeatureSeq z_hat;
  PoseHeadOutput head;
  Tensor quaternion;   // [N,4] completed (w = 1 - |xyz|), unnormalized
  Tensor translation;  // [N,3]
};

ForwardOutput forward(const FeatureSeq& features, std::span<const ObjectView> views,
                      const DecoderConfig& cfg, const ParamStore& params, const RunOptions& opts = {});

// Differentiable forms of the geometric head post-processing.
Tensor complete_quaternions(const Tensor& quat_xyz);
Tensor recover_translations(const Tensor& delta_c, const Tensor& t_z, std::span<const ObjectView> views);

// Row i of the output as a pose (rotation left unnormalized).
geom::Pose pose_at(const ForwardOutput& out, std::size_t row);

// -- checkpoints ("VPCK") ---------------------------------------------------

struct Checkpoint {
  DecoderConfig config;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Model parameters stored under "param/<name>".
Checkpoint make_checkpoint(const DecoderConfig& cfg, const ParamStore& params);
ParamStore params_from_checkpoint(const Checkpoint& ck);

}  // namespace tempose::model
