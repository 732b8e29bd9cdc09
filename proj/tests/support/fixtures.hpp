#pragma once

#include <random>
#include <vector>

#include "tempose/data.hpp"
#include "tempose/geom.hpp"
#include "tempose/model.hpp"

namespace tempose::testing {

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double scale = 1.0, bool grad = false) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<ad::Scalar> v(ad::shape_size(shape));
  for (auto& x : v) x = n(rng);
  return ad::Tensor(std::move(shape), std::move(v), grad);
}

inline std::vector<model::ObjectView> random_views(std::size_t count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-40.0, 40.0);
  const geom::CameraIntrinsics K{500.0, 520.0, 320.0, 240.0};
  std::vector<model::ObjectView> views(count);
  for (auto& v : views) v = {geom::Vec2(320.0 + u(rng), 240.0 + u(rng)), K};
  return views;
}

// Overwrites every parameter with small noise so zero-initialized groups
// (biases, positional embeddings) take part in the computation.
inline void randomize_params(model::ParamStore& params, std::mt19937_64& rng, double scale = 0.3) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& [name, t] : params) {
    for (auto& x : t.mutable_data()) x += n(rng);
  }
}

inline geom::ObjectModel random_object_model(std::mt19937_64& rng, int m, int class_id = 1, bool symmetric = false) {
  std::normal_distribution<double> n(0.0, 0.05);
  geom::PointSet p(m, 3);
  for (int i = 0; i < m; ++i) p.row(i) << n(rng), n(rng), n(rng);
  return geom::make_object_model(class_id, "obj", p, symmetric);
}

// Small synthetic dataset: short sequences, d = feature_dim.
inline data::Dataset tiny_dataset(std::uint64_t seed, int train = 2, int val = 1, int feature_dim = 8) {
  data::SynthConfig cfg;
  cfg.seed = seed;
  cfg.feature_dim = feature_dim;
  cfg.keyframes = 3;
  cfg.frames_per_segment = 25;
  cfg.model_points = 16;
  data::Dataset ds;
  ds.models = data::synth_object_models(cfg);
  for (int i = 0; i < train; ++i) ds.train.push_back(data::synth_sequence(cfg, ds.models, i));
  for (int i = 0; i < val; ++i) ds.val.push_back(data::synth_sequence(cfg, ds.models, train + i));
  return ds;
}

inline model::DecoderConfig tiny_decoder(int d = 8) {
  model::DecoderConfig c;
  c.d_model = d;
  c.n_heads = 2;
  c.n_layers = 1;
  c.mlp_multiple = 2;
  c.max_context = 8;
  return c;
}

}  // namespace tempose::testing
