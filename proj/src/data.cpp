#include "tempose/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <sstream>

#include "tempose/random.hpp"

namespace tempose::data {

using geom::Vec3;
using nlohmann::json;
using nlohmann::ordered_json;

bool VideoSequence::has_features() const {
  return !frames.empty() && features.size() == frames.size() &&
         std::none_of(feature_source.begin(), feature_source.end(),
                      [](FeatureSource s) { return s == FeatureSource::none; });
}

void VideoSequence::validate() const {
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    if (i > 0 && f.frame <= frames[i - 1].frame) {
      throw ValidationError(fmt::format("sequence {}: frame index {} does not follow {}", id, f.frame,
                                        frames[i - 1].frame));
    }
    f.intrinsics.validate();
    for (const auto& o : f.objects) {
      o.bbox.validate();
      if (!(o.pose.translation.z() > 0.0)) {
        throw ValidationError(
            fmt::format("sequence {}: frame {} class {} has non-positive depth", id, f.frame, o.class_id));
      }
      o.pose.rotation.normalized();
    }
  }
}

std::vector<std::string> bbox_consistency_issues(const VideoSequence& seq) {
  std::vector<std::string> issues;
  for (const auto& f : seq.frames) {
    for (const auto& o : f.objects) {
      const geom::Vec2 c = geom::project_center(o.pose.translation, f.intrinsics);
      if (std::abs(c.x() - o.bbox.cx) > o.bbox.width / 2 || std::abs(c.y() - o.bbox.cy) > o.bbox.height / 2) {
        issues.push_back(fmt::format("sequence {} frame {} class {}: box center ({:.1f},{:.1f}) vs projection ({:.1f},{:.1f})",
                                     seq.id, f.frame, o.class_id, o.bbox.cx, o.bbox.cy, c.x(), c.y()));
      }
    }
  }
  return issues;
}

// -- synthetic generation ----------------------------------------------------------

void SynthConfig::validate() const {
  if (objects < 1) throw ConfigError("synth: objects must be >= 1");
  if (feature_dim < 4) throw ConfigError(fmt::format("synth: feature dim must be >= 4, got {}", feature_dim));
  if (keyframes < 2) throw ConfigError("synth: need at least 2 keyframes");
  if (frames_per_segment < 1) throw ConfigError("synth: frames_per_segment must be >= 1");
  if (!(feature_noise >= 0.0)) throw ConfigError("synth: feature noise must be >= 0");
  if (!(keyframe_max_angle >= 0.0)) throw ConfigError("synth: keyframe_max_angle must be >= 0");
  if (!(keyframe_max_shift >= 0.0)) throw ConfigError("synth: keyframe_max_shift must be >= 0");
  if (!(orientation_range > 0.0) || orientation_range >= std::numbers::pi) {
    throw ConfigError("synth: orientation_range must be in (0, pi)");
  }
  if (num_classes < objects) {
    throw ConfigError(fmt::format("synth: {} classes cannot fill {} distinct objects", num_classes, objects));
  }
  if (model_points < 4) throw ConfigError("synth: model_points must be >= 4");
  if (image_width < 64 || image_height < 64) throw ConfigError("synth: image too small");
  intrinsics.validate();
}

FeatureEmbedder::FeatureEmbedder(int feature_dim, std::uint64_t seed, int image_width, int image_height)
    : feature_dim_(feature_dim), image_width_(image_width), image_height_(image_height) {
  std::mt19937_64 rng(derive_seed(seed, streams::kEmbedding));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(kInputDim)));
  matrix_.resize(static_cast<std::size_t>(feature_dim) * kInputDim);
  for (auto& v : matrix_) v = normal(rng);
}

std::vector<double> FeatureEmbedder::input_vector(const ObjectAnnotation& obj) const {
  const geom::Quaternion q = obj.pose.rotation.normalized().canonical();
  const Vec3& t = obj.pose.translation;
  const double W = image_width_, H = image_height_;
  return {q.w,
          q.x,
          q.y,
          q.z,
          t.x() / 2.0,
          t.y() / 2.0,
          (t.z() - 1.75) / 1.25,
          2.0 * obj.bbox.cx / W - 1.0,
          2.0 * obj.bbox.cy / H - 1.0,
          obj.bbox.width / W,
          obj.bbox.height / H};
}

std::vector<double> FeatureEmbedder::embed(const ObjectAnnotation& obj) const {
  const auto u = input_vector(obj);
  std::vector<double> f(static_cast<std::size_t>(feature_dim_), 0.0);
  for (int i = 0; i < feature_dim_; ++i)
    for (int k = 0; k < kInputDim; ++k) f[static_cast<std::size_t>(i)] += matrix_[static_cast<std::size_t>(i * kInputDim + k)] * u[static_cast<std::size_t>(k)];
  return f;
}

namespace {

constexpr double kMinDepth = 0.5;
constexpr double kMaxDepth = 3.0;

geom::PointSet box_surface(double sx, double sy, double sz, int m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::uniform_int_distribution<int> face(0, 5);
  geom::PointSet p(m, 3);
  // Corners first so the extent is exact.
  for (int i = 0; i < m; ++i) {
    Vec3 v;
    if (i < 8) {
      v = {(i & 1) ? 0.5 : -0.5, (i & 2) ? 0.5 : -0.5, (i & 4) ? 0.5 : -0.5};
    } else {
      v = {u(rng), u(rng), u(rng)};
      const int f = face(rng);
      v[f / 2] = (f % 2) ? 0.5 : -0.5;
    }
    p.row(i) << v.x() * sx, v.y() * sy, v.z() * sz;
  }
  return p;
}

geom::PointSet cylinder_surface(double radius, double height, int m) {
  geom::PointSet p(m, 3);
  const int rings = 4;
  for (int i = 0; i < m; ++i) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>((m + rings - 1) / rings);
    const double z = height * (static_cast<double>(i % rings) / (rings - 1) - 0.5);
    p.row(i) << radius * std::cos(a), radius * std::sin(a), z;
  }
  return p;
}

geom::PointSet fibonacci_sphere(double radius, int m) {
  geom::PointSet p(m, 3);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < m; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / m;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double a = golden * i;
    p.row(i) << radius * r * std::cos(a), radius * r * std::sin(a), radius * z;
  }
  return p;
}

Vec3 random_axis(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v{n(rng), n(rng), n(rng)};
    if (v.norm() > 1e-6) return v.normalized();
  }
}

}  // namespace

std::vector<geom::ObjectModel> synth_object_models(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, streams::kModels));
  std::vector<geom::ObjectModel> models;
  for (int c = 1; c <= cfg.num_classes; ++c) {
    const double s = 1.0 + 0.1 * ((c - 1) / 4);
    geom::PointSet pts;
    bool symmetric = false;
    switch ((c - 1) % 4) {
      case 0: pts = box_surface(0.10 * s, 0.06 * s, 0.16 * s, cfg.model_points, rng); break;
      case 1: pts = cylinder_surface(0.04 * s, 0.12 * s, cfg.model_points); symmetric = true; break;
      case 2: pts = fibonacci_sphere(0.05 * s, cfg.model_points); symmetric = true; break;
      default: pts = box_surface(0.18 * s, 0.04 * s, 0.04 * s, cfg.model_points, rng); break;
    }
    models.push_back(geom::make_object_model(c, fmt::format("obj_{:02d}", c), std::move(pts), symmetric));
  }
  return models;
}

geom::BoundingBox project_bbox(const geom::ObjectModel& model, const geom::Pose& pose,
                               const geom::CameraIntrinsics& K) {
  const geom::PointSet pts = geom::transform_points(pose, model.points);
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const geom::Vec2 uv = geom::project_center(pts.row(i).transpose(), K);
    umin = std::min(umin, uv.x());
    umax = std::max(umax, uv.x());
    vmin = std::min(vmin, uv.y());
    vmax = std::max(vmax, uv.y());
  }
  return {0.5 * (umin + umax), 0.5 * (vmin + vmax), std::max(umax - umin, 1e-6), std::max(vmax - vmin, 1e-6)};
}

VideoSequence synth_sequence(const SynthConfig& cfg, const std::vector<geom::ObjectModel>& models, int index) {
  cfg.validate();
  if (static_cast<int>(models.size()) < cfg.objects) {
    throw ConfigError(fmt::format("synth: {} models cannot fill {} objects", models.size(), cfg.objects));
  }
  std::mt19937_64 rng(derive_seed(cfg.seed, streams::kSequence, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int K = cfg.keyframes, fps = cfg.frames_per_segment, F = cfg.frames_per_sequence();
  const double cap_w = std::cos(cfg.orientation_range / 2.0);
  const double margin = 0.1 * std::min(cfg.image_width, cfg.image_height);
  const auto& Kc = cfg.intrinsics;

  std::vector<std::size_t> order(models.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(cfg.objects));
  std::sort(order.begin(), order.end());

  struct Track {
    std::vector<geom::Quaternion> rot;
    std::vector<Vec3> trans;
  };
  std::vector<Track> tracks;
  for (int o = 0; o < cfg.objects; ++o) {
    Track tr;
    geom::Quaternion q = geom::from_axis_angle(random_axis(rng), cfg.orientation_range * unit(rng));
    for (int k = 0; k < K; ++k) {
      if (k > 0) {
        geom::Quaternion next = q;
        for (int attempt = 0; attempt < 64; ++attempt) {
          const geom::Quaternion step = geom::from_axis_angle(random_axis(rng), cfg.keyframe_max_angle * unit(rng));
          const geom::Quaternion cand = geom::multiply(step, q).normalized();
          if (cand.w >= cap_w) {
            next = cand;
            break;
          }
        }
        q = next;
      }
      tr.rot.push_back(q);
      if (k == 0) {
        const double u = margin + (cfg.image_width - 2 * margin) * unit(rng);
        const double v = margin + (cfg.image_height - 2 * margin) * unit(rng);
        const double z = kMinDepth + (kMaxDepth - kMinDepth) * unit(rng);
        tr.trans.push_back({(u - Kc.px) * z / Kc.fx, (v - Kc.py) * z / Kc.fy, z});
        continue;
      }
      Vec3 next = tr.trans.back();
      for (int attempt = 0; attempt < 64; ++attempt) {
        const Vec3 cand = tr.trans.back() + cfg.keyframe_max_shift * Vec3(2 * unit(rng) - 1, 2 * unit(rng) - 1,
                                                                          2 * unit(rng) - 1);
        if (cand.z() < kMinDepth || cand.z() > kMaxDepth) continue;
        const geom::Vec2 uv = geom::project_center(cand, Kc);
        if (uv.x() < margin || uv.x() > cfg.image_width - margin || uv.y() < margin ||
            uv.y() > cfg.image_height - margin)
          continue;
        next = cand;
        break;
      }
      tr.trans.push_back(next);
    }
    tracks.push_back(std::move(tr));
  }

  VideoSequence seq;
  seq.id = fmt::format("seq_{:04d}", index);
  seq.feature_dim = cfg.feature_dim;
  const FeatureEmbedder embedder(cfg.feature_dim, cfg.seed, cfg.image_width, cfg.image_height);
  for (int f = 0; f < F; ++f) {
    const int seg = std::min(f / fps, K - 2);
    const double s = static_cast<double>(f - seg * fps) / fps;
    const double h = s * s * (3.0 - 2.0 * s);  // cubic Hermite, zero end tangents
    FrameAnnotation fa;
    fa.frame = f;
    fa.intrinsics = Kc;
    for (int o = 0; o < cfg.objects; ++o) {
      const auto& tr = tracks[static_cast<std::size_t>(o)];
      const auto& model = models[order[static_cast<std::size_t>(o)]];
      ObjectAnnotation obj;
      obj.class_id = model.class_id;
      obj.pose.rotation = geom::slerp(tr.rot[seg], tr.rot[seg + 1], s).canonical();
      obj.pose.translation = (1.0 - h) * tr.trans[seg] + h * tr.trans[seg + 1];
      obj.bbox = project_bbox(model, obj.pose, Kc);
      fa.objects.push_back(obj);
    }
    seq.frames.push_back(std::move(fa));
  }
  embed_features(seq, embedder, cfg.feature_noise, rng);
  return seq;
}

void embed_features(VideoSequence& seq, const FeatureEmbedder& embedder, double noise_std, std::mt19937_64& rng) {
  if (seq.feature_dim != 0 && seq.feature_dim != embedder.feature_dim()) {
    throw ShapeError(fmt::format("sequence {} has d={}, embedder produces d={}", seq.id, seq.feature_dim,
                                 embedder.feature_dim()));
  }
  seq.feature_dim = embedder.feature_dim();
  std::normal_distribution<double> noise(0.0, 1.0);
  seq.features.assign(seq.frames.size(), {});
  seq.feature_source.assign(seq.frames.size(), FeatureSource::synthetic);
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    auto& out = seq.features[i];
    for (const auto& obj : seq.frames[i].objects) {
      auto f = embedder.embed(obj);
      if (noise_std > 0.0)
        for (auto& v : f) v += noise_std * noise(rng);
      out.insert(out.end(), f.begin(), f.end());
    }
  }
}

// -- sampling ---------------------------------------------------------------------

Clip sample_clip(const VideoSequence& seq, int clip_len, std::mt19937_64& rng, const ClipSampling& sampling,
                 std::size_t sequence_index) {
  if (clip_len < 1) throw ConfigError("clip length must be >= 1");
  if (sampling.max_stride < 1) throw ConfigError("max stride must be >= 1");
  const int widest = sampling.forced_stride > 0 ? sampling.forced_stride : sampling.max_stride;
  const std::size_t required = static_cast<std::size_t>(clip_len - 1) * static_cast<std::size_t>(widest) + 1;
  if (seq.size() < required) {
    throw ValidationError(fmt::format("sequence {} has {} frames; clips of {} at stride {} need at least {}",
                                      seq.id, seq.size(), clip_len, widest, required));
  }
  Clip clip;
  clip.sequence = sequence_index;
  clip.stride = sampling.forced_stride > 0 ? sampling.forced_stride
                                           : std::uniform_int_distribution<int>(1, sampling.max_stride)(rng);
  const std::size_t span = static_cast<std::size_t>(clip_len - 1) * static_cast<std::size_t>(clip.stride);
  const std::size_t start = std::uniform_int_distribution<std::size_t>(0, seq.size() - 1 - span)(rng);
  for (int i = 0; i < clip_len; ++i)
    clip.positions.push_back(start + static_cast<std::size_t>(i) * static_cast<std::size_t>(clip.stride));
  return clip;
}

geom::BoundingBox jitter_bbox(const geom::BoundingBox& b, double u_w, double u_h) {
  geom::BoundingBox out = b;
  out.width = b.width * (1.0 + u_w);
  out.height = b.height * (1.0 + u_h);
  return out;
}

geom::BoundingBox jitter_bbox(const geom::BoundingBox& b, std::mt19937_64& rng, double max_fraction) {
  std::uniform_real_distribution<double> u(0.0, max_fraction);
  const double uw = u(rng);
  const double uh = u(rng);
  return jitter_bbox(b, uw, uh);
}

// -- batching ------------------------------------------------------------------------

Batch make_batch(const std::vector<Clip>& clips, const std::vector<VideoSequence>& sequences,
                 const std::vector<geom::ObjectModel>& models, const BatchOptions& opts) {
  if (clips.empty()) throw EmptyInputError("make_batch: no clips");
  if (opts.jitter && opts.rng == nullptr) throw Error("make_batch: jitter needs an rng");
  const std::size_t T = clips.front().positions.size();
  const auto& first_seq = sequences.at(clips.front().sequence);
  const std::size_t n = first_seq.frames.at(clips.front().positions.front()).objects.size();
  const std::size_t d = static_cast<std::size_t>(first_seq.feature_dim);
  if (T == 0 || n == 0 || d == 0) throw ShapeError("make_batch: empty clip, frame or feature dim");

  Batch batch;
  std::vector<ad::Scalar> feats;
  feats.reserve(clips.size() * T * n * d);
  std::vector<ad::Scalar> q, t;
  for (const auto& clip : clips) {
    const auto& seq = sequences.at(clip.sequence);
    if (clip.positions.size() != T) throw ShapeError("make_batch: clips differ in length");
    if (static_cast<std::size_t>(seq.feature_dim) != d) {
      throw ShapeError(fmt::format("make_batch: sequence {} has d={}, batch uses d={}", seq.id, seq.feature_dim, d));
    }
    FeatureSource source = FeatureSource::none;
    for (std::size_t pi = 0; pi < T; ++pi) {
      const std::size_t p = clip.positions[pi];
      const auto& frame = seq.frames.at(p);
      const FeatureSource fs = p < seq.feature_source.size() ? seq.feature_source[p] : FeatureSource::none;
      if (fs == FeatureSource::none) {
        throw MissingFeatureError(fmt::format("sequence {} frame {} has no features", seq.id, frame.frame));
      }
      if (pi == 0) {
        source = fs;
      } else if (fs != source) {
        throw ValidationError(
            fmt::format("sequence {}: clip mixes loaded and synthetic features at frame {}", seq.id, frame.frame));
      }
      if (frame.objects.size() != n) {
        throw ShapeError(fmt::format("make_batch: frame {} of {} has {} objects, expected {}", frame.frame, seq.id,
                                     frame.objects.size(), n));
      }
      const auto& fv = seq.features[p];
      if (fv.size() != n * d) {
        throw MissingFeatureError(fmt::format("sequence {} frame {}: {} feature values for {} objects of dim {}",
                                              seq.id, frame.frame, fv.size(), n, d));
      }
      for (double v : fv) feats.push_back(static_cast<ad::Scalar>(v));
      for (const auto& obj : frame.objects) {
        const auto it = std::find_if(models.begin(), models.end(),
                                     [&](const geom::ObjectModel& m) { return m.class_id == obj.class_id; });
        if (it == models.end()) {
          throw ValidationError(fmt::format("class id {} is not in the model registry", obj.class_id));
        }
        geom::BoundingBox box = obj.bbox;
        if (opts.jitter) box = jitter_bbox(box, *opts.rng, opts.jitter_max);
        batch.views.push_back({box.center(), frame.intrinsics});
        batch.models.push_back(&*it);
        batch.gt_poses.push_back(obj.pose);
        batch.class_ids.push_back(obj.class_id);
        batch.frames.push_back(frame.frame);
        batch.sequence_ids.push_back(seq.id);
        const geom::Quaternion gq = obj.pose.rotation.normalized().canonical();
        q.insert(q.end(), {static_cast<ad::Scalar>(gq.w), static_cast<ad::Scalar>(gq.x),
                           static_cast<ad::Scalar>(gq.y), static_cast<ad::Scalar>(gq.z)});
        t.insert(t.end(), {static_cast<ad::Scalar>(obj.pose.translation.x()),
                           static_cast<ad::Scalar>(obj.pose.translation.y()),
                           static_cast<ad::Scalar>(obj.pose.translation.z())});
      }
    }
  }
  const std::size_t rows = batch.views.size();
  batch.features = model::FeatureSeq::make(ad::Tensor({clips.size(), T, n, d}, std::move(feats)),
                                           model::FeatureKind::encoder);
  batch.q_gt = ad::Tensor({rows, 4}, std::move(q));
  batch.t_gt = ad::Tensor({rows, 3}, std::move(t));
  return batch;
}

// -- interchange format --------------------------------------------------------------

namespace {

ordered_json intrinsics_json(const geom::CameraIntrinsics& K) {
  ordered_json j;
  j["fx"] = K.fx;
  j["fy"] = K.fy;
  j["px"] = K.px;
  j["py"] = K.py;
  return j;
}

geom::CameraIntrinsics intrinsics_from(const json& j) {
  geom::CameraIntrinsics K{j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("px").get<double>(),
                           j.at("py").get<double>()};
  K.validate();
  return K;
}

std::vector<double> numbers(const json& j, std::size_t n, const char* what) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != n) throw ValidationError(fmt::format("{} must have {} entries, got {}", what, n, v.size()));
  return v;
}

}  // namespace

std::string sequences_to_string(const std::vector<VideoSequence>& seqs) {
  std::string out;
  for (const auto& seq : seqs) {
    const geom::CameraIntrinsics K = seq.frames.empty() ? geom::CameraIntrinsics{} : seq.frames.front().intrinsics;
    ordered_json header;
    header["schema"] = kSchema;
    header["sequence"] = seq.id;
    header["d"] = seq.feature_dim;
    header["intrinsics"] = intrinsics_json(K);
    out += header.dump() + '\n';
    for (const auto& f : seq.frames) {
      ordered_json line;
      line["frame"] = f.frame;
      if (!(f.intrinsics == K)) line["intrinsics"] = intrinsics_json(f.intrinsics);
      ordered_json objects = ordered_json::array();
      for (const auto& o : f.objects) {
        ordered_json jo;
        jo["class_id"] = o.class_id;
        jo["bbox"] = {o.bbox.cx, o.bbox.cy, o.bbox.width, o.bbox.height};
        const auto& r = o.pose.rotation;
        const auto& t = o.pose.translation;
        jo["pose"] = ordered_json{{"quat", {r.w, r.x, r.y, r.z}}, {"t", {t.x(), t.y(), t.z()}}};
        objects.push_back(std::move(jo));
      }
      line["objects"] = std::move(objects);
      out += line.dump() + '\n';
    }
  }
  return out;
}

std::vector<VideoSequence> sequences_from_string(const std::string& text) {
  std::vector<VideoSequence> seqs;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  geom::CameraIntrinsics header_k;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    try {
      if (j.contains("schema")) {
        const auto schema = j.at("schema").get<std::string>();
        if (schema != kSchema) {
          throw VersionError(fmt::format("unsupported schema '{}' on line {} (expected {})", schema, line_no, kSchema));
        }
        VideoSequence seq;
        seq.id = j.value("sequence", fmt::format("seq_{:04d}", seqs.size()));
        seq.feature_dim = j.at("d").get<int>();
        header_k = intrinsics_from(j.at("intrinsics"));
        seqs.push_back(std::move(seq));
        continue;
      }
      if (seqs.empty()) throw ParseError("frame record before any header", line_no);
      auto& seq = seqs.back();
      FrameAnnotation fa;
      fa.frame = j.at("frame").get<int>();
      if (!seq.frames.empty() && fa.frame <= seq.frames.back().frame) {
        throw ValidationError(fmt::format("sequence {}: frame index {} on line {} is not after {}", seq.id, fa.frame,
                                          line_no, seq.frames.back().frame));
      }
      fa.intrinsics = j.contains("intrinsics") ? intrinsics_from(j.at("intrinsics")) : header_k;
      for (const auto& jo : j.at("objects")) {
        ObjectAnnotation o;
        o.class_id = jo.at("class_id").get<int>();
        const auto b = numbers(jo.at("bbox"), 4, "bbox");
        o.bbox = {b[0], b[1], b[2], b[3]};
        const auto q = numbers(jo.at("pose").at("quat"), 4, "pose.quat");
        const auto t = numbers(jo.at("pose").at("t"), 3, "pose.t");
        o.pose.rotation = {q[0], q[1], q[2], q[3]};
        o.pose.translation = {t[0], t[1], t[2]};
        fa.objects.push_back(o);
      }
      seq.frames.push_back(std::move(fa));
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad record: ") + e.what(), line_no);
    }
  }
  for (const auto& s : seqs) s.validate();
  return seqs;
}

std::vector<VideoSequence> load_sequences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sequences_from_string(ss.str());
}

void save_sequences(const std::filesystem::path& path, const std::vector<VideoSequence>& seqs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << sequences_to_string(seqs);
  if (!out) throw IoError("failed writing " + path.string());
}

void save_features(const std::filesystem::path& dir, const VideoSequence& seq) {
  if (!seq.has_features()) throw MissingFeatureError("sequence " + seq.id + " has no features to save");
  std::filesystem::create_directories(dir);
  const auto d = static_cast<std::size_t>(seq.feature_dim);
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& f = seq.features[i];
    std::vector<ad::Scalar> v(f.begin(), f.end());
    const std::size_t n = seq.frames[i].objects.size();
    ad::save_tnsr((dir / fmt::format("{:06d}.tnsr", seq.frames[i].frame)).string(), ad::Tensor({n, d}, std::move(v)));
  }
}

void load_features(const std::filesystem::path& dir, VideoSequence& seq) {
  const auto d = static_cast<std::size_t>(seq.feature_dim);
  seq.features.assign(seq.frames.size(), {});
  seq.feature_source.assign(seq.frames.size(), FeatureSource::none);
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& frame = seq.frames[i];
    const auto path = dir / fmt::format("{:06d}.tnsr", frame.frame);
    if (!std::filesystem::exists(path)) {
      throw MissingFeatureError(fmt::format("sequence {}: no feature file for frame {} ({})", seq.id, frame.frame,
                                            path.string()));
    }
    const ad::Tensor t = ad::load_tnsr(path.string());
    const ad::Shape expected{frame.objects.size(), d};
    if (t.shape() != expected) {
      throw ShapeError(fmt::format("sequence {} frame {}: features {} but annotation needs {}", seq.id, frame.frame,
                                   ad::shape_str(t.shape()), ad::shape_str(expected)));
    }
    seq.features[i].assign(t.data().begin(), t.data().end());
    seq.feature_source[i] = FeatureSource::loaded;
  }
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  geom::save_object_models(dir / "models.jsonl", ds.models);
  for (const auto& [split, seqs] : {std::pair{"train", &ds.train}, std::pair{"val", &ds.val}}) {
    const auto sdir = dir / split;
    std::filesystem::create_directories(sdir);
    for (const auto& seq : *seqs) {
      save_sequences(sdir / (seq.id + ".jsonl"), {seq});
      if (seq.has_features()) save_features(sdir / "features" / seq.id, seq);
    }
  }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory " + dir.string() + " does not exist");
  Dataset ds;
  ds.models = geom::load_object_models(dir / "models.jsonl");
  for (const auto& [split, seqs] : {std::pair{"train", &ds.train}, std::pair{"val", &ds.val}}) {
    const auto sdir = dir / split;
    if (!std::filesystem::is_directory(sdir)) continue;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(sdir))
      if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      for (auto& seq : load_sequences(f)) {
        const auto fdir = sdir / "features" / seq.id;
        if (std::filesystem::is_directory(fdir)) load_features(fdir, seq);
        seqs->push_back(std::move(seq));
      }
    }
  }
  return ds;
}

}  // namespace tempose::data
