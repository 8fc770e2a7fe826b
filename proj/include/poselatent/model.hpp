#pragma once

// Encoder, AdaIN decoder, shape codebook and the conditioned pose block.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "poselatent/tensor.hpp"

namespace poselatent {

enum class BlockVariant { bilinear, mlp_concat, mlp_nocond };

std::string to_string(BlockVariant v);
BlockVariant block_variant_from_string(const std::string& s);

struct ArchConfig {
  int image_h = 32, image_w = 32;
  int d = 64;
  int hsh_max_n = 6, hsh_dim = 128;
  std::vector<int> enc_channels{32, 64, 128, 256};
  int dec_base_channels = 256;
  std::vector<int> dec_channels{128, 64, 32, 16};
  std::vector<int> mlp_hidden{1024, 1024, 1024};  // the last layer has width d
  BlockVariant variant = BlockVariant::bilinear;
  bool depth_head = true;
  double z_ref = 500;
  std::vector<std::string> object_ids;

  // Throws ValidationError naming the offending field.
  void validate() const;
  int enc_stride_factor() const { return 1 << enc_channels.size(); }
  int dec_stride_factor() const { return 1 << dec_channels.size(); }
};

nlohmann::json to_json(const ArchConfig& a);
ArchConfig arch_from_json(const nlohmann::json& j);

template <typename T>
struct LatentPair {
  Tensor<T> z_o;  // [B, d]
  Tensor<T> z_p;  // [B, d]
};

template <typename T>
struct Reconstruction {
  Tensor<T> rgb;    // [B, 3, H, W] in (0, 1)
  Tensor<T> depth;  // [B, 1, H, W] in mm; undefined without a depth head
};

template <typename T>
class Network {
 public:
  using Param = std::pair<std::string, Tensor<T>>;

  Network() = default;
  Network(const ArchConfig& arch, std::uint64_t seed);

  const ArchConfig& arch() const { return arch_; }
  int d() const { return arch_.d; }

  LatentPair<T> encode(const Tensor<T>& images) const;
  Reconstruction<T> decode(const Tensor<T>& z_o, const Tensor<T>& z_p) const;

  // FC_h applied to HSH encodings [N, hsh_dim] -> [N, d].
  Tensor<T> rotation_features(const Tensor<T>& h) const;
  // Block B on precomputed rotation features. c_o is [N, d] or [1, d]
  // (shared by every row); no gradient reaches c_o.
  Tensor<T> condition_features(const Tensor<T>& c_o, const Tensor<T>& features) const;
  Tensor<T> condition_pose(const Tensor<T>& c_o, const Tensor<T>& h) const {
    return condition_features(c_o, rotation_features(h));
  }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Tensor<T>> param_tensors() const;
  const Tensor<T>& param(const std::string& name) const;
  Tensor<T>& param(const std::string& name);
  bool has_param(const std::string& name) const;
  std::size_t param_count() const;
  void zero_grad();

  // Deep copy with a different scalar type; parameters require grad.
  template <typename U>
  Network<U> cast() const {
    Network<U> out;
    out.arch_mut() = arch_;
    for (const auto& [name, t] : params_) out.params().emplace_back(name, poselatent::cast<U>(t, true));
    return out;
  }
  ArchConfig& arch_mut() { return arch_; }

 private:
  Tensor<T> mlp(const Tensor<T>& x) const;
  void add(const std::string& name, Shape shape, double stddev, double fill, std::uint64_t seed);

  ArchConfig arch_;
  std::vector<Param> params_;
};

// EMA-updated embedding of the training objects.
struct ShapeCodebook {
  TensorF rows;  // [N_O, d]
  double decay = 0.999;
  double tau = 0.07;

  // Unit-Gaussian rows normalized to unit length.
  static ShapeCodebook init(std::size_t n_objects, std::size_t d, std::uint64_t seed, double decay, double tau);
  std::size_t size() const { return rows.defined() ? rows.dim(0) : 0; }
  std::vector<float> row(std::size_t i) const;
};

// Cosine-similarity logits [B, N_O] scaled by 1/tau; differentiable in z_o only.
template <typename T>
Tensor<T> shape_logits(const Tensor<T>& z_o, const TensorF& codebook, double tau);

// softmax_i(<c_i, z> / tau) over unit-normalized vectors.
std::vector<double> shape_probabilities(std::span<const double> z_o, const TensorF& codebook, double tau);

struct Checkpoint {
  Network<float> net;
  ShapeCodebook codebook;
  nlohmann::json meta;  // training config, iteration, rng state
  AdamState<float> adam;
};

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net, const ShapeCodebook& cb,
                     const nlohmann::json& meta, const AdamState<float>* adam = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace poselatent
