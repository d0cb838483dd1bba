#pragma once

// Best-EarNet and the ShuffleNetV2 x0.5 baseline as executable graphs.
//
// Best-EarNet: ShuffleNetV2 stem and stages 2-4, a 3x3 conv on the stage-4
// output (Fhigh), a branch path on the stage-2 output (Flow), LGSFF fusion of
// the two, and three class heads (stage 2, stage 3, fused map). Only head 3
// predicts; heads 1 and 2 exist for the accumulated training loss.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "earnet/ops.hpp"
#include "earnet/tensor.hpp"

namespace earnet {

enum class Architecture { best_earnet, shufflenet_v2_x0_5 };

std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& name);

struct ModelConfig {
  Architecture arch = Architecture::best_earnet;
  std::size_t num_classes = 9;
  double width_multiplier = 1.0;  // 1.0 = published channel widths
  std::size_t input_size = 224;
  DropBlockParams dropblock{3, 0.1, Mode::train};
  std::size_t lgsff_groups = 8;    // groups of the LGSFF pointwise conv
  std::size_t fhigh_channels = 384;
  std::size_t eca_kernel = 5;

  // Published scale: 3 x 224 x 224 input, 9 classes.
  static ModelConfig paper();
  // Test scale: width 0.25, 64 x 64 input. The final maps are 2 x 2, so
  // DropBlock degenerates to block size 1.
  static ModelConfig desk();

  // Throws ConfigError on any divisibility or range violation.
  void validate() const;
};

// Channel widths after applying the width multiplier.
struct ChannelPlan {
  std::size_t stem = 24, stage2 = 48, stage3 = 96, stage4 = 192;
  std::size_t fhigh = 384;
  std::size_t conv5 = 1024;  // baseline only
};

ChannelPlan channel_plan(const ModelConfig& cfg);

template <typename T>
struct ConvBn {
  Conv2dParams<T> conv;
  BatchNormParams<T> bn;
  bool relu = true;
};

// ShuffleNetV2 unit. stride 1: split channels, transform one half, concat,
// shuffle. stride 2: two strided branches whose concat doubles the width.
template <typename T>
struct ShuffleUnit {
  std::size_t stride = 1;
  std::optional<ConvBn<T>> shortcut_dw;  // stride-2 only: DW 3x3 + BN
  std::optional<ConvBn<T>> shortcut_pw;  // stride-2 only: PW + BN + ReLU
  ConvBn<T> pw1;                         // PW + BN + ReLU
  ConvBn<T> dw;                          // DW 3x3 + BN
  ConvBn<T> pw2;                         // PW + BN + ReLU
};

template <typename T>
struct BranchPathParams {
  std::size_t pool = 4;
  Conv2dParams<T> pw;     // stage2 width -> fhigh width, no bias
  Tensor<T> eca_kernel;   // [k]
  BatchNormParams<T> bn;
};

template <typename T>
struct LgsffParams {
  Conv2dParams<T> gpw;      // grouped 1x1, no bias
  BatchNormParams<T> bn;
  Conv2dParams<T> sa_conv;  // 2 -> 1, 3x3, pad 1, bias
};

template <typename T>
struct ClassHeadParams {
  Tensor<T> weight;  // K x C
  Tensor<T> bias;    // K
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;  // false for BN running statistics
};

template <typename T>
struct ForwardOutput {
  Tensor<T> logits1;  // head on stage 2 (Best-EarNet only)
  Tensor<T> logits2;  // head on stage 3 (Best-EarNet only)
  Tensor<T> logits3;  // prediction head
  // Deepest spatial map: LGSFF output, or conv5 output for the baseline.
  Tensor<T> features;
  // stem, stage2, stage3, stage4, flow, fhigh, lgsff / conv5.
  std::map<std::string, Tensor<T>> activations;
};

template <typename T>
struct ForwardOptions {
  Tape<T>* tape = nullptr;
  Rng* rng = nullptr;  // required in train mode when DropBlock is active
  // When set, this activation is replaced by a gradient-tracking leaf so a
  // backward pass yields d(output)/d(activation) without touching the
  // layers before it.
  std::string grad_layer;
};

// Names accepted by ForwardOptions::grad_layer.
std::vector<std::string> activation_names(Architecture arch);

template <typename T>
class Network {
 public:
  // Builds the graph for cfg.arch with Kaiming-uniform (fan-in) weights, BN
  // gamma = 1 and beta = 0, zero biases.
  explicit Network(const ModelConfig& cfg, std::uint64_t seed = 0);

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  Network clone() const;

  const ModelConfig& config() const { return cfg_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode);

  ForwardOutput<T> forward(const Tensor<T>& x, const ForwardOptions<T>& opts = {}) const;

  // Every serialised tensor in graph order, running statistics included.
  const std::vector<NamedTensor<T>>& tensors() const { return tensors_; }
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;
  Tensor<T> tensor(const std::string& name) const;

  // Turns gradient tracking of all trainable tensors on or off.
  void set_trainable(bool on);
  void zero_grad();

  // Copies values by position from a network with identical layout.
  template <typename U>
  void copy_values_from(const Network<U>& other);

  // CRC32 over all tensor values; equal checksums mean equal weights.
  std::uint32_t checksum() const;

  // Component access for the per-block operations and tests.
  const std::vector<std::vector<ShuffleUnit<T>>>& stages() const { return stages_; }
  const ConvBn<T>& stem() const { return stem_; }
  const BranchPathParams<T>& branch() const { return branch_; }
  const LgsffParams<T>& lgsff() const { return lgsff_; }
  const std::vector<ClassHeadParams<T>>& heads() const { return heads_; }
  const ConvBn<T>& fhigh_conv() const { return fhigh_; }

 private:
  // fn(name, tensor, trainable) for every tensor in graph order.
  template <typename Fn>
  void visit_tensors(Fn&& fn);
  template <typename Fn>
  void visit_batchnorms(Fn&& fn);

  ModelConfig cfg_;
  Mode mode_ = Mode::train;
  ConvBn<T> stem_;
  std::vector<std::vector<ShuffleUnit<T>>> stages_;
  ConvBn<T> fhigh_;              // Best-EarNet
  BranchPathParams<T> branch_;   // Best-EarNet
  LgsffParams<T> lgsff_;         // Best-EarNet
  ConvBn<T> conv5_;              // baseline
  std::vector<ClassHeadParams<T>> heads_;  // 3 for Best-EarNet, 1 for baseline
  std::vector<NamedTensor<T>> tensors_;
};

template <typename T>
template <typename U>
void Network<T>::copy_values_from(const Network<U>& other) {
  const auto& src = other.tensors();
  if (src.size() != tensors_.size()) throw ShapeError("copy_values_from: layouts differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != tensors_[i].name || src[i].tensor.shape() != tensors_[i].tensor.shape()) {
      throw ShapeError("copy_values_from: tensor '" + tensors_[i].name + "' differs");
    }
    auto s = src[i].tensor.data();
    auto d = tensors_[i].tensor.data();
    for (std::size_t k = 0; k < s.size(); ++k) d[k] = static_cast<T>(s[k]);
  }
}

template <typename T>
Network<T> build_best_earnet(ModelConfig cfg, std::uint64_t seed = 0);

template <typename T>
Network<T> build_shufflenet_baseline(ModelConfig cfg, std::uint64_t seed = 0);

template <typename T>
Tensor<T> conv_bn(const Tensor<T>& x, const ConvBn<T>& layer, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> shuffle_unit(const Tensor<T>& x, const ShuffleUnit<T>& unit, Tape<T>* tape = nullptr);

// avg pool -> PWconv -> DropBlock -> ECA -> BN -> ReLU.
template <typename T>
Tensor<T> branch_path(const Tensor<T>& stage2_out, const BranchPathParams<T>& p,
                      const DropBlockParams& drop, Rng* rng, Tape<T>* tape = nullptr);

// Fmerge = ReLU(BN(GPWconv(flow + fhigh))); w = sigmoid(SA(Fmerge));
// out = w * flow + (1 - w) * DropBlock(fhigh).
template <typename T>
Tensor<T> lgsff(const Tensor<T>& flow, const Tensor<T>& fhigh, const LgsffParams<T>& p,
                const DropBlockParams& drop, Rng* rng, Tape<T>* tape = nullptr);

// Global average pool followed by a linear layer; raw logits.
template <typename T>
Tensor<T> class_head(const Tensor<T>& features, const ClassHeadParams<T>& head,
                     Tape<T>* tape = nullptr);

// Weight file: "BENW", u32 version, u64 header length, UTF-8 JSON header
// (config + per-tensor name/dtype/shape/crc32 in graph order), raw
// little-endian f32 blobs in header order, trailing CRC32 of header+blobs.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

// `class_names`, when given, are stored in the header for inference tools.
template <typename T>
void save_weights(const Network<T>& model, const std::filesystem::path& path,
                  const std::vector<std::string>& class_names = {});

template <typename T>
void load_weights(Network<T>& model, const std::filesystem::path& path);

struct WeightsInfo {
  ModelConfig config;
  std::vector<std::string> class_names;  // empty when the file has none
};

// Reads only the header of a weight file.
WeightsInfo read_weights_info(const std::filesystem::path& path);

std::uint32_t crc32(const void* data, std::size_t size, std::uint32_t seed = 0);

}  // namespace earnet
