#pragma once

// Multi-head training loss, Adam, stratified k-fold splitting and the fold /
// class-extension runners.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "earnet/datapipe.hpp"
#include "earnet/metrics.hpp"
#include "earnet/model.hpp"

namespace earnet {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  double aux_weight1 = 1.0;  // head on stage 2
  double aux_weight2 = 1.0;  // head on stage 3

  static TrainConfig paper() { return TrainConfig{}; }
  // Width-0.25 / 64 px scale used by CI: 15 epochs, batch 32.
  static TrainConfig desk();

  void validate() const;
};

// CE(logits3) + w1 CE(logits1) + w2 CE(logits2). Auxiliary terms with zero
// weight are skipped; a missing auxiliary head with nonzero weight is a
// ContractError.
template <typename T>
Tensor<T> total_loss(const ForwardOutput<T>& out, std::span<const int> targets, double w1,
                     double w2, Tape<T>* tape = nullptr);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

// One bias-corrected Adam update of every tensor in `params` from its
// gradient. Tensors without a gradient buffer are left untouched.
// Throws NumericError naming the first tensor with a non-finite gradient,
// before anything is modified.
template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct FoldPlan {
  std::size_t k = 0;
  bool stratified = true;
  std::vector<std::vector<std::size_t>> val;  // per fold, ascending

  std::vector<std::size_t> train_indices(std::size_t fold) const;
};

// Stratified split: each class's samples are shuffled with `seed` and dealt
// round-robin, starting where the previous class stopped, so fold sizes and
// per-class counts differ by at most one.
FoldPlan kfold_split(std::span<const int> labels, std::size_t k, std::uint64_t seed);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;
};

struct EvalResult {
  double loss = 0;  // mean CE of the prediction head
  double accuracy = 0;
  std::vector<int> predictions;
  std::vector<int> targets;
  std::vector<std::vector<float>> probabilities;
};

// Eval-mode pass over `indices`; the model's mode is restored afterwards.
EvalResult evaluate(Network<float>& model, const TensorDataset& data,
                    std::span<const std::size_t> indices, std::size_t batch_size = 64);

struct FoldRun {
  std::size_t fold = 0;
  EvalResult initial;               // untrained model on the val split
  std::vector<EpochRecord> epochs;  // 1-based
  std::size_t best_epoch = 0;       // highest val accuracy, earliest on ties
  ConfusionMatrix confusion;        // final epoch
  MetricSet metrics;                // final epoch
  std::uint32_t checksum = 0;       // final parameters
};

// Trains a fresh model (seeded from cfg.seed) on the fold's train split and
// evaluates on its val split after every epoch. With a run directory it
// writes config.json, epochs.csv, metrics.csv, checkpoint.benw (last good
// epoch) and best.benw. A non-finite loss aborts with NumericError.
FoldRun run_fold(const ModelConfig& model_cfg, const TensorDataset& data, const FoldPlan& plan,
                 std::size_t fold, const TrainConfig& cfg,
                 const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                 const std::string& model_name = "best_earnet");

struct ExtensionRun {
  std::vector<int> classes;  // original class ids, ascending
  double accuracy = 0;
};

// `repeats` times: draw n classes at random, retrain a model with an n-way
// head on fold 0 of a k-fold plan over the subset, record val accuracy.
std::vector<ExtensionRun> class_extension_run(const ModelConfig& model_cfg, const TensorDataset& data,
                                              std::size_t n_classes, std::size_t repeats,
                                              const TrainConfig& cfg, std::size_t k = 5);

}  // namespace earnet
