#include "earnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <map>
#include <numeric>

namespace earnet {

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 15;
  c.batch_size = 32;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch norm statistics)");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) throw ConfigError("Adam eps must be positive");
  if (!(aux_weight1 >= 0) || !(aux_weight2 >= 0)) throw ConfigError("aux loss weights must be >= 0");
}

template <typename T>
Tensor<T> total_loss(const ForwardOutput<T>& out, std::span<const int> targets, double w1,
                     double w2, Tape<T>* tape) {
  if (!out.logits3.defined()) throw ContractError("total_loss: prediction logits missing");
  Tensor<T> loss = softmax_cross_entropy(out.logits3, targets, tape);
  const std::pair<const Tensor<T>*, double> aux[] = {{&out.logits1, w1}, {&out.logits2, w2}};
  for (const auto& [logits, w] : aux) {
    if (w == 0.0) continue;
    if (!logits->defined()) throw ContractError("total_loss: auxiliary head logits missing");
    Tensor<T> term = softmax_cross_entropy(*logits, targets, tape);
    if (w != 1.0) term = mul(term, Tensor<T>::scalar(static_cast<T>(w)), tape);
    loss = add(loss, term, tape);
  }
  return loss;
}

template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state/parameter mismatch");
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in tensor '" + p.name + "' at Adam step " +
                           std::to_string(state.step + 1));
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].tensor.has_grad()) continue;
    Tensor<T> t = params[i].tensor;
    auto g = std::as_const(t).grad();
    auto w = t.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      m[k] = beta1 * m[k] + (1 - beta1) * gk;
      v[k] = beta2 * v[k] + (1 - beta2) * gk * gk;
      const double step = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      w[k] = static_cast<T>(static_cast<double>(w[k]) - step);
    }
  }
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const {
  if (fold >= val.size()) throw ConfigError("fold " + std::to_string(fold) + " out of range");
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < val.size(); ++f) {
    if (f != fold) out.insert(out.end(), val[f].begin(), val[f].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

FoldPlan kfold_split(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::string short_classes;
  for (const auto& [c, idx] : by_class) {
    if (idx.size() < k) {
      short_classes += (short_classes.empty() ? "" : ", ") + std::to_string(c) + " (" +
                       std::to_string(idx.size()) + ")";
    }
  }
  if (!short_classes.empty()) {
    throw InputError("classes with fewer than " + std::to_string(k) + " samples: " + short_classes);
  }
  FoldPlan plan;
  plan.k = k;
  plan.val.resize(k);
  Rng rng(seed);
  std::size_t next = 0;
  for (auto& [c, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) plan.val[next++ % k].push_back(i);
  }
  for (auto& f : plan.val) std::sort(f.begin(), f.end());
  return plan;
}

EvalResult evaluate(Network<float>& model, const TensorDataset& data,
                    std::span<const std::size_t> indices, std::size_t batch_size) {
  const Mode before = model.mode();
  model.set_mode(Mode::eval);
  EvalResult r;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    const auto idx = indices.subspan(b, std::min(batch_size, indices.size() - b));
    const auto y = data.batch_labels(idx);
    const auto out = model.forward(data.batch(idx));
    loss_sum += static_cast<double>(softmax_cross_entropy(out.logits3, std::span<const int>(y)).item()) *
                static_cast<double>(idx.size());
    const auto probs = softmax(out.logits3);
    const std::size_t k = probs.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = probs.ptr() + i * k;
      const int pred = static_cast<int>(std::max_element(row, row + k) - row);
      r.predictions.push_back(pred);
      r.targets.push_back(y[i]);
      r.probabilities.emplace_back(row, row + k);
      correct += pred == y[i];
    }
  }
  model.set_mode(before);
  if (!indices.empty()) {
    r.loss = loss_sum / static_cast<double>(indices.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  }
  return r;
}

namespace {

// Consecutive chunks of batch_size; a trailing singleton joins the previous
// chunk since batch norm needs two samples.
std::vector<std::span<const std::size_t>> make_batches(std::span<const std::size_t> idx,
                                                       std::size_t batch_size) {
  std::vector<std::span<const std::size_t>> out;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    out.push_back(idx.subspan(b, std::min(batch_size, idx.size() - b)));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    const std::size_t start = static_cast<std::size_t>(out[out.size() - 2].data() - idx.data());
    out.pop_back();
    out.back() = idx.subspan(start);
  }
  return out;
}

nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"lr", c.lr},         {"beta1", c.beta1},           {"beta2", c.beta2},
          {"adam_eps", c.adam_eps}, {"epochs", c.epochs},     {"batch_size", c.batch_size},
          {"seed", c.seed},     {"aux_weight1", c.aux_weight1}, {"aux_weight2", c.aux_weight2}};
}

}  // namespace

FoldRun run_fold(const ModelConfig& model_cfg, const TensorDataset& data, const FoldPlan& plan,
                 std::size_t fold, const TrainConfig& cfg,
                 const std::optional<std::filesystem::path>& run_dir, const std::string& model_name) {
  cfg.validate();
  if (model_cfg.num_classes != data.num_classes()) {
    throw ConfigError("model has " + std::to_string(model_cfg.num_classes) + " classes, data has " +
                      std::to_string(data.num_classes()));
  }
  if (model_cfg.input_size != data.image_size) {
    throw ConfigError("model input size " + std::to_string(model_cfg.input_size) +
                      " differs from data image size " + std::to_string(data.image_size));
  }
  const auto train_idx = plan.train_indices(fold);
  const auto& val_idx = plan.val.at(fold);
  if (train_idx.size() < 2) throw InputError("training split needs at least 2 samples");

  Network<float> model(model_cfg, cfg.seed);
  std::vector<NamedTensor<float>> params;
  for (const auto& nt : model.tensors()) {
    if (nt.trainable) params.push_back(nt);
  }
  const bool aux = model_cfg.arch == Architecture::best_earnet;
  const double w1 = aux ? cfg.aux_weight1 : 0.0, w2 = aux ? cfg.aux_weight2 : 0.0;

  std::filesystem::path dir;
  std::ofstream epochs_csv;
  if (run_dir) {
    dir = *run_dir;
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json")
        << nlohmann::json{{"model", model_name},
                          {"fold", fold},
                          {"classes", data.class_names},
                          {"train", train_config_json(cfg)},
                          {"arch", to_string(model_cfg.arch)},
                          {"width_multiplier", model_cfg.width_multiplier},
                          {"input_size", model_cfg.input_size}}
               .dump(2)
        << '\n';
    epochs_csv.open(dir / "epochs.csv");
    epochs_csv << "epoch,train_loss,val_loss,val_acc\n";
  }

  FoldRun run;
  run.fold = fold;
  run.initial = evaluate(model, data, val_idx);

  Rng order_rng(cfg.seed * 1000003ULL + fold + 1);
  Rng drop_rng(cfg.seed * 7919ULL + fold + 17);
  AdamState adam;
  ForwardOptions<float> opts;
  opts.rng = &drop_rng;
  std::vector<std::size_t> order = train_idx;
  EvalResult last;
  double best_acc = -1;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    model.set_mode(Mode::train);
    double loss_sum = 0;
    std::size_t batch_no = 0;
    for (const auto idx : make_batches(order, cfg.batch_size)) {
      ++batch_no;
      const auto y = data.batch_labels(idx);
      Tape<float> tape;
      opts.tape = &tape;
      const auto out = model.forward(data.batch(idx), opts);
      Tensor<float> loss = total_loss(out, std::span<const int>(y), w1, w2, &tape);
      const float value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("loss diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_no) +
                           (run_dir && epoch > 1 ? "; last good weights in " +
                                                       (dir / "checkpoint.benw").string()
                                                 : std::string()));
      }
      model.zero_grad();
      tape.backward(loss);
      adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
      loss_sum += static_cast<double>(value) * static_cast<double>(idx.size());
    }
    last = evaluate(model, data, val_idx);
    const EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), last.loss, last.accuracy};
    run.epochs.push_back(rec);
    if (run_dir) {
      char line[160];
      std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g\n", rec.epoch, rec.train_loss, rec.val_loss,
                    rec.val_accuracy);
      epochs_csv << line << std::flush;
      save_weights(model, dir / "checkpoint.benw", data.class_names);
    }
    if (last.accuracy > best_acc) {
      best_acc = last.accuracy;
      run.best_epoch = epoch;
      if (run_dir) save_weights(model, dir / "best.benw", data.class_names);
    }
  }

  run.confusion = confusion(last.predictions, last.targets, data.num_classes());
  run.metrics = metrics_from_confusion(run.confusion);
  run.checksum = model.checksum();
  if (run_dir) {
    std::ofstream metrics(dir / "metrics.csv");
    metrics << kRankingCsvHeader << '\n';
    write_fold_metrics_csv(metrics, model_name, fold, run.metrics, data.class_names);
  }
  return run;
}

std::vector<ExtensionRun> class_extension_run(const ModelConfig& model_cfg, const TensorDataset& data,
                                              std::size_t n_classes, std::size_t repeats,
                                              const TrainConfig& cfg, std::size_t k) {
  if (n_classes < 2 || n_classes > data.num_classes()) {
    throw ConfigError("class extension needs 2 <= n <= " + std::to_string(data.num_classes()) +
                      ", got " + std::to_string(n_classes));
  }
  Rng rng(cfg.seed ^ (0xc1a55ULL + n_classes));
  std::vector<ExtensionRun> out;
  for (std::size_t r = 0; r < repeats; ++r) {
    std::vector<int> all(data.num_classes());
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<int> chosen(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_classes));
    std::sort(chosen.begin(), chosen.end());
    const TensorDataset subset = data.select_classes(chosen);
    ModelConfig mc = model_cfg;
    mc.num_classes = n_classes;
    const FoldPlan plan = kfold_split(subset.labels, k, cfg.seed);
    const FoldRun run = run_fold(mc, subset, plan, 0, cfg);
    out.push_back({chosen, run.metrics.accuracy});
  }
  return out;
}

template Tensor<float> total_loss<float>(const ForwardOutput<float>&, std::span<const int>, double,
                                         double, Tape<float>*);
template Tensor<double> total_loss<double>(const ForwardOutput<double>&, std::span<const int>, double,
                                           double, Tape<double>*);
template void adam_step<float>(const std::vector<NamedTensor<float>>&, AdamState&, double, double,
                               double, double);
template void adam_step<double>(const std::vector<NamedTensor<double>>&, AdamState&, double, double,
                                double, double);

}  // namespace earnet
