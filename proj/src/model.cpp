#include "earnet/model.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

namespace earnet {

namespace {

using json = nlohmann::json;

constexpr std::size_t kStageRepeats[3] = {4, 8, 4};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  Tensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> zero_param(Shape shape) {
  Tensor<T> t(std::move(shape), T{0});
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Conv2dParams<T> make_conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                          std::size_t groups, bool bias, Rng& rng) {
  Conv2dParams<T> p;
  const std::size_t fan_in = cin / groups * k * k;
  p.weight = uniform_tensor<T>({cout, cin / groups, k, k}, std::sqrt(6.0 / fan_in), rng);
  if (bias) p.bias = zero_param<T>({cout});
  p.stride = {stride, stride};
  p.padding = {k / 2, k / 2};
  p.groups = groups;
  return p;
}

template <typename T>
BatchNormParams<T> make_bn(std::size_t c) {
  BatchNormParams<T> bn;
  bn.gamma = Tensor<T>::ones({c}).set_requires_grad(true);
  bn.beta = zero_param<T>({c});
  bn.running_mean = Tensor<T>::zeros({c});
  bn.running_var = Tensor<T>::ones({c});
  return bn;
}

template <typename T>
ConvBn<T> make_conv_bn(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                       std::size_t groups, bool relu, Rng& rng) {
  return ConvBn<T>{make_conv<T>(cin, cout, k, stride, groups, false, rng), make_bn<T>(cout), relu};
}

template <typename T>
ShuffleUnit<T> make_unit(std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng) {
  ShuffleUnit<T> u;
  u.stride = stride;
  const std::size_t half = cout / 2;
  std::size_t branch_in = half;
  if (stride == 2) {
    u.shortcut_dw = make_conv_bn<T>(cin, cin, 3, 2, cin, false, rng);
    u.shortcut_pw = make_conv_bn<T>(cin, half, 1, 1, 1, true, rng);
    branch_in = cin;
  }
  u.pw1 = make_conv_bn<T>(branch_in, half, 1, 1, 1, true, rng);
  u.dw = make_conv_bn<T>(half, half, 3, stride, half, false, rng);
  u.pw2 = make_conv_bn<T>(half, half, 1, 1, 1, true, rng);
  return u;
}

template <typename T>
ClassHeadParams<T> make_head(std::size_t in, std::size_t classes, Rng& rng) {
  return {uniform_tensor<T>({classes, in}, std::sqrt(6.0 / in), rng), zero_param<T>({classes})};
}

std::size_t scaled(std::size_t channels, double width) {
  const auto pairs = static_cast<long long>(std::llround(static_cast<double>(channels) * width / 2));
  return std::max<std::size_t>(2, static_cast<std::size_t>(pairs) * 2);
}

template <typename Fn, typename T>
void visit_conv(const std::string& name, Conv2dParams<T>& c, Fn& fn) {
  fn(name + ".weight", c.weight, true);
  if (c.bias.defined()) fn(name + ".bias", c.bias, true);
}

template <typename Fn, typename T>
void visit_bn(const std::string& name, BatchNormParams<T>& bn, Fn& fn) {
  fn(name + ".gamma", bn.gamma, true);
  fn(name + ".beta", bn.beta, true);
  fn(name + ".running_mean", bn.running_mean, false);
  fn(name + ".running_var", bn.running_var, false);
}

template <typename Fn, typename T>
void visit_conv_bn(const std::string& name, ConvBn<T>& l, Fn& fn) {
  visit_conv(name + ".conv", l.conv, fn);
  visit_bn(name + ".bn", l.bn, fn);
}

json config_to_json(const ModelConfig& c) {
  return {{"arch", to_string(c.arch)},
          {"num_classes", c.num_classes},
          {"width_multiplier", c.width_multiplier},
          {"input_size", c.input_size},
          {"dropblock", {{"block_size", c.dropblock.block_size}, {"drop_rate", c.dropblock.drop_rate}}},
          {"lgsff_groups", c.lgsff_groups},
          {"fhigh_channels", c.fhigh_channels},
          {"eca_kernel", c.eca_kernel}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.arch = architecture_from_string(j.at("arch").get<std::string>());
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.width_multiplier = j.at("width_multiplier").get<double>();
  c.input_size = j.at("input_size").get<std::size_t>();
  c.dropblock.block_size = j.at("dropblock").at("block_size").get<std::size_t>();
  c.dropblock.drop_rate = j.at("dropblock").at("drop_rate").get<double>();
  c.lgsff_groups = j.at("lgsff_groups").get<std::size_t>();
  c.fhigh_channels = j.at("fhigh_channels").get<std::size_t>();
  c.eca_kernel = j.at("eca_kernel").get<std::size_t>();
  return c;
}

}  // namespace

std::string to_string(Architecture arch) {
  return arch == Architecture::best_earnet ? "best_earnet" : "shufflenet_v2_x0_5";
}

Architecture architecture_from_string(const std::string& name) {
  if (name == "best_earnet") return Architecture::best_earnet;
  if (name == "shufflenet_v2_x0_5" || name == "baseline") return Architecture::shufflenet_v2_x0_5;
  throw ConfigError("unknown architecture '" + name + "'");
}

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.width_multiplier = 0.25;
  c.input_size = 64;
  c.dropblock.block_size = 1;
  return c;
}

ChannelPlan channel_plan(const ModelConfig& cfg) {
  const double w = cfg.width_multiplier;
  ChannelPlan p;
  p.stem = scaled(24, w);
  p.stage2 = scaled(48, w);
  p.stage3 = scaled(96, w);
  p.stage4 = scaled(192, w);
  p.fhigh = scaled(cfg.fhigh_channels, w);
  p.conv5 = scaled(1024, w);
  return p;
}

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (input_size < 32 || input_size % 32 != 0) {
    throw ConfigError("input_size " + std::to_string(input_size) + " must be a multiple of 32");
  }
  if (!(width_multiplier > 0.0) || !std::isfinite(width_multiplier)) {
    throw ConfigError("width_multiplier must be positive");
  }
  if (arch != Architecture::best_earnet) return;
  const auto plan = channel_plan(*this);
  if (lgsff_groups == 0 || plan.fhigh % lgsff_groups != 0) {
    throw ConfigError("fhigh width " + std::to_string(plan.fhigh) + " not divisible by lgsff_groups " +
                      std::to_string(lgsff_groups));
  }
  if (eca_kernel == 0 || eca_kernel % 2 == 0) throw ConfigError("eca_kernel must be odd");
  const std::size_t final_map = input_size / 32;
  if (dropblock.block_size == 0 || dropblock.block_size % 2 == 0 ||
      dropblock.block_size > final_map) {
    throw ConfigError("dropblock block_size " + std::to_string(dropblock.block_size) +
                      " must be odd and fit the " + std::to_string(final_map) + "x" +
                      std::to_string(final_map) + " final map");
  }
  if (!(dropblock.drop_rate >= 0.0 && dropblock.drop_rate < 1.0)) {
    throw ConfigError("dropblock drop_rate must lie in [0, 1)");
  }
}

std::vector<std::string> activation_names(Architecture arch) {
  if (arch == Architecture::best_earnet) {
    return {"stem", "stage2", "stage3", "stage4", "fhigh", "flow", "lgsff"};
  }
  return {"stem", "stage2", "stage3", "stage4", "conv5"};
}

template <typename T>
Network<T>::Network(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  cfg_.dropblock.mode = Mode::train;
  Rng rng(seed);
  const auto plan = channel_plan(cfg_);
  stem_ = make_conv_bn<T>(3, plan.stem, 3, 2, 1, true, rng);
  const std::size_t widths[4] = {plan.stem, plan.stage2, plan.stage3, plan.stage4};
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<ShuffleUnit<T>> units;
    units.push_back(make_unit<T>(widths[s], widths[s + 1], 2, rng));
    for (std::size_t r = 1; r < kStageRepeats[s]; ++r) {
      units.push_back(make_unit<T>(widths[s + 1], widths[s + 1], 1, rng));
    }
    stages_.push_back(std::move(units));
  }
  if (cfg_.arch == Architecture::best_earnet) {
    fhigh_ = make_conv_bn<T>(plan.stage4, plan.fhigh, 3, 1, 1, true, rng);
    branch_.pw = make_conv<T>(plan.stage2, plan.fhigh, 1, 1, 1, false, rng);
    branch_.eca_kernel = uniform_tensor<T>({cfg_.eca_kernel}, std::sqrt(6.0 / cfg_.eca_kernel), rng);
    branch_.bn = make_bn<T>(plan.fhigh);
    lgsff_.gpw = make_conv<T>(plan.fhigh, plan.fhigh, 1, 1, cfg_.lgsff_groups, false, rng);
    lgsff_.bn = make_bn<T>(plan.fhigh);
    lgsff_.sa_conv = make_conv<T>(2, 1, 3, 1, 1, true, rng);
    heads_.push_back(make_head<T>(plan.stage2, cfg_.num_classes, rng));
    heads_.push_back(make_head<T>(plan.stage3, cfg_.num_classes, rng));
    heads_.push_back(make_head<T>(plan.fhigh, cfg_.num_classes, rng));
  } else {
    conv5_ = make_conv_bn<T>(plan.stage4, plan.conv5, 1, 1, 1, true, rng);
    heads_.push_back(make_head<T>(plan.conv5, cfg_.num_classes, rng));
  }
  visit_tensors([this](const std::string& name, Tensor<T>& t, bool trainable) {
    tensors_.push_back({name, t, trainable});
  });
}

template <typename T>
template <typename Fn>
void Network<T>::visit_tensors(Fn&& fn) {
  visit_conv_bn("stem", stem_, fn);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t u = 0; u < stages_[s].size(); ++u) {
      auto& unit = stages_[s][u];
      const std::string base = "stage" + std::to_string(s + 2) + "." + std::to_string(u);
      if (unit.shortcut_dw) visit_conv_bn(base + ".shortcut_dw", *unit.shortcut_dw, fn);
      if (unit.shortcut_pw) visit_conv_bn(base + ".shortcut_pw", *unit.shortcut_pw, fn);
      visit_conv_bn(base + ".pw1", unit.pw1, fn);
      visit_conv_bn(base + ".dw", unit.dw, fn);
      visit_conv_bn(base + ".pw2", unit.pw2, fn);
    }
  }
  if (cfg_.arch == Architecture::best_earnet) {
    visit_conv_bn("fhigh_conv", fhigh_, fn);
    visit_conv("branch.pw", branch_.pw, fn);
    fn(std::string("branch.eca.weight"), branch_.eca_kernel, true);
    visit_bn("branch.bn", branch_.bn, fn);
    visit_conv("lgsff.gpw", lgsff_.gpw, fn);
    visit_bn("lgsff.bn", lgsff_.bn, fn);
    visit_conv("lgsff.sa", lgsff_.sa_conv, fn);
  } else {
    visit_conv_bn("conv5", conv5_, fn);
  }
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    const std::string base = cfg_.arch == Architecture::best_earnet
                                 ? "head" + std::to_string(h + 1)
                                 : std::string("fc");
    fn(base + ".weight", heads_[h].weight, true);
    fn(base + ".bias", heads_[h].bias, true);
  }
}

template <typename T>
template <typename Fn>
void Network<T>::visit_batchnorms(Fn&& fn) {
  fn(stem_.bn);
  for (auto& stage : stages_) {
    for (auto& unit : stage) {
      if (unit.shortcut_dw) fn(unit.shortcut_dw->bn);
      if (unit.shortcut_pw) fn(unit.shortcut_pw->bn);
      fn(unit.pw1.bn);
      fn(unit.dw.bn);
      fn(unit.pw2.bn);
    }
  }
  if (cfg_.arch == Architecture::best_earnet) {
    fn(fhigh_.bn);
    fn(branch_.bn);
    fn(lgsff_.bn);
  } else {
    fn(conv5_.bn);
  }
}

template <typename T>
Network<T> Network<T>::clone() const {
  Network copy(cfg_);
  copy.copy_values_from(*this);
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    copy.tensors_[i].tensor.set_requires_grad(tensors_[i].tensor.requires_grad());
  }
  copy.set_mode(mode_);
  return copy;
}

template <typename T>
void Network<T>::set_mode(Mode mode) {
  mode_ = mode;
  cfg_.dropblock.mode = mode;
  visit_batchnorms([mode](BatchNormParams<T>& bn) { bn.mode = mode; });
}

template <typename T>
std::vector<Tensor<T>> Network<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& nt : tensors_) {
    if (nt.trainable) out.push_back(nt.tensor);
  }
  return out;
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : tensors_) {
    if (nt.trainable) n += nt.tensor.numel();
  }
  return n;
}

template <typename T>
Tensor<T> Network<T>::tensor(const std::string& name) const {
  for (const auto& nt : tensors_) {
    if (nt.name == name) return nt.tensor;
  }
  throw ConfigError("no tensor named '" + name + "'");
}

template <typename T>
void Network<T>::set_trainable(bool on) {
  for (auto& nt : tensors_) {
    if (nt.trainable) {
      nt.tensor.set_requires_grad(on);
      if (!on) nt.tensor.clear_grad();
    }
  }
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& nt : tensors_) {
    if (nt.tensor.has_grad()) nt.tensor.zero_grad();
  }
}

template <typename T>
std::uint32_t Network<T>::checksum() const {
  std::uint32_t crc = 0;
  for (const auto& nt : tensors_) {
    auto d = nt.tensor.data();
    crc = crc32(d.data(), d.size_bytes(), crc);
  }
  return crc;
}

template <typename T>
ForwardOutput<T> Network<T>::forward(const Tensor<T>& x, const ForwardOptions<T>& opts) const {
  const std::size_t s = cfg_.input_size;
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != s || x.dim(3) != s) {
    throw ShapeError("model input must be N x 3 x " + std::to_string(s) + " x " +
                     std::to_string(s) + ", got " + shape_str(x.shape()));
  }
  if (!opts.grad_layer.empty()) {
    const auto names = activation_names(cfg_.arch);
    if (std::find(names.begin(), names.end(), opts.grad_layer) == names.end()) {
      throw ConfigError("no retained activation named '" + opts.grad_layer + "'");
    }
  }
  Tape<T>* tape = opts.tape;
  ForwardOutput<T> out;
  auto keep = [&](const std::string& name, Tensor<T> t) {
    if (name == opts.grad_layer) {
      t = t.clone();
      t.set_requires_grad(true);
    }
    out.activations[name] = t;
    return t;
  };

  Tensor<T> h = conv_bn(x, stem_, tape);
  h = keep("stem", pool2d(h, PoolKind::max, {3, 3}, {2, 2}, {1, 1}, tape));
  Tensor<T> stage_out[3];
  for (std::size_t st = 0; st < stages_.size(); ++st) {
    for (const auto& unit : stages_[st]) h = shuffle_unit(h, unit, tape);
    h = keep("stage" + std::to_string(st + 2), h);
    stage_out[st] = h;
  }

  if (cfg_.arch == Architecture::best_earnet) {
    DropBlockParams drop = cfg_.dropblock;
    drop.mode = mode_;
    Tensor<T> fhigh = keep("fhigh", conv_bn(stage_out[2], fhigh_, tape));
    Tensor<T> flow = keep("flow", branch_path(stage_out[0], branch_, drop, opts.rng, tape));
    Tensor<T> fused = keep("lgsff", earnet::lgsff(flow, fhigh, lgsff_, drop, opts.rng, tape));
    out.logits1 = class_head(stage_out[0], heads_[0], tape);
    out.logits2 = class_head(stage_out[1], heads_[1], tape);
    out.logits3 = class_head(fused, heads_[2], tape);
    out.features = fused;
  } else {
    Tensor<T> c5 = keep("conv5", conv_bn(stage_out[2], conv5_, tape));
    out.logits3 = class_head(c5, heads_[0], tape);
    out.features = c5;
  }
  return out;
}

template <typename T>
Network<T> build_best_earnet(ModelConfig cfg, std::uint64_t seed) {
  cfg.arch = Architecture::best_earnet;
  return Network<T>(cfg, seed);
}

template <typename T>
Network<T> build_shufflenet_baseline(ModelConfig cfg, std::uint64_t seed) {
  cfg.arch = Architecture::shufflenet_v2_x0_5;
  return Network<T>(cfg, seed);
}

template <typename T>
Tensor<T> conv_bn(const Tensor<T>& x, const ConvBn<T>& layer, Tape<T>* tape) {
  Tensor<T> y = batchnorm2d(conv2d(x, layer.conv, tape), layer.bn, tape);
  return layer.relu ? relu(y, tape) : y;
}

template <typename T>
Tensor<T> shuffle_unit(const Tensor<T>& x, const ShuffleUnit<T>& unit, Tape<T>* tape) {
  auto transform = [&](const Tensor<T>& in) {
    return conv_bn(conv_bn(conv_bn(in, unit.pw1, tape), unit.dw, tape), unit.pw2, tape);
  };
  Tensor<T> joined;
  if (unit.stride == 1) {
    const std::size_t half = x.dim(1) / 2;
    Tensor<T> kept = slice_channels(x, 0, half, tape);
    Tensor<T> moved = slice_channels(x, half, x.dim(1) - half, tape);
    joined = concat_channels<T>({kept, transform(moved)}, tape);
  } else {
    Tensor<T> shortcut = conv_bn(conv_bn(x, *unit.shortcut_dw, tape), *unit.shortcut_pw, tape);
    joined = concat_channels<T>({shortcut, transform(x)}, tape);
  }
  return channel_shuffle(joined, 2, tape);
}

template <typename T>
Tensor<T> branch_path(const Tensor<T>& stage2_out, const BranchPathParams<T>& p,
                      const DropBlockParams& drop, Rng* rng, Tape<T>* tape) {
  if (stage2_out.rank() != 4 || stage2_out.dim(2) % p.pool != 0 || stage2_out.dim(3) % p.pool != 0) {
    throw ConfigError("branch path input " + shape_str(stage2_out.shape()) +
                      " has spatial size not divisible by " + std::to_string(p.pool));
  }
  Tensor<T> h = pool2d(stage2_out, PoolKind::avg, {p.pool, p.pool}, {p.pool, p.pool}, {0, 0}, tape);
  h = conv2d(h, p.pw, tape);
  h = dropblock(h, drop, rng, tape);
  h = eca(h, p.eca_kernel, tape);
  return relu(batchnorm2d(h, p.bn, tape), tape);
}

template <typename T>
Tensor<T> lgsff(const Tensor<T>& flow, const Tensor<T>& fhigh, const LgsffParams<T>& p,
                const DropBlockParams& drop, Rng* rng, Tape<T>* tape) {
  if (flow.shape() != fhigh.shape()) {
    throw ShapeError("lgsff operands differ: " + shape_str(flow.shape()) + " vs " +
                     shape_str(fhigh.shape()));
  }
  Tensor<T> merged = add(flow, fhigh, tape);
  merged = relu(batchnorm2d(conv2d(merged, p.gpw, tape), p.bn, tape), tape);
  Tensor<T> gate = sigmoid(spatial_attention(merged, p.sa_conv, tape), tape);
  return blend(gate, flow, dropblock(fhigh, drop, rng, tape), tape);
}

template <typename T>
Tensor<T> class_head(const Tensor<T>& features, const ClassHeadParams<T>& head, Tape<T>* tape) {
  if (features.rank() != 4 || features.dim(1) != head.weight.dim(1)) {
    throw ShapeError("class head expects " + std::to_string(head.weight.dim(1)) +
                     " channels, got " + shape_str(features.shape()));
  }
  return linear(global_avg_pool(features, tape), head.weight, head.bias, tape);
}

// ---- weight file ----

std::uint32_t crc32(const void* data, std::size_t size, std::uint32_t seed) {
  uLong crc = seed;
  const auto* bytes = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, bytes, chunk);
    bytes += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

std::string f32_blob(std::span<const float> values) {
  std::string out;
  out.reserve(values.size() * 4);
  for (float f : values) put_le(out, std::bit_cast<std::uint32_t>(f), 4);
  return out;
}

struct ParsedFile {
  json header;
  std::string bytes;
  std::size_t blob_offset = 0;
};

ParsedFile parse_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open weight file " + path.string());
  ParsedFile f;
  f.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  const std::string& b = f.bytes;
  if (b.size() < 16) throw LoadError(path.string() + ": truncated weight file");
  if (b.compare(0, 4, "BENW") != 0) throw LoadError(path.string() + ": not a BENW weight file");
  const auto version = get_le(b, 4, 4);
  if (version != kWeightFormatVersion) {
    throw LoadError(path.string() + ": unsupported weight format version " + std::to_string(version));
  }
  const auto header_len = get_le(b, 8, 8);
  if (header_len > b.size() - 16) throw LoadError(path.string() + ": truncated header");
  try {
    f.header = json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": corrupt header: " + e.what());
  }
  if (!f.header.contains("tensors") || !f.header.contains("config")) {
    throw LoadError(path.string() + ": header lacks tensors or config");
  }
  f.blob_offset = 16 + header_len;
  return f;
}

}  // namespace

template <typename T>
void save_weights(const Network<T>& model, const std::filesystem::path& path,
                  const std::vector<std::string>& class_names) {
  json entries = json::array();
  std::string blobs;
  for (const auto& nt : model.tensors()) {
    auto d = nt.tensor.data();
    std::vector<float> f32(d.begin(), d.end());
    std::string blob = f32_blob(f32);
    entries.push_back({{"name", nt.name},
                       {"dtype", "f32"},
                       {"shape", nt.tensor.shape()},
                       {"crc32", crc32(blob.data(), blob.size())}});
    blobs += blob;
  }
  json header = {{"config", config_to_json(model.config())}, {"tensors", entries}};
  if (!class_names.empty()) {
    if (class_names.size() != model.config().num_classes) {
      throw ConfigError("save_weights: " + std::to_string(class_names.size()) +
                        " class names for a " + std::to_string(model.config().num_classes) +
                        "-way model");
    }
    header["classes"] = class_names;
  }
  const std::string header_text = header.dump();

  std::string file = "BENW";
  put_le(file, kWeightFormatVersion, 4);
  put_le(file, header_text.size(), 8);
  file += header_text;
  file += blobs;
  put_le(file, crc32(file.data() + 16, file.size() - 16), 4);

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write weight file " + tmp.string());
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw LoadError("failed writing weight file " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void load_weights(Network<T>& model, const std::filesystem::path& path) {
  ParsedFile f = parse_weights(path);
  const auto& entries = f.header["tensors"];
  const auto& tensors = model.tensors();
  const std::string where = path.string() + ": ";

  // Layout first, so a mismatched config names the first differing tensor.
  for (std::size_t i = 0; i < std::max(entries.size(), tensors.size()); ++i) {
    if (i >= entries.size()) throw LoadError(where + "missing tensor '" + tensors[i].name + "'");
    const std::string name = entries[i].value("name", std::string("?"));
    if (i >= tensors.size()) throw LoadError(where + "unexpected tensor '" + name + "'");
    if (name != tensors[i].name) {
      throw LoadError(where + "tensor '" + name + "' found where '" + tensors[i].name +
                      "' was expected");
    }
    if (entries[i].value("dtype", std::string()) != "f32") {
      throw LoadError(where + "tensor '" + name + "' has unsupported dtype");
    }
    const auto shape = entries[i].at("shape").get<Shape>();
    if (shape != tensors[i].tensor.shape()) {
      throw LoadError(where + "tensor '" + name + "' has shape " + shape_str(shape) +
                      ", model expects " + shape_str(tensors[i].tensor.shape()));
    }
  }

  std::size_t pos = f.blob_offset;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::size_t len = tensors[i].tensor.numel() * 4;
    if (pos + len > f.bytes.size()) {
      throw LoadError(where + "truncated inside tensor '" + tensors[i].name + "'");
    }
    if (crc32(f.bytes.data() + pos, len) != entries[i].at("crc32").get<std::uint32_t>()) {
      throw LoadError(where + "checksum mismatch in tensor '" + tensors[i].name + "'");
    }
    spans.emplace_back(pos, len);
    pos += len;
  }
  if (pos + 4 != f.bytes.size()) {
    throw LoadError(where + (pos + 4 > f.bytes.size() ? "truncated trailer" : "trailing bytes"));
  }
  if (crc32(f.bytes.data() + 16, pos - 16) != get_le(f.bytes, pos, 4)) {
    throw LoadError(where + "file checksum mismatch (header corrupted)");
  }

  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor<T> t = tensors[i].tensor;
    auto d = t.data();
    for (std::size_t k = 0; k < d.size(); ++k) {
      const auto bits = static_cast<std::uint32_t>(get_le(f.bytes, spans[i].first + 4 * k, 4));
      d[k] = static_cast<T>(std::bit_cast<float>(bits));
    }
  }
}

WeightsInfo read_weights_info(const std::filesystem::path& path) {
  ParsedFile f = parse_weights(path);
  try {
    WeightsInfo info{config_from_json(f.header["config"]), {}};
    if (f.header.contains("classes")) {
      info.class_names = f.header["classes"].get<std::vector<std::string>>();
    }
    return info;
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": bad config in header: " + e.what());
  }
}

#define EARNET_INSTANTIATE(T)                                                                      \
  template class Network<T>;                                                                       \
  template Network<T> build_best_earnet<T>(ModelConfig, std::uint64_t);                            \
  template Network<T> build_shufflenet_baseline<T>(ModelConfig, std::uint64_t);                    \
  template Tensor<T> conv_bn<T>(const Tensor<T>&, const ConvBn<T>&, Tape<T>*);                     \
  template Tensor<T> shuffle_unit<T>(const Tensor<T>&, const ShuffleUnit<T>&, Tape<T>*);           \
  template Tensor<T> branch_path<T>(const Tensor<T>&, const BranchPathParams<T>&,                  \
                                    const DropBlockParams&, Rng*, Tape<T>*);                       \
  template Tensor<T> lgsff<T>(const Tensor<T>&, const Tensor<T>&, const LgsffParams<T>&,           \
                              const DropBlockParams&, Rng*, Tape<T>*);                             \
  template Tensor<T> class_head<T>(const Tensor<T>&, const ClassHeadParams<T>&, Tape<T>*);         \
  template void save_weights<T>(const Network<T>&, const std::filesystem::path&,                \
                                const std::vector<std::string>&);                  \
  template void load_weights<T>(Network<T>&, const std::filesystem::path&);

EARNET_INSTANTIATE(float)
EARNET_INSTANTIATE(double)

}  // namespace earnet
