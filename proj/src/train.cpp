#include "tcagu/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>

#include <nlohmann/json.hpp>

#include "tcagu/errors.hpp"
#include "tcagu/vca.hpp"

namespace tcagu {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;
constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  void doubles(const std::vector<double>& v) { bytes(v.data(), v.size() * sizeof(double)); }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  template <class T>
  T get() {
    T v;
    copy(&v, sizeof(T));
    return v;
  }
  void copy(void* dst, std::size_t n) {
    if (n > buf.size() - pos) throw FormatError("checkpoint truncated", pos);
    std::memcpy(dst, buf.data() + pos, n);
    pos += n;
  }
  std::vector<double> doubles(std::size_t n) {
    if (n > (buf.size() - pos) / sizeof(double)) throw FormatError("checkpoint truncated", pos);
    std::vector<double> v(n);
    copy(v.data(), n * sizeof(double));
    return v;
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

std::vector<ad::Tensor*> parameter_list(ModelParams& params) {
  std::vector<ad::Tensor*> out;
  params.visit([&](const std::string&, ad::Tensor& t) { out.push_back(&t); });
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight decay must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
}

std::string config_to_json(const TrainConfig& c) {
  const ModelConfig& m = c.model;
  nlohmann::json j = {
      {"lr", c.lr},
      {"weight_decay", c.weight_decay},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"data_path", c.data_path},
      {"checkpoint_path", c.checkpoint_path},
      {"model",
       {{"bands", m.bands},
        {"endmembers", m.endmembers},
        {"channels", m.channels},
        {"spectral_dim", m.spectral_dim},
        {"spatial_dim", m.spatial_dim},
        {"fused_channels", m.fused_channels},
        {"patch_size", m.patch_size},
        {"k_steps", m.k_steps},
        {"radius", m.radius},
        {"sigma_f", m.sigma_f},
        {"sigma_g", m.sigma_g},
        {"square_sigma_f", m.square_sigma_f},
        {"beta", m.beta},
        {"graph_mode", to_string(m.graph_mode)},
        {"leaky_slope", m.leaky_slope}}},
  };
  return j.dump();
}

TrainConfig config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TrainConfig c;
    c.lr = j.at("lr");
    c.weight_decay = j.at("weight_decay");
    c.epochs = j.at("epochs");
    c.seed = j.at("seed");
    c.data_path = j.at("data_path");
    c.checkpoint_path = j.at("checkpoint_path");
    const auto& m = j.at("model");
    c.model.bands = m.at("bands");
    c.model.endmembers = m.at("endmembers");
    c.model.channels = m.at("channels");
    c.model.spectral_dim = m.at("spectral_dim");
    c.model.spatial_dim = m.at("spatial_dim");
    c.model.fused_channels = m.at("fused_channels");
    c.model.patch_size = m.at("patch_size");
    c.model.k_steps = m.at("k_steps");
    c.model.radius = m.at("radius");
    c.model.sigma_f = m.at("sigma_f");
    c.model.sigma_g = m.at("sigma_g");
    c.model.square_sigma_f = m.at("square_sigma_f");
    c.model.beta = m.at("beta");
    c.model.graph_mode = parse_graph_mode(m.at("graph_mode"));
    c.model.leaky_slope = m.at("leaky_slope");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what(), 0);
  }
}

ad::Tensor cube_tensor(const HsiCube& cube) {
  cube.validate();
  return ad::Tensor({cube.bands, cube.height, cube.width}, cube.data);
}

TrainState start_training(const TrainConfig& cfg, const HsiCube& cube) {
  cfg.validate();
  if (cube.bands != cfg.model.bands) {
    throw ConfigError("model expects " + std::to_string(cfg.model.bands) + " bands, data has " +
                      std::to_string(cube.bands));
  }
  const VcaResult vca = vca_extract(cube, cfg.model.endmembers, cfg.seed);
  TrainState s;
  s.config = cfg;
  s.params = ModelParams::init(cfg.model, cfg.seed, vca.endmembers);
  for (ad::Tensor* t : parameter_list(s.params)) {
    s.adam_m.push_back(ad::Tensor::zeros(t->shape));
    s.adam_v.push_back(ad::Tensor::zeros(t->shape));
  }
  return s;
}

void optimizer_step(TrainState& state) {
  const std::vector<ad::Tensor*> params = parameter_list(state.params);
  ++state.step;
  const double lr = state.config.lr, wd = state.config.weight_decay;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor& p = *params[i];
    if (!p.requires_grad || !p.has_grad()) continue;
    auto& m = state.adam_m[i].data;
    auto& v = state.adam_v[i].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = p.grad[k];
      p.data[k] *= 1.0 - lr * wd;
      m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * g;
      v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * g * g;
      p.data[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + kEps);
    }
    p.zero_grad();
  }
  state.params.decoder.clamp_endmembers();
}

void run_epochs(TrainState& state, const HsiCube& cube, std::size_t epochs, const EpochObserver& observer) {
  const ad::Tensor x = cube_tensor(cube);
  for (std::size_t e = 0; e < epochs; ++e) {
    ad::Tape tape;
    auto first_bad = [&] {
      const auto id = tape.first_non_finite();
      return id ? "node " + std::to_string(*id) + " (" + tape.op_of(*id) + ")" : std::string("none recorded");
    };
    const std::string at_epoch = " at epoch " + std::to_string(state.epoch + 1);
    std::optional<ForwardResult> fwd_slot;
    try {
      fwd_slot.emplace(forward(tape, state.params, state.config.model, x));
    } catch (const NumericDomainError& e) {
      throw NumericDomainError(std::string(e.what()) + at_epoch + "; first non-finite tensor: " + first_bad());
    }
    const ForwardResult& fwd = *fwd_slot;
    const double loss = fwd.loss.total.value()[0];
    if (!std::isfinite(loss)) {
      throw NumericDomainError("loss became non-finite" + at_epoch + "; first non-finite tensor: " + first_bad());
    }
    tape.backward(fwd.loss.total);
    optimizer_step(state);
    ++state.epoch;
    state.last_loss = loss;
    state.loss_history.push_back(loss);
    if (observer) {
      EpochReport r;
      r.epoch = state.epoch;
      r.loss = loss;
      r.reconstruction = fwd.loss.reconstruction.value()[0];
      r.angle = fwd.loss.angle.value()[0];
      r.forward = &fwd;
      r.state = &state;
      observer(r);
    }
  }
}

TrainState train(const TrainConfig& cfg, const HsiCube& cube, const EpochObserver& observer) {
  TrainState s = start_training(cfg, cube);
  run_epochs(s, cube, cfg.epochs, observer);
  return s;
}

std::vector<std::uint8_t> encode_checkpoint(const TrainState& state) {
  Writer w;
  w.bytes(kMagic, 4);
  w.put(kVersion);
  const std::string cfg = config_to_json(state.config);
  w.put(static_cast<std::uint64_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  w.put(static_cast<std::uint64_t>(state.epoch));
  w.put(state.step);
  w.put(state.last_loss);
  w.put(static_cast<std::uint64_t>(state.loss_history.size()));
  w.doubles(state.loss_history);
  ModelParams& params = const_cast<ModelParams&>(state.params);
  std::vector<std::pair<std::string, const ad::Tensor*>> named;
  params.visit([&](const std::string& name, ad::Tensor& t) { named.emplace_back(name, &t); });
  w.put(static_cast<std::uint32_t>(named.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, t] = named[i];
    w.put(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put(static_cast<std::uint32_t>(t->shape.size()));
    for (std::size_t d : t->shape) w.put(static_cast<std::uint64_t>(d));
    w.doubles(t->data);
    w.doubles(state.adam_m[i].data);
    w.doubles(state.adam_v[i].data);
  }
  return std::move(w.out);
}

TrainState decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.copy(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)", 0);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto cfg_len = r.get<std::uint64_t>();
  if (cfg_len > bytes.size() - r.pos) throw FormatError("checkpoint truncated", r.pos);
  std::string cfg_text(cfg_len, '\0');
  r.copy(cfg_text.data(), cfg_len);

  TrainState s;
  s.config = config_from_json(cfg_text);
  s.config.validate();
  s.epoch = r.get<std::uint64_t>();
  s.step = r.get<std::uint64_t>();
  s.last_loss = r.get<double>();
  s.loss_history = r.doubles(r.get<std::uint64_t>());

  const ModelConfig& mc = s.config.model;
  s.params = ModelParams::init(mc, 0, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(mc.bands),
                                                           static_cast<Eigen::Index>(mc.endmembers)));
  std::vector<std::pair<std::string, ad::Tensor*>> named;
  s.params.visit([&](const std::string& name, ad::Tensor& t) { named.emplace_back(name, &t); });
  const std::size_t count_at = r.pos;
  if (r.get<std::uint32_t>() != named.size()) throw FormatError("checkpoint parameter count mismatch", count_at);
  for (auto& [name, t] : named) {
    const std::size_t at = r.pos;
    const auto len = r.get<std::uint32_t>();
    if (len > bytes.size() - r.pos) throw FormatError("checkpoint truncated", r.pos);
    std::string stored(len, '\0');
    r.copy(stored.data(), len);
    if (stored != name) throw FormatError("expected parameter '" + name + "', found '" + stored + "'", at);
    ad::Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != t->shape) {
      throw FormatError("parameter '" + name + "' has shape " + ad::shape_str(shape) + ", config implies " +
                            ad::shape_str(t->shape),
                        at);
    }
    t->data = r.doubles(t->size());
    s.adam_m.push_back(ad::Tensor(shape, r.doubles(t->size())));
    s.adam_v.push_back(ad::Tensor(shape, r.doubles(t->size())));
  }
  if (r.pos != bytes.size()) throw FormatError("trailing bytes after checkpoint", r.pos);
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(state);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Eigen::MatrixXd abundance_matrix(const ForwardResult& fwd) {
  const ad::Shape& s = fwd.abundances.shape();
  const auto p = static_cast<Eigen::Index>(s[0]), n = static_cast<Eigen::Index>(s[1] * s[2]);
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      fwd.abundances.value().data(), p, n);
}

}  // namespace tcagu
