#include "clapkit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace clapkit {

namespace {

constexpr char kMagic[4] = {'C', 'L', 'P', 'K'};

void put_u32(std::ostream& os, std::uint32_t v) {
  std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                       static_cast<std::uint8_t>(v >> 16),
                       static_cast<std::uint8_t>(v >> 24)};
  os.write(reinterpret_cast<char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  os.write(reinterpret_cast<char*>(b), 8);
}

void put_f64(std::ostream& os, double x) {
  std::uint64_t v;
  std::memcpy(&v, &x, 8);
  put_u64(os, v);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
  std::uint8_t b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double get_f64(std::istream& is) {
  std::uint64_t v = get_u64(is);
  double x;
  std::memcpy(&x, &v, 8);
  return x;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);

  f.write(kMagic, 4);
  put_u32(f, ck.version);
  std::string meta = ck.metadata.dump();
  put_u64(f, meta.size());
  f.write(meta.data(), static_cast<std::streamsize>(meta.size()));

  put_u64(f, ck.arrays.size());
  for (const auto& [name, tensor] : ck.arrays) {
    put_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(f, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.dims()) put_u64(f, d);
    for (std::size_t i = 0; i < tensor.size(); ++i) put_f64(f, tensor[i]);
  }
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);

  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);

  Checkpoint ck;
  ck.version = get_u32(f);
  std::uint64_t meta_len = get_u64(f);
  std::string meta(meta_len, '\0');
  f.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!f) throw std::runtime_error("checkpoint: truncated metadata in " + path);
  ck.metadata = nlohmann::json::parse(meta);

  std::uint64_t count = get_u64(f);
  ck.arrays.reserve(count);
  for (std::uint64_t a = 0; a < count; ++a) {
    std::uint32_t name_len = get_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    std::uint32_t rank = get_u32(f);
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = static_cast<std::size_t>(get_u64(f));
    Tensor t(dims);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = get_f64(f);
    if (!f) throw std::runtime_error("checkpoint: truncated arrays in " + path);
    ck.arrays.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

nlohmann::json config_to_json(const Config& c) {
  nlohmann::json j;
  j["dsp"] = {{"sample_rate", c.dsp.sample_rate},
              {"hop", c.dsp.hop},
              {"window", c.dsp.window},
              {"n_mels", c.dsp.n_mels},
              {"f_min", c.dsp.f_min},
              {"f_max", c.dsp.f_max},
              {"log_floor", c.dsp.log_floor},
              {"resampler", c.dsp.resampler}};
  j["fusion"] = {{"enabled", c.fusion.enabled},
                 {"chunk_seconds", c.fusion.chunk_seconds},
                 {"seed", c.fusion.seed}};
  j["model"] = {{"stem_channels", c.model.stem_channels},
                {"stem_stride", c.model.stem_stride},
                {"block_channels", c.model.block_channels},
                {"embed_dim", c.model.embed_dim},
                {"text_dim", c.model.text_dim},
                {"text_attention", c.model.text_attention},
                {"bottleneck_ratio", c.model.bottleneck_ratio}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"seed", c.train.seed},
                {"base_lr", c.train.base_lr},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"adam_eps", c.train.adam_eps},
                {"warmup_frac", c.train.warmup_frac},
                {"clip_norm", c.train.clip_norm},
                {"tau_init", c.train.tau_init},
                {"tau_min", c.train.tau_min},
                {"tau_max", c.train.tau_max},
                {"checkpoint_every", c.train.checkpoint_every},
                {"threads", c.train.threads}};
  return j;
}

Config config_from_json(const nlohmann::json& j) {
  Config c;
  const auto& d = j.at("dsp");
  c.dsp.sample_rate = d.at("sample_rate").get<int>();
  c.dsp.hop = d.at("hop").get<int>();
  c.dsp.window = d.at("window").get<int>();
  c.dsp.n_mels = d.at("n_mels").get<int>();
  c.dsp.f_min = d.at("f_min").get<double>();
  c.dsp.f_max = d.at("f_max").get<double>();
  c.dsp.log_floor = d.at("log_floor").get<double>();
  c.dsp.resampler = d.at("resampler").get<std::string>();
  const auto& fu = j.at("fusion");
  c.fusion.enabled = fu.at("enabled").get<bool>();
  c.fusion.chunk_seconds = fu.at("chunk_seconds").get<double>();
  c.fusion.seed = fu.at("seed").get<std::uint64_t>();
  const auto& m = j.at("model");
  c.model.stem_channels = m.at("stem_channels").get<int>();
  c.model.stem_stride = m.at("stem_stride").get<int>();
  c.model.block_channels = m.at("block_channels").get<std::vector<int>>();
  c.model.embed_dim = m.at("embed_dim").get<int>();
  c.model.text_dim = m.at("text_dim").get<int>();
  c.model.text_attention = m.at("text_attention").get<bool>();
  c.model.bottleneck_ratio = m.at("bottleneck_ratio").get<int>();
  const auto& t = j.at("train");
  c.train.batch_size = t.at("batch_size").get<int>();
  c.train.epochs = t.at("epochs").get<int>();
  c.train.seed = t.at("seed").get<std::uint64_t>();
  c.train.base_lr = t.at("base_lr").get<double>();
  c.train.beta1 = t.at("beta1").get<double>();
  c.train.beta2 = t.at("beta2").get<double>();
  c.train.adam_eps = t.at("adam_eps").get<double>();
  c.train.warmup_frac = t.at("warmup_frac").get<double>();
  c.train.clip_norm = t.at("clip_norm").get<double>();
  c.train.tau_init = t.at("tau_init").get<double>();
  c.train.tau_min = t.at("tau_min").get<double>();
  c.train.tau_max = t.at("tau_max").get<double>();
  c.train.checkpoint_every = t.at("checkpoint_every").get<int>();
  c.train.threads = t.at("threads").get<int>();
  return c;
}

Checkpoint checkpoint_from_model(ModelParams& params, const Config& cfg,
                                 const Vocab& vocab) {
  Checkpoint ck;
  ck.metadata["format"] = "clapkit-checkpoint";
  ck.metadata["config"] = config_to_json(cfg);
  ck.metadata["vocab"] = vocab.words;
  for (const auto& ref : named_params(params))
    ck.arrays.emplace_back(ref.name, *ref.tensor);
  return ck;
}

void model_from_checkpoint(const Checkpoint& ck, ModelParams& params,
                           Config& cfg, Vocab& vocab) {
  cfg = config_from_json(ck.metadata.at("config"));
  vocab = Vocab::from_words(ck.metadata.at("vocab").get<std::vector<std::string>>());
  params = init_model(cfg.model, vocab.size(), cfg.train.tau_init,
                      cfg.train.tau_min, cfg.train.tau_max, 0);

  auto refs = named_params(params);
  require(refs.size() == ck.arrays.size(),
          "checkpoint: array count differs from config-implied parameter set");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& [name, tensor] = ck.arrays[i];
    require(refs[i].name == name,
            "checkpoint: unexpected array " + name + " (want " + refs[i].name + ")");
    require(refs[i].tensor->dims() == tensor.dims(),
            "checkpoint: shape mismatch for " + name);
    *refs[i].tensor = tensor;
  }
}

}  // namespace clapkit
