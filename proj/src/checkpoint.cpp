#include "vqnqs/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "vqnqs/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace vqnqs {

namespace {
constexpr char kMagic[7] = {'V', 'Q', 'N', 'Q', 'S', '1', '\0'};
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_sites", c.n_sites},
                     {"local_dim", c.local_dim},
                     {"group_size", c.group_size},
                     {"d_hidden", c.d_hidden},
                     {"n_heads", c.n_heads},
                     {"n_blocks", c.n_blocks},
                     {"trailing_half_block", c.trailing_half_block},
                     {"vq_enabled", c.vq_enabled},
                     {"vq_heads", c.vq_heads},
                     {"vq_codebook", c.vq_codebook},
                     {"vq_temperature", c.vq_temperature},
                     {"vq_gumbel", c.vq_gumbel},
                     {"vq_init_scale", c.vq_init_scale},
                     {"phase_enabled", c.phase_enabled}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_sites").get_to(c.n_sites);
  j.at("local_dim").get_to(c.local_dim);
  j.at("group_size").get_to(c.group_size);
  j.at("d_hidden").get_to(c.d_hidden);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_blocks").get_to(c.n_blocks);
  j.at("trailing_half_block").get_to(c.trailing_half_block);
  j.at("vq_enabled").get_to(c.vq_enabled);
  j.at("vq_heads").get_to(c.vq_heads);
  j.at("vq_codebook").get_to(c.vq_codebook);
  j.at("vq_temperature").get_to(c.vq_temperature);
  j.at("vq_gumbel").get_to(c.vq_gumbel);
  j.at("vq_init_scale").get_to(c.vq_init_scale);
  j.at("phase_enabled").get_to(c.phase_enabled);
}

void save_checkpoint(const VqTransformer& model, const std::string& path) {
  auto params = model.parameters();
  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  for (const ad::Parameter* p : params) {
    manifest.push_back({{"name", p->name},
                        {"shape", p->value.shape},
                        {"offset", offset}});
    offset += sizeof(double) * static_cast<uint64_t>(p->value.size());
  }
  nlohmann::json header = {{"config", model.cfg}, {"tensors", manifest}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  const uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const ad::Parameter* p : params)
    out.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(sizeof(double) * p->value.size()));
  out.flush();
  if (!out) throw ConfigError("checkpoint write failed: " + path);
}

VqTransformer load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ConfigError("not a model checkpoint: " + path);
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ull << 30)) throw ConfigError("corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ConfigError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad checkpoint header: ") + e.what());
  }
  ModelConfig cfg = header.at("config").get<ModelConfig>();
  cfg.validate();
  Rng rng(0);
  VqTransformer model = VqTransformer::init(cfg, rng);
  auto params = model.parameters();
  const auto& manifest = header.at("tensors");
  if (manifest.size() != params.size())
    throw ConfigError("checkpoint tensor count mismatch");
  const std::streampos data_start = in.tellg();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest.at(i);
    if (entry.at("name").get<std::string>() != params[i]->name)
      throw ConfigError("checkpoint tensor order mismatch at " +
                        params[i]->name);
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    if (shape != params[i]->value.shape)
      throw ConfigError("checkpoint tensor shape mismatch at " +
                        params[i]->name);
    in.seekg(data_start +
             static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    in.read(reinterpret_cast<char*>(params[i]->value.data.data()),
            static_cast<std::streamsize>(sizeof(double) *
                                         params[i]->value.size()));
    if (!in) throw ConfigError("truncated checkpoint data at " +
                               params[i]->name);
  }
  return model;
}

}  // namespace vqnqs
