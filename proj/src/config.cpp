#include "zslab/config.hpp"

#include <bit>
#include <set>
#include <stdexcept>

namespace zslab {

const char* to_string(BottleneckKind kind) {
  switch (kind) {
    case BottleneckKind::STE: return "ste";
    case BottleneckKind::VQVAE: return "vqvae";
    case BottleneckKind::CATVAE: return "catvae";
  }
  return "?";
}

BottleneckKind parse_bottleneck_kind(const std::string& name) {
  if (name == "ste") return BottleneckKind::STE;
  if (name == "vqvae") return BottleneckKind::VQVAE;
  if (name == "catvae") return BottleneckKind::CATVAE;
  throw std::invalid_argument("unknown bottleneck '" + name + "' (expected ste, vqvae or catvae)");
}

CodecConfig CodecConfig::defaults(BottleneckKind kind) {
  CodecConfig c;
  c.bottleneck = kind;
  c.speaker_embed_dim = kind == BottleneckKind::STE ? 250 : 128;
  return c;
}

int CodecConfig::ste_bits() const { return std::countr_zero(static_cast<unsigned>(num_symbols)); }

int CodecConfig::num_downsample_layers() const {
  return std::countr_zero(static_cast<unsigned>(downsample_factor));
}

int CodecConfig::latent_dim() const {
  switch (bottleneck) {
    case BottleneckKind::STE: return ste_bits();
    case BottleneckKind::VQVAE: return embedding_dim;
    case BottleneckKind::CATVAE: return num_symbols;
  }
  return 0;
}

void CodecConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid codec config: " + what); };
  if (num_symbols < 2) fail("num_symbols must be >= 2");
  if (bottleneck == BottleneckKind::STE && !std::has_single_bit(static_cast<unsigned>(num_symbols)))
    fail("STE num_symbols must be a power of two (2^bits)");
  if (bottleneck == BottleneckKind::STE && ste_bits() > 62) fail("STE supports at most 62 bits");
  if (downsample_factor < 1 || !std::has_single_bit(static_cast<unsigned>(downsample_factor)))
    fail("downsample_factor must be a power of two");
  if (channels < 1) fail("channels must be positive");
  if (embedding_dim < 1) fail("embedding_dim must be positive");
  if (speaker_embed_dim < 0) fail("speaker_embed_dim must be non-negative");
  if (!(sigma > 0)) fail("sigma must be positive");
  if (beta < 0) fail("beta must be non-negative");
  if (!(anneal.tau_start > 0) || !(anneal.tau_end > 0)) fail("anneal temperatures must be positive");
  if (!(training.lr > 0)) fail("lr must be positive");
  if (training.batch_size < 1) fail("batch_size must be positive");
  if (training.crop_frames < downsample_factor || training.crop_frames % downsample_factor != 0)
    fail("crop_frames must be a positive multiple of downsample_factor");
  if (training.total_steps < 0) fail("total_steps must be non-negative");
  if (training.checkpoint_every < 0) fail("checkpoint_every must be non-negative");
}

void to_json(nlohmann::json& j, const CodecConfig& c) {
  j = nlohmann::json{
      {"bottleneck", to_string(c.bottleneck)},
      {"num_symbols", c.num_symbols},
      {"downsample_factor", c.downsample_factor},
      {"channels", c.channels},
      {"embedding_dim", c.embedding_dim},
      {"speaker_embed_dim", c.speaker_embed_dim},
      {"speaker_conditioning", c.speaker_conditioning},
      {"sigma", c.sigma},
      {"beta", c.beta},
      {"paper_literal_loss", c.paper_literal_loss},
      {"tau_start", c.anneal.tau_start},
      {"tau_end", c.anneal.tau_end},
      {"anneal_steps", c.anneal.total_steps},
      {"lr", c.training.lr},
      {"batch_size", c.training.batch_size},
      {"crop_frames", c.training.crop_frames},
      {"total_steps", c.training.total_steps},
      {"checkpoint_every", c.training.checkpoint_every},
      {"seed", c.training.seed},
  };
}

void from_json(const nlohmann::json& j, CodecConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("codec config must be a JSON object");
  static const std::set<std::string> known = {
      "bottleneck", "num_symbols", "downsample_factor", "channels", "embedding_dim", "speaker_embed_dim",
      "speaker_conditioning", "sigma", "beta", "paper_literal_loss", "tau_start", "tau_end", "anneal_steps",
      "lr", "batch_size", "crop_frames", "total_steps", "checkpoint_every", "seed"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw std::invalid_argument("unknown config key '" + key + "'");

  c = CodecConfig::defaults(j.contains("bottleneck") ? parse_bottleneck_kind(j.at("bottleneck").get<std::string>())
                                                      : BottleneckKind::VQVAE);
  auto read = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  read("num_symbols", c.num_symbols);
  read("downsample_factor", c.downsample_factor);
  read("channels", c.channels);
  read("embedding_dim", c.embedding_dim);
  read("speaker_embed_dim", c.speaker_embed_dim);
  read("speaker_conditioning", c.speaker_conditioning);
  read("sigma", c.sigma);
  read("beta", c.beta);
  read("paper_literal_loss", c.paper_literal_loss);
  read("tau_start", c.anneal.tau_start);
  read("tau_end", c.anneal.tau_end);
  read("anneal_steps", c.anneal.total_steps);
  read("lr", c.training.lr);
  read("batch_size", c.training.batch_size);
  read("crop_frames", c.training.crop_frames);
  read("total_steps", c.training.total_steps);
  read("checkpoint_every", c.training.checkpoint_every);
  read("seed", c.training.seed);
}

std::string canonical_json(const CodecConfig& c) { return nlohmann::json(c).dump(); }

}  // namespace zslab
