#pragma once

#include <random>
#include <string>
#include <vector>

#include "common/generators.hpp"
#include "sketchnet/pipeline.hpp"

namespace sketchnet::testing {

inline VaeConfig small_vae_config() {
  VaeConfig c;
  c.embed = 8;
  c.encoder_hidden = 12;
  c.pitch_latent = 6;
  c.rhythm_latent = 6;
  c.beat_hidden = 12;
  c.tick_hidden = 12;
  return c;
}

inline InpainterConfig small_inpainter_config() {
  InpainterConfig c;
  c.hidden = 16;
  return c;
}

inline ConnectorConfig small_connector_config() {
  ConnectorConfig c;
  c.layers = 1;
  c.heads = 2;
  c.d_model = 8;
  c.ffn = 16;
  return c;
}

/// An untrained three-part stack with small random weights.
inline ModelStack<float> small_stack() {
  const auto v = small_vae_config();
  ModelStack<float> s{SketchVae<float>(v), std::nullopt, std::nullopt, {"vae-test", "inpainter-test", "connector-test"}, {}};
  s.inpainter.emplace(small_inpainter_config(), v.pitch_latent, v.rhythm_latent);
  s.connector.emplace(small_connector_config(), v.latent(), WindowShape{});
  return s;
}

inline ContextWindow random_window(std::mt19937_64& rng, const std::string& id, int lo = 55, int hi = 79) {
  ContextWindow w;
  w.past = random_measures(rng, 6, lo, hi);
  w.missing = random_measures(rng, 4, lo, hi);
  w.future = random_measures(rng, 6, lo, hi);
  w.source_id = id;
  return w;
}

}  // namespace sketchnet::testing
