#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pseg/image.hpp"
#include "pseg/mask.hpp"
#include "pseg/rng.hpp"

namespace pseg {

// Synthetic scene: RGB image plus post-occlusion visible-region masks,
// one per instance, painted back to front.
struct SceneData {
  Image image;
  std::vector<BinMask> instances;
  std::vector<std::string> kinds;  // circle / rect / triangle
};

struct SceneConfig {
  int size = 64;
  int min_shapes = 2;
  int max_shapes = 5;
  double noise_sigma = 0.05;
  bool circles = true;
  bool rects = true;
  bool triangles = true;

  void validate() const {
    if (size <= 0) throw ConfigError("scene size must be positive");
    if (min_shapes < 1 || max_shapes < min_shapes)
      throw ConfigError(cat("shape count range [", min_shapes, ",",
                            max_shapes, "] invalid"));
    if (!circles && !rects && !triangles)
      throw ConfigError("no shape kinds enabled");
  }
};

// Deterministic given (cfg, rng state). Every instance keeps at least a
// dozen visible pixels; placements that occlude an earlier shape below
// that floor are redrawn.
SceneData generate_scene(Rng rng, const SceneConfig& cfg);

// Corpus directory layout: scene_%06d.ppm, scene_%06d.inst_%02d.pgm and a
// manifest CSV (scene,instance,shape_kind). Scene i uses seed base + i, so
// disjoint seed ranges give disjoint corpora.
void write_corpus(const std::string& dir, int n_scenes, std::uint64_t seed,
                  const SceneConfig& cfg, int threads = 1);

struct Corpus {
  std::vector<SceneData> scenes;

  std::size_t total_instances() const {
    std::size_t n = 0;
    for (const auto& s : scenes) n += s.instances.size();
    return n;
  }

  static Corpus load(const std::string& dir);
};

}  // namespace pseg
