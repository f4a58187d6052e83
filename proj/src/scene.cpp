#include "pseg/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

namespace fs = std::filesystem;

namespace pseg {

namespace {

struct Rgb {
  float r, g, b;
  float luminance() const { return 0.299f * r + 0.587f * g + 0.114f * b; }
};

// Random color rescaled to a target luminance so instances stay separable.
Rgb color_at_luminance(Rng& rng, float target) {
  Rgb c{static_cast<float>(rng.uniform(0.2, 1.0)),
        static_cast<float>(rng.uniform(0.2, 1.0)),
        static_cast<float>(rng.uniform(0.2, 1.0))};
  float l = c.luminance();
  float s = target / l;
  c.r = std::min(c.r * s, 1.f);
  c.g = std::min(c.g * s, 1.f);
  c.b = std::min(c.b * s, 1.f);
  return c;
}

struct ShapeSpec {
  std::string kind;
  Rgb color;
  // circle
  double cr = 0, cc = 0, rad = 0;
  // rect
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  // triangle
  double tr[3] = {0, 0, 0}, tc[3] = {0, 0, 0};

  bool contains(int r, int c) const {
    if (kind == "circle") {
      double dr = r + 0.5 - cr, dc = c + 0.5 - cc;
      return dr * dr + dc * dc <= rad * rad;
    }
    if (kind == "rect") return r >= r0 && r <= r1 && c >= c0 && c <= c1;
    // triangle: consistent half-plane signs
    auto cross = [&](int i, int j) {
      return (tr[j] - tr[i]) * (c + 0.5 - tc[i]) -
             (tc[j] - tc[i]) * (r + 0.5 - tr[i]);
    };
    double s0 = cross(0, 1), s1 = cross(1, 2), s2 = cross(2, 0);
    bool has_neg = s0 < 0 || s1 < 0 || s2 < 0;
    bool has_pos = s0 > 0 || s1 > 0 || s2 > 0;
    return !(has_neg && has_pos);
  }
};

ShapeSpec draw_shape(Rng& rng, const SceneConfig& cfg, float luminance) {
  std::vector<const char*> kinds;
  if (cfg.circles) kinds.push_back("circle");
  if (cfg.rects) kinds.push_back("rect");
  if (cfg.triangles) kinds.push_back("triangle");
  ShapeSpec s;
  s.kind = kinds[rng.uniform_int(kinds.size())];
  s.color = color_at_luminance(rng, luminance);
  const double n = cfg.size;
  if (s.kind == "circle") {
    s.rad = rng.uniform(0.09 * n, 0.22 * n);
    s.cr = rng.uniform(s.rad, n - s.rad);
    s.cc = rng.uniform(s.rad, n - s.rad);
  } else if (s.kind == "rect") {
    int hh = static_cast<int>(rng.uniform(0.12 * n, 0.38 * n));
    int ww = static_cast<int>(rng.uniform(0.12 * n, 0.38 * n));
    s.r0 = static_cast<int>(rng.uniform_int(cfg.size - hh));
    s.c0 = static_cast<int>(rng.uniform_int(cfg.size - ww));
    s.r1 = s.r0 + hh;
    s.c1 = s.c0 + ww;
  } else {
    for (int tries = 0;; ++tries) {
      for (int i = 0; i < 3; ++i) {
        s.tr[i] = rng.uniform(0, n);
        s.tc[i] = rng.uniform(0, n);
      }
      double area = 0.5 * std::abs((s.tr[1] - s.tr[0]) * (s.tc[2] - s.tc[0]) -
                                   (s.tr[2] - s.tr[0]) * (s.tc[1] - s.tc[0]));
      if (area >= 0.02 * n * n || tries > 50) break;
    }
  }
  return s;
}

}  // namespace

SceneData generate_scene(Rng rng, const SceneConfig& cfg) {
  cfg.validate();
  constexpr std::size_t kMinVisible = 12;
  const int n_shapes = cfg.min_shapes +
                       static_cast<int>(rng.uniform_int(
                           cfg.max_shapes - cfg.min_shapes + 1));

  // Luminance slots keep every instance and the background separable.
  const float bg_lum = static_cast<float>(rng.uniform(0.04, 0.14));
  std::vector<float> slots(n_shapes);
  for (int i = 0; i < n_shapes; ++i)
    slots[i] = 0.30f + 0.62f * static_cast<float>(i) /
                           static_cast<float>(std::max(n_shapes - 1, 1));
  for (int i = n_shapes - 1; i > 0; --i)
    std::swap(slots[i], slots[rng.uniform_int(i + 1)]);

  SceneData scene;
  for (int attempt = 0;; ++attempt) {
    std::vector<ShapeSpec> shapes;
    shapes.reserve(n_shapes);
    for (int i = 0; i < n_shapes; ++i)
      shapes.push_back(draw_shape(rng, cfg, slots[i]));

    // Paint in order; later shapes occlude earlier ones.
    std::vector<int> owner(static_cast<std::size_t>(cfg.size) * cfg.size, -1);
    for (int i = 0; i < n_shapes; ++i)
      for (int r = 0; r < cfg.size; ++r)
        for (int c = 0; c < cfg.size; ++c)
          if (shapes[i].contains(r, c)) owner[r * cfg.size + c] = i;

    std::vector<std::size_t> visible(n_shapes, 0);
    for (int v : owner)
      if (v >= 0) ++visible[v];
    bool ok = true;
    for (int i = 0; i < n_shapes; ++i)
      if (visible[i] < kMinVisible) ok = false;
    if (!ok && attempt < 200) continue;
    if (!ok)
      throw ContractError("scene generation could not place all shapes");

    Rgb bg = color_at_luminance(rng, bg_lum);
    scene.image = Image::blank(cfg.size, cfg.size, 3);
    scene.instances.assign(n_shapes, BinMask::zeros(cfg.size, cfg.size));
    scene.kinds.clear();
    for (const auto& s : shapes) scene.kinds.push_back(s.kind);
    for (int r = 0; r < cfg.size; ++r)
      for (int c = 0; c < cfg.size; ++c) {
        int o = owner[r * cfg.size + c];
        Rgb col = o < 0 ? bg : shapes[o].color;
        scene.image.at(r, c, 0) = col.r;
        scene.image.at(r, c, 1) = col.g;
        scene.image.at(r, c, 2) = col.b;
        if (o >= 0) scene.instances[o].set(r, c, 1);
      }
    break;
  }

  if (cfg.noise_sigma > 0) {
    for (auto& v : scene.image.px) {
      v += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
      v = std::min(std::max(v, 0.f), 1.f);
    }
  }
  return scene;
}

void write_corpus(const std::string& dir, int n_scenes, std::uint64_t seed,
                  const SceneConfig& cfg, int threads) {
  cfg.validate();
  if (n_scenes <= 0) throw ConfigError("corpus needs at least one scene");
  fs::create_directories(dir);
  std::vector<SceneData> scenes(n_scenes);

  auto gen_range = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i)
      scenes[i] = generate_scene(Rng(seed + static_cast<std::uint64_t>(i)),
                                 cfg);
  };
  threads = std::max(1, threads);
  if (threads == 1 || n_scenes < 2 * threads) {
    gen_range(0, n_scenes);
  } else {
    std::vector<std::thread> pool;
    int chunk = (n_scenes + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      int lo = t * chunk, hi = std::min(n_scenes, (t + 1) * chunk);
      if (lo < hi) pool.emplace_back(gen_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw InputError(cat("cannot write manifest in '", dir, "'"));
  manifest << "scene,instance,shape_kind\n";
  char buf[64];
  for (int i = 0; i < n_scenes; ++i) {
    std::snprintf(buf, sizeof(buf), "scene_%06d.ppm", i);
    save_image((fs::path(dir) / buf).string(), scenes[i].image);
    for (std::size_t j = 0; j < scenes[i].instances.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "scene_%06d.inst_%02d.pgm", i,
                    static_cast<int>(j));
      save_mask((fs::path(dir) / buf).string(), scenes[i].instances[j]);
      manifest << i << "," << j << "," << scenes[i].kinds[j] << "\n";
    }
  }
}

Corpus Corpus::load(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest)
    throw InputError(cat("no manifest.csv in corpus directory '", dir, "'"));
  Corpus corpus;
  std::string line;
  std::getline(manifest, line);  // header
  char buf[64];
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    int scene_id = 0, inst_id = 0;
    char kind[32] = {0};
    if (std::sscanf(line.c_str(), "%d,%d,%31s", &scene_id, &inst_id, kind) < 3)
      throw ParseError(cat(dir, "/manifest.csv: bad row '", line, "'"));
    while (static_cast<int>(corpus.scenes.size()) <= scene_id) {
      int i = static_cast<int>(corpus.scenes.size());
      std::snprintf(buf, sizeof(buf), "scene_%06d.ppm", i);
      SceneData s;
      s.image = load_image((fs::path(dir) / buf).string());
      corpus.scenes.push_back(std::move(s));
    }
    std::snprintf(buf, sizeof(buf), "scene_%06d.inst_%02d.pgm", scene_id,
                  inst_id);
    auto& scene = corpus.scenes[scene_id];
    if (static_cast<int>(scene.instances.size()) != inst_id)
      throw ParseError(cat(dir, "/manifest.csv: instance ids for scene ",
                           scene_id, " are not consecutive"));
    scene.instances.push_back(load_mask((fs::path(dir) / buf).string()));
    scene.kinds.emplace_back(kind);
  }
  if (corpus.scenes.empty())
    throw InputError(cat("corpus '", dir, "' is empty"));
  return corpus;
}

}  // namespace pseg
