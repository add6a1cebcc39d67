#include "psearch/synthdata.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "psearch/rng.hpp"

namespace psearch {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

struct Rgb {
  real r, g, b;
};

Rgb hsv_to_rgb(real h, real s, real v) {
  h = h - std::floor(h);
  const real c = v * s;
  const real hp = h * 6;
  const real x = c * (1 - std::fabs(std::fmod(hp, 2.0) - 1));
  real r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c; g = x;
  } else if (hp < 2) {
    r = x; g = c;
  } else if (hp < 3) {
    g = c; b = x;
  } else if (hp < 4) {
    g = x; b = c;
  } else if (hp < 5) {
    r = x; b = c;
  } else {
    r = c; b = x;
  }
  const real m = v - c;
  return Rgb{r + m, g + m, b + m};
}

struct IdentityLook {
  Rgb torso, torso_alt, legs;
  int pattern;  // 0 solid, 1 h-stripes, 2 v-stripes, 3 checker
};

IdentityLook identity_look(const SyntheticSpec& spec, int identity) {
  Rng rng = Rng(spec.seed).substream("identity", static_cast<std::uint64_t>(identity));
  // golden-angle hue spacing keeps identities far apart in color space
  const real hue = std::fmod(0.61803398875 * identity + rng.uniform(0.0, 0.03), 1.0);
  IdentityLook look;
  look.torso = hsv_to_rgb(hue, 0.85, 0.95);
  look.torso_alt = hsv_to_rgb(hue + 0.5, 0.8, 0.85);
  look.legs = hsv_to_rgb(hue + 0.23, 0.8, 0.55);
  look.pattern = identity % 4;
  return look;
}

const Rgb kHeadColor{0.93, 0.78, 0.62};  // shared across identities

void put_pixel(Tensor& img, int x, int y, const Rgb& c) {
  if (x < 0 || y < 0 || x >= img.w() || y >= img.h()) return;
  img.at(0, 0, y, x) = c.r;
  img.at(0, 1, y, x) = c.g;
  img.at(0, 2, y, x) = c.b;
}

void fill_rect(Tensor& img, int x0, int y0, int x1, int y1, const Rgb& c) {
  for (int y = std::max(0, y0); y < std::min(img.h(), y1); ++y)
    for (int x = std::max(0, x0); x < std::min(img.w(), x1); ++x) put_pixel(img, x, y, c);
}

void fill_ellipse(Tensor& img, real cx, real cy, real rx, real ry, const Rgb& c) {
  const int x0 = static_cast<int>(std::floor(cx - rx));
  const int x1 = static_cast<int>(std::ceil(cx + rx));
  const int y0 = static_cast<int>(std::floor(cy - ry));
  const int y1 = static_cast<int>(std::ceil(cy + ry));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const real u = (x + 0.5 - cx) / rx;
      const real v = (y + 0.5 - cy) / ry;
      if (u * u + v * v <= 1.0) put_pixel(img, x, y, c);
    }
  }
}

// blit src (1,3,h,w) onto dst with top-left (x0, y0)
void blit(Tensor& dst, const Tensor& src, int x0, int y0) {
  for (int y = 0; y < src.h(); ++y)
    for (int x = 0; x < src.w(); ++x)
      put_pixel(dst, x0 + x, y0 + y,
                Rgb{src.at(0, 0, y, x), src.at(0, 1, y, x), src.at(0, 2, y, x)});
}

}  // namespace

Tensor render_person_sprite(const SyntheticSpec& spec, int identity, int w, int h) {
  if (identity < 0 || identity >= spec.num_identities)
    throw InputError("render_person_sprite: identity out of range");
  if (w < 6 || h < 10) throw InputError("render_person_sprite: sprite too small");
  const IdentityLook look = identity_look(spec, identity);
  Tensor s(1, 3, h, w);

  const int head_h = std::max(2, static_cast<int>(0.18 * h));
  const int torso_end = static_cast<int>(0.62 * h);
  const int stripe = std::max(2, h / 8);

  // torso with identity pattern
  for (int y = head_h; y < torso_end; ++y) {
    for (int x = 0; x < w; ++x) {
      bool alt = false;
      switch (look.pattern) {
        case 1: alt = ((y - head_h) / stripe) % 2 == 1; break;
        case 2: alt = (x / stripe) % 2 == 1; break;
        case 3: alt = (((y - head_h) / stripe) + (x / stripe)) % 2 == 1; break;
        default: break;
      }
      put_pixel(s, x, y, alt ? look.torso_alt : look.torso);
    }
  }
  // legs
  fill_rect(s, 0, torso_end, w, h, look.legs);
  // shared head marker
  fill_ellipse(s, 0.5 * w, 0.5 * head_h, 0.42 * w, 0.55 * head_h, kHeadColor);
  return s;
}

void SyntheticSpec::validate() const {
  if (num_identities < 2) throw ConfigError("SyntheticSpec: num_identities must be >= 2");
  if (image_size < 64) throw ConfigError("SyntheticSpec: image_size must be >= 64");
  if (train_scenes < 1 || gallery_scenes < 1 || query_scenes < 1)
    throw ConfigError("SyntheticSpec: every split needs at least one scene");
  if (persons_min < 1 || persons_max < persons_min)
    throw ConfigError("SyntheticSpec: invalid persons-per-scene range");
  if (sprite_min < 12 || sprite_max < sprite_min)
    throw ConfigError("SyntheticSpec: invalid sprite size range");
  if (sprite_max > image_size / 2)
    throw ConfigError("SyntheticSpec: sprite_max too large for the image size");
  if (clutter_level < 0 || clutter_level > 1)
    throw ConfigError("SyntheticSpec: clutter_level must be in [0,1]");
  if (occlusion_prob < 0 || occlusion_prob > 1)
    throw ConfigError("SyntheticSpec: occlusion_prob must be in [0,1]");
  // feasibility: worst-case sprite area demand vs image area
  const real worst = static_cast<real>(persons_max) * sprite_max * (0.62 * sprite_max);
  if (worst > 0.5 * image_size * image_size)
    throw ConfigError("SyntheticSpec: impossible placement, too many/large sprites per scene");
  if (!shared_identities && num_identities < 4)
    throw ConfigError("SyntheticSpec: disjoint splits need at least 4 identities");
}

namespace {

std::vector<int> split_identity_pool(const SyntheticSpec& spec, bool eval_split) {
  std::vector<int> ids;
  if (spec.shared_identities) {
    for (int i = 0; i < spec.num_identities; ++i) ids.push_back(i);
  } else {
    const int half = spec.num_identities / 2;
    if (eval_split) {
      for (int i = half; i < spec.num_identities; ++i) ids.push_back(i);
    } else {
      for (int i = 0; i < half; ++i) ids.push_back(i);
    }
  }
  return ids;
}

struct PlacedSprite {
  Box box;
  int identity;
};

Tensor render_scene(const SyntheticSpec& spec, Rng& rng, const std::vector<int>& identities,
                    std::vector<PlacedSprite>& placed_out) {
  const int sz = spec.image_size;
  Tensor img(1, 3, sz, sz);

  // muted background with a soft gradient and pixel noise
  const real base_v = rng.uniform(0.25, 0.45);
  const real hue = rng.uniform(0.0, 1.0);
  const Rgb base = hsv_to_rgb(hue, rng.uniform(0.02, 0.12), base_v);
  const real gx = rng.uniform(-0.08, 0.08);
  const real gy = rng.uniform(-0.08, 0.08);
  for (int y = 0; y < sz; ++y) {
    for (int x = 0; x < sz; ++x) {
      const real shade = gx * (static_cast<real>(x) / sz - 0.5) +
                         gy * (static_cast<real>(y) / sz - 0.5) + rng.uniform(-0.03, 0.03);
      put_pixel(img, x, y,
                Rgb{std::clamp(base.r + shade, 0.0, 1.0), std::clamp(base.g + shade, 0.0, 1.0),
                    std::clamp(base.b + shade, 0.0, 1.0)});
    }
  }

  // clutter: dull rectangles/ellipses without the person head+body structure
  const int n_clutter = static_cast<int>(std::lround(spec.clutter_level * 12));
  for (int k = 0; k < n_clutter; ++k) {
    const int cw = rng.uniform_int(6, 26);
    const int ch = rng.uniform_int(6, 26);
    const int x0 = rng.uniform_int(0, sz - cw - 1);
    const int y0 = rng.uniform_int(0, sz - ch - 1);
    const Rgb c = hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.25),
                             rng.uniform(0.15, 0.6));
    if (rng.bernoulli(0.5)) {
      fill_rect(img, x0, y0, x0 + cw, y0 + ch, c);
    } else {
      fill_ellipse(img, x0 + 0.5 * cw, y0 + 0.5 * ch, 0.5 * cw, 0.5 * ch, c);
    }
  }

  // persons: rejection-sampled placements, bounded overlap
  placed_out.clear();
  for (int identity : identities) {
    const int h = rng.uniform_int(spec.sprite_min, spec.sprite_max);
    const int w = std::max(6, static_cast<int>(std::lround(h * rng.uniform(0.45, 0.62))));
    const bool may_occlude = rng.bernoulli(spec.occlusion_prob);
    const real max_iou = may_occlude ? 0.45 : 0.0;  // without the occlusion roll, sprites stay disjoint
    Box best{};
    real best_overlap = std::numeric_limits<real>::max();
    for (int attempt = 0; attempt < 50; ++attempt) {
      const int x0 = rng.uniform_int(1, sz - w - 2);
      const int y0 = rng.uniform_int(1, sz - h - 2);
      const Box cand{static_cast<real>(x0), static_cast<real>(y0), static_cast<real>(x0 + w),
                     static_cast<real>(y0 + h)};
      real overlap = 0;
      for (const auto& p : placed_out) overlap = std::max(overlap, iou(cand, p.box));
      if (overlap < best_overlap) {
        best_overlap = overlap;
        best = cand;
      }
      if (overlap <= max_iou) break;
    }
    placed_out.push_back(PlacedSprite{best, identity});
  }
  for (const auto& p : placed_out) {
    const int w = static_cast<int>(p.box.width());
    const int h = static_cast<int>(p.box.height());
    blit(img, render_person_sprite(spec, p.identity, w, h), static_cast<int>(p.box.x1),
         static_cast<int>(p.box.y1));
  }
  return img;
}

/// Pick identities for each scene of a split. For the gallery split every
/// identity is seeded into at least two scenes before the remaining slots
/// are filled at random.
std::vector<std::vector<int>> plan_split(const SyntheticSpec& spec, Rng& rng,
                                         const std::vector<int>& pool, int scenes,
                                         bool ensure_two_appearances) {
  std::vector<std::vector<int>> plan(scenes);
  std::vector<int> counts(spec.num_identities, 0);
  auto scene_capacity = [&](int) { return rng.uniform_int(spec.persons_min, spec.persons_max); };
  std::vector<int> caps(scenes);
  for (int s = 0; s < scenes; ++s) caps[s] = scene_capacity(s);

  if (ensure_two_appearances) {
    int total_cap = 0;
    for (int c : caps) total_cap += c;
    if (total_cap < 2 * static_cast<int>(pool.size()))
      throw ConfigError("SyntheticSpec: gallery split too small to host every identity twice");
    std::vector<int> seeds;
    for (int id : pool) {
      seeds.push_back(id);
      seeds.push_back(id);
    }
    rng.shuffle(seeds);
    int s = 0;
    for (int id : seeds) {
      // find the next scene with free capacity that does not hold this identity
      int guard = 0;
      while (static_cast<int>(plan[s].size()) >= caps[s] ||
             std::find(plan[s].begin(), plan[s].end(), id) != plan[s].end()) {
        s = (s + 1) % scenes;
        if (++guard > 2 * scenes) throw ConfigError("SyntheticSpec: cannot seed gallery identities");
      }
      plan[s].push_back(id);
      counts[id]++;
      s = (s + 1) % scenes;
    }
  }
  for (int s = 0; s < scenes; ++s) {
    std::vector<int> avail;
    for (int id : pool)
      if (std::find(plan[s].begin(), plan[s].end(), id) == plan[s].end()) avail.push_back(id);
    rng.shuffle(avail);
    for (int k = 0; static_cast<int>(plan[s].size()) < caps[s] && k < static_cast<int>(avail.size());
         ++k) {
      plan[s].push_back(avail[k]);
    }
    rng.shuffle(plan[s]);
  }
  return plan;
}

void write_split(const SyntheticSpec& spec, const fs::path& dir, const std::string& split_name,
                 const std::vector<std::vector<int>>& plan) {
  fs::create_directories(dir / "images");
  std::ofstream ann(dir / "annotations.jsonl");
  if (!ann) throw InputError("cannot write annotations in " + dir.string());
  for (std::size_t s = 0; s < plan.size(); ++s) {
    Rng rng = Rng(spec.seed).substream(split_name + ".scene", s);
    std::vector<PlacedSprite> placed;
    const Tensor img = render_scene(spec, rng, plan[s], placed);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04zu.ppm", s);
    save_ppm(dir / "images" / name, img);
    json rec;
    rec["image"] = std::string("images/") + name;
    json boxes = json::array();
    json ids = json::array();
    for (const auto& p : placed) {
      boxes.push_back({p.box.x1, p.box.y1, p.box.x2, p.box.y2});
      ids.push_back(p.identity);
    }
    rec["boxes"] = std::move(boxes);
    rec["identities"] = std::move(ids);
    ann << rec.dump() << "\n";
  }
}

}  // namespace

void generate(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);

  Rng master(spec.seed);
  const std::vector<int> train_pool = split_identity_pool(spec, false);
  const std::vector<int> eval_pool = split_identity_pool(spec, true);

  Rng plan_rng_train = master.substream("plan.train");
  Rng plan_rng_gallery = master.substream("plan.gallery");
  Rng plan_rng_query = master.substream("plan.query");
  const auto train_plan = plan_split(spec, plan_rng_train, train_pool, spec.train_scenes, false);
  const auto gallery_plan =
      plan_split(spec, plan_rng_gallery, eval_pool, spec.gallery_scenes, true);
  const auto query_plan = plan_split(spec, plan_rng_query, eval_pool, spec.query_scenes, false);

  write_split(spec, out_dir / "train", "train", train_plan);
  write_split(spec, out_dir / "gallery", "gallery", gallery_plan);
  write_split(spec, out_dir / "query", "query", query_plan);

  json meta;
  meta["format"] = "psearch-dataset";
  meta["version"] = 1;
  meta["spec"] = {{"num_identities", spec.num_identities},
                  {"train_scenes", spec.train_scenes},
                  {"gallery_scenes", spec.gallery_scenes},
                  {"query_scenes", spec.query_scenes},
                  {"persons_min", spec.persons_min},
                  {"persons_max", spec.persons_max},
                  {"sprite_min", spec.sprite_min},
                  {"sprite_max", spec.sprite_max},
                  {"clutter_level", spec.clutter_level},
                  {"occlusion_prob", spec.occlusion_prob},
                  {"image_size", spec.image_size},
                  {"shared_identities", spec.shared_identities},
                  {"seed", spec.seed}};
  std::ofstream meta_os(out_dir / "dataset.json");
  meta_os << meta.dump(2) << "\n";
}

namespace {

DatasetSplit load_split(const fs::path& dir) {
  DatasetSplit split;
  split.dir = dir;
  std::ifstream is(dir / "annotations.jsonl");
  if (!is) throw InputError("missing annotations: " + (dir / "annotations.jsonl").string());
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    SceneRecord sc;
    sc.image = rec.at("image").get<std::string>();
    for (const auto& b : rec.at("boxes")) {
      sc.boxes.push_back(
          Box{b.at(0).get<real>(), b.at(1).get<real>(), b.at(2).get<real>(), b.at(3).get<real>()});
    }
    sc.identities = rec.at("identities").get<std::vector<int>>();
    if (sc.boxes.size() != sc.identities.size())
      throw InputError("corrupt annotation record in " + dir.string());
    split.scenes.push_back(std::move(sc));
  }
  return split;
}

}  // namespace

Dataset load_dataset(const fs::path& root) {
  std::ifstream meta_is(root / "dataset.json");
  if (!meta_is) throw InputError("not a dataset directory (missing dataset.json): " + root.string());
  json meta = json::parse(meta_is);
  Dataset ds;
  ds.root = root;
  const auto& s = meta.at("spec");
  ds.spec.num_identities = s.at("num_identities").get<int>();
  ds.spec.train_scenes = s.at("train_scenes").get<int>();
  ds.spec.gallery_scenes = s.at("gallery_scenes").get<int>();
  ds.spec.query_scenes = s.at("query_scenes").get<int>();
  ds.spec.persons_min = s.at("persons_min").get<int>();
  ds.spec.persons_max = s.at("persons_max").get<int>();
  ds.spec.sprite_min = s.at("sprite_min").get<int>();
  ds.spec.sprite_max = s.at("sprite_max").get<int>();
  ds.spec.clutter_level = s.at("clutter_level").get<real>();
  ds.spec.occlusion_prob = s.at("occlusion_prob").get<real>();
  ds.spec.image_size = s.at("image_size").get<int>();
  ds.spec.shared_identities = s.at("shared_identities").get<bool>();
  ds.spec.seed = s.at("seed").get<std::uint64_t>();
  ds.train = load_split(root / "train");
  ds.gallery = load_split(root / "gallery");
  ds.query = load_split(root / "query");
  return ds;
}

std::vector<int> Dataset::train_identities() const {
  std::set<int> ids;
  for (const auto& sc : train.scenes) ids.insert(sc.identities.begin(), sc.identities.end());
  return std::vector<int>(ids.begin(), ids.end());
}

void save_ppm(const fs::path& file, const Tensor& image) {
  if (image.n() != 1 || image.c() != 3) throw InputError("save_ppm: expected (1,3,H,W)");
  std::ofstream os(file, std::ios::binary);
  if (!os) throw InputError("cannot open for writing: " + file.string());
  os << "P6\n" << image.w() << " " << image.h() << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(image.w()) * 3);
  for (int y = 0; y < image.h(); ++y) {
    for (int x = 0; x < image.w(); ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const real v = std::clamp(image.at(0, ch, y, x), 0.0, 1.0);
        row[static_cast<std::size_t>(x) * 3 + ch] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

std::uint64_t directory_hash(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const char* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(data[i]);
      h *= 1099511628211ull;
    }
  };
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, root).generic_string();
    mix(rel.data(), rel.size());
    std::ifstream is(f, std::ios::binary);
    char buf[8192];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) mix(buf, static_cast<std::size_t>(is.gcount()));
  }
  return h;
}

Tensor load_ppm(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw InputError("cannot open: " + file.string());
  std::string magic;
  is >> magic;
  if (magic != "P6") throw InputError("not a binary PPM: " + file.string());
  int w = 0, h = 0, maxval = 0;
  // skip whitespace and '#' comments between header tokens
  auto next_int = [&](int& out) {
    while (true) {
      int ch = is.peek();
      if (ch == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(ch)) {
        is.get();
      } else {
        break;
      }
    }
    is >> out;
  };
  next_int(w);
  next_int(h);
  next_int(maxval);
  if (w < 1 || h < 1 || maxval != 255) throw InputError("unsupported PPM: " + file.string());
  is.get();  // single whitespace after maxval
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw InputError("truncated PPM: " + file.string());
  Tensor img(1, 3, h, w);
  std::size_t i = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        img.at(0, ch, y, x) = buf[i++] / 255.0;
      }
    }
  }
  return img;
}

}  // namespace psearch
