#include "cmkd/data_synth.hpp"

#include <cstdio>
#include <cstring>

#include "cmkd/rng.hpp"

namespace cmkd::synth {

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = {
      "PAD", "the", "a",      "red",  "green",  "blue",   "yellow", "circle", "square",
      "triangle", "left", "right", "top",  "bottom", "center", "on",     "side",   "at"};
  return v;
}

int token_id(std::string_view word) {
  const auto& v = vocabulary();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] == word) return static_cast<int>(i);
  fail(Err::UnknownTokenId, "unknown token: " + std::string(word));
}

namespace {

const char* color_word(ColorKind c) {
  switch (c) {
    case ColorKind::Red: return "red";
    case ColorKind::Green: return "green";
    case ColorKind::Blue: return "blue";
    case ColorKind::Yellow: return "yellow";
  }
  return "";
}

const char* shape_word(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "";
}

void color_rgb(ColorKind c, float rgb[3]) {
  switch (c) {
    case ColorKind::Red: rgb[0] = 1; rgb[1] = 0; rgb[2] = 0; break;
    case ColorKind::Green: rgb[0] = 0; rgb[1] = 1; rgb[2] = 0; break;
    case ColorKind::Blue: rgb[0] = 0; rgb[1] = 0; rgb[2] = 1; break;
    case ColorKind::Yellow: rgb[0] = 1; rgb[1] = 1; rgb[2] = 0; break;
  }
}

bool inside(const SceneObject& o, int x, int y) {
  const int dx = x - o.cx, dy = y - o.cy;
  switch (o.shape) {
    case ShapeKind::Circle:
      return dx * dx + dy * dy <= o.size * o.size;
    case ShapeKind::Square:
      return dx >= -o.size && dx <= o.size && dy >= -o.size && dy <= o.size;
    case ShapeKind::Triangle:
      // Upward isoceles: apex (cx, cy-s), base corners (cx +- s, cy+s).
      if (dy < -o.size || dy > o.size) return false;
      return 2 * (dx < 0 ? -dx : dx) <= dy + o.size;
  }
  return false;
}

struct Triple {
  ShapeKind s;
  ColorKind c;
  int cell;
  bool operator==(const Triple&) const = default;
};

Triple triple_of(const SceneObject& o, int canvas) {
  return {o.shape, o.color, 3 * coarse_row(o.cy, canvas) + coarse_col(o.cx, canvas)};
}

} // namespace

int coarse_row(int cy, int canvas) {
  int r = cy * 3 / canvas;
  return r < 0 ? 0 : (r > 2 ? 2 : r);
}

int coarse_col(int cx, int canvas) {
  int c = cx * 3 / canvas;
  return c < 0 ? 0 : (c > 2 ? 2 : c);
}

SceneSpec generate_scene(std::uint64_t rng_seed, int canvas, bool pair_unique) {
  require(canvas == 48 || canvas == 64 || canvas == 96, Err::InvalidValue,
          "canvas must be one of 48, 64, 96");
  auto rs = rng::derive(rng_seed, 0x5ce7e);
  const int size_lo = canvas / 12, size_hi = canvas / 8;

  for (int attempt = 0; attempt < 1000; ++attempt) {
    SceneSpec scene;
    const int n = rs.next_int(2, 4);
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      SceneObject o;
      o.shape = static_cast<ShapeKind>(rs.next_int(0, 2));
      o.color = static_cast<ColorKind>(rs.next_int(0, 3));
      o.size = rs.next_int(size_lo, size_hi);
      o.cx = rs.next_int(o.size + 1, canvas - o.size - 2);
      o.cy = rs.next_int(o.size + 1, canvas - o.size - 2);
      // Strict separation: squared distance at least 2*(s_i+s_j+1)^2 covers
      // the diagonal extents of squares and triangles with a 1px margin.
      for (const auto& p : scene.objects) {
        const long long dx = o.cx - p.cx, dy = o.cy - p.cy;
        const long long lim = o.size + p.size + 1;
        if (dx * dx + dy * dy < 2 * lim * lim) {
          ok = false;
          break;
        }
      }
      if (ok) scene.objects.push_back(o);
    }
    if (!ok) continue;

    scene.target_index = rs.next_int(0, n - 1);
    const auto& tgt = scene.objects[static_cast<std::size_t>(scene.target_index)];
    const Triple tt = triple_of(tgt, canvas);
    bool unique = true;
    for (int i = 0; i < n; ++i) {
      if (i == scene.target_index) continue;
      const auto& o = scene.objects[static_cast<std::size_t>(i)];
      if (pair_unique) {
        if (o.shape == tgt.shape && o.color == tgt.color) unique = false;
      } else if (triple_of(o, canvas) == tt) {
        unique = false;
      }
      if (!unique) break;
    }
    if (unique) return scene;
  }
  fail(Err::GenerationExhausted, "no admissible scene in 1000 attempts");
}

std::pair<Tensor32, std::vector<std::vector<std::uint8_t>>> render(const SceneSpec& scene,
                                                                   int canvas) {
  Tensor32 image = Tensor32::full({canvas, canvas, 3}, 0.5f);
  std::vector<int> owner(static_cast<std::size_t>(canvas) * canvas, -1);
  for (std::size_t oi = 0; oi < scene.objects.size(); ++oi) {
    const auto& o = scene.objects[oi];
    float rgb[3];
    color_rgb(o.color, rgb);
    const int x0 = std::max(0, o.cx - o.size), x1 = std::min(canvas - 1, o.cx + o.size);
    const int y0 = std::max(0, o.cy - o.size), y1 = std::min(canvas - 1, o.cy + o.size);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (inside(o, x, y)) {
          image.at3(y, x, 0) = rgb[0];
          image.at3(y, x, 1) = rgb[1];
          image.at3(y, x, 2) = rgb[2];
          owner[static_cast<std::size_t>(y) * canvas + x] = static_cast<int>(oi);
        }
  }
  std::vector<std::vector<std::uint8_t>> masks(scene.objects.size());
  for (auto& m : masks) m.assign(static_cast<std::size_t>(canvas) * canvas, 0);
  for (std::size_t p = 0; p < owner.size(); ++p)
    if (owner[p] >= 0) masks[static_cast<std::size_t>(owner[p])][p] = 1;
  return {std::move(image), std::move(masks)};
}

std::vector<int> make_expression(const SceneSpec& scene, bool appearance_only) {
  const auto& tgt = scene.objects[static_cast<std::size_t>(scene.target_index)];
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (static_cast<int>(i) == scene.target_index) continue;
    const auto& o = scene.objects[i];
    if (appearance_only && o.shape == tgt.shape && o.color == tgt.color)
      fail(Err::NotUnique, "target not unique by color and shape");
  }

  std::vector<int> ids;
  ids.push_back(token_id("the"));
  ids.push_back(token_id(color_word(tgt.color)));
  ids.push_back(token_id(shape_word(tgt.shape)));
  if (appearance_only) return ids;

  ids.push_back(token_id("at"));
  ids.push_back(token_id("the"));
  // Canvas bounds are not stored in the scene; the coarse cell is scale-free
  // because centers were drawn inside the canvas, so reconstruct from the
  // largest coordinate extent seen. Callers pass scenes straight from
  // generate_scene, where all coordinates are canvas-consistent.
  int canvas = 0;
  for (const auto& o : scene.objects) canvas = std::max({canvas, o.cx + o.size + 2, o.cy + o.size + 2});
  canvas = canvas <= 48 ? 48 : (canvas <= 64 ? 64 : 96);
  const int row = coarse_row(tgt.cy, canvas);
  const int col = coarse_col(tgt.cx, canvas);
  if (row == 1 && col == 1) {
    ids.push_back(token_id("center"));
  } else {
    if (row == 0) ids.push_back(token_id("top"));
    if (row == 2) ids.push_back(token_id("bottom"));
    if (col == 0) ids.push_back(token_id("left"));
    if (col == 2) ids.push_back(token_id("right"));
  }
  return ids;
}

ReferringSample make_sample(std::uint64_t seed, std::uint64_t index, const GenOptions& opt) {
  const std::uint64_t scene_seed = rng::derive(seed, index, 0x9a3f).state;
  SceneSpec scene = generate_scene(scene_seed, opt.canvas, opt.appearance_only);
  auto [image, masks] = render(scene, opt.canvas);
  std::vector<int> ids = make_expression(scene, opt.appearance_only);

  ReferringSample s;
  s.image = std::move(image);
  s.mask = std::move(masks[static_cast<std::size_t>(scene.target_index)]);
  s.real_len = static_cast<int>(ids.size());
  require(s.real_len >= 1 && s.real_len <= kMaxTextLen, Err::InvalidValue, "expression length");
  for (int i = 0; i < s.real_len; ++i) s.token_ids[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(ids[static_cast<std::size_t>(i)]);
  bool any = false;
  for (auto b : s.mask) any = any || b != 0;
  require(any, Err::InvalidValue, "target mask is empty");
  return s;
}

std::vector<ReferringSample> make_dataset(std::uint64_t seed, int count, const GenOptions& opt) {
  std::vector<ReferringSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(make_sample(seed, static_cast<std::uint64_t>(i), opt));
  return out;
}

// ---------------------------------------------------------------------------
// Binary dataset file

namespace {

constexpr char kMagic[7] = {'C', 'M', 'K', 'D', '-', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;

struct Writer {
  FILE* f;
  void bytes(const void* p, std::size_t n) {
    require(std::fwrite(p, 1, n, f) == n, Err::IoError, "short write");
  }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
};

struct Reader {
  FILE* f;
  long long record = -1; // current sample index, for error reports
  bool bytes(void* p, std::size_t n) { return std::fread(p, 1, n, f) == n; }
  void need(void* p, std::size_t n) {
    require(bytes(p, n), Err::TruncatedRecord,
            record < 0 ? "truncated header" : "truncated record " + std::to_string(record));
  }
  std::uint16_t u16() {
    std::uint16_t v;
    need(&v, 2);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    need(&v, 4);
    return v;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    need(&v, 1);
    return v;
  }
};

struct FileCloser {
  FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

} // namespace

void write_dataset(const std::string& path, const Dataset& ds) {
  require(!ds.samples.empty(), Err::InvalidValue, "refusing to write an empty dataset");
  FILE* f = std::fopen(path.c_str(), "wb");
  require(f != nullptr, Err::IoError, "cannot open " + path + " for writing");
  FileCloser closer{f};
  Writer w{f};

  w.bytes(kMagic, sizeof(kMagic));
  w.u16(kVersion);
  w.u16(static_cast<std::uint16_t>(ds.canvas));
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  const auto& vocab = vocabulary();
  w.u16(static_cast<std::uint16_t>(vocab.size()));
  for (const auto& word : vocab) {
    w.u8(static_cast<std::uint8_t>(word.size()));
    w.bytes(word.data(), word.size());
  }
  const std::size_t hw = static_cast<std::size_t>(ds.canvas) * ds.canvas;
  const std::size_t mask_bytes = (hw + 7) / 8;
  std::vector<std::uint8_t> packed(mask_bytes);
  for (const auto& s : ds.samples) {
    w.bytes(s.image.data.data(), s.image.data.size() * sizeof(float));
    w.u8(static_cast<std::uint8_t>(s.real_len));
    w.bytes(s.token_ids.data(), s.token_ids.size() * sizeof(std::uint16_t));
    std::fill(packed.begin(), packed.end(), 0);
    for (std::size_t i = 0; i < hw; ++i)
      if (s.mask[i]) packed[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
    w.bytes(packed.data(), packed.size());
  }
}

Dataset read_dataset(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, Err::MissingInput, "cannot open dataset " + path);
  FileCloser closer{f};
  Reader r{f};

  char magic[7];
  require(r.bytes(magic, sizeof(magic)) && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
          Err::BadMagic, "not a dataset file: " + path);
  const std::uint16_t version = r.u16();
  require(version == kVersion, Err::VersionMismatch,
          "dataset version " + std::to_string(version));
  Dataset ds;
  ds.canvas = r.u16();
  const std::uint32_t count = r.u32();
  const std::uint16_t vocab_size = r.u16();
  const auto& vocab = vocabulary();
  require(vocab_size == vocab.size(), Err::BadVocab, "vocabulary size mismatch");
  for (const auto& expect : vocab) {
    const std::uint8_t len = r.u8();
    std::string word(len, '\0');
    r.need(word.data(), len);
    require(word == expect, Err::BadVocab, "vocabulary entry mismatch: " + word);
  }

  const std::size_t hw = static_cast<std::size_t>(ds.canvas) * ds.canvas;
  const std::size_t mask_bytes = (hw + 7) / 8;
  std::vector<std::uint8_t> packed(mask_bytes);
  ds.samples.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    r.record = i;
    auto& s = ds.samples[i];
    s.image = Tensor32({ds.canvas, ds.canvas, 3});
    r.need(s.image.data.data(), s.image.data.size() * sizeof(float));
    s.real_len = r.u8();
    r.need(s.token_ids.data(), s.token_ids.size() * sizeof(std::uint16_t));
    r.need(packed.data(), packed.size());
    s.mask.assign(hw, 0);
    for (std::size_t k = 0; k < hw; ++k)
      s.mask[k] = (packed[k / 8] >> (7 - k % 8)) & 1u;
  }
  return ds;
}

double iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  require(pred.size() == gt.size(), Err::ShapeMismatch, "mask sizes differ");
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(const std::vector<std::vector<std::uint8_t>>& preds,
            const std::vector<std::vector<std::uint8_t>>& gts) {
  require(preds.size() == gts.size(), Err::ShapeMismatch, "prediction/target counts differ");
  require(!preds.empty(), Err::InvalidValue, "miou of an empty list");
  double acc = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += iou(preds[i], gts[i]);
  return acc / static_cast<double>(preds.size());
}

std::vector<int> sample_token_ids(const ReferringSample& s) {
  std::vector<int> ids(kMaxTextLen);
  for (int i = 0; i < kMaxTextLen; ++i) ids[static_cast<std::size_t>(i)] = s.token_ids[static_cast<std::size_t>(i)];
  return ids;
}

} // namespace cmkd::synth
