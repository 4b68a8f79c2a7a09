#include "msattn/synth_data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "msattn/random.hpp"

namespace msattn {

namespace {

// Generator constants. The mixing weights give each sample's object a blend
// of its own class signature and a random, partly source-specific confusion
// direction; `kConfusionGain` and `kConcentration` set how often the blend
// tips toward another class at a given difficulty.
constexpr double kConfusionGain = 2.0;
constexpr double kConcentration = 2.0;
constexpr double kSharedConfusion = 0.3;  // fraction of confusion shared across sources
constexpr double kObjectNoise = 0.5;      // per-pixel noise on the object, times difficulty
constexpr double kClutterNoise = 0.35;
constexpr double kBlobAmplitude = 1.0;
constexpr std::size_t kBlobsPer100Pixels = 2;

std::string role_name(SourceRole r) { return r == SourceRole::Reference ? "reference" : "additional"; }

SourceRole parse_role(const std::string& s) {
  if (s == "reference") return SourceRole::Reference;
  if (s == "additional") return SourceRole::Additional;
  throw DataError("unknown source role '" + s + "'");
}

}  // namespace

void SourceSpec::validate() const {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw DataError("source name must be a non-empty word");
  }
  if (channels == 0 || neighborhood == 0 || object_size == 0 || window == 0) {
    throw DataError("source " + name + ": extents must be positive");
  }
  if (object_size > neighborhood) {
    throw DataError("source " + name + ": object size " + std::to_string(object_size) + " exceeds neighborhood " +
                    std::to_string(neighborhood));
  }
  if (window > neighborhood) throw DataError("source " + name + ": window exceeds neighborhood");
  if (role == SourceRole::Reference && offset_jitter != 0) {
    throw DataError("source " + name + ": the reference source cannot have offset jitter");
  }
}

std::vector<SourceSpec> default_sources() {
  return {
      {"ref", 3, 25, 25, 25, SourceRole::Reference, 0},
      {"a", 8, 12, 4, 5, SourceRole::Additional, 4},
      {"b", 1, 24, 8, 8, SourceRole::Additional, 8},
  };
}

std::vector<SourceSpec> parse_source_specs(const std::string& text) {
  std::vector<SourceSpec> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    SourceSpec s;
    std::string role;
    if (!(ls >> s.name)) continue;
    if (!(ls >> s.channels >> s.neighborhood >> s.object_size >> s.window >> role >> s.offset_jitter)) {
      throw DataError("malformed source line: " + line);
    }
    s.role = parse_role(role);
    s.validate();
    out.push_back(s);
  }
  if (out.empty()) throw DataError("no sources given");
  return out;
}

Tensor Split::gather(std::size_t source, std::span<const std::size_t> indices) const {
  const Tensor& all = images.at(source);
  Shape shape = all.shape();
  const std::size_t per = all.numel() / shape[0];
  shape[0] = indices.size();
  std::vector<float> values(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= all.dim(0)) throw DimensionError("gather: sample index out of range");
    std::copy_n(all.raw() + indices[i] * per, per, values.data() + i * per);
  }
  return Tensor(std::move(shape), std::move(values));
}

std::string DatasetManifest::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "classes: " << classes << '\n';
  os << "class_counts:";
  for (auto c : class_counts) os << ' ' << c;
  os << '\n';
  os << "seed: " << seed << '\n';
  os << "difficulty: " << difficulty << '\n';
  os << "imbalance: " << imbalance << '\n';
  for (const auto& s : sources) {
    os << "source: " << s.name << ' ' << s.channels << ' ' << s.neighborhood << ' ' << s.object_size << ' '
       << s.window << ' ' << role_name(s.role) << ' ' << s.offset_jitter << '\n';
  }
  const char* names[3] = {"train", "val", "test"};
  for (int k = 0; k < 3; ++k) {
    os << "split_" << names[k] << ':';
    for (auto c : split_counts[k]) os << ' ' << c;
    os << '\n';
  }
  return os.str();
}

DatasetManifest DatasetManifest::from_text(const std::string& text) {
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  auto counts = [](std::istringstream& ls) {
    std::vector<std::size_t> v;
    std::size_t x;
    while (ls >> x) v.push_back(x);
    return v;
  };
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    std::istringstream ls(line.substr(colon + 1));
    if (key == "classes") ls >> m.classes;
    else if (key == "class_counts") m.class_counts = counts(ls);
    else if (key == "seed") ls >> m.seed;
    else if (key == "difficulty") ls >> m.difficulty;
    else if (key == "imbalance") ls >> m.imbalance;
    else if (key == "source") {
      auto parsed = parse_source_specs(line.substr(colon + 1));
      m.sources.push_back(parsed.front());
    } else if (key == "split_train") m.split_counts[0] = counts(ls);
    else if (key == "split_val") m.split_counts[1] = counts(ls);
    else if (key == "split_test") m.split_counts[2] = counts(ls);
  }
  if (m.classes == 0 || m.class_counts.size() != m.classes || m.sources.empty()) {
    throw DataError("incomplete dataset manifest");
  }
  return m;
}

std::size_t DatasetManifest::source_index(const std::string& name) const {
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (sources[i].name == name) return i;
  }
  throw DataError("dataset has no source named '" + name + "'");
}

std::vector<std::size_t> power_law_counts(std::size_t classes, std::size_t max_count, double ratio) {
  if (classes == 0 || max_count == 0) throw DataError("class count and samples per class must be positive");
  if (!(ratio >= 1.0)) throw DataError("imbalance ratio must be >= 1");
  const double g = classes > 1 ? std::log(ratio) / std::log(static_cast<double>(classes)) : 0.0;
  std::vector<std::size_t> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const double n = static_cast<double>(max_count) * std::pow(static_cast<double>(c + 1), -g);
    out[c] = std::max<std::size_t>(5, static_cast<std::size_t>(std::lround(n)));
  }
  return out;
}

std::array<std::size_t, 3> split_sizes(std::size_t count) {
  const auto train = static_cast<std::size_t>(std::lround(0.6 * static_cast<double>(count)));
  const auto val = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(count)));
  return {train, val, count - train - val};
}

Tensor class_templates(const SourceSpec& spec, std::size_t classes, std::uint64_t seed, std::size_t source_index) {
  const std::size_t s = spec.object_size, b = spec.channels, dim = b * s * s;
  if (classes > dim) {
    throw DataError("source " + spec.name + ": " + std::to_string(classes) +
                    " orthogonal signatures do not fit in " + std::to_string(dim) + " values");
  }
  Rng rng = rnd::derive(seed ^ 0x5EED7E3A1A7E5ULL, source_index);
  std::vector<std::vector<double>> basis;
  std::vector<float> out;
  out.reserve(classes * dim);
  for (std::size_t c = 0; c < classes; ++c) {
    // Mean spectrum plus a per-channel smooth texture from a few plane waves.
    std::vector<double> v(dim);
    for (std::size_t ch = 0; ch < b; ++ch) {
      const double level = rnd::normal(rng);
      double fy[3], fx[3], ph[3], amp[3];
      for (int w = 0; w < 3; ++w) {
        fy[w] = rnd::uniform(rng, -1.5, 1.5);
        fx[w] = rnd::uniform(rng, -1.5, 1.5);
        ph[w] = rnd::uniform(rng, 0.0, 6.283185307179586);
        amp[w] = rnd::normal(rng);
      }
      for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
          double t = 0.0;
          for (int w = 0; w < 3; ++w) {
            t += amp[w] * std::cos(6.283185307179586 * (fy[w] * i + fx[w] * j) / static_cast<double>(s) + ph[w]);
          }
          v[(ch * s + i) * s + j] = level + t;
        }
      }
    }
    // Gram-Schmidt against earlier classes, then unit RMS per value.
    for (const auto& q : basis) {
      const double d = std::inner_product(v.begin(), v.end(), q.begin(), 0.0);
      for (std::size_t k = 0; k < dim; ++k) v[k] -= d * q[k];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-9) throw DataError("degenerate class template");
    for (auto& x : v) x /= norm;
    basis.push_back(v);
    const double rms = std::sqrt(static_cast<double>(dim));
    for (double x : v) out.push_back(static_cast<float>(x * rms));
  }
  return Tensor({classes, b, s, s}, std::move(out));
}

namespace {

struct SampleDraw {
  std::vector<std::vector<float>> images;  // per source [B*N*N]
  std::vector<Offset> offsets;
};

void render_clutter(std::vector<float>& img, const SourceSpec& spec, Rng& rng) {
  const std::size_t n = spec.neighborhood, b = spec.channels;
  for (auto& v : img) v = static_cast<float>(kClutterNoise * rnd::normal(rng));
  const std::size_t blobs = std::max<std::size_t>(1, kBlobsPer100Pixels * n * n / 100);
  for (std::size_t k = 0; k < blobs; ++k) {
    const double cy = rnd::uniform(rng, 0.0, static_cast<double>(n));
    const double cx = rnd::uniform(rng, 0.0, static_cast<double>(n));
    const double radius = rnd::uniform(rng, 1.0, std::max(1.5, 0.5 * static_cast<double>(spec.object_size) + 1.0));
    std::vector<double> amp(b);
    for (auto& a : amp) a = rnd::uniform(rng, -kBlobAmplitude, kBlobAmplitude);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double dy = static_cast<double>(i) + 0.5 - cy, dx = static_cast<double>(j) + 0.5 - cx;
        const double w = std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
        if (w < 1e-3) continue;
        for (std::size_t ch = 0; ch < b; ++ch) img[(ch * n + i) * n + j] += static_cast<float>(amp[ch] * w);
      }
    }
  }
}

std::vector<double> confusion_direction(const std::vector<double>& shared, Rng& rng) {
  std::vector<double> g(shared.size());
  double mx = -1e300;
  for (std::size_t k = 0; k < g.size(); ++k) {
    g[k] = kConcentration * (std::sqrt(kSharedConfusion) * shared[k] +
                             std::sqrt(1.0 - kSharedConfusion) * rnd::normal(rng));
    mx = std::max(mx, g[k]);
  }
  double sum = 0.0;
  for (auto& x : g) sum += (x = std::exp(x - mx));
  for (auto& x : g) x /= sum;
  return g;
}

SampleDraw draw_sample(const GeneratorConfig& cfg, const std::vector<Tensor>& templates, int label,
                       std::uint64_t index) {
  Rng rng = rnd::derive(cfg.seed, index);
  SampleDraw out;
  std::vector<double> shared(cfg.classes);
  for (auto& x : shared) x = rnd::normal(rng);
  const double d = cfg.difficulty;
  for (std::size_t si = 0; si < cfg.sources.size(); ++si) {
    const SourceSpec& spec = cfg.sources[si];
    const std::size_t n = spec.neighborhood, s = spec.object_size, b = spec.channels;
    std::vector<float> img(b * n * n);
    render_clutter(img, spec, rng);

    const long centre = static_cast<long>(spec.centered_offset());
    const long jitter = static_cast<long>(spec.offset_jitter);
    const long hi = static_cast<long>(n - s);
    const long oy = std::clamp(centre + rnd::uniform_int(rng, -jitter, jitter), 0L, hi);
    const long ox = std::clamp(centre + rnd::uniform_int(rng, -jitter, jitter), 0L, hi);
    out.offsets.push_back({static_cast<std::int16_t>(oy), static_cast<std::int16_t>(ox)});

    std::vector<double> mix(cfg.classes, 0.0);
    const auto u = confusion_direction(shared, rng);
    for (std::size_t k = 0; k < cfg.classes; ++k) mix[k] = d * kConfusionGain * u[k];
    mix[static_cast<std::size_t>(label)] += 1.0 - d;

    const float* tmpl = templates[si].raw();
    const std::size_t per_class = b * s * s;
    for (std::size_t ch = 0; ch < b; ++ch) {
      for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
          double v = 0.0;
          const std::size_t t = (ch * s + i) * s + j;
          for (std::size_t k = 0; k < cfg.classes; ++k) {
            if (mix[k] != 0.0) v += mix[k] * tmpl[k * per_class + t];
          }
          if (d > 0.0) v += kObjectNoise * d * rnd::normal(rng);
          img[(ch * n + static_cast<std::size_t>(oy) + i) * n + static_cast<std::size_t>(ox) + j] =
              static_cast<float>(v);
        }
      }
    }
    out.images.push_back(std::move(img));
  }
  return out;
}

}  // namespace

Dataset generate_dataset(const GeneratorConfig& cfg) {
  if (cfg.classes < 2) throw DataError("need at least two classes");
  if (!(cfg.difficulty >= 0.0 && cfg.difficulty <= 1.0)) throw DataError("difficulty must lie in [0, 1]");
  if (cfg.sources.empty()) throw DataError("no sources configured");
  for (const auto& s : cfg.sources) s.validate();

  Dataset ds;
  DatasetManifest& m = ds.manifest;
  m.classes = cfg.classes;
  m.class_counts = power_law_counts(cfg.classes, cfg.max_per_class, cfg.imbalance);
  m.sources = cfg.sources;
  m.seed = cfg.seed;
  m.difficulty = cfg.difficulty;
  m.imbalance = cfg.imbalance;
  for (auto& v : m.split_counts) v.assign(cfg.classes, 0);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const auto sz = split_sizes(m.class_counts[c]);
    for (int k = 0; k < 3; ++k) m.split_counts[k][c] = sz[k];
  }

  std::vector<Tensor> templates;
  for (std::size_t si = 0; si < cfg.sources.size(); ++si) {
    templates.push_back(class_templates(cfg.sources[si], cfg.classes, cfg.seed, si));
  }

  Split* splits[3] = {&ds.train, &ds.val, &ds.test};
  const char* names[3] = {"train", "val", "test"};
  std::array<std::vector<std::vector<float>>, 3> pixels;
  for (int k = 0; k < 3; ++k) {
    splits[k]->name = names[k];
    splits[k]->offsets.assign(cfg.sources.size(), {});
    pixels[k].assign(cfg.sources.size(), {});
  }

  std::uint64_t index = 0;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    for (std::size_t i = 0; i < m.class_counts[c]; ++i, ++index) {
      const int k = i < m.split_counts[0][c] ? 0 : (i < m.split_counts[0][c] + m.split_counts[1][c] ? 1 : 2);
      auto draw = draw_sample(cfg, templates, static_cast<int>(c), index);
      splits[k]->labels.push_back(static_cast<int>(c));
      for (std::size_t si = 0; si < cfg.sources.size(); ++si) {
        auto& px = pixels[k][si];
        px.insert(px.end(), draw.images[si].begin(), draw.images[si].end());
        splits[k]->offsets[si].push_back(draw.offsets[si]);
      }
    }
  }
  for (int k = 0; k < 3; ++k) {
    for (std::size_t si = 0; si < cfg.sources.size(); ++si) {
      const auto& s = cfg.sources[si];
      splits[k]->images.emplace_back(Shape{splits[k]->size(), s.channels, s.neighborhood, s.neighborhood},
                                     std::move(pixels[k][si]));
    }
  }
  return ds;
}

std::vector<double> oversample_weights(std::span<const std::size_t> class_counts) {
  if (class_counts.empty()) throw DataError("oversample_weights: no classes");
  std::vector<double> p(class_counts.size());
  double sum = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (class_counts[c] == 0) throw DataError("oversample_weights: class " + std::to_string(c) + " has no samples");
    sum += (p[c] = 1.0 / static_cast<double>(class_counts[c]));
  }
  for (auto& x : p) x /= sum;
  return p;
}

OversamplingSampler::OversamplingSampler(std::span<const int> labels, std::size_t classes) : members_(classes) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) throw DataError("label out of range");
    members_[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  std::vector<std::size_t> counts;
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < classes; ++c) {
    if (!members_[c].empty()) {
      counts.push_back(members_[c].size());
      present.push_back(c);
    }
  }
  const auto p = oversample_weights(counts);
  cumulative_.assign(classes, 0.0);
  double acc = 0.0;
  std::size_t j = 0;
  // p is a per-sample rate, so a class is drawn with mass count * p
  for (std::size_t c = 0; c < classes; ++c) {
    if (j < present.size() && present[j] == c) {
      acc += p[j] * static_cast<double>(counts[j]);
      ++j;
    }
    cumulative_[c] = acc;
  }
}

std::vector<std::size_t> OversamplingSampler::draw(std::size_t n, Rng& rng) const {
  std::vector<std::size_t> out(n);
  for (auto& idx : out) {
    const double u = rnd::uniform01(rng) * cumulative_.back();
    auto c = static_cast<std::size_t>(std::upper_bound(cumulative_.begin(), cumulative_.end(), u) - cumulative_.begin());
    c = std::min(c, cumulative_.size() - 1);
    while (members_[c].empty()) c = (c + 1) % members_.size();
    const auto& m = members_[c];
    idx = m[static_cast<std::size_t>(rnd::uniform_int(rng, 0, static_cast<long>(m.size()) - 1))];
  }
  return out;
}

void shift_image(float* image, std::size_t channels, std::size_t side, int dy, int dx) {
  const long n = static_cast<long>(side);
  std::vector<float> tmp(side * side);
  for (std::size_t c = 0; c < channels; ++c) {
    float* plane = image + c * side * side;
    std::fill(tmp.begin(), tmp.end(), 0.0f);
    for (long i = 0; i < n; ++i) {
      const long si = i - dy;
      if (si < 0 || si >= n) continue;
      for (long j = 0; j < n; ++j) {
        const long sj = j - dx;
        if (sj >= 0 && sj < n) tmp[static_cast<std::size_t>(i * n + j)] = plane[si * n + sj];
      }
    }
    std::copy(tmp.begin(), tmp.end(), plane);
  }
}

int max_shift(std::size_t side, double max_frac) {
  if (!(max_frac >= 0.0 && max_frac < 1.0)) throw InvalidParameter("shift fraction must lie in [0, 1)");
  return static_cast<int>(std::floor(max_frac * static_cast<double>(side)));
}

Tensor augment_shift(const Tensor& image, double max_frac, Rng& rng) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw DimensionError("augment_shift expects [B,N,N], got " + shape_str(image.shape()));
  }
  const int m = max_shift(image.dim(1), max_frac);
  const int dy = static_cast<int>(rnd::uniform_int(rng, -m, m));
  const int dx = static_cast<int>(rnd::uniform_int(rng, -m, m));
  Tensor out = image.clone();
  shift_image(out.raw(), image.dim(0), image.dim(1), dy, dx);
  return out;
}

// ---- binary format ----

namespace {

constexpr char kMagic[4] = {'M', 'S', 'W', 'S'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw DataError("truncated dataset file");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated dataset file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_tensor(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  for (float v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
}

Tensor get_tensor(std::istream& is) {
  const auto rank = get_u32(is);
  if (rank > 8) throw DataError("implausible tensor rank in dataset file");
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(is);
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = std::bit_cast<float>(get_u32(is));
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

void save_split(const std::filesystem::path& path, const DatasetManifest& manifest, const Split& split) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(kMagic, 4);
  put_u16(os, kVersion);
  const std::string text = manifest.to_text() + "split: " + split.name + "\n";
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u32(os, static_cast<std::uint32_t>(split.size()));
  put_u32(os, static_cast<std::uint32_t>(split.images.size()));
  for (const auto& t : split.images) put_tensor(os, t);
  for (int label : split.labels) put_u16(os, static_cast<std::uint16_t>(label));
  for (const auto& per_source : split.offsets) {
    for (const auto& o : per_source) {
      put_u16(os, static_cast<std::uint16_t>(o[0]));
      put_u16(os, static_cast<std::uint16_t>(o[1]));
    }
  }
  if (!os) throw DataError("write failed for " + path.string());
}

Split load_split(const std::filesystem::path& path, DatasetManifest* manifest) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError(path.string() + ": not a dataset file");
  if (get_u16(is) != kVersion) throw DataError(path.string() + ": unsupported dataset version");
  std::string text(get_u32(is), '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text.size()))) throw DataError("truncated manifest");
  const auto m = DatasetManifest::from_text(text);
  if (manifest) *manifest = m;

  Split split;
  if (auto pos = text.find("split: "); pos != std::string::npos) {
    split.name = text.substr(pos + 7, text.find('\n', pos) - pos - 7);
  }
  const std::size_t n = get_u32(is), sources = get_u32(is);
  if (sources != m.sources.size()) throw DataError(path.string() + ": source count disagrees with manifest");
  for (std::size_t s = 0; s < sources; ++s) {
    split.images.push_back(get_tensor(is));
    if (split.images.back().rank() != 4 || split.images.back().dim(0) != n) {
      throw DataError(path.string() + ": image tensor shape disagrees with sample count");
    }
  }
  split.labels.resize(n);
  for (auto& l : split.labels) {
    l = get_u16(is);
    if (static_cast<std::size_t>(l) >= m.classes) throw DataError(path.string() + ": label out of range");
  }
  split.offsets.assign(sources, std::vector<Offset>(n));
  for (auto& per_source : split.offsets) {
    for (auto& o : per_source) {
      o[0] = static_cast<std::int16_t>(get_u16(is));
      o[1] = static_cast<std::int16_t>(get_u16(is));
    }
  }
  return split;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  save_split(dir / "train.msws", ds.manifest, ds.train);
  save_split(dir / "val.msws", ds.manifest, ds.val);
  save_split(dir / "test.msws", ds.manifest, ds.test);
  std::ofstream(dir / "manifest.txt") << ds.manifest.to_text();
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.train = load_split(dir / "train.msws", &ds.manifest);
  ds.val = load_split(dir / "val.msws");
  ds.test = load_split(dir / "test.msws");
  return ds;
}

std::uint64_t dataset_hash(const std::filesystem::path& dir) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char* name : {"train.msws", "val.msws", "test.msws"}) {
    std::ifstream is(dir / name, std::ios::binary);
    if (!is) throw DataError("missing split file " + (dir / name).string());
    char buf[1 << 16];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) {
      for (std::streamsize i = 0; i < is.gcount(); ++i) {
        h ^= static_cast<unsigned char>(buf[i]);
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace msattn
