#include "msattn/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "msattn/layers.hpp"
#include "msattn/random.hpp"

namespace msattn {

namespace fs = std::filesystem;

namespace {

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string canonical(const FusionConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << to_string(c.scheme) << ";T=" << join(c.temperatures) << ";alpha=" << join(c.alpha)
     << ";beta=" << join(c.beta) << ";eps=" << c.epsilon << ";conv_drop=" << join(c.frozen_conv_dropout)
     << ";fc_drop=" << join(c.frozen_fc_dropout);
  return os.str();
}

std::vector<double> slice(const std::vector<double>& v, const std::vector<std::size_t>& positions,
                          const char* what) {
  std::vector<double> out;
  for (auto p : positions) {
    if (p >= v.size()) {
      throw ConfigError(std::string("no ") + what + " configured for additional source #" + std::to_string(p + 1));
    }
    out.push_back(v[p]);
  }
  return out;
}

}  // namespace

std::string PipelineConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << train.canonical() << ";scale=" << scale << ";k=" << widths.kernels << ";f=" << widths.features;
  for (const auto& [n, w] : source_widths) os << ";k[" << n << "]=" << w.kernels << ";f[" << n << "]=" << w.features;
  for (const auto& [n, w] : windows) os << ";W[" << n << "]=" << w;
  os << ";T=" << attention_temperature << ";joint=" << joint;
  if (fusion) os << ";fusion=" << msattn::canonical(*fusion);
  return os.str();
}

EncoderStyle style_for(const SourceSpec& spec) {
  if (spec.role == SourceRole::Reference) return EncoderStyle::Reference;
  return spec.window >= 8 ? EncoderStyle::Lidar : EncoderStyle::Ms;
}

std::size_t parameter_count(const Classifier& model) { return count_parameters(model.parameters()); }

ModelBank::ModelBank(const Dataset& data, std::uint64_t dataset_hash, PipelineConfig config)
    : data_(data), dataset_hash_(dataset_hash), cfg_(std::move(config)) {
  cfg_.train.validate();
  if (!(cfg_.scale >= 1.0)) throw InvalidParameter("width scale must be at least 1");
  const auto& sources = data_.manifest.sources;
  bool found = false;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (sources[i].role == SourceRole::Reference) {
      if (found) throw ConfigError("more than one reference source");
      reference_ = i;
      found = true;
    } else {
      additional_.push_back(i);
    }
  }
  if (!found) throw ConfigError("dataset has no reference source");
  for (const auto& [name, w] : cfg_.windows) {
    const auto s = source_index(name);
    region_count(sources[s].neighborhood, w);  // throws on W > N
  }
}

std::size_t ModelBank::source_index(const std::string& name) const {
  const auto& sources = data_.manifest.sources;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (sources[i].name == name) return i;
  }
  throw ConfigError("unknown source '" + name + "'");
}

EncoderSpec ModelBank::encoder_spec(std::size_t source) const {
  const auto& spec = data_.manifest.sources.at(source);
  Widths w = cfg_.widths;
  if (auto it = cfg_.source_widths.find(spec.name); it != cfg_.source_widths.end()) w = it->second;
  EncoderSpec e = EncoderSpec::preset(style_for(spec), cfg_.scale, w.kernels, w.features);
  if (cfg_.conv_dropout) e.conv_dropout = *cfg_.conv_dropout;
  if (cfg_.fc_dropout) e.fc_dropout = *cfg_.fc_dropout;
  return e;
}

std::size_t ModelBank::window(std::size_t source) const {
  const auto& spec = data_.manifest.sources.at(source);
  if (auto it = cfg_.windows.find(spec.name); it != cfg_.windows.end()) return it->second;
  return spec.window;
}

FusionConfig ModelBank::fusion_config(FusionScheme scheme, const std::vector<std::size_t>& additional) const {
  FusionConfig base = cfg_.fusion && cfg_.fusion->scheme == scheme ? *cfg_.fusion : FusionConfig::defaults(scheme);
  std::vector<std::size_t> pos;
  for (auto s : additional) {
    const auto it = std::find(additional_.begin(), additional_.end(), s);
    if (it == additional_.end()) throw ConfigError("source '" + data_.manifest.sources.at(s).name + "' is not an additional source");
    pos.push_back(static_cast<std::size_t>(it - additional_.begin()));
  }
  FusionConfig c = base;
  c.temperatures = slice(base.temperatures, pos, "temperature");
  if (scheme == FusionScheme::LogitLevel) {
    if (base.beta.empty()) throw ConfigError("ext2 needs initial beta weights");
    c.beta = {base.beta.front()};
    std::vector<double> rest(base.beta.begin() + 1, base.beta.end());
    for (double b : slice(rest, pos, "beta")) c.beta.push_back(b);
  }
  if (scheme == FusionScheme::FeatureLevel || scheme == FusionScheme::PixelLevel) {
    c.alpha = slice(base.alpha, pos, "alpha");
    const double sum = std::accumulate(c.alpha.begin(), c.alpha.end(), 0.0);
    if (!(sum > 0.0)) throw ConfigError("alpha weights of the selected sources sum to zero");
    for (auto& a : c.alpha) a /= sum;
  }
  if (scheme == FusionScheme::FeatureLevel) {
    c.frozen_conv_dropout = slice(base.frozen_conv_dropout, pos, "frozen conv dropout");
    c.frozen_fc_dropout = slice(base.frozen_fc_dropout, pos, "frozen fc dropout");
    // a global dropout override applies to the frozen layers too
    if (cfg_.conv_dropout) c.frozen_conv_dropout.assign(pos.size(), *cfg_.conv_dropout);
    if (cfg_.fc_dropout) c.frozen_fc_dropout.assign(pos.size(), *cfg_.fc_dropout);
  }
  c.validate(additional.size());
  return c;
}

void ModelBank::say(const std::string& msg) const {
  if (cfg_.log) cfg_.log(msg);
}

std::string ModelBank::key(const std::string& kind, const std::string& detail) const {
  // bump when a model's layout or initialisation recipe changes
  constexpr int kLayoutVersion = 2;
  return "v=" + std::to_string(kLayoutVersion) + ";data=" + hex16(dataset_hash_) + ";kind=" + kind + ";" + detail + ";train=" + cfg_.train.canonical();
}

std::string ModelBank::arch(std::size_t source) const {
  const EncoderSpec e = encoder_spec(source);
  std::ostringstream os;
  os.precision(17);
  os << "src=" << data_.manifest.sources.at(source).name << ";style=" << to_string(style_for(data_.manifest.sources.at(source)))
     << ";scale=" << e.width_scale << ";k=" << e.kernels_at(0) << ";f=" << e.feature_size()
     << ";drop=" << e.conv_dropout << "," << e.fc_dropout;
  return os.str();
}

std::string ModelBank::baseline_key(std::size_t source) const { return key("baseline", arch(source)); }

std::string ModelBank::attention_key(std::size_t source, std::size_t w, bool cls_only) const {
  std::ostringstream os;
  os.precision(17);
  os << arch(source) << ";W=" << w << ";T=" << cfg_.attention_temperature << ";cls_only=" << cls_only;
  return key(cls_only ? "attention-cls-only" : "attention", os.str());
}

Rng ModelBank::init_rng(const std::string& k) const { return rnd::derive(cfg_.train.seed, fnv1a(k)); }

void ModelBank::fit(Classifier& model, const std::string& k, const std::string& kind) {
  if (cfg_.assemble_only) return;
  const std::uint64_t h = fnv1a(k);
  FitRecord rec{k, kind, {}, false};
  fs::path ck_path, hist_path;
  if (!cfg_.cache_dir.empty()) {
    ck_path = cfg_.cache_dir / (hex16(h) + ".msck");
    hist_path = cfg_.cache_dir / (hex16(h) + ".history.csv");
    if (fs::exists(ck_path)) {
      const Checkpoint ck = load_checkpoint(ck_path, h);
      restore(model, ck);
      rec.cache_hit = true;
      rec.result.best_val = ck.best_val;
      rec.result.best_epoch = ck.epoch;
      rec.result.adam_steps = ck.adam_steps;
      rec.result.final_lr = ck.learning_rate;
      rec.result.checkpoint = ck;
      if (std::ifstream hs(hist_path); hs) rec.result.history = read_history_csv(hs);
      say("cache hit: " + kind + " [" + hex16(h) + "]");
      fits_.push_back(std::move(rec));
      return;
    }
  }
  if (!cfg_.allow_training) throw MissingPrerequisite("no cached checkpoint for " + kind + " (" + k + ")");
  say("training " + kind + " [" + hex16(h) + "]");
  rec.result = train(model, data_, cfg_.train, [&](std::size_t epoch, double val, double lr) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "  %s epoch %zu: val %.4f lr %.1e", kind.c_str(), epoch, val, lr);
    say(buf);
  });
  rec.result.checkpoint.config_hash = h;
  if (!ck_path.empty()) {
    save_checkpoint(ck_path, rec.result.checkpoint);
    auto tmp = hist_path;
    tmp += ".tmp";
    {
      std::ofstream hs(tmp, std::ios::trunc);
      write_history_csv(hs, rec.result.history);
    }
    fs::rename(tmp, hist_path);
  }
  fits_.push_back(std::move(rec));
}

std::shared_ptr<const BaselineClassifier> ModelBank::baseline(std::size_t source) {
  const std::string k = baseline_key(source);
  if (auto it = memo_.find(k); it != memo_.end()) return std::static_pointer_cast<const BaselineClassifier>(it->second);
  const auto& spec = data_.manifest.sources.at(source);
  Rng rng = init_rng(k);
  HolisticCnn<float> net(encoder_spec(source), spec.channels, spec.neighborhood, data_.manifest.classes, rng);
  auto m = std::make_shared<BaselineClassifier>(source, source == reference_ ? "ref" : spec.name, std::move(net));
  fit(*m, k, "baseline(" + spec.name + ")");
  memo_[k] = m;
  return m;
}

std::shared_ptr<const AttentionClassifier> ModelBank::attention(std::size_t source, std::size_t w, bool cls_only) {
  if (w == 0) w = window(source);
  const std::string k = attention_key(source, w, cls_only);
  if (auto it = memo_.find(k); it != memo_.end()) return std::static_pointer_cast<const AttentionClassifier>(it->second);
  const auto& spec = data_.manifest.sources.at(source);
  const SourceGeometry geo{spec.channels, spec.neighborhood, w};
  Rng rng = init_rng(k);
  AttentionModel<float> model(geo, encoder_spec(source), data_.manifest.classes, cfg_.attention_temperature, rng);
  model.head.classification_only = cls_only;
  auto m = std::make_shared<AttentionClassifier>(source, spec.name, std::move(model));
  fit(*m, k, std::string(cls_only ? "attention-cls-only(" : "attention(") + spec.name + ", W=" + std::to_string(w) + ")");
  memo_[k] = m;
  return m;
}

std::shared_ptr<const Classifier> ModelBank::feature_pair(const std::vector<std::size_t>& additional,
                                                          const FusionConfig& fc) {
  std::string detail = "ref=" + hex16(fnv1a(baseline_key(reference_))) + ";" + canonical(fc);
  for (auto s : additional) detail += ";branch=" + hex16(fnv1a(attention_key(s, window(s), false)));
  const std::string k = key("ext3", detail);
  if (auto it = memo_.find(k); it != memo_.end()) return it->second;

  const auto ref = baseline(reference_);
  HolisticCnn<float> ref_net = clone_model(ref->net);
  // The frozen reference keeps dropout on, at the rate of the (first) paired source.
  ref_net.encoder.set_dropout(fc.frozen_conv_dropout.front(), fc.frozen_fc_dropout.front());
  init_.push_back({"ext3.ref", baseline_key(reference_), true});
  Rng rng = init_rng(k);
  std::vector<FeatureFusion::Branch> branches;
  std::string names;
  for (std::size_t i = 0; i < additional.size(); ++i) {
    const std::size_t s = additional[i];
    const auto att = attention(s);
    const auto& pre = att->model.encoder;
    ConvEncoder<float> enc(pre.spec(), pre.in_channels(), pre.in_side(), rng);
    enc.copy_convs_from(pre);
    enc.set_dropout(fc.frozen_conv_dropout[i], fc.frozen_fc_dropout[i]);
    const std::string name = data_.manifest.sources[s].name;
    init_.push_back({"ext3." + name + ".enc.conv", attention_key(s, window(s), false), true});
    init_.push_back({"ext3." + name + ".enc.fc", "random", false});
    init_.push_back({"ext3." + name + ".fused_head", "random", false});
    AttentionHead<float> head(ref_net.feature_size() + enc.feature_size(), data_.manifest.classes, rng);
    branches.push_back({s, name, std::move(enc), std::move(head), window(s), fc.temperatures[i], fc.alpha[i]});
    names += (names.empty() ? "" : "+") + name;
  }
  auto m = std::make_shared<FeatureFusion>(std::move(ref_net), reference_, std::move(branches), true);
  fit(*m, k, "ext3(ref+" + names + ")");
  memo_[k] = m;
  return m;
}

std::shared_ptr<const Classifier> ModelBank::pixel_pair(const std::vector<std::size_t>& additional,
                                                        const FusionConfig& fc) {
  std::string detail = "ref=" + hex16(fnv1a(baseline_key(reference_))) + ";" + canonical(fc);
  for (auto s : additional) detail += ";branch=" + hex16(fnv1a(attention_key(s, window(s), false)));
  const std::string k = key("ext4", detail);
  if (auto it = memo_.find(k); it != memo_.end()) return it->second;

  const auto ref = baseline(reference_);
  HolisticCnn<float> ref_net = clone_model(ref->net);
  init_.push_back({"ext4.ref.enc", baseline_key(reference_), false});
  Rng rng = init_rng(k);
  const std::size_t f_ref = ref_net.feature_size();
  std::vector<PixelFusion::Branch> branches;
  std::string names;
  for (std::size_t i = 0; i < additional.size(); ++i) {
    const std::size_t s = additional[i];
    const auto att = attention(s);
    AttentionModel<float> model = clone_model(att->model);
    model.set_temperature(fc.temperatures[i]);
    auto& c0 = model.encoder.convs().front();
    const std::size_t kernels = c0.kernels.dim(0), own = c0.kernels.dim(1), ks = c0.kernels.dim(2);
    // First conv of the widened input, drawn with its full fan-in, then split
    // into the source's own channels and the replicated reference channels.
    const auto wide = make_conv<float>(own + f_ref, kernels, ks, c0.pad, rng);
    std::vector<float> psi(kernels * ks * ks * f_ref);
    for (std::size_t kk = 0; kk < kernels; ++kk) {
      for (std::size_t uv = 0; uv < ks * ks; ++uv) {
        for (std::size_t c = 0; c < own; ++c) {
          c0.kernels.raw()[(kk * own + c) * ks * ks + uv] = wide.kernels.raw()[(kk * (own + f_ref) + c) * ks * ks + uv];
        }
        for (std::size_t c = 0; c < f_ref; ++c) {
          psi[(kk * ks * ks + uv) * f_ref + c] = wide.kernels.raw()[(kk * (own + f_ref) + own + c) * ks * ks + uv];
        }
      }
    }
    std::fill(c0.bias.data().begin(), c0.bias.data().end(), 0.0f);
    const bool cls_only = model.head.classification_only;
    model.head = AttentionHead<float>(model.encoder.feature_size(), data_.manifest.classes, rng);
    model.head.classification_only = cls_only;
    const std::string name = data_.manifest.sources[s].name;
    init_.push_back({"ext4." + name + ".conv0", "random", false});
    init_.push_back({"ext4." + name + ".enc", attention_key(s, window(s), false), false});
    init_.push_back({"ext4." + name + ".head", "random", false});
    branches.push_back({s, name, std::move(model), Tensor({kernels * ks * ks, f_ref}, std::move(psi), true),
                        fc.temperatures[i], fc.alpha[i]});
    names += (names.empty() ? "" : "+") + name;
  }
  auto m = std::make_shared<PixelFusion>(std::move(ref_net), reference_, std::move(branches));
  fit(*m, k, "ext4(ref+" + names + ")");
  memo_[k] = m;
  return m;
}

std::shared_ptr<const Classifier> ModelBank::fusion(FusionScheme scheme, std::vector<std::size_t> additional) {
  if (additional.empty()) additional = additional_;
  const FusionConfig fc = fusion_config(scheme, additional);

  switch (scheme) {
    case FusionScheme::ProbLevel: {
      std::vector<std::shared_ptr<const AttentionClassifier>> branches;
      for (auto s : additional) {
        branches.push_back(attention(s));
        init_.push_back({"ext1." + data_.manifest.sources[s].name, attention_key(s, window(s), false), true});
      }
      init_.push_back({"ext1.ref", baseline_key(reference_), true});
      return std::make_shared<ProbFusion>(baseline(reference_), std::move(branches), fc.temperatures);
    }
    case FusionScheme::LogitLevel: {
      std::string detail = "ref=" + hex16(fnv1a(baseline_key(reference_))) + ";" + canonical(fc);
      for (auto s : additional) detail += ";branch=" + hex16(fnv1a(attention_key(s, window(s), false)));
      const std::string k = key("ext2", detail);
      if (auto it = memo_.find(k); it != memo_.end()) return it->second;
      const auto ref = baseline(reference_);
      init_.push_back({"ext2.ref", baseline_key(reference_), false});
      std::vector<AttentionClassifier> branches;
      std::string names;
      for (auto s : additional) {
        const auto att = attention(s);
        const std::string name = data_.manifest.sources[s].name;
        branches.emplace_back(s, name, clone_model(att->model));
        init_.push_back({"ext2." + name, attention_key(s, window(s), false), false});
        names += (names.empty() ? "" : "+") + name;
      }
      auto m = std::make_shared<LogitFusion>(BaselineClassifier(reference_, "ref", clone_model(ref->net)),
                                             std::move(branches), fc.beta, fc.temperatures, fc.epsilon);
      fit(*m, k, "ext2(ref+" + names + ")");
      memo_[k] = m;
      return m;
    }
    case FusionScheme::FeatureLevel:
    case FusionScheme::PixelLevel: {
      const bool feature = scheme == FusionScheme::FeatureLevel;
      if (additional.size() == 1 || cfg_.joint) {
        return feature ? feature_pair(additional, fc) : pixel_pair(additional, fc);
      }
      std::vector<std::shared_ptr<const Classifier>> parts;
      for (auto s : additional) {
        const FusionConfig sub = fusion_config(scheme, {s});
        parts.push_back(feature ? feature_pair({s}, sub) : pixel_pair({s}, sub));
      }
      return std::make_shared<CombinedClassifier>(to_string(scheme), std::move(parts), fc.alpha);
    }
  }
  throw ConfigError("unknown fusion scheme");
}

std::shared_ptr<const Classifier> ModelBank::build(const std::string& kind, const std::vector<std::size_t>& sources) {
  if (sources.empty()) throw ConfigError("no sources given");
  const std::set<std::size_t> uniq(sources.begin(), sources.end());
  if (uniq.size() != sources.size()) throw ConfigError("duplicate source");
  if (kind == "baseline" || kind == "attention" || kind == "attention-cls-only") {
    if (sources.size() != 1) throw ConfigError(kind + " models read exactly one source");
    if (kind == "baseline") return baseline(sources.front());
    return attention(sources.front(), 0, kind == "attention-cls-only");
  }
  const FusionScheme scheme = parse_fusion_scheme(kind);
  if (!uniq.count(reference_)) throw ConfigError(kind + " needs the reference source");
  std::vector<std::size_t> additional;
  for (auto s : sources) {
    if (s != reference_) additional.push_back(s);
  }
  if (additional.empty()) throw ConfigError(kind + " needs at least one additional source");
  return fusion(scheme, additional);
}

}  // namespace msattn
