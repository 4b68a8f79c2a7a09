#include "msattn/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "msattn/ops.hpp"
#include "msattn/optim.hpp"
#include "msattn/random.hpp"

namespace msattn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidParameter("learning rate must be positive");
  if (l2 < 0.0) throw InvalidParameter("L2 weight must be nonnegative");
  if (batch_size == 0 || eval_batch == 0) throw InvalidParameter("batch size must be positive");
  if (patience < 1) throw InvalidParameter("patience must be at least 1");
  if (!(lr_decay > 1.0)) throw InvalidParameter("learning-rate decay factor must exceed 1");
  if (!(shift_fraction >= 0.0 && shift_fraction < 1.0)) throw InvalidParameter("shift fraction must lie in [0, 1)");
}

std::string TrainConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "lr=" << learning_rate << ";l2=" << l2 << ";batch=" << batch_size << ";patience=" << patience
     << ";decay=" << lr_decay << ";drops=" << max_lr_drops << ";max_epochs=" << max_epochs << ";seed=" << seed
     << ";shift=" << shift_fraction << ";augref=" << augment_reference << ";oversample=" << oversample;
  return os.str();
}

EarlyStopping::EarlyStopping(std::size_t patience, std::size_t max_drops) : patience_(patience), max_drops_(max_drops) {
  if (patience == 0) throw InvalidParameter("patience must be at least 1");
}

EarlyStopping::Action EarlyStopping::update(double metric) {
  ++epoch_;
  if (metric > best_) {
    best_ = metric;
    best_epoch_ = epoch_;
    stalled_ = 0;
    return Action::Improved;
  }
  if (++stalled_ < patience_) return Action::Stalled;
  if (drops_ < max_drops_) {
    ++drops_;
    stalled_ = 0;
    return Action::DecayLearningRate;
  }
  return Action::Stop;
}

void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
  os << "epoch,split,loss,normalized_accuracy,lr\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g\n", r.epoch, r.split.c_str(), r.loss, r.normalized_accuracy,
                  r.lr);
    os << buf;
  }
}

std::vector<EpochRecord> read_history_csv(std::istream& is) {
  std::vector<EpochRecord> out;
  std::string line;
  if (!std::getline(is, line) || line.rfind("epoch,split", 0) != 0) throw DataError("history CSV: missing header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    EpochRecord r;
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 5) throw DataError("history CSV: expected 5 fields in '" + line + "'");
    try {
      r.epoch = std::stoul(f[0]);
      r.split = f[1];
      r.loss = std::stod(f[2]);
      r.normalized_accuracy = std::stod(f[3]);
      r.lr = std::stod(f[4]);
    } catch (const std::exception&) {
      throw DataError("history CSV: malformed number in '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

namespace {

SourceBatch make_batch(const Split& split, const std::vector<std::size_t>& inputs, std::size_t sources,
                       std::span<const std::size_t> idx) {
  SourceBatch x(sources);
  for (auto s : inputs) x[s] = split.gather(s, idx);
  return x;
}

std::vector<int> argmax_rows(const Tensor& scores) {
  const std::size_t b = scores.dim(0), c = scores.dim(1);
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const float* row = scores.raw() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

// Mean recall over the classes that actually occur (training batches are sampled).
double present_class_accuracy(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    if (const auto rs = cm.row_sum(c)) {
      sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(rs);
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

struct OptimizerState {
  std::vector<std::vector<float>> m, v;
  std::uint64_t steps = 0;
};

OptimizerState save_state(const Adam& opt) {
  OptimizerState s;
  for (const auto& slot : opt.slots()) {
    s.m.push_back(slot.first_moment);
    s.v.push_back(slot.second_moment);
  }
  s.steps = opt.step_count();
  return s;
}

void load_state(Adam& opt, const OptimizerState& s) {
  for (std::size_t i = 0; i < opt.slots().size(); ++i) {
    opt.slots()[i].first_moment = s.m[i];
    opt.slots()[i].second_moment = s.v[i];
  }
  opt.set_step_count(s.steps);
}

}  // namespace

Evaluation evaluate(const Classifier& model, const Split& split, std::size_t classes, std::size_t batch) {
  NoGradGuard guard;
  Evaluation ev;
  ev.confusion = ConfusionMatrix(classes);
  const auto inputs = model.inputs();
  std::size_t sources = 0;
  for (auto s : inputs) sources = std::max(sources, s + 1);
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t first = 0; first < split.size(); first += batch) {
    const std::size_t count = std::min(batch, split.size() - first);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), first);
    const SourceBatch x = make_batch(split, inputs, sources, idx);
    const Tensor s = model.scores(x, nullptr);
    const std::span<const int> labels(split.labels.data() + first, count);
    loss_sum += static_cast<double>(ops::cross_entropy(s, labels).item()) * static_cast<double>(count);
    for (std::size_t i = 0; const int p : argmax_rows(s)) {
      ev.predictions.push_back(p);
      ev.confusion.add(labels[i++], p);
    }
  }
  ev.loss = split.size() ? loss_sum / static_cast<double>(split.size()) : 0.0;
  return ev;
}

LocalizationReport localize(const Classifier& model, const Split& split, const DatasetManifest& manifest,
                            std::size_t batch) {
  NoGradGuard guard;
  LocalizationReport rep;
  const auto inputs = model.inputs();
  const std::size_t classes = model.classes();
  std::vector<std::size_t> idx;
  for (std::size_t first = 0; first < split.size(); first += batch) {
    const std::size_t count = std::min(batch, split.size() - first);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), first);
    const SourceBatch x = make_batch(split, inputs, manifest.sources.size(), idx);
    const auto preds = argmax_rows(model.scores(x, nullptr));
    for (const auto& br : model.region_scores(x)) {
      const auto& spec = manifest.sources.at(br.source);
      const std::size_t per_side = spec.neighborhood - br.window + 1;
      const std::size_t regions = per_side * per_side;
      const float* loc = br.output.loc_scores.raw();
      const float* cls = br.output.cls_scores.raw();
      for (std::size_t i = 0; i < count; ++i) {
        RegionHit h;
        h.sample = first + i;
        h.source = br.source;
        h.truth = split.labels[first + i];
        h.predicted = preds[i];
        std::size_t best = 0;
        float best_score = -1.0f;
        for (std::size_t r = 0; r < regions; ++r) {
          const std::size_t at = (i * regions + r) * classes + static_cast<std::size_t>(h.truth);
          const float v = loc[at] * cls[at];
          if (v > best_score) {
            best_score = v;
            best = r;
          }
        }
        h.best_row = best / per_side;
        h.best_col = best % per_side;
        h.object = split.offsets.at(br.source).at(first + i);
        const std::size_t cy = h.best_row + (br.window - 1) / 2, cx = h.best_col + (br.window - 1) / 2;
        const auto oy = static_cast<std::size_t>(h.object[0]), ox = static_cast<std::size_t>(h.object[1]);
        h.hit = cy >= oy && cy < oy + spec.object_size && cx >= ox && cx < ox + spec.object_size;
        rep.hits += h.hit;
        rep.samples.push_back(h);
      }
    }
  }
  return rep;
}

TrainResult train(Classifier& model, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const std::size_t classes = data.manifest.classes;
  const std::size_t sources = data.manifest.sources.size();
  const auto inputs = model.inputs();
  for (auto s : inputs) {
    if (s >= sources) throw DataError("model reads source " + std::to_string(s) + " absent from the dataset");
  }
  TrainResult result;

  auto params = model.trainable();
  AdamConfig ac;
  ac.learning_rate = cfg.learning_rate;
  ac.l2 = cfg.l2;
  Adam opt(params, ac);

  if (params.empty()) {
    const auto ev = evaluate(model, data.val, classes, cfg.eval_batch);
    result.best_val = ev.normalized_accuracy();
    result.history.push_back({0, "val", ev.loss, result.best_val, 0.0});
    result.final_lr = cfg.learning_rate;
    return result;
  }

  const Split& tr = data.train;
  OversamplingSampler sampler(tr.labels, classes);
  Rng sample_rng = rnd::derive(cfg.seed, 0x5A);
  Rng shift_rng = rnd::derive(cfg.seed, 0x5B);
  Rng dropout_rng = rnd::derive(cfg.seed, 0x5C);
  const std::size_t batches = (tr.size() + cfg.batch_size - 1) / cfg.batch_size;

  EarlyStopping stopper(cfg.patience, cfg.max_lr_drops);
  Checkpoint best = snapshot(model);
  OptimizerState best_opt = save_state(opt);

  for (std::size_t epoch = 1;; ++epoch) {
    ConfusionMatrix train_cm(classes);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<std::size_t> idx;
      if (cfg.oversample) {
        idx = sampler.draw(cfg.batch_size, sample_rng);
      } else {
        idx.resize(cfg.batch_size);
        for (auto& i : idx) i = static_cast<std::size_t>(rnd::uniform_int(sample_rng, 0, static_cast<long>(tr.size()) - 1));
      }
      SourceBatch x = make_batch(tr, inputs, sources, idx);
      for (auto s : inputs) {
        const auto& spec = data.manifest.sources[s];
        if (spec.role == SourceRole::Reference && !cfg.augment_reference) continue;
        const int m = max_shift(spec.neighborhood, cfg.shift_fraction);
        if (m == 0) continue;
        const std::size_t per = spec.channels * spec.neighborhood * spec.neighborhood;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const int dy = static_cast<int>(rnd::uniform_int(shift_rng, -m, m));
          const int dx = static_cast<int>(rnd::uniform_int(shift_rng, -m, m));
          shift_image(x[s].raw() + i * per, spec.channels, spec.neighborhood, dy, dx);
        }
      }
      std::vector<int> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = tr.labels[idx[i]];

      opt.zero_grad();
      const Tensor scores = model.scores(x, &dropout_rng);
      Tensor loss = ops::cross_entropy(scores, labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1),
                              "");
      }
      loss.backward();
      try {
        opt.step();
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(b + 1),
                              e.parameter());
      }
      loss_sum += lv;
      for (std::size_t i = 0; const int p : argmax_rows(scores)) train_cm.add(labels[i++], p);
    }

    const double lr = opt.learning_rate();
    const auto ev = evaluate(model, data.val, classes, cfg.eval_batch);
    const double val_acc = ev.normalized_accuracy();
    result.history.push_back({epoch, "train", loss_sum / static_cast<double>(batches), present_class_accuracy(train_cm), lr});
    result.history.push_back({epoch, "val", ev.loss, val_acc, lr});
    if (on_epoch) on_epoch(epoch, val_acc, lr);
    result.epochs = epoch;

    const auto action = stopper.update(val_acc);
    if (action == EarlyStopping::Action::Improved) {
      best = snapshot(model);
      best_opt = save_state(opt);
      best.epoch = epoch;
      best.best_val = val_acc;
    } else if (action == EarlyStopping::Action::DecayLearningRate) {
      restore(model, best);
      load_state(opt, best_opt);
      opt.set_learning_rate(lr / cfg.lr_decay);
    } else if (action == EarlyStopping::Action::Stop) {
      break;
    }
    if (cfg.max_epochs && epoch >= cfg.max_epochs) break;
  }

  restore(model, best);
  result.best_val = stopper.best();
  result.best_epoch = stopper.best_epoch();
  result.lr_drops = stopper.drops();
  result.final_lr = opt.learning_rate();
  result.adam_steps = best_opt.steps;
  result.checkpoint = best;
  result.checkpoint.adam_steps = best_opt.steps;
  result.checkpoint.learning_rate = result.final_lr;
  for (std::size_t i = 0; i < opt.slots().size(); ++i) {
    const auto& slot = opt.slots()[i];
    const Shape shape = slot.param.tensor.shape();
    result.checkpoint.optimizer.push_back(
        {slot.param.name + ".m", Tensor(shape, std::vector<float>(best_opt.m[i].begin(), best_opt.m[i].end()))});
    result.checkpoint.optimizer.push_back(
        {slot.param.name + ".v", Tensor(shape, std::vector<float>(best_opt.v[i].begin(), best_opt.v[i].end()))});
  }
  return result;
}

// ---- checkpoints ----

std::uint64_t fnv1a(std::string_view text, std::uint64_t h) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

constexpr char kMagic[4] = {'M', 'S', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

template <typename U>
void put(std::ostream& os, U v) {
  char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(b, sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw CheckpointError("truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<U>(v);
}

void put_table(std::ostream& os, const std::vector<NamedTensor>& table) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
  }
}

std::vector<NamedTensor> get_table(std::istream& is) {
  std::vector<NamedTensor> out(get<std::uint32_t>(is));
  for (auto& [name, t] : out) {
    name.resize(get<std::uint32_t>(is));
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw CheckpointError("truncated checkpoint");
    Shape shape(get<std::uint32_t>(is));
    if (shape.size() > 8) throw CheckpointError("implausible tensor rank in checkpoint");
    for (auto& d : shape) d = get<std::uint32_t>(is);
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) v = std::bit_cast<float>(get<std::uint32_t>(is));
    t = Tensor(std::move(shape), std::move(values));
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    os.write(kMagic, 4);
    put<std::uint16_t>(os, kVersion);
    put<std::uint64_t>(os, ck.config_hash);
    put<std::uint64_t>(os, ck.epoch);
    put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(ck.best_val));
    put<std::uint64_t>(os, ck.adam_steps);
    put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(ck.learning_rate));
    put_table(os, ck.parameters);
    put_table(os, ck.optimizer);
    if (!os.flush()) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(path.string() + ": not a checkpoint");
  if (get<std::uint16_t>(is) != kVersion) throw CheckpointError(path.string() + ": unsupported checkpoint version");
  Checkpoint ck;
  ck.config_hash = get<std::uint64_t>(is);
  ck.epoch = get<std::uint64_t>(is);
  ck.best_val = std::bit_cast<double>(get<std::uint64_t>(is));
  ck.adam_steps = get<std::uint64_t>(is);
  ck.learning_rate = std::bit_cast<double>(get<std::uint64_t>(is));
  ck.parameters = get_table(is);
  ck.optimizer = get_table(is);
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash) {
  auto ck = load_checkpoint(path);
  if (ck.config_hash != expected_hash) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "config hash %016llx does not match expected %016llx",
                  static_cast<unsigned long long>(ck.config_hash), static_cast<unsigned long long>(expected_hash));
    throw CheckpointError(path.string() + ": " + buf);
  }
  return ck;
}

Checkpoint snapshot(const Classifier& model) {
  Checkpoint ck;
  for (const auto& p : model.parameters()) ck.parameters.push_back({p.name, p.tensor.detach()});
  return ck;
}

void restore(const Classifier& model, const Checkpoint& ck) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : ck.parameters) by_name[p.name] = &p.tensor;
  for (auto& p : model.parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw CheckpointError("parameter '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                            " in the checkpoint but " + shape_str(p.tensor.shape()) + " in the model");
    }
    Tensor dst = p.tensor;
    std::copy(it->second->data().begin(), it->second->data().end(), dst.data().begin());
  }
}

}  // namespace msattn
