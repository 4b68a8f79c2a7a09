#include "msattn/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "msattn/gradcheck.hpp"
#include "msattn/layers.hpp"
#include "msattn/metrics.hpp"
#include "msattn/pipeline.hpp"
#include "msattn/report.hpp"
#include "msattn/runtime.hpp"

namespace msattn {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text) || !os.flush()) throw DataError("cannot write " + p.string());
}

std::vector<std::string> split_list(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::stringstream ss(item);
    std::string part;
    while (std::getline(ss, part, ',')) {
      if (!part.empty()) out.push_back(part);
    }
  }
  return out;
}

std::pair<std::string, std::string> split_pair(const std::string& s, char sep) {
  const auto at = s.find(sep);
  if (at == std::string::npos || at == 0 || at + 1 == s.size()) {
    throw UsageError("expected NAME" + std::string(1, sep) + "VALUE, got '" + s + "'");
  }
  return {s.substr(0, at), s.substr(at + 1)};
}

std::size_t to_size(const std::string& s) {
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw UsageError("expected a positive integer, got '" + s + "'");
  return v;
}

double to_double(const std::string& s) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw UsageError("expected a number, got '" + s + "'");
  return v;
}

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw DataError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw DataError(dir.string() + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(dir);
}

// ---- RunRecord plumbing ----

struct Session {
  std::string command_line;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  RunRecord record;

  void finish(const fs::path& dir) {
    record.command_line = command_line;
    record.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_file(dir / kRunRecordName, record.to_text());
  }
};

// ---- shared training flags ----

struct TrainFlags {
  std::string data;
  std::string model = "attention";
  std::vector<std::string> sources;
  double scale = 1.0;
  std::uint64_t seed = 1;
  double lr = 1e-3, l2 = 1e-5, lr_decay = 10.0, shift = 0.2;
  std::size_t batch = 100, patience = 200, max_drops = 1, max_epochs = 0;
  bool no_augment_reference = false, no_oversample = false;
  std::size_t kernels = 64, features = 128;
  std::vector<std::string> source_widths;  // name=K:F
  std::vector<std::string> windows;        // name=W
  double temperature = 1.0 / 60.0;
  std::optional<double> conv_dropout, fc_dropout;
  std::vector<double> fusion_temperatures, alpha, beta;
  bool joint = false;
  std::string cache;
  bool quiet = false;

  void add(CLI::App* app, bool require_model) {
    app->add_option("--data", data, "Dataset directory")->required();
    auto* m = app->add_option("--model", model, "baseline|attention|attention-cls-only|ext1|ext2|ext3|ext4");
    if (require_model) m->required();
    app->add_option("--source", sources, "Source names (comma-separated or repeated)");
    app->add_option("--scale", scale, "Width scale factor (>= 1)");
    app->add_option("--seed", seed, "Training seed");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--l2", l2, "L2 weight");
    app->add_option("--batch", batch, "Batch size");
    app->add_option("--patience", patience, "Early-stopping patience (epochs)");
    app->add_option("--lr-decay", lr_decay, "Learning-rate decay factor");
    app->add_option("--max-lr-drops", max_drops, "Learning-rate drops before stopping");
    app->add_option("--max-epochs", max_epochs, "Hard epoch cap (0: none)");
    app->add_option("--shift", shift, "Max shift augmentation, fraction of the neighbourhood");
    app->add_flag("--no-augment-reference", no_augment_reference, "Do not shift the reference source");
    app->add_flag("--no-oversample", no_oversample, "Uniform instead of class-balanced batches");
    app->add_option("--kernels", kernels, "Base conv kernels before scaling");
    app->add_option("--features", features, "Base feature size before scaling");
    app->add_option("--source-width", source_widths, "Per-source widths NAME=KERNELS:FEATURES");
    app->add_option("--window", windows, "Per-source region size NAME=W");
    app->add_option("--temperature", temperature, "Attention temperature");
    app->add_option("--conv-dropout", conv_dropout, "Conv dropout override, frozen ext3 layers included");
    app->add_option("--fc-dropout", fc_dropout, "FC dropout override, frozen ext3 layers included");
    app->add_option("--fusion-temperatures", fusion_temperatures, "Per additional source fusion temperatures");
    app->add_option("--alpha", alpha, "Per additional source combination weights (ext3/ext4)");
    app->add_option("--beta", beta, "Initial logit weights, reference first (ext2)");
    app->add_flag("--joint", joint, "Train ext3/ext4 jointly instead of pairwise-then-combine");
    app->add_option("--cache", cache, "Pretraining cache directory");
    app->add_flag("--quiet", quiet, "Suppress per-epoch progress");
  }

  PipelineConfig pipeline(std::ostream& err) const {
    PipelineConfig pc;
    pc.train.learning_rate = lr;
    pc.train.l2 = l2;
    pc.train.batch_size = batch;
    pc.train.patience = patience;
    pc.train.lr_decay = lr_decay;
    pc.train.max_lr_drops = max_drops;
    pc.train.max_epochs = max_epochs;
    pc.train.seed = seed;
    pc.train.shift_fraction = shift;
    pc.train.augment_reference = !no_augment_reference;
    pc.train.oversample = !no_oversample;
    pc.scale = scale;
    pc.widths = {kernels, features};
    for (const auto& s : source_widths) {
      const auto [name, kf] = split_pair(s, '=');
      const auto [k, f] = split_pair(kf, ':');
      pc.source_widths[name] = {to_size(k), to_size(f)};
    }
    for (const auto& s : windows) {
      const auto [name, w] = split_pair(s, '=');
      pc.windows[name] = to_size(w);
    }
    pc.attention_temperature = temperature;
    pc.conv_dropout = conv_dropout;
    pc.fc_dropout = fc_dropout;
    pc.joint = joint;
    if (!fusion_temperatures.empty() || !alpha.empty() || !beta.empty()) {
      if (model.rfind("ext", 0) != 0) throw UsageError("fusion weights only apply to ext1..ext4");
      FusionConfig fc = FusionConfig::defaults(parse_fusion_scheme(model));
      if (!fusion_temperatures.empty()) fc.temperatures = fusion_temperatures;
      if (!alpha.empty()) fc.alpha = alpha;
      if (!beta.empty()) fc.beta = beta;
      pc.fusion = fc;
    }
    pc.cache_dir = cache.empty() ? default_cache_dir() : fs::path(cache);
    if (!quiet) pc.log = [&err](const std::string& s) { err << s << '\n'; };
    return pc;
  }

  void snapshot(RunRecord& r) const {
    r.seed = seed;
    auto put = [&](const std::string& k, const std::string& v) { r.config.emplace_back(k, v); };
    put("data", data);
    put("model", model);
    std::string s;
    for (const auto& x : split_list(sources)) s += (s.empty() ? "" : ",") + x;
    put("source", s);
    put("scale", num(scale));
    PipelineConfig pc = pipeline(std::cerr);
    put("pipeline", pc.canonical());
    put("cache", pc.cache_dir.string());
  }
};

json pipeline_json(const PipelineConfig& pc) {
  json j;
  const auto& t = pc.train;
  j["train"] = {{"lr", t.learning_rate},       {"l2", t.l2},
                {"batch", t.batch_size},       {"patience", t.patience},
                {"lr_decay", t.lr_decay},      {"max_lr_drops", t.max_lr_drops},
                {"max_epochs", t.max_epochs},  {"seed", t.seed},
                {"shift", t.shift_fraction},   {"augment_reference", t.augment_reference},
                {"oversample", t.oversample},  {"eval_batch", t.eval_batch}};
  j["scale"] = pc.scale;
  j["widths"] = {pc.widths.kernels, pc.widths.features};
  json sw = json::object();
  for (const auto& [n, w] : pc.source_widths) sw[n] = {w.kernels, w.features};
  j["source_widths"] = sw;
  json win = json::object();
  for (const auto& [n, w] : pc.windows) win[n] = w;
  j["windows"] = win;
  j["temperature"] = pc.attention_temperature;
  j["conv_dropout"] = pc.conv_dropout ? json(*pc.conv_dropout) : json(nullptr);
  j["fc_dropout"] = pc.fc_dropout ? json(*pc.fc_dropout) : json(nullptr);
  j["joint"] = pc.joint;
  if (pc.fusion) {
    const auto& f = *pc.fusion;
    j["fusion"] = {{"scheme", to_string(f.scheme)},
                   {"temperatures", f.temperatures},
                   {"alpha", f.alpha},
                   {"beta", f.beta},
                   {"epsilon", f.epsilon},
                   {"frozen_conv_dropout", f.frozen_conv_dropout},
                   {"frozen_fc_dropout", f.frozen_fc_dropout}};
  }
  return j;
}

PipelineConfig pipeline_from_json(const json& j) {
  PipelineConfig pc;
  const auto& t = j.at("train");
  pc.train.learning_rate = t.at("lr");
  pc.train.l2 = t.at("l2");
  pc.train.batch_size = t.at("batch");
  pc.train.patience = t.at("patience");
  pc.train.lr_decay = t.at("lr_decay");
  pc.train.max_lr_drops = t.at("max_lr_drops");
  pc.train.max_epochs = t.at("max_epochs");
  pc.train.seed = t.at("seed");
  pc.train.shift_fraction = t.at("shift");
  pc.train.augment_reference = t.at("augment_reference");
  pc.train.oversample = t.at("oversample");
  pc.train.eval_batch = t.at("eval_batch");
  pc.scale = j.at("scale");
  pc.widths = {j.at("widths").at(0), j.at("widths").at(1)};
  for (const auto& [n, w] : j.at("source_widths").items()) pc.source_widths[n] = {w.at(0), w.at(1)};
  for (const auto& [n, w] : j.at("windows").items()) pc.windows[n] = w.get<std::size_t>();
  pc.attention_temperature = j.at("temperature");
  if (!j.at("conv_dropout").is_null()) pc.conv_dropout = j.at("conv_dropout").get<double>();
  if (!j.at("fc_dropout").is_null()) pc.fc_dropout = j.at("fc_dropout").get<double>();
  pc.joint = j.at("joint");
  if (j.contains("fusion")) {
    const auto& f = j.at("fusion");
    FusionConfig fc;
    fc.scheme = parse_fusion_scheme(f.at("scheme"));
    fc.temperatures = f.at("temperatures").get<std::vector<double>>();
    fc.alpha = f.at("alpha").get<std::vector<double>>();
    fc.beta = f.at("beta").get<std::vector<double>>();
    fc.epsilon = f.at("epsilon");
    fc.frozen_conv_dropout = f.at("frozen_conv_dropout").get<std::vector<double>>();
    fc.frozen_fc_dropout = f.at("frozen_fc_dropout").get<std::vector<double>>();
    pc.fusion = fc;
  }
  return pc;
}

std::vector<std::size_t> resolve_sources(const Dataset& ds, const std::vector<std::string>& names) {
  std::vector<std::size_t> out;
  for (const auto& n : split_list(names)) {
    try {
      out.push_back(ds.manifest.source_index(n));
    } catch (const DataError&) {
      throw UsageError("dataset has no source '" + n + "'");
    }
  }
  if (out.empty()) throw UsageError("--source is required");
  return out;
}

std::uint64_t model_config_hash(const std::string& kind, const std::vector<std::string>& sources,
                                const PipelineConfig& pc, const std::string& data_hash) {
  std::string s = "kind=" + kind + ";sources=";
  for (const auto& n : sources) s += n + ",";
  s += ";data=" + data_hash + ";" + pc.canonical();
  return fnv1a(s);
}

// ---- commands ----

struct GenDataFlags {
  std::string out;
  std::size_t classes = 10;
  std::uint64_t seed = 1;
  double difficulty = 0.5;
  std::string sources = "default";
  std::size_t max_per_class = 300;
  double imbalance = 10.0;
  bool force = false;
};

int cmd_gen_data(const GenDataFlags& f, Session& session, std::ostream& out) {
  GeneratorConfig g;
  g.classes = f.classes;
  g.seed = f.seed;
  g.difficulty = f.difficulty;
  g.max_per_class = f.max_per_class;
  g.imbalance = f.imbalance;
  if (f.sources != "default") g.sources = parse_source_specs(read_file(f.sources));
  const fs::path dir = f.out;
  prepare_out_dir(dir, f.force);
  const Dataset ds = generate_dataset(g);
  save_dataset(dir, ds);
  const std::string h = hex16(dataset_hash(dir));
  auto& r = session.record;
  r.seed = f.seed;
  r.dataset_hash = h;
  r.config = {{"classes", std::to_string(f.classes)},       {"difficulty", num(f.difficulty)},
              {"sources", f.sources},                        {"max_per_class", std::to_string(f.max_per_class)},
              {"imbalance", num(f.imbalance)}};
  r.outputs = {"train.msws", "val.msws", "test.msws", "manifest.txt"};
  session.finish(dir);
  out << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
      << " train/val/test samples to " << dir.string() << " (hash " << h << ")\n";
  return kExitOk;
}

int cmd_train(const TrainFlags& f, const std::string& out_dir, bool force, Session& session, std::ostream& out,
              std::ostream& err) {
  const Dataset ds = load_dataset(f.data);
  const std::string data_hash = hex16(dataset_hash(f.data));
  const auto sources = resolve_sources(ds, f.sources);
  const PipelineConfig pc = f.pipeline(err);
  std::vector<std::string> names;
  for (auto s : sources) names.push_back(ds.manifest.sources[s].name);

  ModelBank bank(ds, std::stoull(data_hash, nullptr, 16), pc);
  const auto model = bank.build(f.model, sources);
  const fs::path dir = out_dir;
  prepare_out_dir(dir, force);

  const std::uint64_t ch = model_config_hash(f.model, names, pc, data_hash);
  Checkpoint ck = snapshot(*model);
  std::vector<EpochRecord> history;
  // The model's own fit (if it was trained as a unit) is the last record.
  if (!bank.fits().empty()) {
    const auto& last = bank.fits().back();
    const auto own = snapshot(*model);
    if (last.result.checkpoint.parameters.size() == own.parameters.size()) {
      ck = last.result.checkpoint;
      history = last.result.history;
    }
  }
  ck.config_hash = ch;
  save_checkpoint(dir / "model.msck", ck);
  {
    std::ofstream hs(dir / "history.csv");
    write_history_csv(hs, history);
  }
  {
    std::ofstream fs_(dir / "fits.csv");
    fs_ << "kind,key_hash,cache_hit,epochs,best_epoch,best_val\n";
    for (const auto& r : bank.fits()) {
      fs_ << r.kind << ',' << hex16(fnv1a(r.key)) << ',' << r.cache_hit << ',' << r.result.epochs << ','
          << r.result.best_epoch << ',' << num(r.result.best_val) << '\n';
    }
  }
  {
    std::ofstream is(dir / "init_plan.csv");
    is << "target,initialised_from,frozen\n";
    for (const auto& r : bank.init_plan()) {
      is << r.target << ',' << (r.source == "random" ? "random" : hex16(fnv1a(r.source))) << ',' << r.frozen << '\n';
    }
  }
  json mj;
  mj["kind"] = f.model;
  mj["sources"] = names;
  mj["dataset_hash"] = data_hash;
  mj["config_hash"] = hex16(ch);
  mj["parameters"] = parameter_count(*model);
  mj["pipeline"] = pipeline_json(pc);
  write_file(dir / "model.json", mj.dump(2) + "\n");

  const auto val = evaluate(*model, ds.val, ds.manifest.classes, pc.train.eval_batch);
  auto& r = session.record;
  f.snapshot(r);
  r.dataset_hash = data_hash;
  r.outputs = {"model.msck", "model.json", "history.csv", "fits.csv", "init_plan.csv"};
  session.finish(dir);
  std::size_t hits = 0;
  for (const auto& fr : bank.fits()) hits += fr.cache_hit;
  out << f.model << " on " << mj["sources"].dump() << ": " << parameter_count(*model)
      << " parameters, validation normalized accuracy " << num(val.normalized_accuracy()) << " (" << bank.fits().size()
      << " fits, " << hits << " cache hits)\n";
  return kExitOk;
}

struct LoadedModel {
  Dataset data;
  std::shared_ptr<const Classifier> model;
  json meta;
};

LoadedModel load_model(const fs::path& model_dir, const fs::path& data_dir) {
  LoadedModel lm;
  json meta;
  try {
    meta = json::parse(read_file(model_dir / "model.json"));
  } catch (const json::exception& e) {
    throw DataError("malformed " + (model_dir / "model.json").string() + ": " + e.what());
  }
  const std::string data_hash = hex16(dataset_hash(data_dir));
  if (meta.at("dataset_hash").get<std::string>() != data_hash) {
    throw CheckpointError("checkpoint was trained on dataset " + meta.at("dataset_hash").get<std::string>() +
                          " but " + data_dir.string() + " hashes to " + data_hash);
  }
  lm.data = load_dataset(data_dir);
  PipelineConfig pc = pipeline_from_json(meta.at("pipeline"));
  pc.assemble_only = true;
  const auto names = meta.at("sources").get<std::vector<std::string>>();
  const std::string kind = meta.at("kind");
  ModelBank bank(lm.data, std::stoull(data_hash, nullptr, 16), pc);
  lm.model = bank.build(kind, resolve_sources(lm.data, names));
  pc.assemble_only = false;
  const auto ck = load_checkpoint(model_dir / "model.msck", model_config_hash(kind, names, pc, data_hash));
  restore(*lm.model, ck);
  lm.meta = std::move(meta);
  return lm;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out_dir, const std::string& split_name,
             std::size_t dump, bool force, Session& session, std::ostream& out) {
  const auto lm = load_model(ckpt, data);
  const Split* split = split_name == "test" ? &lm.data.test : split_name == "val" ? &lm.data.val
                       : split_name == "train"                 ? &lm.data.train
                                                               : nullptr;
  if (!split) throw UsageError("--split must be train, val or test");
  const std::size_t classes = lm.data.manifest.classes;
  const auto ev = evaluate(*lm.model, *split, classes);
  const auto loc = localize(*lm.model, *split, lm.data.manifest);
  const fs::path dir = out_dir;
  prepare_out_dir(dir, force);

  const double na = ev.normalized_accuracy();
  double k = std::nan("");
  try {
    k = kappa(ev.confusion);
  } catch (const MetricError&) {
  }
  {
    std::ofstream os(dir / "metrics.csv");
    os << "metric,value\n";
    os << "normalized_accuracy," << num(na) << '\n';
    os << "overall_accuracy," << num(overall_accuracy(ev.confusion)) << '\n';
    os << "kappa," << (std::isnan(k) ? std::string() : num(k)) << '\n';
    os << "loss," << num(ev.loss) << '\n';
    os << "samples," << split->size() << '\n';
    if (!loc.samples.empty()) os << "localization_hit_rate," << num(loc.rate()) << '\n';
  }
  {
    std::ofstream os(dir / "per_class.csv");
    write_per_class_csv(os, ev.confusion);
  }
  {
    std::ofstream os(dir / "confusion.csv");
    write_confusion_csv(os, ev.confusion);
  }
  auto& r = session.record;
  r.outputs = {"metrics.csv", "per_class.csv", "confusion.csv"};
  if (dump > 0) {
    std::ofstream os(dir / "regions.csv");
    std::ofstream gs(dir / "region_grid.csv");
    os << "sample,source,truth,predicted,object_row,object_col,best_row,best_col,hit\n";
    gs << "sample,source,predicted,row,col,score\n";
    const std::size_t n = std::min(dump, split->size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    SourceBatch x(lm.data.manifest.sources.size());
    for (auto s : lm.model->inputs()) x[s] = split->gather(s, idx);
    const auto regions = lm.model->region_scores(x);
    std::vector<int> predicted(ev.predictions.begin(), ev.predictions.begin() + static_cast<std::ptrdiff_t>(n));
    for (const auto& h : loc.samples) {
      if (h.sample >= n) continue;
      os << h.sample << ',' << lm.data.manifest.sources[h.source].name << ',' << h.truth << ',' << h.predicted << ','
         << h.object[0] << ',' << h.object[1] << ',' << h.best_row << ',' << h.best_col << ',' << h.hit << '\n';
    }
    for (const auto& br : regions) {
      const std::size_t per_side = lm.data.manifest.sources[br.source].neighborhood - br.window + 1;
      for (std::size_t i = 0; i < n; ++i) {
        const auto grid = region_score_map(br.output, i, static_cast<std::size_t>(predicted[i]));
        for (std::size_t g = 0; g < grid.size(); ++g) {
          gs << i << ',' << lm.data.manifest.sources[br.source].name << ',' << predicted[i] << ',' << g / per_side << ',' << g % per_side
             << ',' << num(grid[g]) << '\n';
        }
      }
    }
    r.outputs.push_back("regions.csv");
    r.outputs.push_back("region_grid.csv");
  }
  r.config = {{"checkpoint", ckpt}, {"data", data}, {"split", split_name}, {"dump_regions", std::to_string(dump)}};
  r.dataset_hash = lm.meta.at("dataset_hash");
  r.seed = lm.meta.at("pipeline").at("train").at("seed");
  session.finish(dir);
  out << lm.meta.at("kind").get<std::string>() << " " << split_name << ": normalized accuracy " << num(na)
      << ", kappa " << (std::isnan(k) ? "undefined" : num(k));
  if (!loc.samples.empty()) out << ", localization hit rate " << num(loc.rate());
  out << '\n';
  return kExitOk;
}

int cmd_gradcheck(const std::string& out_path, double tol, std::uint64_t seed, bool corrupt, std::ostream& out) {
  GradCheckOptions opts;
  opts.tolerance = tol;
  opts.seed = seed;
  auto results = run_gradcheck_suite(opts);
  if (corrupt) results.push_back(corrupted_backward_check(opts));
  std::ostringstream report;
  write_gradcheck_report(report, results, tol);
  std::size_t failed = 0;
  for (const auto& r : results) failed += !r.passed;
  report << (failed ? std::to_string(failed) + " of " + std::to_string(results.size()) + " checks failed\n"
                    : "all " + std::to_string(results.size()) + " checks passed\n");
  out << report.str();
  if (!out_path.empty()) write_file(out_path, report.str());
  return failed ? kExitNumerical : kExitOk;
}

struct SweepFlags {
  std::string kind;
  std::vector<std::string> values;
  std::string out;
  bool force = false;
};

int cmd_sweep(const TrainFlags& tf, const SweepFlags& sf, Session& session, std::ostream& out, std::ostream& err) {
  const Dataset base = load_dataset(tf.data);
  const std::uint64_t base_hash = dataset_hash(tf.data);
  const auto values = split_list(sf.values);
  if (values.empty()) throw UsageError("--values is required");
  const auto sources = resolve_sources(base, tf.sources);
  const fs::path dir = sf.out;
  prepare_out_dir(dir, sf.force);
  Table t;

  auto eval_pair = [&](const Classifier& m, const Dataset& ds) {
    const auto v = evaluate(m, ds.val, ds.manifest.classes).normalized_accuracy();
    const auto te = evaluate(m, ds.test, ds.manifest.classes).normalized_accuracy();
    return std::make_pair(v, te);
  };

  if (sf.kind == "window") {
    if (sources.size() != 1) throw UsageError("window sweep takes exactly one --source");
    const std::size_t s = sources.front();
    const auto& spec = base.manifest.sources[s];
    t.header = {"W", "R", "params", "val_accuracy", "test_accuracy", "status"};
    ModelBank bank(base, base_hash, tf.pipeline(err));
    double best = -1;
    std::string best_w;
    for (const auto& v : values) {
      const std::size_t w = to_size(v);
      try {
        const auto m = bank.attention(s, w, tf.model == "attention-cls-only");
        const auto [va, te] = eval_pair(*m, base);
        t.rows.push_back({v, std::to_string(region_count(spec.neighborhood, w)), std::to_string(parameter_count(*m)),
                          num(va), num(te), "ok"});
        if (va > best) {
          best = va;
          best_w = v;
        }
      } catch (const std::invalid_argument& e) {
        err << "warning: skipping W=" << v << ": " << e.what() << '\n';
        t.rows.push_back({v, "", "", "", "", std::string("skipped: ") + e.what()});
      }
    }
    if (!best_w.empty()) out << "best W for " << spec.name << ": " << best_w << '\n';
  } else if (sf.kind == "capacity") {
    t.header = {"scale", "params", "val_accuracy", "test_accuracy"};
    for (const auto& v : values) {
      TrainFlags f = tf;
      f.scale = to_double(v);
      ModelBank bank(base, base_hash, f.pipeline(err));
      const auto m = bank.build(tf.model, sources);
      const auto [va, te] = eval_pair(*m, base);
      t.rows.push_back({v, std::to_string(parameter_count(*m)), num(va), num(te)});
    }
  } else if (sf.kind == "neighborhood") {
    if (sources.size() != 1) throw UsageError("neighborhood sweep takes exactly one --source");
    const std::size_t s = sources.front();
    t.header = {"N", "W", "R", "params", "val_accuracy", "test_accuracy", "status"};
    for (const auto& v : values) {
      const std::size_t n = to_size(v);
      GeneratorConfig g;
      g.classes = base.manifest.classes;
      g.max_per_class = *std::max_element(base.manifest.class_counts.begin(), base.manifest.class_counts.end());
      const auto mn = *std::min_element(base.manifest.class_counts.begin(), base.manifest.class_counts.end());
      g.imbalance = base.manifest.imbalance;
      g.difficulty = base.manifest.difficulty;
      g.seed = base.manifest.seed;
      g.sources = base.manifest.sources;
      (void)mn;
      auto& spec = g.sources[s];
      spec.neighborhood = n;
      try {
        spec.validate();
        const Dataset ds = generate_dataset(g);
        const fs::path sub = dir / ("data_N" + v);
        save_dataset(sub, ds);
        ModelBank bank(ds, dataset_hash(sub), tf.pipeline(err));
        const auto m = tf.model == "baseline" ? std::shared_ptr<const Classifier>(bank.baseline(s))
                                              : std::shared_ptr<const Classifier>(bank.attention(s));
        const auto [va, te] = eval_pair(*m, ds);
        const std::size_t w = bank.window(s);
        t.rows.push_back({v, std::to_string(w), std::to_string(region_count(n, w)), std::to_string(parameter_count(*m)),
                          num(va), num(te), "ok"});
      } catch (const std::invalid_argument& e) {
        err << "warning: skipping N=" << v << ": " << e.what() << '\n';
        t.rows.push_back({v, "", "", "", "", "", std::string("skipped: ") + e.what()});
      } catch (const DataError& e) {
        err << "warning: skipping N=" << v << ": " << e.what() << '\n';
        t.rows.push_back({v, "", "", "", "", "", std::string("skipped: ") + e.what()});
      }
    }
  } else {
    throw UsageError("--kind must be window, capacity or neighborhood");
  }
  {
    std::ofstream os(dir / "sweep.csv");
    write_csv(os, t);
  }
  auto& r = session.record;
  tf.snapshot(r);
  r.config.emplace_back("kind", sf.kind);
  std::string vs;
  for (const auto& v : values) vs += (vs.empty() ? "" : ",") + v;
  r.config.emplace_back("values", vs);
  r.dataset_hash = hex16(base_hash);
  r.outputs = {"sweep.csv"};
  session.finish(dir);
  write_csv(out, t);
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_path, std::string x,
               std::vector<std::string> y, const std::string& title, Session& session, std::ostream& out) {
  std::vector<std::pair<std::string, Table>> tables;
  y = split_list(y);
  for (const auto& in : inputs) {
    std::ifstream is(in);
    if (!is) throw DataError("cannot read " + in);
    try {
      tables.emplace_back(fs::path(in).parent_path().filename().string().empty()
                              ? fs::path(in).stem().string()
                              : fs::path(in).parent_path().filename().string() + "/" + fs::path(in).stem().string(),
                          read_csv(is));
    } catch (const DataError& e) {
      throw DataError(in + ": " + e.what());
    }
  }
  const Table& first = tables.front().second;
  if (x.empty()) x = first.header.front();
  if (y.empty()) {
    if (first.has_column("test_accuracy")) {
      y = {"test_accuracy"};
    } else {
      for (const auto& h : first.header) {
        if (h == x) continue;
        bool numeric = !first.rows.empty();
        for (const auto& r : first.rows) {
          char* end = nullptr;
          const auto& cell = r[first.column(h)];
          std::strtod(cell.c_str(), &end);
          if (cell.empty() || end != cell.c_str() + cell.size()) numeric = false;
        }
        if (numeric) y.push_back(h);
      }
    }
  }
  if (y.empty()) throw DataError("no numeric columns to plot");
  const auto chart = chart_from_tables(tables, x, y, title);
  const fs::path out_file = out_path;
  if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
  write_file(out_file, render_svg(chart));
  auto& r = session.record;
  for (const auto& in : inputs) r.config.emplace_back("in", in);
  r.config.emplace_back("x", x);
  for (const auto& c : y) r.config.emplace_back("y", c);
  r.outputs = {out_file.filename().string()};
  session.finish(out_file.has_parent_path() ? out_file.parent_path() : fs::path("."));
  out << "wrote " << out_file.string() << " (" << chart.categories.size() << " groups, " << chart.series.size()
      << " series)\n";
  return kExitOk;
}

}  // namespace

std::string RunRecord::to_text() const {
  std::ostringstream os;
  os << "command: " << command_line << '\n';
  os << "seed: " << seed << '\n';
  os << "dataset_hash: " << dataset_hash << '\n';
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", duration_s);
  os << "duration_s: " << buf << '\n';
  for (const auto& o : outputs) os << "output: " << o << '\n';
  for (const auto& [k, v] : config) os << "config: " << k << '=' << v << '\n';
  return os.str();
}

RunRecord RunRecord::from_text(const std::string& text) {
  RunRecord r;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto at = line.find(": ");
    if (at == std::string::npos) continue;
    const std::string key = line.substr(0, at), value = line.substr(at + 2);
    if (key == "command") r.command_line = value;
    else if (key == "seed") r.seed = std::stoull(value);
    else if (key == "dataset_hash") r.dataset_hash = value;
    else if (key == "duration_s") r.duration_s = std::stod(value);
    else if (key == "output") r.outputs.push_back(value);
    else if (key == "config") {
      const auto eq = value.find('=');
      r.config.emplace_back(value.substr(0, eq), eq == std::string::npos ? "" : value.substr(eq + 1));
    }
  }
  return r;
}

fs::path default_cache_dir() {
  if (const char* env = std::getenv("MSATTN_CACHE_DIR"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".cache" / "msattn";
  return ".msattn-cache";
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  tune_allocator();
  Session session;
  session.command_line = "msattn";
  for (const auto& a : args) session.command_line += " " + a;

  CLI::App app{"Multisource instance-attention classification toolkit", "msattn"};
  app.require_subcommand(1);

  GenDataFlags gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multisource dataset");
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_option("--classes", gd.classes, "Number of classes");
  gen->add_option("--seed", gd.seed, "Generator seed");
  gen->add_option("--difficulty", gd.difficulty, "0 (easy) .. 1 (indistinguishable)");
  gen->add_option("--sources", gd.sources, "'default' or a source spec file");
  gen->add_option("--max-per-class", gd.max_per_class, "Samples of the largest class");
  gen->add_option("--imbalance", gd.imbalance, "Largest / smallest class size");
  gen->add_flag("--force", gd.force, "Overwrite a non-empty output directory");

  TrainFlags tf;
  std::string train_out;
  bool train_force = false;
  auto* tr = app.add_subcommand("train", "Train a model (with cached prerequisite pretraining)");
  tf.add(tr, true);
  tr->add_option("--out", train_out, "Output directory")->required();
  tr->add_flag("--force", train_force, "Overwrite a non-empty output directory");

  std::string ev_ckpt, ev_data, ev_out, ev_split = "test";
  std::size_t ev_dump = 0;
  bool ev_force = false;
  auto* ev = app.add_subcommand("eval", "Evaluate a trained model");
  ev->add_option("--checkpoint", ev_ckpt, "Directory written by train")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Output directory")->required();
  ev->add_option("--split", ev_split, "train|val|test");
  ev->add_option("--dump-regions", ev_dump, "Write region-score grids for the first K samples");
  ev->add_flag("--force", ev_force, "Overwrite a non-empty output directory");

  std::string gc_out;
  double gc_tol = 1e-3;
  std::uint64_t gc_seed = 7;
  bool gc_corrupt = false;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc->add_option("--out", gc_out, "Also write the report to this file");
  gc->add_option("--tolerance", gc_tol, "Max relative error");
  gc->add_option("--seed", gc_seed, "Input seed");
  gc->add_flag("--include-corrupted", gc_corrupt, "Add the corrupted-backward negative control (expected to fail)");

  TrainFlags sw_tf;
  SweepFlags sf;
  auto* sw = app.add_subcommand("sweep", "Window, capacity or neighbourhood sweeps");
  sw_tf.add(sw, false);
  sw->add_option("--kind", sf.kind, "window|capacity|neighborhood")->required();
  sw->add_option("--values", sf.values, "Sweep values (comma-separated)")->required();
  sw->add_option("--out", sf.out, "Output directory")->required();
  sw->add_flag("--force", sf.force, "Overwrite a non-empty output directory");

  std::vector<std::string> rp_in, rp_y;
  std::string rp_out, rp_x, rp_title = "msattn report";
  auto* rp = app.add_subcommand("report", "Render CSV tables as a grouped bar chart (SVG)");
  rp->add_option("--in", rp_in, "Input CSV files")->required();
  rp->add_option("--out", rp_out, "Output SVG")->required();
  rp->add_option("--x", rp_x, "Category column (default: first)");
  rp->add_option("--y", rp_y, "Value columns (default: test_accuracy or every numeric column)");
  rp->add_option("--title", rp_title, "Chart title");

  std::vector<const char*> argv{"msattn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gd, session, out);
    if (*tr) return cmd_train(tf, train_out, train_force, session, out, err);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_out, ev_split, ev_dump, ev_force, session, out);
    if (*gc) return cmd_gradcheck(gc_out, gc_tol, gc_seed, gc_corrupt, out);
    if (*sw) {
      if (sw_tf.model.empty()) sw_tf.model = "attention";
      return cmd_sweep(sw_tf, sf, session, out, err);
    }
    if (*rp) return cmd_report(rp_in, rp_out, rp_x, rp_y, rp_title, session, out);
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what();
    if (!e.parameter().empty()) err << " (parameter " << e.parameter() << ")";
    err << '\n';
    return kExitNumerical;
  } catch (const NumericalFailure& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const MissingPrerequisite& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    // UsageError, ConfigError, InvalidParameter, ArchitectureError
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace msattn
