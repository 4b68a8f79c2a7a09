#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "msattn/fusion.hpp"
#include "msattn/metrics.hpp"
#include "msattn/synth_data.hpp"

namespace msattn {

struct TrainConfig {
  double learning_rate = 1e-3;
  double l2 = 1e-5;
  std::size_t batch_size = 100;
  std::size_t patience = 200;
  double lr_decay = 10.0;
  std::size_t max_lr_drops = 1;
  std::size_t max_epochs = 0;  // 0: run until early stopping ends training
  std::uint64_t seed = 1;
  double shift_fraction = 0.2;
  bool augment_reference = true;  // also shift the reference source
  bool oversample = true;
  std::size_t eval_batch = 100;

  void validate() const;
  /// Stable text form used for config hashing.
  std::string canonical() const;
};

/// Validation-driven schedule: a stall of `patience` epochs first restores the
/// best checkpoint and decays the learning rate; the stall after the last
/// allowed decay ends training.
class EarlyStopping {
 public:
  enum class Action { Improved, Stalled, DecayLearningRate, Stop };

  EarlyStopping(std::size_t patience, std::size_t max_drops);
  Action update(double metric);

  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t drops() const { return drops_; }
  std::size_t epochs() const { return epoch_; }

 private:
  std::size_t patience_, max_drops_;
  double best_ = -1.0;
  std::size_t best_epoch_ = 0, epoch_ = 0, stalled_ = 0, drops_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double normalized_accuracy = 0.0;
  double lr = 0.0;
};

void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history);
std::vector<EpochRecord> read_history_csv(std::istream& is);

struct Evaluation {
  ConfusionMatrix confusion{1};
  double loss = 0.0;
  std::vector<int> predictions;
  double normalized_accuracy() const { return msattn::normalized_accuracy(confusion); }
};

/// Deterministic pass over a split without dropout or augmentation.
Evaluation evaluate(const Classifier& model, const Split& split, std::size_t classes, std::size_t batch = 100);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t epoch = 0;
  double best_val = 0.0;
  std::uint64_t adam_steps = 0;
  double learning_rate = 0.0;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> optimizer;  // "<param>.m" / "<param>.v"
};

/// Argmax region of one attention branch for one sample.
struct RegionHit {
  std::size_t sample = 0;
  std::size_t source = 0;
  int truth = 0;
  int predicted = 0;
  std::size_t best_row = 0, best_col = 0;  // top-left of the highest-scoring region
  Offset object{};                         // top-left of the planted object
  bool hit = false;
};

struct LocalizationReport {
  std::vector<RegionHit> samples;
  std::size_t hits = 0;
  double rate() const { return samples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(samples.size()); }
};

/// For every sample and attention branch, takes the region maximising
/// loc * cls for the true class and counts a hit when that region's centre
/// pixel lies inside the object box. Models without branches give an empty report.
LocalizationReport localize(const Classifier& model, const Split& split, const DatasetManifest& manifest,
                            std::size_t batch = 100);

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs = 0;
  std::size_t lr_drops = 0;
  double final_lr = 0.0;
  std::uint64_t adam_steps = 0;
  Checkpoint checkpoint;  // best parameters with the optimizer moments at that point
};

/// Progress callback: (epoch, validation normalized accuracy, lr).
using EpochCallback = std::function<void(std::size_t, double, double)>;

/// Fits model.trainable() on the train split with oversampled, shift-augmented
/// batches; selects on validation normalized accuracy. On return the model
/// holds the best checkpoint. Throws DivergenceError on a non-finite loss or
/// gradient, with epoch and batch in the message.
TrainResult train(Classifier& model, const Dataset& data, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

// ---- checkpoints ----

std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL);

/// Atomic: writes a sibling temp file then renames it over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Refuses (CheckpointError) when the stored config hash differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash);

/// Snapshot of a model's parameters (values copied).
Checkpoint snapshot(const Classifier& model);
/// Copies tensors into the model by name; every model parameter must be present with a matching shape.
void restore(const Classifier& model, const Checkpoint& ck);

}  // namespace msattn
