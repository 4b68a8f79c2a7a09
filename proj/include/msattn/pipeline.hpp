#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msattn/fusion.hpp"
#include "msattn/synth_data.hpp"
#include "msattn/trainer.hpp"

namespace msattn {

/// Raised when a model needs a pretrained prerequisite that is neither cached nor trainable.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Base widths before width scaling.
struct Widths {
  std::size_t kernels = 64;
  std::size_t features = 128;
};

struct PipelineConfig {
  TrainConfig train;
  double scale = 1.0;
  Widths widths;
  std::map<std::string, Widths> source_widths;  // per-source overrides, by source name
  std::map<std::string, std::size_t> windows;   // per-source W overrides
  double attention_temperature = 1.0 / 60.0;
  std::optional<double> conv_dropout;  // encoder dropout overrides (presets: 0.25 / 0.5)
  std::optional<double> fc_dropout;
  std::optional<FusionConfig> fusion;           // defaults when empty
  bool joint = false;                           // ext3/ext4 with several sources: one joint model
  std::filesystem::path cache_dir;              // empty: in-memory only
  bool allow_training = true;                   // false: fail on cache misses
  bool assemble_only = false;                   // build architectures without fitting (for restoring checkpoints)
  std::function<void(const std::string&)> log;

  std::string canonical() const;
};

/// Which pretrained checkpoint initialises which part of a fusion model.
struct InitRecord {
  std::string target;
  std::string source;  // checkpoint key, or "random"
  bool frozen = false;
};

struct FitRecord {
  std::string key;
  std::string kind;
  TrainResult result;
  bool cache_hit = false;
};

/// Trains (or reloads) the single-source models and assembles the fusion
/// schemes on top of them. Every fitted model is cached under a key that
/// covers the dataset hash, model kind, sources, architecture and training config.
class ModelBank {
 public:
  ModelBank(const Dataset& data, std::uint64_t dataset_hash, PipelineConfig config);

  std::size_t reference_source() const { return reference_; }
  std::vector<std::size_t> additional_sources() const { return additional_; }
  std::size_t source_index(const std::string& name) const;

  EncoderSpec encoder_spec(std::size_t source) const;
  std::size_t window(std::size_t source) const;
  FusionConfig fusion_config(FusionScheme scheme, const std::vector<std::size_t>& additional) const;

  std::shared_ptr<const BaselineClassifier> baseline(std::size_t source);
  std::shared_ptr<const AttentionClassifier> attention(std::size_t source, std::size_t window = 0,
                                                       bool classification_only = false);
  /// Fusion of the reference with `additional` (all additional sources when empty).
  std::shared_ptr<const Classifier> fusion(FusionScheme scheme, std::vector<std::size_t> additional = {});

  /// Builds the model named by a CLI-style kind: baseline, attention, attention-cls-only, ext1..ext4.
  std::shared_ptr<const Classifier> build(const std::string& kind, const std::vector<std::size_t>& sources);

  const std::vector<FitRecord>& fits() const { return fits_; }
  const std::vector<InitRecord>& init_plan() const { return init_; }
  const PipelineConfig& config() const { return cfg_; }

 private:
  std::string key(const std::string& kind, const std::string& detail) const;
  std::string arch(std::size_t source) const;
  std::string baseline_key(std::size_t source) const;
  std::string attention_key(std::size_t source, std::size_t window, bool classification_only) const;
  void fit(Classifier& model, const std::string& key, const std::string& kind);
  Rng init_rng(const std::string& key) const;
  std::shared_ptr<const Classifier> feature_pair(const std::vector<std::size_t>& additional, const FusionConfig& fc);
  std::shared_ptr<const Classifier> pixel_pair(const std::vector<std::size_t>& additional, const FusionConfig& fc);
  void say(const std::string& msg) const;

  const Dataset& data_;
  std::uint64_t dataset_hash_;
  PipelineConfig cfg_;
  std::size_t reference_ = 0;
  std::vector<std::size_t> additional_;
  std::map<std::string, std::shared_ptr<const Classifier>> memo_;
  std::vector<FitRecord> fits_;
  std::vector<InitRecord> init_;
};

/// Exact parameter count of a model (all persisted tensors).
std::size_t parameter_count(const Classifier& model);

/// Encoder preset per source: the reference uses the pooled 3x3 stack; additional
/// sources whose default window is at least 8 the pooled 5/5/3 stack, others the unpooled 3x3 stack.
EncoderStyle style_for(const SourceSpec& spec);

}  // namespace msattn
