#pragma once

// Experiment configuration, synthetic oracle datasets, and the end-to-end runner
// that writes an append-only run directory.

#include "collm/collab.hpp"
#include "collm/data.hpp"
#include "collm/eval.hpp"
#include "collm/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace collm::harness {

enum class Signal { Collaborative, Textual, Mixed };

const char* to_string(Signal s);
Signal signal_from_string(const std::string& s);

struct SyntheticSpec {
  Signal signal = Signal::Collaborative;
  int users = 300;
  int items = 300;
  int latent_dim = 8;
  int interactions = 30000;
  double noise = 0.0;        // stddev of Gaussian noise added to the label logit
  double temperature = 0.05;  // tau in sigmoid(u.i / tau)
  double text_logit = 4.0;   // keyword contribution to the label logit
  double cold_fraction = 0.0;  // share of items whose interactions all fall after cold_after
  double cold_after = 0.9;     // as a fraction of the time span
  Timestamp time_span = 1000000;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

struct SyntheticData {
  std::vector<data::Interaction> interactions;  // rating 5 for positives, 1 for negatives
  data::Catalog catalog;
  Mat<double> user_factors, item_factors;
  std::vector<int> item_keyword;  // +1 / -1 planted keyword polarity, 0 when absent
  std::vector<bool> cold_item;
  int num_users = 0, num_items = 0;
};

/// Deterministic given spec.seed.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// Words that carry the planted textual signal.
const std::vector<std::string>& positive_keywords();
const std::vector<std::string>& negative_keywords();

// ---------------------------------------------------------------------------

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | raw | split_dir
  SyntheticSpec synthetic;
  double train_until = 0.8;  // synthetic boundaries as fractions of the time span
  double valid_until = 0.9;
  std::string ratings, titles, split_dir;  // relative paths resolve against the data root
  double threshold = 3.0;
  int kcore = 1;
  std::optional<Timestamp> t0;
  Timestamp t1 = 0, t2 = 0;
  int train_months = 0, valid_months = 0, test_months = 0;  // when set, boundaries come from the data
  int history_len = 10;
};

struct CollabConfig {
  std::string model = "mf";
  int dim = 64;
  double lr = 1e-2;
  double weight_decay = 1e-4;
  int batch_size = 1024;
  int epochs = 50;
  int patience = 5;
  int lightgcn_layers = 2;
  std::uint64_t seed = 0;
  std::string checkpoint;  // load instead of pretraining when set
};

struct LmConfig {
  int d2 = 64;
  int layers = 2;
  int heads = 2;
  int ffn_mult = 4;
  int pretrain_steps = 300;
  int pretrain_batch = 8;
  double pretrain_lr = 3e-3;
  double pretrain_weight_decay = 1e-2;
  std::uint64_t seed = 0;
  std::string checkpoint;  // load instead of pretraining when set
};

struct CieConfig {
  std::string activation = "gelu";
  int hidden_mult = 10;
  bool shared_mlp = true;
};

struct TrainConfig {
  std::string strategy = "default";
  std::string model = "collm";
  train::StageSettings step1, step2, joint;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  int ndcg_cutoff = 0;
  int warm_min_count = 3;
  bool conjunctive = true;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset;
  CollabConfig collab;
  LmConfig lm;
  LoraOptions lora;
  CieConfig cie;
  TrainConfig train;
  EvalConfig eval;
  std::string output_root;  // empty: <data root>/runs
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys and type errors raise ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_hash(const ExperimentConfig& c);

/// $COLLM_DATA_ROOT, or the current directory.
std::filesystem::path data_root();

// ---------------------------------------------------------------------------

struct Dataset {
  data::TemporalSplit split;
  data::Catalog catalog;
  std::size_t num_users = 0, num_items = 0;
};

Dataset load_dataset(const DatasetConfig& c);

/// Prompt samples with train-positive histories for every row of `rows`.
std::vector<prompt::PromptSample> make_samples(const std::vector<data::Interaction>& rows, const Dataset& ds,
                                               const data::HistoryIndex& index, int history_len);

struct RunOptions {
  bool verbose = false;
  std::function<void(const std::string&)> log;  // progress lines; defaults to stderr when verbose
};

struct RunOutput {
  std::filesystem::path dir;
  std::vector<std::string> stages;  // executed training stages, in order
  eval::MetricsReport report;       // final model on test
  std::optional<eval::MetricsReport> step1_report;  // text-only model after step 1
  std::optional<eval::MetricsReport> collab_report;  // pretrained collaborative model
  std::vector<eval::Prediction> predictions, step1_predictions, collab_predictions;
  nlohmann::json timings;
  bool audit_ok = false;
  std::size_t audit_records = 0;
  std::size_t trainable_step2_parameters = 0;
};

/// prepare -> pretrain-collab -> lm-pretrain -> train(strategy) -> evaluate. Stage
/// failures are rethrown as the same error type with the stage name prefixed.
RunOutput run_experiment(const ExperimentConfig& config, const RunOptions& opts = {});

/// Runs each (strategy, model) variant of `base` and writes a comparison table.
struct SweepVariant {
  std::string label;
  std::string strategy, model;
};
struct SweepOutput {
  std::filesystem::path dir;
  std::vector<std::pair<std::string, RunOutput>> runs;
  std::string table;
};
SweepOutput sweep(const ExperimentConfig& base, const std::vector<SweepVariant>& variants, const RunOptions& opts = {});

/// The three rows of the ablation comparison: w/o CIE, w/ UI-token, CoLLM.
std::vector<SweepVariant> ablation_variants();

/// Rows x {AUC, UAUC} for all/warm/cold.
std::string comparison_table(const std::vector<std::pair<std::string, eval::MetricsReport>>& rows);

}  // namespace collm::harness
