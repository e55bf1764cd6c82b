#pragma once

// Two-step tuning (LoRA on text-only prompts, then the CIE on full prompts), the
// T1/T2/T3 tuning strategies, and the checksum-based freezing audit.

#include "collm/cie.hpp"
#include "collm/eval.hpp"
#include "collm/lm.hpp"
#include "collm/prompt.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <optional>
#include <set>

namespace collm::train {

inline constexpr double kBceEps = 1e-7;

/// Binary cross-entropy with the prediction clamped to [eps, 1-eps].
inline double bce_loss(double yhat, double y) {
  const double p = std::clamp(yhat, kBceEps, 1.0 - kBceEps);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

enum class Stage { Step1, Step2, Joint };
enum class Strategy { Default, T1, T2, T3 };
/// CoLLM proper, the text-only "w/o CIE" arm, and the "w/ UI-token" arm.
enum class Model { CoLLM, TextOnly, UiToken };

const char* to_string(Stage s);
const char* to_string(Strategy s);
const char* to_string(Model m);
Strategy strategy_from_string(const std::string& s);
Model model_from_string(const std::string& s);

struct TrainPlan {
  std::string name;
  Stage stage = Stage::Step1;
  std::vector<ParamGroup> trainable;
  prompt::Variant variant = prompt::Variant::TextOnly;
  AdamOptions optimizer{1e-3, 1e-3, true};
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 5;
  std::uint64_t seed = 0;
  int audit_every = 1;  // audit every n-th optimizer step, 0 disables
  std::size_t valid_limit = 0;  // 0 = the whole validation set
  std::optional<std::filesystem::path> checkpoint;

  bool trains(ParamGroup g) const { return std::find(trainable.begin(), trainable.end(), g) != trainable.end(); }
};

/// Throws ContractError when the plan violates the stage's freezing contract.
void validate(const TrainPlan& plan);

nlohmann::json to_json(const TrainPlan& plan);

struct StageSettings {
  double lr = 1e-3;
  double weight_decay = 1e-3;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 5;
  int audit_every = 1;
  std::size_t valid_limit = 0;
};

struct StrategyOptions {
  Strategy strategy = Strategy::Default;
  Model model = Model::CoLLM;
  StageSettings step1, step2, joint;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> checkpoint_dir;
};

/// Stage structure: Default/T1/T2 = step1 then step2, T3 = one joint stage; the
/// text-only model stops after step1.
std::vector<TrainPlan> make_plans(const StrategyOptions& opts);

// ---------------------------------------------------------------------------

/// Frozen language model, adapter, and the source of slot vectors (CIE module,
/// UI-token table, or none for the text-only model).
template <typename Scalar>
struct Pipeline {
  lm::Transformer<Scalar> model;
  lm::Tokenizer tokenizer;
  Lora<Scalar> lora;
  std::unique_ptr<cie::SlotEncoder<Scalar>> slots;

  Pipeline() = default;
  Pipeline(lm::Transformer<Scalar> m, lm::Tokenizer t, Lora<Scalar> l, std::unique_ptr<cie::SlotEncoder<Scalar>> s)
      : model(std::move(m)), tokenizer(std::move(t)), lora(std::move(l)), slots(std::move(s)) {}
  Pipeline(const Pipeline& o)
      : model(o.model), tokenizer(o.tokenizer), lora(o.lora), slots(o.slots ? o.slots->clone() : nullptr) {}
  Pipeline(Pipeline&&) noexcept = default;
  Pipeline& operator=(Pipeline&&) noexcept = default;

  ParamList<Scalar> params() {
    ParamList<Scalar> out = model.params();
    for (auto* p : lora.params()) out.push_back(p);
    if (slots)
      for (auto* p : slots->params()) out.push_back(p);
    return out;
  }

  ParamList<Scalar> params_in(const std::vector<ParamGroup>& groups) {
    ParamList<Scalar> out;
    for (auto* p : params())
      if (std::find(groups.begin(), groups.end(), p->group) != groups.end()) out.push_back(p);
    return out;
  }
};

/// Prompts for one split in both variants, aligned with `rows`.
struct LabeledPrompts {
  std::vector<data::Interaction> rows;
  std::vector<prompt::HybridPrompt> full, text_only;

  std::size_t size() const { return rows.size(); }
  const std::vector<prompt::HybridPrompt>& of(prompt::Variant v) const {
    return v == prompt::Variant::Full ? full : text_only;
  }
};

LabeledPrompts label_prompts(const std::vector<prompt::PromptSample>& samples, const lm::Tokenizer& tok);

template <typename Scalar>
Scalar answer_logit(const Pipeline<Scalar>& pipe, const prompt::HybridPrompt& p) {
  const auto seq = prompt::hybrid_encode(p, pipe.slots.get(), pipe.model);
  return pipe.model.answer_margin(pipe.model.forward(seq.rows, &pipe.lora));
}

/// Deterministic (inference-mode) predictions.
template <typename Scalar>
std::vector<eval::Prediction> predict(const Pipeline<Scalar>& pipe, const std::vector<prompt::HybridPrompt>& prompts,
                                      const std::vector<data::Interaction>& rows) {
  if (prompts.size() != rows.size()) throw AlignmentError("predict: prompts and rows differ in length");
  std::vector<eval::Prediction> out;
  out.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k)
    out.push_back({rows[k].user, rows[k].item, static_cast<double>(sigmoid(answer_logit(pipe, prompts[k]))),
                   rows[k].label});
  return out;
}

// ---------------------------------------------------------------------------
// Freezing audit.

struct AuditRecord {
  std::string stage;
  std::int64_t step = 0;
  std::vector<std::string> expected;  // tensors declared to change
  std::vector<std::string> changed;   // tensors whose bytes changed
  bool ok = false;
};

nlohmann::json to_json(const AuditRecord& r);

template <typename Scalar>
std::vector<std::uint64_t> checksums(const ParamList<Scalar>& params) {
  std::vector<std::uint64_t> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(checksum(p->value));
  return out;
}

// ---------------------------------------------------------------------------

struct EpochLog {
  std::string stage;
  int epoch = 0;
  double train_loss = 0.0;        // mean per-sample BCE over the epoch
  double loss_first_quarter = 0.0;  // mean over the first quarter of batches
  double loss_last_quarter = 0.0;   // mean over the last quarter of batches
  double valid_auc = 0.0;
  double seconds = 0.0;
};

struct StageResult {
  TrainPlan plan;
  std::vector<EpochLog> epochs;
  std::vector<AuditRecord> audit;
  double best_valid_auc = 0.0;
  int best_epoch = -1;
  std::int64_t steps = 0;
  double seconds = 0.0;

  bool audit_ok() const {
    return std::all_of(audit.begin(), audit.end(), [](const AuditRecord& r) { return r.ok; });
  }
};

namespace detail {

inline std::vector<std::size_t> spread_indices(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> idx;
  if (limit == 0 || limit >= n) {
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  for (std::size_t k = 0; k < limit; ++k) idx.push_back(k * n / limit);
  return idx;
}

// Sets the CIE trainable set for the stage and keeps it fixed until destruction.
template <typename Scalar>
class OmegaGuard {
 public:
  OmegaGuard(cie::SlotEncoder<Scalar>* slots, const TrainPlan& plan)
      : cie_(dynamic_cast<cie::CieModule<Scalar>*>(slots)) {
    if (!cie_) return;
    cie_->set_omega(plan.trains(ParamGroup::Collab) ? cie::Omega::PhiPsi : cie::Omega::Phi);
    cie_->lock();
  }
  ~OmegaGuard() {
    if (cie_) cie_->unlock();
  }
  OmegaGuard(const OmegaGuard&) = delete;
  OmegaGuard& operator=(const OmegaGuard&) = delete;

 private:
  cie::CieModule<Scalar>* cie_;
};

}  // namespace detail

/// One tuning stage: AdamW over the plan's trainable groups, early stopping on
/// validation AUC, best weights restored at the end.
template <typename Scalar>
StageResult run_stage(Pipeline<Scalar>& pipe, const TrainPlan& plan, const LabeledPrompts& train,
                      const LabeledPrompts& valid) {
  validate(plan);
  const FlushDenormals ftz;
  if (train.size() == 0) throw InputDomainError("run_stage: empty training set");
  const bool slot_groups = plan.trains(ParamGroup::Mapping) || plan.trains(ParamGroup::Collab) ||
                           plan.trains(ParamGroup::UiTokens);
  if (plan.variant == prompt::Variant::Full && !pipe.slots)
    throw ContractError("stage '" + plan.name + "' uses full prompts but the pipeline has no slot encoder");
  detail::OmegaGuard<Scalar> guard(pipe.slots.get(), plan);

  const auto t_stage = std::chrono::steady_clock::now();
  const bool train_lora = plan.trains(ParamGroup::Lora);
  const ParamList<Scalar> all = pipe.params();
  const ParamList<Scalar> trainable = pipe.params_in(plan.trainable);
  if (trainable.empty()) throw ContractError("stage '" + plan.name + "' has no trainable tensors");
  std::vector<std::string> expected;
  if (plan.optimizer.lr != 0.0)
    for (const auto* p : trainable) expected.push_back(p->name);
  std::sort(expected.begin(), expected.end());

  Adam<Scalar> adam(plan.optimizer);
  Rng rng(plan.seed);
  const auto& prompts = train.of(plan.variant);
  const auto& valid_prompts = valid.of(plan.variant);
  const auto valid_idx = detail::spread_indices(valid.size(), plan.valid_limit);
  std::vector<prompt::HybridPrompt> vp;
  std::vector<data::Interaction> vrows;
  for (const auto k : valid_idx) {
    vp.push_back(valid_prompts[k]);
    vrows.push_back(valid.rows[k]);
  }

  StageResult result;
  result.plan = plan;
  result.best_valid_auc = -1.0;
  std::vector<Mat<Scalar>> best;
  auto snapshot = [&] {
    best.clear();
    for (auto* p : trainable) best.push_back(p->value);
  };
  auto restore = [&] {
    for (std::size_t k = 0; k < trainable.size(); ++k) trainable[k]->value = best[k];
    if (pipe.slots) pipe.slots->refresh();
  };
  auto save = [&] {
    if (plan.checkpoint)
      checkpoint::save_params(*plan.checkpoint, trainable,
                              {{"stage", plan.name}, {"best_epoch", result.best_epoch}, {"valid_auc", result.best_valid_auc}});
  };
  snapshot();

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  int since_best = 0;
  for (int epoch = 0; epoch < plan.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::vector<double> batch_losses;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(plan.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(plan.batch_size));
      zero_grads(trainable);
      const Scalar inv_b = Scalar(1) / static_cast<Scalar>(end - start);
      double batch_loss = 0.0;
      for (std::size_t n = start; n < end; ++n) {
        const auto k = order[n];
        const auto& p = prompts[k];
        const auto seq = prompt::hybrid_encode(p, pipe.slots.get(), pipe.model);
        lm::TransformerCache<Scalar> cache;
        const Mat<Scalar> hidden = pipe.model.forward(seq.rows, &pipe.lora, train_lora ? &rng : nullptr, cache);
        const Scalar margin = pipe.model.answer_margin(hidden);
        const double yhat = static_cast<double>(sigmoid(margin));
        const int y = train.rows[k].label;
        batch_loss += bce_loss(yhat, y);
        const Scalar g = (static_cast<Scalar>(yhat) - static_cast<Scalar>(y)) * inv_b;
        const Mat<Scalar> dinputs = pipe.model.backward(pipe.model.answer_margin_grad(hidden, g), cache, &pipe.lora,
                                                        GradFlags{false, train_lora});
        if (slot_groups) prompt::hybrid_backward(p, dinputs, *pipe.slots);
      }
      if (slot_groups) pipe.slots->flush_backward();
      if (!std::isfinite(batch_loss)) {
        restore();
        save();
        throw TrainingError("stage '" + plan.name + "' produced a non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += batch_loss;
      batch_losses.push_back(batch_loss / static_cast<double>(end - start));

      const bool audit = plan.audit_every > 0 && result.steps % plan.audit_every == 0;
      std::vector<std::uint64_t> before;
      if (audit) before = checksums(all);
      adam.step(trainable);
      if (plan.trains(ParamGroup::Collab)) pipe.slots->refresh();
      if (audit) {
        const auto after = checksums(all);
        AuditRecord r;
        r.stage = plan.name;
        r.step = result.steps;
        r.expected = expected;
        for (std::size_t k = 0; k < all.size(); ++k)
          if (before[k] != after[k]) r.changed.push_back(all[k]->name);
        std::sort(r.changed.begin(), r.changed.end());
        r.ok = r.changed == r.expected;
        result.audit.push_back(std::move(r));
      }
      ++result.steps;
    }

    EpochLog log;
    log.stage = plan.name;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(train.size());
    const std::size_t q = std::max<std::size_t>(1, batch_losses.size() / 4);
    log.loss_first_quarter = std::accumulate(batch_losses.begin(), batch_losses.begin() + static_cast<long>(q), 0.0) /
                             static_cast<double>(q);
    log.loss_last_quarter = std::accumulate(batch_losses.end() - static_cast<long>(q), batch_losses.end(), 0.0) /
                            static_cast<double>(q);
    if (!vp.empty()) {
      try {
        log.valid_auc = eval::auc(predict(pipe, vp, vrows));
      } catch (const UndefinedMetricError&) {
        log.valid_auc = 0.5;
      }
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);

    if (vp.empty() || log.valid_auc > result.best_valid_auc) {
      result.best_valid_auc = log.valid_auc;
      result.best_epoch = epoch;
      since_best = 0;
      snapshot();
    } else if (++since_best >= plan.patience) {
      break;
    }
  }
  restore();
  save();
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_stage).count();
  return result;
}

struct StrategyResult {
  std::vector<StageResult> stages;

  bool audit_ok() const {
    return std::all_of(stages.begin(), stages.end(), [](const StageResult& s) { return s.audit_ok(); });
  }
  double seconds() const {
    double t = 0.0;
    for (const auto& s : stages) t += s.seconds;
    return t;
  }
};

/// Executes the strategy's stage structure on `pipe`. T2 re-initializes the
/// collaborative encoder before step 2.
template <typename Scalar>
StrategyResult run_strategy(Pipeline<Scalar>& pipe, const StrategyOptions& opts, const LabeledPrompts& train,
                            const LabeledPrompts& valid) {
  StrategyResult out;
  for (const auto& plan : make_plans(opts)) {
    if (plan.stage == Stage::Step2 && opts.strategy == Strategy::T2) {
      auto* c = dynamic_cast<cie::CieModule<Scalar>*>(pipe.slots.get());
      if (!c) throw ContractError("strategy T2 needs a CIE module");
      Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
      c->encoder().reinitialize(rng);
      c->refresh();
    }
    out.stages.push_back(run_stage(pipe, plan, train, valid));
  }
  return out;
}

/// Variant used for inference by a trained model.
inline prompt::Variant inference_variant(Model m) {
  return m == Model::TextOnly ? prompt::Variant::TextOnly : prompt::Variant::Full;
}

}  // namespace collm::train
