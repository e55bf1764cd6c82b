#include "collm/train.hpp"

namespace collm::train {

const char* to_string(Stage s) {
  switch (s) {
    case Stage::Step1: return "step1";
    case Stage::Step2: return "step2";
    case Stage::Joint: return "joint";
  }
  return "?";
}

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::Default: return "default";
    case Strategy::T1: return "t1";
    case Strategy::T2: return "t2";
    case Strategy::T3: return "t3";
  }
  return "?";
}

const char* to_string(Model m) {
  switch (m) {
    case Model::CoLLM: return "collm";
    case Model::TextOnly: return "wo_cie";
    case Model::UiToken: return "ui_token";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  for (auto v : {Strategy::Default, Strategy::T1, Strategy::T2, Strategy::T3})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown strategy '" + s + "'");
}

Model model_from_string(const std::string& s) {
  for (auto v : {Model::CoLLM, Model::TextOnly, Model::UiToken})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown model '" + s + "'");
}

void validate(const TrainPlan& plan) {
  if (plan.trains(ParamGroup::LmBase)) throw ContractError("stage '" + plan.name + "' would train the frozen LM");
  if (plan.trainable.empty()) throw ContractError("stage '" + plan.name + "' declares no trainable set");
  if (plan.batch_size < 1 || plan.max_epochs < 0 || plan.patience < 1)
    throw ConfigError("stage '" + plan.name + "': batch size and patience must be positive");
  const bool lora = plan.trains(ParamGroup::Lora);
  switch (plan.stage) {
    case Stage::Step1:
      if (plan.trainable.size() != 1 || !lora) throw ContractError("step1 trains exactly the LoRA adapter");
      if (plan.variant != prompt::Variant::TextOnly) throw ContractError("step1 uses text-only prompts");
      break;
    case Stage::Step2:
      if (lora) throw ContractError("step2 keeps the LoRA adapter frozen");
      if (plan.trains(ParamGroup::UiTokens) && plan.trainable.size() != 1)
        throw ContractError("the UI-token table trains alone in step2");
      if (plan.trains(ParamGroup::Collab) && !plan.trains(ParamGroup::Mapping))
        throw ContractError("step2 trains psi only together with phi");
      if (plan.variant != prompt::Variant::Full) throw ContractError("step2 uses full prompts");
      break;
    case Stage::Joint:
      if (!lora) throw ContractError("the joint stage trains the LoRA adapter");
      if (plan.variant != prompt::Variant::Full) throw ContractError("the joint stage uses full prompts");
      break;
  }
}

nlohmann::json to_json(const TrainPlan& plan) {
  nlohmann::json groups = nlohmann::json::array();
  for (auto g : plan.trainable) groups.push_back(collm::to_string(g));
  return {{"name", plan.name},
          {"stage", to_string(plan.stage)},
          {"trainable", groups},
          {"variant", prompt::to_string(plan.variant)},
          {"optimizer", plan.optimizer.decoupled ? "adamw" : "adam"},
          {"lr", plan.optimizer.lr},
          {"weight_decay", plan.optimizer.weight_decay},
          {"batch_size", plan.batch_size},
          {"max_epochs", plan.max_epochs},
          {"patience", plan.patience},
          {"seed", plan.seed}};
}

std::vector<TrainPlan> make_plans(const StrategyOptions& opts) {
  if (opts.model == Model::TextOnly && opts.strategy != Strategy::Default)
    throw ConfigError("the text-only model has a single step-1 stage; strategy must be default");
  if (opts.model == Model::UiToken && opts.strategy != Strategy::Default)
    throw ConfigError("the UI-token model supports only the default strategy");
  auto make = [&](std::string name, Stage stage, std::vector<ParamGroup> groups, prompt::Variant v,
                  const StageSettings& s, std::uint64_t salt) {
    TrainPlan p;
    p.name = std::move(name);
    p.stage = stage;
    p.trainable = std::move(groups);
    p.variant = v;
    p.optimizer = AdamOptions{s.lr, s.weight_decay, true};
    p.batch_size = s.batch_size;
    p.max_epochs = s.max_epochs;
    p.patience = s.patience;
    p.audit_every = s.audit_every;
    p.valid_limit = s.valid_limit;
    p.seed = opts.seed * 1000003ULL + salt;
    if (opts.checkpoint_dir) p.checkpoint = *opts.checkpoint_dir / (p.name + ".ckpt");
    return p;
  };
  using prompt::Variant;
  if (opts.strategy == Strategy::T3)
    return {make("joint", Stage::Joint, {ParamGroup::Lora, ParamGroup::Mapping}, Variant::Full, opts.joint, 3)};
  std::vector<TrainPlan> plans{make("step1", Stage::Step1, {ParamGroup::Lora}, Variant::TextOnly, opts.step1, 1)};
  if (opts.model == Model::TextOnly) return plans;
  std::vector<ParamGroup> omega;
  if (opts.model == Model::UiToken) omega = {ParamGroup::UiTokens};
  else if (opts.strategy == Strategy::Default) omega = {ParamGroup::Mapping};
  else omega = {ParamGroup::Mapping, ParamGroup::Collab};
  plans.push_back(make("step2", Stage::Step2, omega, Variant::Full, opts.step2, 2));
  return plans;
}

LabeledPrompts label_prompts(const std::vector<prompt::PromptSample>& samples, const lm::Tokenizer& tok) {
  LabeledPrompts out;
  out.rows.reserve(samples.size());
  for (const auto& s : samples) {
    out.rows.push_back(s.interaction);
    out.full.push_back(prompt::render_full(s, tok));
    out.text_only.push_back(prompt::render_text_only(s, tok));
  }
  return out;
}

nlohmann::json to_json(const AuditRecord& r) {
  return {{"stage", r.stage}, {"step", r.step}, {"expected", r.expected}, {"changed", r.changed}, {"ok", r.ok}};
}

}  // namespace collm::train
