#pragma once

// Small end-to-end pipelines on synthetic data, shared by the training tests and
// the acceptance binary.

#include "collm/harness.hpp"

namespace fixture {

using namespace collm;

struct WorldOptions {
  harness::SyntheticSpec spec;
  int d1 = 8;            // collaborative width
  int d2 = 16;           // language-model width
  int layers = 1;
  int heads = 2;
  int lm_pretrain_steps = 0;
  int history_len = 5;
  double collab_lr = 1e-2;
  int collab_epochs = 0;  // 0 keeps the random encoder
  train::Model model = train::Model::CoLLM;
  std::uint64_t seed = 1;
};

struct World {
  harness::Dataset ds;
  std::vector<bool> test_is_warm;
  train::LabeledPrompts train, valid, test;
  train::Pipeline<Real> pipe;
};

inline World make_world(const WorldOptions& o) {
  World w;
  harness::DatasetConfig dc;
  dc.synthetic = o.spec;
  w.ds = harness::load_dataset(dc);
  w.test_is_warm = data::warm_cold_partition(w.ds.split, 3).is_warm;
  const data::HistoryIndex index(w.ds.split.train, w.ds.num_users);
  const auto train_samples = harness::make_samples(w.ds.split.train, w.ds, index, o.history_len);
  const auto valid_samples = harness::make_samples(w.ds.split.valid, w.ds, index, o.history_len);
  const auto test_samples = harness::make_samples(w.ds.split.test, w.ds, index, o.history_len);

  auto tok = lm::Tokenizer::build(prompt::vocabulary_corpus(w.ds.catalog));
  lm::TransformerOptions to;
  to.vocab_size = static_cast<int>(tok.size());
  to.d_model = o.d2;
  to.layers = o.layers;
  to.heads = o.heads;
  Rng rng(o.seed);
  lm::Transformer<Real> model(to, rng);
  if (o.lm_pretrain_steps > 0) {
    lm::PretrainOptions po;
    po.steps = o.lm_pretrain_steps;
    po.seed = o.seed;
    lm::lm_pretrain(model, prompt::pretraining_corpus(train_samples, tok, rng), po);
  }
  w.train = train::label_prompts(train_samples, tok);
  w.valid = train::label_prompts(valid_samples, tok);
  w.test = train::label_prompts(test_samples, tok);

  Lora<Real> lora(o.layers, o.d2, LoraOptions{}, rng);
  std::unique_ptr<cie::SlotEncoder<Real>> slots;
  if (o.model == train::Model::CoLLM) {
    collab::EncoderOptions eo;
    eo.dim = o.d1;
    eo.num_users = static_cast<int>(w.ds.num_users);
    eo.num_items = static_cast<int>(w.ds.num_items);
    auto enc = collab::make_encoder<Real>(eo, w.ds.split.train, rng);
    if (o.collab_epochs > 0) {
      collab::PretrainOptions po;
      po.lr = o.collab_lr;
      po.batch_size = 256;
      po.max_epochs = o.collab_epochs;
      po.seed = o.seed;
      collab::pretrain(*enc, w.ds.split, w.ds.num_users, po);
    }
    cie::CieOptions co;
    co.hidden_mult = 2;
    slots = std::make_unique<cie::CieModule<Real>>(std::move(enc), o.d2, co, rng);
  } else if (o.model == train::Model::UiToken) {
    slots = std::make_unique<cie::UiTokenTable<Real>>(static_cast<int>(w.ds.num_users),
                                                      static_cast<int>(w.ds.num_items), o.d2, rng);
  }
  w.pipe = train::Pipeline<Real>(std::move(model), std::move(tok), std::move(lora), std::move(slots));
  return w;
}

/// Tiny collaborative dataset for contract tests.
inline harness::SyntheticSpec tiny_spec(harness::Signal s = harness::Signal::Collaborative, std::uint64_t seed = 1) {
  harness::SyntheticSpec spec;
  spec.signal = s;
  spec.users = 20;
  spec.items = 20;
  spec.interactions = 200;
  spec.seed = seed;
  return spec;
}

/// Checksums grouped by parameter group.
inline std::map<ParamGroup, std::vector<std::uint64_t>> group_checksums(train::Pipeline<Real>& pipe) {
  std::map<ParamGroup, std::vector<std::uint64_t>> out;
  for (auto* p : pipe.params()) out[p->group].push_back(checksum(p->value));
  return out;
}

}  // namespace fixture
