// Command-line front end: data preparation, pretraining, training, evaluation,
// end-to-end runs and sweeps.

#include "collm/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace collm;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTraining = 4;

std::size_t users_in(const data::SplitDir& sd) { return sd.num_users; }

data::SplitDir load_split(const std::string& dir) { return data::read_split_dir(dir); }

harness::Dataset as_dataset(data::SplitDir sd) {
  harness::Dataset ds;
  ds.split = std::move(sd.split);
  ds.catalog = std::move(sd.catalog);
  ds.num_users = sd.num_users;
  ds.num_items = sd.num_items;
  return ds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"collm: collaborative embeddings injected into a small language model"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress output on stderr");

  // prepare-data
  auto* prep = app.add_subcommand("prepare-data", "Binarize, k-core filter and temporally split a rating log");
  std::string ratings, titles, out_dir;
  double threshold = 3.0;
  int kcore = 1;
  Timestamp t1 = 0, t2 = 0;
  std::optional<Timestamp> t0;
  std::vector<int> months;
  prep->add_option("--ratings", ratings, "user item rating timestamp (tab or '::' separated)")->required();
  prep->add_option("--titles", titles, "item title (tab or '::' separated)")->required();
  prep->add_option("--threshold", threshold, "Label is 1 iff rating > threshold")->check(CLI::IsMember({3.0, 4.0}));
  prep->add_option("--kcore", kcore, "Minimum interactions per user and item")->check(CLI::PositiveNumber);
  prep->add_option("--t0", t0, "Drop interactions before this timestamp");
  prep->add_option("--t1", t1, "Last train timestamp");
  prep->add_option("--t2", t2, "Last validation timestamp");
  prep->add_option("--months", months, "train valid test months ending at the last timestamp (overrides t0/t1/t2)")
      ->expected(3);
  prep->add_option("--out", out_dir, "Output split directory")->required();

  // pretrain-collab
  auto* pc = app.add_subcommand("pretrain-collab", "BCE-pretrain a collaborative encoder on a split directory");
  std::string split_dir, model = "mf", ckpt_out;
  int dim = 64, epochs = 50, batch = 1024, patience = 5, lgcn_layers = 2;
  double lr = 1e-3, wd = 1e-4;
  std::uint64_t seed = 0;
  pc->add_option("--split", split_dir, "Split directory")->required();
  pc->add_option("--model", model, "mf | lightgcn | sasrec")->check(CLI::IsMember({"mf", "lightgcn", "sasrec"}));
  pc->add_option("--dim", dim, "Representation size d1");
  pc->add_option("--lr", lr, "Adam learning rate");
  pc->add_option("--wd", wd, "L2 weight decay");
  pc->add_option("--seed", seed, "Random seed");
  pc->add_option("--epochs", epochs, "Maximum epochs");
  pc->add_option("--batch-size", batch, "Batch size");
  pc->add_option("--patience", patience, "Early-stopping patience on valid AUC");
  pc->add_option("--layers", lgcn_layers, "LightGCN propagation layers");
  pc->add_option("--out", ckpt_out, "Checkpoint path")->required();

  // lm-pretrain
  auto* lp = app.add_subcommand("lm-pretrain", "Pretrain the small language model on prompt text");
  int d2 = 64, layers = 2, heads = 2, steps = 300, history_len = 10;
  lp->add_option("--split", split_dir, "Split directory")->required();
  lp->add_option("--d2", d2, "Model width");
  lp->add_option("--layers", layers, "Transformer layers");
  lp->add_option("--heads", heads, "Attention heads");
  lp->add_option("--steps", steps, "Optimizer steps");
  lp->add_option("--seed", seed, "Random seed");
  lp->add_option("--history-len", history_len, "Titles per history list");
  lp->add_option("--out", ckpt_out, "Checkpoint path")->required();

  // train / run / sweep
  std::string config_path, strategy;
  auto* tr = app.add_subcommand("train", "Run a configured experiment with the given tuning strategy");
  tr->add_option("--config", config_path, "Experiment config (JSON)")->required();
  tr->add_option("--strategy", strategy, "default | t1 | t2 | t3")->check(CLI::IsMember({"default", "t1", "t2", "t3"}));
  std::string model_arm;
  tr->add_option("--model", model_arm, "collm | wo_cie | ui_token")->check(CLI::IsMember({"collm", "wo_cie", "ui_token"}));

  auto* run = app.add_subcommand("run", "prepare -> pretrain -> train -> evaluate from one config");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();

  auto* sw = app.add_subcommand("sweep", "Run several variants of one config and tabulate them");
  std::string grid = "ablation";
  sw->add_option("--config", config_path, "Experiment config (JSON)")->required();
  sw->add_option("--grid", grid, "ablation (w/o CIE, w/ UI-token, CoLLM) | strategies (Default, T1, T2, T3)")
      ->check(CLI::IsMember({"ablation", "strategies"}));

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Metrics report for a prediction file");
  std::string preds_path, report_out;
  int min_count = 3, cutoff = 0;
  bool disjunctive = false;
  ev->add_option("--predictions", preds_path, "user item score label (tab separated)")->required();
  ev->add_option("--split", split_dir, "Split directory (for the warm/cold partition)")->required();
  ev->add_option("--out", report_out, "Report JSON path")->required();
  ev->add_option("--min-count", min_count, "Warm threshold on train occurrences");
  ev->add_option("--ndcg-cutoff", cutoff, "NDCG cutoff, 0 = full list");
  ev->add_flag("--disjunctive", disjunctive, "Warm when user OR item is frequent");

  // synth
  auto* sy = app.add_subcommand("synth", "Write a synthetic rating log and catalog");
  harness::SyntheticSpec spec;
  std::string signal = "collaborative";
  sy->add_option("--signal", signal, "collaborative | textual | mixed")
      ->check(CLI::IsMember({"collaborative", "textual", "mixed"}));
  sy->add_option("--users", spec.users, "Users");
  sy->add_option("--items", spec.items, "Items");
  sy->add_option("--dim", spec.latent_dim, "Latent dimension");
  sy->add_option("--interactions", spec.interactions, "Approximate interaction count");
  sy->add_option("--noise", spec.noise, "Label logit noise");
  sy->add_option("--temperature", spec.temperature, "Latent score temperature");
  sy->add_option("--cold-fraction", spec.cold_fraction, "Share of items appearing only late");
  sy->add_option("--seed", spec.seed, "Random seed");
  sy->add_option("--out", out_dir, "Output directory (ratings.tsv, titles.tsv)")->required();

  // render
  auto* rd = app.add_subcommand("render", "Print one rendered prompt");
  std::size_t sample = 0;
  std::string variant = "full", part = "test";
  rd->add_option("--split", split_dir, "Split directory")->required();
  rd->add_option("--sample", sample, "Row index within the chosen part");
  rd->add_option("--part", part, "train | valid | test")->check(CLI::IsMember({"train", "valid", "test"}));
  rd->add_option("--variant", variant, "full | text_only")->check(CLI::IsMember({"full", "text_only"}));
  rd->add_option("--history-len", history_len, "Titles per history list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  harness::RunOptions ro;
  ro.verbose = verbose;
  try {
    if (*prep) {
      const auto raw = data::read_ratings(ratings);
      const auto title_map = data::read_titles(titles);
      data::PrepareOptions po;
      po.threshold = threshold;
      po.kcore = kcore;
      po.t0 = t0;
      po.t1 = t1;
      po.t2 = t2;
      if (!months.empty()) {
        Timestamp last = 0;
        for (const auto& r : raw) last = std::max(last, r.timestamp);
        const auto w = data::month_window(last, months[0], months[1], months[2]);
        po.t0 = w.t0;
        po.t1 = w.t1;
        po.t2 = w.t2;
      }
      if (po.t1 >= po.t2) throw ConfigError("need t1 < t2");
      const auto prepared = data::prepare(raw, title_map, po);
      data::write_split_dir(out_dir, prepared);
      std::cout << data::stats_json(prepared.split, prepared.users.size(), prepared.items.size()) << '\n';
    } else if (*pc) {
      auto sd = load_split(split_dir);
      collab::EncoderOptions eo;
      eo.kind = collab::kind_from_string(model);
      eo.dim = dim;
      eo.num_users = static_cast<int>(users_in(sd));
      eo.num_items = static_cast<int>(sd.num_items);
      eo.lightgcn_layers = lgcn_layers;
      eo.sasrec_max_len = data::average_user_interactions(sd.split.train);
      Rng rng(seed);
      auto enc = collab::make_encoder<Real>(eo, sd.split.train, rng);
      collab::PretrainOptions po;
      po.lr = lr;
      po.weight_decay = wd;
      po.batch_size = batch;
      po.max_epochs = epochs;
      po.patience = patience;
      po.seed = seed;
      const auto res = collab::pretrain(*enc, sd.split, sd.num_users, po);
      collab::save_encoder(ckpt_out, *enc, {{"best_epoch", res.best_epoch}, {"valid_auc", res.best_valid_auc}});
      const data::HistoryIndex index(sd.split.train, sd.num_users);
      const auto preds = collab::predict(*enc, sd.split.test, collab::histories_for(*enc, sd.split.test, index));
      const auto part_wc = data::warm_cold_partition(sd.split, 3);
      std::cout << "best valid AUC " << res.best_valid_auc << " at epoch " << res.best_epoch << "\n"
                << eval::to_table(eval::report(preds, part_wc.is_warm));
    } else if (*lp) {
      const auto ds = as_dataset(load_split(split_dir));
      const data::HistoryIndex index(ds.split.train, ds.num_users);
      const auto samples = harness::make_samples(ds.split.train, ds, index, history_len);
      auto tok = lm::Tokenizer::build(prompt::vocabulary_corpus(ds.catalog));
      lm::TransformerOptions to;
      to.vocab_size = static_cast<int>(tok.size());
      to.d_model = d2;
      to.layers = layers;
      to.heads = heads;
      Rng rng(seed);
      lm::Transformer<Real> m(to, rng);
      const auto corpus = prompt::pretraining_corpus(samples, tok, rng);
      lm::PretrainOptions po;
      po.steps = steps;
      po.seed = seed;
      const auto log = lm::lm_pretrain(m, corpus, po);
      lm::save_language_model(ckpt_out, m, tok);
      if (!log.step_loss.empty())
        std::cout << "loss " << log.step_loss.front() << " -> " << log.step_loss.back() << " in " << log.seconds
                  << " s\n";
    } else if (*tr || *run) {
      auto cfg = harness::load_config(config_path);
      if (!strategy.empty()) cfg.train.strategy = strategy;
      if (!model_arm.empty()) cfg.train.model = model_arm;
      const auto out = harness::run_experiment(cfg, ro);
      std::cout << "run directory: " << out.dir.string() << "\n" << eval::to_table(out.report);
    } else if (*sw) {
      const auto cfg = harness::load_config(config_path);
      std::vector<harness::SweepVariant> variants = harness::ablation_variants();
      if (grid == "strategies")
        variants = {{"Default", "default", "collm"}, {"T1", "t1", "collm"}, {"T2", "t2", "collm"}, {"T3", "t3", "collm"}};
      const auto out = harness::sweep(cfg, variants, ro);
      std::cout << "sweep directory: " << out.dir.string() << "\n" << out.table;
    } else if (*ev) {
      const auto preds = eval::read_predictions(preds_path);
      const auto sd = load_split(split_dir);
      const auto wc = data::warm_cold_partition(sd.split, min_count, !disjunctive);
      if (preds.size() != sd.split.test.size()) throw AlignmentError("prediction rows do not match the test split");
      for (std::size_t k = 0; k < preds.size(); ++k)
        if (preds[k].user != sd.split.test[k].user || preds[k].item != sd.split.test[k].item)
          throw AlignmentError("prediction row " + std::to_string(k) + " does not match the test split");
      const auto r = eval::report(preds, wc.is_warm, cutoff);
      std::ofstream(report_out) << eval::to_json(r) << '\n';
      std::cout << eval::to_table(r);
    } else if (*sy) {
      spec.signal = harness::signal_from_string(signal);
      const auto syn = harness::generate_synthetic(spec);
      fs::create_directories(out_dir);
      std::ofstream rf(fs::path(out_dir) / "ratings.tsv");
      for (const auto& x : syn.interactions)
        rf << 'u' << x.user << '\t' << 'i' << x.item << '\t' << x.rating << '\t' << x.timestamp << '\n';
      std::ofstream tf(fs::path(out_dir) / "titles.tsv");
      for (std::size_t k = 0; k < syn.catalog.size(); ++k) tf << 'i' << k << '\t' << syn.catalog.titles()[k] << '\n';
      std::cout << "wrote " << syn.interactions.size() << " interactions\n";
    } else if (*rd) {
      const auto ds = as_dataset(load_split(split_dir));
      const auto& rows = part == "train" ? ds.split.train : part == "valid" ? ds.split.valid : ds.split.test;
      if (sample >= rows.size()) throw IdRangeError("sample index out of range");
      const data::HistoryIndex index(ds.split.train, ds.num_users);
      const auto& x = rows[sample];
      const auto s = prompt::resolve(x, index.query(x.user, x.timestamp, history_len), ds.catalog);
      std::cout << prompt::render_text(s, prompt::variant_from_string(variant)) << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kExitTraining;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const CatalogError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const InputDomainError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const IdRangeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const AlignmentError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return 0;
}
