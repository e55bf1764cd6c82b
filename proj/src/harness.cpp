#include "collm/harness.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <unordered_set>

namespace collm::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

const char* to_string(Signal s) {
  switch (s) {
    case Signal::Collaborative: return "collaborative";
    case Signal::Textual: return "textual";
    case Signal::Mixed: return "mixed";
  }
  return "?";
}

Signal signal_from_string(const std::string& s) {
  for (auto v : {Signal::Collaborative, Signal::Textual, Signal::Mixed})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown synthetic signal '" + s + "'");
}

// ---------------------------------------------------------------------------
// JSON helpers: defaults for missing keys, errors for unknown keys or bad types.

namespace {

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

json stage_json(const train::StageSettings& s) {
  return {{"lr", s.lr},
          {"weight_decay", s.weight_decay},
          {"batch_size", s.batch_size},
          {"max_epochs", s.max_epochs},
          {"patience", s.patience},
          {"audit_every", s.audit_every},
          {"valid_limit", s.valid_limit}};
}

train::StageSettings stage_from_json(const json& j, const std::string& where, train::StageSettings s) {
  check_keys(j, {"lr", "weight_decay", "batch_size", "max_epochs", "patience", "audit_every", "valid_limit"}, where);
  read(j, "lr", s.lr, where);
  read(j, "weight_decay", s.weight_decay, where);
  read(j, "batch_size", s.batch_size, where);
  read(j, "max_epochs", s.max_epochs, where);
  read(j, "patience", s.patience, where);
  read(j, "audit_every", s.audit_every, where);
  read(j, "valid_limit", s.valid_limit, where);
  return s;
}

}  // namespace

json to_json(const SyntheticSpec& s) {
  return {{"signal", to_string(s.signal)},
          {"users", s.users},
          {"items", s.items},
          {"latent_dim", s.latent_dim},
          {"interactions", s.interactions},
          {"noise", s.noise},
          {"temperature", s.temperature},
          {"text_logit", s.text_logit},
          {"cold_fraction", s.cold_fraction},
          {"cold_after", s.cold_after},
          {"time_span", s.time_span},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  const std::string w = "dataset.synthetic";
  check_keys(j, {"signal", "users", "items", "latent_dim", "interactions", "noise", "temperature", "text_logit",
                 "cold_fraction", "cold_after", "time_span", "seed"},
             w);
  SyntheticSpec s;
  std::string signal = to_string(s.signal);
  read(j, "signal", signal, w);
  s.signal = signal_from_string(signal);
  read(j, "users", s.users, w);
  read(j, "items", s.items, w);
  read(j, "latent_dim", s.latent_dim, w);
  read(j, "interactions", s.interactions, w);
  read(j, "noise", s.noise, w);
  read(j, "temperature", s.temperature, w);
  read(j, "text_logit", s.text_logit, w);
  read(j, "cold_fraction", s.cold_fraction, w);
  read(j, "cold_after", s.cold_after, w);
  read(j, "time_span", s.time_span, w);
  read(j, "seed", s.seed, w);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic data.

const std::vector<std::string>& positive_keywords() {
  static const std::vector<std::string> w{"Radiant", "Joyful", "Brilliant", "Charming"};
  return w;
}

const std::vector<std::string>& negative_keywords() {
  static const std::vector<std::string> w{"Gloomy", "Dreary", "Bleak", "Tedious"};
  return w;
}

namespace {

// Pronounceable consonant-vowel pseudo-words; they never contain a keyword.
std::string pseudo_word(Rng& rng) {
  static const char* consonants = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  std::uniform_int_distribution<int> syl(2, 3), c(0, 13), v(0, 4);
  std::string w;
  const int n = syl(rng);
  for (int k = 0; k < n; ++k) {
    w += consonants[c(rng)];
    w += vowels[v(rng)];
  }
  w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
  return w;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.users < 1 || spec.items < 1 || spec.latent_dim < 1 || spec.interactions < 0)
    throw ConfigError("synthetic spec: sizes must be positive");
  if (spec.temperature <= 0.0) throw ConfigError("synthetic spec: temperature must be positive");
  if (spec.cold_fraction < 0.0 || spec.cold_fraction >= 1.0 || spec.cold_after <= 0.0 || spec.cold_after >= 1.0)
    throw ConfigError("synthetic spec: cold fraction in [0,1) and cold_after in (0,1) required");
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SyntheticData out;
  out.num_users = spec.users;
  out.num_items = spec.items;

  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  out.user_factors.resize(spec.users, spec.latent_dim);
  out.item_factors.resize(spec.items, spec.latent_dim);
  for (Eigen::Index k = 0; k < out.user_factors.size(); ++k) out.user_factors.data()[k] = normal(rng) * scale;
  for (Eigen::Index k = 0; k < out.item_factors.size(); ++k) out.item_factors.data()[k] = normal(rng) * scale;

  const bool text = spec.signal != Signal::Collaborative;
  const bool collab = spec.signal != Signal::Textual;
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> kw(0, positive_keywords().size() - 1);
  std::vector<std::string> titles;
  std::unordered_set<std::string> seen;
  out.item_keyword.assign(static_cast<std::size_t>(spec.items), 0);
  for (int i = 0; i < spec.items; ++i) {
    std::string t;
    do {
      t = pseudo_word(rng) + " " + pseudo_word(rng);
    } while (!seen.insert(t).second);
    if (text) {
      const int polarity = coin(rng) ? 1 : -1;
      out.item_keyword[static_cast<std::size_t>(i)] = polarity;
      t += " " + (polarity > 0 ? positive_keywords() : negative_keywords())[kw(rng)];
    }
    titles.push_back(std::move(t));
  }
  out.catalog = data::Catalog(std::move(titles));

  out.cold_item.assign(static_cast<std::size_t>(spec.items), false);
  const auto n_cold = static_cast<int>(std::round(spec.cold_fraction * spec.items));
  {
    std::vector<int> ids(static_cast<std::size_t>(spec.items));
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    for (int k = 0; k < n_cold; ++k) out.cold_item[static_cast<std::size_t>(ids[static_cast<std::size_t>(k)])] = true;
  }

  // Each user is exposed to a uniformly drawn set of distinct items.
  const int per_user = std::min(spec.items, std::max(1, static_cast<int>(std::lround(
                                                           static_cast<double>(spec.interactions) / spec.users))));
  const auto cold_start = static_cast<Timestamp>(spec.cold_after * static_cast<double>(spec.time_span));
  std::uniform_int_distribution<Timestamp> any_time(0, spec.time_span - 1);
  std::uniform_int_distribution<Timestamp> late_time(cold_start + 1, spec.time_span - 1);
  std::vector<int> items(static_cast<std::size_t>(spec.items));
  std::iota(items.begin(), items.end(), 0);
  for (int u = 0; u < spec.users; ++u) {
    std::shuffle(items.begin(), items.end(), rng);
    for (int k = 0; k < per_user; ++k) {
      const int i = items[static_cast<std::size_t>(k)];
      double z = 0.0;
      if (collab) z += out.user_factors.row(u).dot(out.item_factors.row(i)) / spec.temperature;
      if (text) z += spec.text_logit * out.item_keyword[static_cast<std::size_t>(i)];
      z += spec.noise * normal(rng);
      const double p = 1.0 / (1.0 + std::exp(-z));
      data::Interaction x;
      x.user = u;
      x.item = i;
      x.label = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p ? 1 : 0;
      x.rating = x.label ? 5.0 : 1.0;
      x.timestamp = out.cold_item[static_cast<std::size_t>(i)] ? late_time(rng) : any_time(rng);
      out.interactions.push_back(x);
    }
  }
  std::stable_sort(out.interactions.begin(), out.interactions.end(),
                   [](const data::Interaction& a, const data::Interaction& b) { return a.timestamp < b.timestamp; });
  return out;
}

// ---------------------------------------------------------------------------
// Configuration.

json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  json dataset = {{"source", d.source},
                  {"synthetic", to_json(d.synthetic)},
                  {"train_until", d.train_until},
                  {"valid_until", d.valid_until},
                  {"ratings", d.ratings},
                  {"titles", d.titles},
                  {"split_dir", d.split_dir},
                  {"threshold", d.threshold},
                  {"kcore", d.kcore},
                  {"t1", d.t1},
                  {"t2", d.t2},
                  {"train_months", d.train_months},
                  {"valid_months", d.valid_months},
                  {"test_months", d.test_months},
                  {"history_len", d.history_len}};
  dataset["t0"] = d.t0 ? json(*d.t0) : json(nullptr);
  return {{"name", c.name},
          {"dataset", dataset},
          {"collab",
           {{"model", c.collab.model},
            {"dim", c.collab.dim},
            {"lr", c.collab.lr},
            {"weight_decay", c.collab.weight_decay},
            {"batch_size", c.collab.batch_size},
            {"epochs", c.collab.epochs},
            {"patience", c.collab.patience},
            {"lightgcn_layers", c.collab.lightgcn_layers},
            {"seed", c.collab.seed},
            {"checkpoint", c.collab.checkpoint}}},
          {"lm",
           {{"d2", c.lm.d2},
            {"layers", c.lm.layers},
            {"heads", c.lm.heads},
            {"ffn_mult", c.lm.ffn_mult},
            {"pretrain_steps", c.lm.pretrain_steps},
            {"pretrain_batch", c.lm.pretrain_batch},
            {"pretrain_lr", c.lm.pretrain_lr},
            {"pretrain_weight_decay", c.lm.pretrain_weight_decay},
            {"seed", c.lm.seed},
            {"checkpoint", c.lm.checkpoint}}},
          {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"dropout", c.lora.dropout}}},
          {"cie", {{"activation", c.cie.activation}, {"hidden_mult", c.cie.hidden_mult}, {"shared_mlp", c.cie.shared_mlp}}},
          {"train",
           {{"strategy", c.train.strategy},
            {"model", c.train.model},
            {"step1", stage_json(c.train.step1)},
            {"step2", stage_json(c.train.step2)},
            {"joint", stage_json(c.train.joint)},
            {"seed", c.train.seed}}},
          {"eval",
           {{"ndcg_cutoff", c.eval.ndcg_cutoff},
            {"warm_min_count", c.eval.warm_min_count},
            {"conjunctive", c.eval.conjunctive}}},
          {"output_root", c.output_root}};
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j, {"name", "dataset", "collab", "lm", "lora", "cie", "train", "eval", "output_root"}, "config");
  read(j, "name", c.name, "config");
  read(j, "output_root", c.output_root, "config");
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    const std::string w = "dataset";
    check_keys(d, {"source", "synthetic", "train_until", "valid_until", "ratings", "titles", "split_dir", "threshold",
                   "kcore", "t0", "t1", "t2", "train_months", "valid_months", "test_months", "history_len"},
               w);
    auto& o = c.dataset;
    read(d, "source", o.source, w);
    if (d.contains("synthetic")) o.synthetic = synthetic_spec_from_json(d["synthetic"]);
    read(d, "train_until", o.train_until, w);
    read(d, "valid_until", o.valid_until, w);
    read(d, "ratings", o.ratings, w);
    read(d, "titles", o.titles, w);
    read(d, "split_dir", o.split_dir, w);
    read(d, "threshold", o.threshold, w);
    read(d, "kcore", o.kcore, w);
    if (d.contains("t0") && !d["t0"].is_null()) {
      Timestamp t0 = 0;
      read(d, "t0", t0, w);
      o.t0 = t0;
    }
    read(d, "t1", o.t1, w);
    read(d, "t2", o.t2, w);
    read(d, "train_months", o.train_months, w);
    read(d, "valid_months", o.valid_months, w);
    read(d, "test_months", o.test_months, w);
    read(d, "history_len", o.history_len, w);
    if (o.source != "synthetic" && o.source != "raw" && o.source != "split_dir")
      throw ConfigError("dataset.source must be synthetic, raw or split_dir");
    if (o.history_len < 1) throw ConfigError("dataset.history_len must be >= 1");
  }
  if (j.contains("collab")) {
    const auto& m = j["collab"];
    const std::string w = "collab";
    check_keys(m, {"model", "dim", "lr", "weight_decay", "batch_size", "epochs", "patience", "lightgcn_layers", "seed",
                   "checkpoint"},
               w);
    auto& o = c.collab;
    read(m, "model", o.model, w);
    read(m, "dim", o.dim, w);
    read(m, "lr", o.lr, w);
    read(m, "weight_decay", o.weight_decay, w);
    read(m, "batch_size", o.batch_size, w);
    read(m, "epochs", o.epochs, w);
    read(m, "patience", o.patience, w);
    read(m, "lightgcn_layers", o.lightgcn_layers, w);
    read(m, "seed", o.seed, w);
    read(m, "checkpoint", o.checkpoint, w);
    collab::kind_from_string(o.model);
  }
  if (j.contains("lm")) {
    const auto& m = j["lm"];
    const std::string w = "lm";
    check_keys(m, {"d2", "layers", "heads", "ffn_mult", "pretrain_steps", "pretrain_batch", "pretrain_lr",
                   "pretrain_weight_decay", "seed", "checkpoint"},
               w);
    auto& o = c.lm;
    read(m, "d2", o.d2, w);
    read(m, "layers", o.layers, w);
    read(m, "heads", o.heads, w);
    read(m, "ffn_mult", o.ffn_mult, w);
    read(m, "pretrain_steps", o.pretrain_steps, w);
    read(m, "pretrain_batch", o.pretrain_batch, w);
    read(m, "pretrain_lr", o.pretrain_lr, w);
    read(m, "pretrain_weight_decay", o.pretrain_weight_decay, w);
    read(m, "seed", o.seed, w);
    read(m, "checkpoint", o.checkpoint, w);
    if (o.d2 < 1 || o.heads < 1 || o.d2 % o.heads != 0) throw ConfigError("lm.d2 must be a positive multiple of lm.heads");
  }
  if (j.contains("lora")) {
    const auto& m = j["lora"];
    check_keys(m, {"rank", "alpha", "dropout"}, "lora");
    read(m, "rank", c.lora.rank, "lora");
    read(m, "alpha", c.lora.alpha, "lora");
    read(m, "dropout", c.lora.dropout, "lora");
    if (c.lora.rank < 1 || c.lora.dropout < 0.0 || c.lora.dropout >= 1.0) throw ConfigError("invalid lora block");
  }
  if (j.contains("cie")) {
    const auto& m = j["cie"];
    check_keys(m, {"activation", "hidden_mult", "shared_mlp"}, "cie");
    read(m, "activation", c.cie.activation, "cie");
    read(m, "hidden_mult", c.cie.hidden_mult, "cie");
    read(m, "shared_mlp", c.cie.shared_mlp, "cie");
    try {
      activation_from_string(c.cie.activation);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("train")) {
    const auto& m = j["train"];
    check_keys(m, {"strategy", "model", "step1", "step2", "joint", "seed"}, "train");
    read(m, "strategy", c.train.strategy, "train");
    read(m, "model", c.train.model, "train");
    read(m, "seed", c.train.seed, "train");
    if (m.contains("step1")) c.train.step1 = stage_from_json(m["step1"], "train.step1", c.train.step1);
    if (m.contains("step2")) c.train.step2 = stage_from_json(m["step2"], "train.step2", c.train.step2);
    if (m.contains("joint")) c.train.joint = stage_from_json(m["joint"], "train.joint", c.train.joint);
    train::strategy_from_string(c.train.strategy);
    train::model_from_string(c.train.model);
  }
  if (j.contains("eval")) {
    const auto& m = j["eval"];
    check_keys(m, {"ndcg_cutoff", "warm_min_count", "conjunctive"}, "eval");
    read(m, "ndcg_cutoff", c.eval.ndcg_cutoff, "eval");
    read(m, "warm_min_count", c.eval.warm_min_count, "eval");
    read(m, "conjunctive", c.eval.conjunctive, "eval");
    if (c.eval.warm_min_count < 1) throw ConfigError("eval.warm_min_count must be >= 1");
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  const auto j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

fs::path data_root() {
  if (const char* r = std::getenv("COLLM_DATA_ROOT"); r && *r) return fs::path(r);
  return fs::current_path();
}

// ---------------------------------------------------------------------------
// Data.

namespace {

fs::path resolve(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : data_root() / path;
}

}  // namespace

Dataset load_dataset(const DatasetConfig& c) {
  Dataset ds;
  if (c.source == "synthetic") {
    if (!(0.0 < c.train_until && c.train_until < c.valid_until && c.valid_until < 1.0))
      throw ConfigError("dataset: need 0 < train_until < valid_until < 1");
    const auto syn = generate_synthetic(c.synthetic);
    const auto span = static_cast<double>(c.synthetic.time_span);
    ds.split = data::temporal_split(syn.interactions, static_cast<Timestamp>(c.train_until * span),
                                    static_cast<Timestamp>(c.valid_until * span));
    ds.catalog = syn.catalog;
    ds.num_users = static_cast<std::size_t>(syn.num_users);
    ds.num_items = static_cast<std::size_t>(syn.num_items);
  } else if (c.source == "raw") {
    if (c.ratings.empty() || c.titles.empty()) throw ConfigError("dataset: raw source needs ratings and titles");
    const auto ratings = data::read_ratings(resolve(c.ratings));
    const auto titles = data::read_titles(resolve(c.titles));
    data::PrepareOptions po;
    po.threshold = c.threshold;
    po.kcore = c.kcore;
    po.t0 = c.t0;
    po.t1 = c.t1;
    po.t2 = c.t2;
    if (c.train_months > 0) {
      Timestamp last = 0;
      for (const auto& r : ratings) last = std::max(last, r.timestamp);
      const auto w = data::month_window(last, c.train_months, c.valid_months, c.test_months);
      po.t0 = w.t0;
      po.t1 = w.t1;
      po.t2 = w.t2;
    }
    auto prepared = data::prepare(ratings, titles, po);
    ds.split = std::move(prepared.split);
    ds.catalog = std::move(prepared.catalog);
    ds.num_users = prepared.users.size();
    ds.num_items = prepared.items.size();
  } else {
    auto sd = data::read_split_dir(resolve(c.split_dir));
    ds.split = std::move(sd.split);
    ds.catalog = std::move(sd.catalog);
    ds.num_users = sd.num_users;
    ds.num_items = sd.num_items;
  }
  if (ds.split.train.empty()) throw DataError("dataset has an empty train split");
  return ds;
}

std::vector<prompt::PromptSample> make_samples(const std::vector<data::Interaction>& rows, const Dataset& ds,
                                               const data::HistoryIndex& index, int history_len) {
  std::vector<prompt::PromptSample> out;
  out.reserve(rows.size());
  for (const auto& x : rows) out.push_back(prompt::resolve(x, index.query(x.user, x.timestamp, history_len), ds.catalog));
  return out;
}

// ---------------------------------------------------------------------------
// Runs.

namespace {

std::string timestamp_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

fs::path fresh_run_dir(const fs::path& root, const std::string& stem) {
  fs::create_directories(root);
  fs::path dir = root / stem;
  for (int n = 1; fs::exists(dir); ++n) dir = root / (stem + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << s;
}

class Timer {
 public:
  Timer() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_;
};

template <typename F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(stage + ": " + e.what());
  } catch (const TrainingError& e) {
    throw TrainingError(stage + ": " + e.what());
  } catch (const CatalogError& e) {
    throw CatalogError(stage + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(stage + ": " + e.what());
  } catch (const ContractError& e) {
    throw ContractError(stage + ": " + e.what());
  } catch (const Error& e) {
    throw Error(stage + ": " + e.what());
  }
}

json block_json(const eval::MetricsReport& r) { return json::parse(eval::to_json(r)); }

}  // namespace

RunOutput run_experiment(const ExperimentConfig& config, const RunOptions& opts) {
  auto log = [&](const std::string& msg) {
    if (opts.log) opts.log(msg);
    else if (opts.verbose) std::cerr << "[collm] " << msg << '\n';
  };
  const auto strategy = train::strategy_from_string(config.train.strategy);
  const auto model_kind = train::model_from_string(config.train.model);
  const std::string hash = config_hash(config);
  const fs::path root = config.output_root.empty() ? data_root() / "runs" : resolve(config.output_root);
  RunOutput out;
  out.dir = fresh_run_dir(root, config.name + "-" + hash.substr(0, 12) + "-" + timestamp_now());
  write_text(out.dir / "config.json", to_json(config).dump(2) + "\n");
  log("run directory " + out.dir.string());
  ojson timings;
  ojson checkpoints = ojson::object();

  // prepare
  Timer t_prepare;
  const Dataset ds = in_stage("prepare", [&] { return load_dataset(config.dataset); });
  write_text(out.dir / "stats.json", data::stats_json(ds.split, ds.num_users, ds.num_items) + "\n");
  const auto partition = data::warm_cold_partition(ds.split, config.eval.warm_min_count, config.eval.conjunctive);
  const data::HistoryIndex index(ds.split.train, ds.num_users);
  timings["prepare"] = t_prepare.seconds();
  log("prepared " + std::to_string(ds.split.train.size()) + "/" + std::to_string(ds.split.valid.size()) + "/" +
      std::to_string(ds.split.test.size()) + " interactions");

  // pretrain-collab
  Timer t_collab;
  const fs::path ckpt_dir = out.dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  std::unique_ptr<collab::Encoder<Real>> encoder;
  const bool needs_collab = model_kind == train::Model::CoLLM;
  if (needs_collab) {
    encoder = in_stage("pretrain-collab", [&] {
      if (!config.collab.checkpoint.empty()) return collab::load_encoder<Real>(resolve(config.collab.checkpoint), ds.split.train);
      collab::EncoderOptions eo;
      eo.kind = collab::kind_from_string(config.collab.model);
      eo.dim = config.collab.dim;
      eo.num_users = static_cast<int>(ds.num_users);
      eo.num_items = static_cast<int>(ds.num_items);
      eo.lightgcn_layers = config.collab.lightgcn_layers;
      eo.sasrec_max_len = data::average_user_interactions(ds.split.train);
      Rng rng(config.collab.seed);
      auto enc = collab::make_encoder<Real>(eo, ds.split.train, rng);
      collab::PretrainOptions po;
      po.lr = config.collab.lr;
      po.weight_decay = config.collab.weight_decay;
      po.batch_size = config.collab.batch_size;
      po.max_epochs = config.collab.epochs;
      po.patience = config.collab.patience;
      po.seed = config.collab.seed;
      const auto res = collab::pretrain(*enc, ds.split, ds.num_users, po);
      log("collaborative encoder best valid AUC " + std::to_string(res.best_valid_auc) + " at epoch " +
          std::to_string(res.best_epoch));
      return enc;
    });
    collab::save_encoder(ckpt_dir / "collab.ckpt", *encoder);
    checkpoints["collab"] = checkpoint::file_hash(ckpt_dir / "collab.ckpt");
    const auto hist = collab::histories_for(*encoder, ds.split.test, index);
    out.collab_predictions = collab::predict(*encoder, ds.split.test, hist);
    out.collab_report = eval::report(out.collab_predictions, partition.is_warm, config.eval.ndcg_cutoff);
  }
  timings["pretrain_collab"] = t_collab.seconds();

  // samples and language model
  Timer t_lm;
  const int hl = config.dataset.history_len;
  const auto train_samples = make_samples(ds.split.train, ds, index, hl);
  const auto valid_samples = make_samples(ds.split.valid, ds, index, hl);
  const auto test_samples = make_samples(ds.split.test, ds, index, hl);
  auto [model, tokenizer] = in_stage("lm-pretrain", [&] {
    if (!config.lm.checkpoint.empty()) {
      auto loaded = lm::load_language_model<Real>(resolve(config.lm.checkpoint));
      return std::pair{std::move(loaded.model), std::move(loaded.tokenizer)};
    }
    auto tok = lm::Tokenizer::build(prompt::vocabulary_corpus(ds.catalog));
    lm::TransformerOptions to;
    to.vocab_size = static_cast<int>(tok.size());
    to.d_model = config.lm.d2;
    to.layers = config.lm.layers;
    to.heads = config.lm.heads;
    to.ffn_mult = config.lm.ffn_mult;
    Rng rng(config.lm.seed);
    lm::Transformer<Real> m(to, rng);
    const auto corpus = prompt::pretraining_corpus(train_samples, tok, rng);
    lm::PretrainOptions po;
    po.steps = config.lm.pretrain_steps;
    po.batch_size = config.lm.pretrain_batch;
    po.lr = config.lm.pretrain_lr;
    po.weight_decay = config.lm.pretrain_weight_decay;
    po.seed = config.lm.seed;
    const auto plog = lm::lm_pretrain(m, corpus, po);
    if (!plog.step_loss.empty())
      log("language model loss " + std::to_string(plog.step_loss.front()) + " -> " + std::to_string(plog.step_loss.back()));
    return std::pair{std::move(m), std::move(tok)};
  });
  lm::save_language_model(ckpt_dir / "lm.ckpt", model, tokenizer);
  checkpoints["lm"] = checkpoint::file_hash(ckpt_dir / "lm.ckpt");
  timings["lm_pretrain"] = t_lm.seconds();

  // train
  Timer t_train;
  const auto train_prompts = train::label_prompts(train_samples, tokenizer);
  const auto valid_prompts = train::label_prompts(valid_samples, tokenizer);
  const auto test_prompts = train::label_prompts(test_samples, tokenizer);
  Rng init_rng(config.train.seed);
  Lora<Real> lora(config.lm.layers, config.lm.d2, config.lora, init_rng);
  std::unique_ptr<cie::SlotEncoder<Real>> slots;
  if (model_kind == train::Model::CoLLM) {
    cie::CieOptions co;
    co.activation = activation_from_string(config.cie.activation);
    co.hidden_mult = config.cie.hidden_mult;
    co.shared_mlp = config.cie.shared_mlp;
    slots = std::make_unique<cie::CieModule<Real>>(std::move(encoder), config.lm.d2, co, init_rng);
  } else if (model_kind == train::Model::UiToken) {
    slots = std::make_unique<cie::UiTokenTable<Real>>(static_cast<int>(ds.num_users), static_cast<int>(ds.num_items),
                                                      config.lm.d2, init_rng);
  }
  train::Pipeline<Real> pipe(std::move(model), std::move(tokenizer), std::move(lora), std::move(slots));
  train::StrategyOptions so;
  so.strategy = strategy;
  so.model = model_kind;
  so.step1 = config.train.step1;
  so.step2 = config.train.step2;
  so.joint = config.train.joint;
  so.seed = config.train.seed;
  so.checkpoint_dir = ckpt_dir;

  std::ofstream epochs_csv(out.dir / "epochs.csv");
  epochs_csv << "stage,epoch,train_loss,loss_first_quarter,loss_last_quarter,valid_auc\n";
  std::ofstream audit_log(out.dir / "freezing_audit.jsonl");
  const auto plans = train::make_plans(so);
  out.audit_ok = true;
  ojson stage_json = ojson::array();
  ojson stage_metrics = ojson::object();
  for (const auto& plan : plans) {
    if (plan.stage == train::Stage::Step2 && strategy == train::Strategy::T2) {
      auto* c = dynamic_cast<cie::CieModule<Real>*>(pipe.slots.get());
      Rng rng(config.train.seed ^ 0x9e3779b97f4a7c15ULL);
      c->encoder().reinitialize(rng);
      c->refresh();
    }
    if (plan.stage == train::Stage::Step2 || plan.stage == train::Stage::Joint)
      for (auto* p : pipe.params_in(plan.trainable))
        out.trainable_step2_parameters += static_cast<std::size_t>(p->value.size());
    log("stage " + plan.name + " training " + std::to_string(train_prompts.size()) + " prompts");
    const auto res = in_stage(plan.name, [&] { return train::run_stage(pipe, plan, train_prompts, valid_prompts); });
    out.stages.push_back(plan.name);
    timings[plan.name] = res.seconds;
    for (const auto& e : res.epochs) {
      epochs_csv << e.stage << ',' << e.epoch << ',' << std::setprecision(9) << e.train_loss << ','
                 << e.loss_first_quarter << ',' << e.loss_last_quarter << ',' << e.valid_auc << '\n';
      log(plan.name + " epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.train_loss) + " valid AUC " +
          std::to_string(e.valid_auc) + " (" + std::to_string(e.seconds) + " s)");
    }
    for (const auto& r : res.audit) audit_log << train::to_json(r).dump() << '\n';
    out.audit_ok = out.audit_ok && res.audit_ok();
    out.audit_records += res.audit.size();
    stage_json.push_back(ojson::parse(train::to_json(plan).dump()));
    stage_json.back()["best_epoch"] = res.best_epoch;
    stage_json.back()["best_valid_auc"] = res.best_valid_auc;
    stage_json.back()["epochs_run"] = res.epochs.size();
    stage_json.back()["audit_ok"] = res.audit_ok();
    if (plan.checkpoint) checkpoints[plan.name] = checkpoint::file_hash(*plan.checkpoint);

    // The step-1 model alone is the text-only baseline.
    if (plan.stage == train::Stage::Step1 && model_kind != train::Model::TextOnly) {
      Timer t_eval;
      out.step1_predictions = train::predict(pipe, test_prompts.text_only, test_prompts.rows);
      out.step1_report = eval::report(out.step1_predictions, partition.is_warm, config.eval.ndcg_cutoff);
      timings["evaluate_step1"] = t_eval.seconds();
    }
  }
  timings["train"] = t_train.seconds();

  // evaluate
  Timer t_eval;
  const auto variant = train::inference_variant(model_kind);
  out.predictions = train::predict(pipe, test_prompts.of(variant), test_prompts.rows);
  out.report = eval::report(out.predictions, partition.is_warm, config.eval.ndcg_cutoff);
  if (model_kind == train::Model::TextOnly) {
    out.step1_predictions = out.predictions;
    out.step1_report = out.report;
  }
  timings["evaluate"] = t_eval.seconds();

  eval::write_predictions(out.dir / "predictions.tsv", out.predictions);
  ojson metrics;
  metrics["config_hash"] = hash;
  metrics["strategy"] = to_string(strategy);
  metrics["model"] = to_string(model_kind);
  metrics["stages"] = stage_json;
  metrics["test"] = block_json(out.report);
  if (out.step1_report) {
    metrics["step1_test"] = block_json(*out.step1_report);
    eval::write_predictions(out.dir / "predictions_step1.tsv", out.step1_predictions);
  }
  if (out.collab_report) {
    metrics["collab_test"] = block_json(*out.collab_report);
    eval::write_predictions(out.dir / "predictions_collab.tsv", out.collab_predictions);
    const auto ens = eval::ensemble_average(out.collab_predictions, out.predictions);
    metrics["ensemble_collab_final_test"] = block_json(eval::report(ens, partition.is_warm, config.eval.ndcg_cutoff));
    if (!out.step1_predictions.empty()) {
      const auto ens1 = eval::ensemble_average(out.collab_predictions, out.step1_predictions);
      metrics["ensemble_collab_step1_test"] = block_json(eval::report(ens1, partition.is_warm, config.eval.ndcg_cutoff));
    }
  }
  metrics["freezing_audit_ok"] = out.audit_ok;
  metrics["freezing_audit_records"] = out.audit_records;
  const std::string metrics_text = metrics.dump(2) + "\n";
  write_text(out.dir / "metrics.json", metrics_text);
  write_text(out.dir / "report.txt", eval::to_table(out.report));

  out.timings = json::parse(timings.dump());
  write_text(out.dir / "timings.json", timings.dump(2) + "\n");
  ojson prov;
  prov["config_hash"] = hash;
  prov["config_file_hash"] = checkpoint::file_hash(out.dir / "config.json");
  prov["metrics_hash"] = hex64(fnv1a(metrics_text));
  prov["predictions_hash"] = checkpoint::file_hash(out.dir / "predictions.tsv");
  prov["checkpoints"] = checkpoints;
  prov["stages"] = out.stages;
  write_text(out.dir / "provenance.json", prov.dump(2) + "\n");
  log("test AUC " + (out.report.all.auc ? std::to_string(*out.report.all.auc) : std::string("undefined")));
  return out;
}

std::vector<SweepVariant> ablation_variants() {
  return {{"w/o CIE", "default", "wo_cie"}, {"w/ UI-token", "default", "ui_token"}, {"CoLLM", "default", "collm"}};
}

std::string comparison_table(const std::vector<std::pair<std::string, eval::MetricsReport>>& rows) {
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) s << std::fixed << std::setprecision(4) << *v;
    else s << "-";
    return s.str();
  };
  std::ostringstream out;
  out << std::left << std::setw(14) << "Method";
  for (const char* h : {"AUC", "UAUC", "warm AUC", "warm UAUC", "cold AUC", "cold UAUC"}) out << std::setw(11) << h;
  out << '\n';
  for (const auto& [name, r] : rows) {
    out << std::left << std::setw(14) << name;
    for (const auto* b : {&r.all, &r.warm, &r.cold}) out << std::setw(11) << cell(b->auc) << std::setw(11) << cell(b->uauc);
    out << '\n';
  }
  return out.str();
}

SweepOutput sweep(const ExperimentConfig& base, const std::vector<SweepVariant>& variants, const RunOptions& opts) {
  if (variants.empty()) throw ConfigError("sweep: no variants");
  const fs::path root = base.output_root.empty() ? data_root() / "runs" : resolve(base.output_root);
  SweepOutput out;
  out.dir = fresh_run_dir(root, base.name + "-sweep-" + config_hash(base).substr(0, 12) + "-" + timestamp_now());
  // Shared pretrained components: the first variant that builds them publishes its checkpoints.
  ExperimentConfig shared = base;
  std::vector<std::pair<std::string, eval::MetricsReport>> rows;
  for (const auto& v : variants) {
    ExperimentConfig c = shared;
    c.name = base.name + "-" + v.model + "-" + v.strategy;
    c.train.strategy = v.strategy;
    c.train.model = v.model;
    c.output_root = out.dir.string();
    auto run = run_experiment(c, opts);
    if (shared.lm.checkpoint.empty()) shared.lm.checkpoint = (run.dir / "checkpoints" / "lm.ckpt").string();
    if (shared.collab.checkpoint.empty() && fs::exists(run.dir / "checkpoints" / "collab.ckpt"))
      shared.collab.checkpoint = (run.dir / "checkpoints" / "collab.ckpt").string();
    rows.emplace_back(v.label, run.report);
    out.runs.emplace_back(v.label, std::move(run));
  }
  out.table = comparison_table(rows);
  write_text(out.dir / "comparison.txt", out.table);
  return out;
}

}  // namespace collm::harness
