#include "collm/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace collm::eval {

namespace {

/// AUC with an explicit failure signal instead of an exception.
std::optional<double> try_auc(std::span<const Prediction> preds) {
  std::size_t pos = 0;
  for (const auto& p : preds) pos += static_cast<std::size_t>(p.label == 1);
  const std::size_t neg = preds.size() - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a].score < preds[b].score; });
  double rank_sum = 0.0;
  std::size_t k = 0;
  while (k < order.size()) {
    std::size_t j = k;
    while (j + 1 < order.size() && preds[order[j + 1]].score == preds[order[k]].score) ++j;
    const double avg_rank = 0.5 * static_cast<double>(k + j) + 1.0;  // 1-based
    for (std::size_t t = k; t <= j; ++t)
      if (preds[order[t]].label == 1) rank_sum += avg_rank;
    k = j + 1;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

std::map<UserId, std::vector<Prediction>> group_by_user(std::span<const Prediction> preds) {
  std::map<UserId, std::vector<Prediction>> groups;
  for (const auto& p : preds) groups[p.user].push_back(p);
  return groups;
}

bool has_both_classes(const std::vector<Prediction>& rows) {
  bool pos = false, neg = false;
  for (const auto& p : rows) (p.label == 1 ? pos : neg) = true;
  return pos && neg;
}

double user_ndcg(std::vector<Prediction> rows, int cutoff) {
  std::sort(rows.begin(), rows.end(), [](const Prediction& a, const Prediction& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  });
  const std::size_t n = cutoff > 0 ? std::min(rows.size(), static_cast<std::size_t>(cutoff)) : rows.size();
  double dcg = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    if (rows[j].label == 1) dcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
  std::size_t pos = 0;
  for (const auto& p : rows) pos += static_cast<std::size_t>(p.label == 1);
  double idcg = 0.0;
  for (std::size_t j = 0; j < std::min(pos, n); ++j) idcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

}  // namespace

double auc(std::span<const Prediction> preds) {
  const auto v = try_auc(preds);
  if (!v) throw UndefinedMetricError("AUC needs at least one positive and one negative label");
  return *v;
}

UserAveraged uauc(std::span<const Prediction> preds) {
  UserAveraged out;
  double total = 0.0;
  for (const auto& [user, rows] : group_by_user(preds)) {
    const auto v = try_auc(rows);
    if (!v) {
      ++out.skipped_users;
      continue;
    }
    total += *v;
    ++out.eligible_users;
  }
  if (out.eligible_users == 0) throw UndefinedMetricError("UAUC: no user has both a positive and a negative");
  out.value = total / static_cast<double>(out.eligible_users);
  return out;
}

UserAveraged ndcg(std::span<const Prediction> preds, int cutoff) {
  UserAveraged out;
  double total = 0.0;
  for (auto& [user, rows] : group_by_user(preds)) {
    if (!has_both_classes(rows)) {
      ++out.skipped_users;
      continue;
    }
    total += user_ndcg(rows, cutoff);
    ++out.eligible_users;
  }
  if (out.eligible_users == 0) throw UndefinedMetricError("NDCG: no user has both a positive and a negative");
  out.value = total / static_cast<double>(out.eligible_users);
  return out;
}

std::vector<Prediction> ensemble_average(std::span<const Prediction> a, std::span<const Prediction> b) {
  if (a.size() != b.size()) throw AlignmentError("ensemble inputs have different row counts");
  auto key = [](const Prediction& p) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(p.user)) << 32) |
           static_cast<std::uint32_t>(p.item);
  };
  std::unordered_map<std::uint64_t, std::size_t> index;
  for (std::size_t k = 0; k < b.size(); ++k)
    if (!index.emplace(key(b[k]), k).second) throw AlignmentError("duplicate (user, item) row in ensemble input");
  std::vector<Prediction> out;
  out.reserve(a.size());
  for (const auto& p : a) {
    const auto it = index.find(key(p));
    if (it == index.end())
      throw AlignmentError("row (" + std::to_string(p.user) + ", " + std::to_string(p.item) + ") missing");
    const auto& q = b[it->second];
    if (!(p.score >= 0.0 && p.score <= 1.0 && q.score >= 0.0 && q.score <= 1.0))
      throw InputDomainError("ensemble scores must lie in [0,1]");
    Prediction r = p;
    r.score = 0.5 * (p.score + q.score);
    out.push_back(r);
  }
  return out;
}

MetricBlock metric_block(std::span<const Prediction> preds, int ndcg_cutoff) {
  MetricBlock b;
  b.rows = preds.size();
  for (const auto& p : preds) b.positives += static_cast<std::size_t>(p.label == 1);
  if (preds.empty()) {
    b.undefined.push_back("empty subset");
    return b;
  }
  b.auc = try_auc(preds);
  if (!b.auc) b.undefined.push_back("auc: single-class subset");
  try {
    const auto u = uauc(preds);
    b.uauc = u.value;
    b.eligible_users = u.eligible_users;
    b.skipped_users = u.skipped_users;
    b.ndcg = ndcg(preds, ndcg_cutoff).value;
  } catch (const UndefinedMetricError&) {
    b.undefined.push_back("uauc/ndcg: no user with both classes");
    b.skipped_users = group_by_user(preds).size();
  }
  return b;
}

MetricsReport report(std::span<const Prediction> preds, const std::vector<bool>& is_warm, int ndcg_cutoff) {
  if (is_warm.size() != preds.size())
    throw AlignmentError("warm/cold mask has " + std::to_string(is_warm.size()) + " rows, predictions have " +
                         std::to_string(preds.size()));
  std::vector<Prediction> warm, cold;
  for (std::size_t k = 0; k < preds.size(); ++k) (is_warm[k] ? warm : cold).push_back(preds[k]);
  MetricsReport r;
  r.all = metric_block(preds, ndcg_cutoff);
  r.warm = metric_block(warm, ndcg_cutoff);
  r.cold = metric_block(cold, ndcg_cutoff);
  return r;
}

namespace {

nlohmann::ordered_json block_json(const MetricBlock& b) {
  nlohmann::ordered_json j;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  j["rows"] = b.rows;
  j["positives"] = b.positives;
  j["auc"] = opt(b.auc);
  j["uauc"] = opt(b.uauc);
  j["ndcg"] = opt(b.ndcg);
  j["eligible_users"] = b.eligible_users;
  j["skipped_users"] = b.skipped_users;
  j["undefined"] = b.undefined;
  return j;
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << *v;
  return s.str();
}

}  // namespace

std::string to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["all"] = block_json(r.all);
  j["warm"] = block_json(r.warm);
  j["cold"] = block_json(r.cold);
  return j.dump(2);
}

std::string to_table(const MetricsReport& r) {
  std::ostringstream s;
  s << std::left << std::setw(8) << "subset" << std::right << std::setw(8) << "rows" << std::setw(9) << "AUC"
    << std::setw(9) << "UAUC" << std::setw(9) << "NDCG" << std::setw(10) << "skipped" << '\n';
  for (const auto& [name, b] : {std::pair<const char*, const MetricBlock&>{"all", r.all}, {"warm", r.warm},
                                {"cold", r.cold}}) {
    s << std::left << std::setw(8) << name << std::right << std::setw(8) << b.rows << std::setw(9) << fmt(b.auc)
      << std::setw(9) << fmt(b.uauc) << std::setw(9) << fmt(b.ndcg) << std::setw(10) << b.skipped_users << '\n';
  }
  return s.str();
}

void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(9);
  for (const auto& p : preds) out << p.user << '\t' << p.item << '\t' << p.score << '\t' << p.label << '\n';
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open predictions " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::istringstream ss(line);
    Prediction p;
    if (!(ss >> p.user >> p.item >> p.score >> p.label) || (p.label != 0 && p.label != 1) || !std::isfinite(p.score))
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed prediction row");
    out.push_back(p);
  }
  return out;
}

}  // namespace collm::eval
