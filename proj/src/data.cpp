#include "collm/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace collm::data {

const std::string& Catalog::title(ItemId item) const {
  if (item < 0 || static_cast<std::size_t>(item) >= titles_.size())
    throw CatalogError("no title for item " + std::to_string(item));
  const auto& t = titles_[static_cast<std::size_t>(item)];
  if (t.empty()) throw CatalogError("empty title for item " + std::to_string(item));
  return t;
}

int binarize(double rating, double threshold) {
  if (!(rating >= 1.0 && rating <= 5.0))
    throw InputDomainError("rating " + std::to_string(rating) + " outside [1,5]");
  return rating > threshold ? 1 : 0;
}

std::vector<Interaction> kcore_filter(const std::vector<Interaction>& interactions, int k) {
  if (k < 1) throw InputDomainError("k-core requires k >= 1");
  std::vector<bool> alive(interactions.size(), true);
  std::unordered_map<UserId, int> udeg;
  std::unordered_map<ItemId, int> ideg;
  for (const auto& x : interactions) {
    ++udeg[x.user];
    ++ideg[x.item];
  }
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t n = 0; n < interactions.size(); ++n) {
      if (!alive[n]) continue;
      const auto& x = interactions[n];
      if (udeg[x.user] < k || ideg[x.item] < k) {
        alive[n] = false;
        --udeg[x.user];
        --ideg[x.item];
        changed = true;
      }
    }
  }
  std::vector<Interaction> out;
  for (std::size_t n = 0; n < interactions.size(); ++n)
    if (alive[n]) out.push_back(interactions[n]);
  return out;
}

TemporalSplit temporal_split(const std::vector<Interaction>& interactions, Timestamp t1, Timestamp t2) {
  if (!(t1 < t2)) throw InputDomainError("temporal_split requires t1 < t2");
  TemporalSplit s;
  s.t1 = t1;
  s.t2 = t2;
  for (const auto& x : interactions) {
    if (x.timestamp <= t1)
      s.train.push_back(x);
    else if (x.timestamp <= t2)
      s.valid.push_back(x);
    else
      s.test.push_back(x);
  }
  return s;
}

WarmColdPartition warm_cold_partition(const TemporalSplit& split, int min_count, bool conjunctive) {
  if (min_count < 1) throw InputDomainError("min_count must be >= 1");
  std::unordered_map<UserId, int> ucount;
  std::unordered_map<ItemId, int> icount;
  for (const auto& x : split.train) {
    ++ucount[x.user];
    ++icount[x.item];
  }
  WarmColdPartition p;
  p.min_count = min_count;
  p.conjunctive = conjunctive;
  p.is_warm.reserve(split.test.size());
  for (const auto& x : split.test) {
    const auto u = ucount.find(x.user);
    const auto i = icount.find(x.item);
    const bool user_ok = u != ucount.end() && u->second >= min_count;
    const bool item_ok = i != icount.end() && i->second >= min_count;
    const bool warm = conjunctive ? (user_ok && item_ok) : (user_ok || item_ok);
    p.is_warm.push_back(warm);
    (warm ? p.warm : p.cold).push_back(x);
  }
  return p;
}

namespace {

void keep_latest(std::vector<std::pair<Timestamp, ItemId>>& rows, int max_len, History& h) {
  std::sort(rows.begin(), rows.end());
  const std::size_t start = rows.size() > static_cast<std::size_t>(max_len)
                                ? rows.size() - static_cast<std::size_t>(max_len)
                                : 0;
  for (std::size_t k = start; k < rows.size(); ++k) h.items.emplace_back(rows[k].second, rows[k].first);
}

}  // namespace

History build_history(UserId user, Timestamp target_timestamp, const std::vector<Interaction>& train,
                      int max_len) {
  if (max_len < 1) throw InputDomainError("history max_len must be >= 1");
  std::vector<std::pair<Timestamp, ItemId>> rows;
  for (const auto& x : train)
    if (x.user == user && x.label == 1 && x.timestamp < target_timestamp) rows.emplace_back(x.timestamp, x.item);
  History h;
  h.user = user;
  h.max_len = max_len;
  keep_latest(rows, max_len, h);
  return h;
}

HistoryIndex::HistoryIndex(const std::vector<Interaction>& train, std::size_t num_users)
    : by_user_(num_users) {
  for (const auto& x : train) {
    if (x.label != 1) continue;
    if (x.user < 0 || static_cast<std::size_t>(x.user) >= num_users)
      throw IdRangeError("history index: user " + std::to_string(x.user) + " out of range");
    by_user_[static_cast<std::size_t>(x.user)].emplace_back(x.timestamp, x.item);
  }
  for (auto& rows : by_user_) std::sort(rows.begin(), rows.end());
}

History HistoryIndex::query(UserId user, Timestamp target_timestamp, int max_len) const {
  if (max_len < 1) throw InputDomainError("history max_len must be >= 1");
  History h;
  h.user = user;
  h.max_len = max_len;
  if (user < 0 || static_cast<std::size_t>(user) >= by_user_.size()) return h;
  const auto& rows = by_user_[static_cast<std::size_t>(user)];
  const auto end = std::lower_bound(rows.begin(), rows.end(),
                                    std::make_pair(target_timestamp, std::numeric_limits<ItemId>::min()));
  const auto n = static_cast<std::size_t>(end - rows.begin());
  const std::size_t start = n > static_cast<std::size_t>(max_len) ? n - static_cast<std::size_t>(max_len) : 0;
  for (std::size_t k = start; k < n; ++k) h.items.emplace_back(rows[k].second, rows[k].first);
  return h;
}

int average_user_interactions(const std::vector<Interaction>& train) {
  std::unordered_map<UserId, int> counts;
  for (const auto& x : train) ++counts[x.user];
  if (counts.empty()) return 1;
  const double avg = static_cast<double>(train.size()) / static_cast<double>(counts.size());
  return std::max(1, static_cast<int>(std::lround(avg)));
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  if (line.find("::") != std::string::npos) {
    std::size_t pos = 0;
    while (true) {
      const auto next = line.find("::", pos);
      out.push_back(line.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
  } else {
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) out.push_back(field);
  }
  return out;
}

/// Titles in legacy dumps are often Latin-1; re-encode anything that is not UTF-8.
std::string ensure_utf8(const std::string& s) {
  bool valid = true;
  for (std::size_t k = 0; k < s.size() && valid;) {
    const auto c = static_cast<unsigned char>(s[k]);
    const int extra = c < 0x80 ? 0 : (c >> 5) == 0x6 ? 1 : (c >> 4) == 0xe ? 2 : (c >> 3) == 0x1e ? 3 : -1;
    if (extra < 0 || k + static_cast<std::size_t>(extra) >= s.size() + (extra == 0 ? 1 : 0)) {
      valid = extra == 0;
      break;
    }
    for (int j = 1; j <= extra && valid; ++j)
      valid = (static_cast<unsigned char>(s[k + static_cast<std::size_t>(j)]) >> 6) == 0x2;
    k += static_cast<std::size_t>(extra) + 1;
  }
  if (valid) return s;
  std::string out;
  for (const char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80) {
      out.push_back(ch);
    } else {
      out.push_back(static_cast<char>(0xc0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
    }
  }
  return out;
}

std::string strip_cr(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

template <typename T>
T parse_number(const std::string& s, const std::string& what, std::size_t line_no) {
  T value{};
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last)
    throw DataError("line " + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
  return value;
}

}  // namespace

std::vector<RawRating> read_ratings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open ratings file " + path.string());
  std::vector<RawRating> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() < 4) throw DataError("line " + std::to_string(line_no) + ": expected 4 fields");
    RawRating r;
    r.user = f[0];
    r.item = f[1];
    r.rating = parse_number<double>(f[2], "rating", line_no);
    r.timestamp = parse_number<Timestamp>(f[3], "timestamp", line_no);
    out.push_back(std::move(r));
  }
  return out;
}

std::unordered_map<std::string, std::string> read_titles(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open titles file " + path.string());
  std::unordered_map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() < 2) throw DataError("titles line " + std::to_string(line_no) + ": expected 2 fields");
    out[f[0]] = ensure_utf8(f[1]);
  }
  return out;
}

std::int32_t IdMap::intern(const std::string& id) {
  const auto it = index.find(id);
  if (it != index.end()) return it->second;
  const auto n = static_cast<std::int32_t>(raw.size());
  raw.push_back(id);
  index.emplace(id, n);
  return n;
}

std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>> reindex(std::vector<Interaction>& interactions) {
  std::set<std::int32_t> users, items;
  for (const auto& x : interactions) {
    users.insert(x.user);
    items.insert(x.item);
  }
  std::vector<std::int32_t> old_users(users.begin(), users.end());
  std::vector<std::int32_t> old_items(items.begin(), items.end());
  std::unordered_map<std::int32_t, std::int32_t> umap, imap;
  for (std::size_t k = 0; k < old_users.size(); ++k) umap[old_users[k]] = static_cast<std::int32_t>(k);
  for (std::size_t k = 0; k < old_items.size(); ++k) imap[old_items[k]] = static_cast<std::int32_t>(k);
  for (auto& x : interactions) {
    x.user = umap.at(x.user);
    x.item = imap.at(x.item);
  }
  return {old_users, old_items};
}

PreparedData prepare(const std::vector<RawRating>& ratings,
                     const std::unordered_map<std::string, std::string>& titles,
                     const PrepareOptions& opts) {
  IdMap raw_users, raw_items;
  std::vector<Interaction> rows;
  rows.reserve(ratings.size());
  for (const auto& r : ratings) {
    if (opts.t0 && r.timestamp < *opts.t0) continue;
    Interaction x;
    x.user = raw_users.intern(r.user);
    x.item = raw_items.intern(r.item);
    x.rating = r.rating;
    x.timestamp = r.timestamp;
    x.label = binarize(r.rating, opts.threshold);
    rows.push_back(x);
  }
  rows = kcore_filter(rows, opts.kcore);
  // Stable chronological order so split lists are deterministic.
  std::stable_sort(rows.begin(), rows.end(), [](const Interaction& a, const Interaction& b) {
    return a.timestamp < b.timestamp;
  });
  const auto [old_users, old_items] = reindex(rows);

  PreparedData out;
  for (auto u : old_users) out.users.intern(raw_users.raw[static_cast<std::size_t>(u)]);
  std::vector<std::string> catalog;
  for (auto i : old_items) {
    const auto& raw = raw_items.raw[static_cast<std::size_t>(i)];
    out.items.intern(raw);
    const auto t = titles.find(raw);
    if (t == titles.end() || t->second.empty()) throw CatalogError("missing title for item '" + raw + "'");
    catalog.push_back(t->second);
  }
  out.catalog = Catalog(std::move(catalog));
  out.split = temporal_split(rows, opts.t1, opts.t2);
  return out;
}

// ---------------------------------------------------------------------------
// Civil-date helpers (proleptic Gregorian, UTC).

namespace {

std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp + (mp < 10 ? 3 : -9);
  y += m <= 2;
}

unsigned days_in_month(std::int64_t y, unsigned m) {
  static const unsigned dm[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  if (m == 2 && ((y % 4 == 0 && y % 100 != 0) || y % 400 == 0)) return 29;
  return dm[m - 1];
}

Timestamp minus_months(Timestamp ts, int months) {
  const std::int64_t day = ts >= 0 ? ts / 86400 : (ts - 86399) / 86400;
  const std::int64_t secs = ts - day * 86400;
  std::int64_t y;
  unsigned m, d;
  civil_from_days(day, y, m, d);
  std::int64_t total = y * 12 + (m - 1) - months;
  const std::int64_t ny = total >= 0 ? total / 12 : (total - 11) / 12;
  const unsigned nm = static_cast<unsigned>(total - ny * 12) + 1;
  const unsigned nd = std::min(d, days_in_month(ny, nm));
  return days_from_civil(ny, nm, nd) * 86400 + secs;
}

}  // namespace

MonthWindow month_window(Timestamp last_timestamp, int train_months, int valid_months, int test_months) {
  MonthWindow w{};
  w.t2 = minus_months(last_timestamp, test_months);
  w.t1 = minus_months(w.t2, valid_months);
  w.t0 = minus_months(w.t1, train_months);
  return w;
}

// ---------------------------------------------------------------------------

void write_interactions(const std::filesystem::path& path, const std::vector<Interaction>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[64];
  for (const auto& x : rows) {
    auto res = std::to_chars(buf, buf + sizeof(buf), x.rating);
    out << x.user << '\t' << x.item << '\t' << std::string(buf, res.ptr) << '\t' << x.timestamp << '\t'
        << x.label << '\n';
  }
}

std::vector<Interaction> read_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Interaction> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 5) throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 5 fields");
    Interaction x;
    x.user = parse_number<UserId>(f[0], "user", line_no);
    x.item = parse_number<ItemId>(f[1], "item", line_no);
    x.rating = parse_number<double>(f[2], "rating", line_no);
    x.timestamp = parse_number<Timestamp>(f[3], "timestamp", line_no);
    x.label = parse_number<int>(f[4], "label", line_no);
    if (x.user < 0 || x.item < 0 || (x.label != 0 && x.label != 1))
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": invalid record");
    rows.push_back(x);
  }
  return rows;
}

std::string stats_json(const TemporalSplit& split, std::size_t num_users, std::size_t num_items) {
  auto positives = [](const std::vector<Interaction>& v) {
    std::size_t n = 0;
    for (const auto& x : v) n += static_cast<std::size_t>(x.label);
    return n;
  };
  nlohmann::ordered_json j;
  j["train"] = split.train.size();
  j["valid"] = split.valid.size();
  j["test"] = split.test.size();
  j["users"] = num_users;
  j["items"] = num_items;
  j["t1"] = split.t1;
  j["t2"] = split.t2;
  j["train_positives"] = positives(split.train);
  j["valid_positives"] = positives(split.valid);
  j["test_positives"] = positives(split.test);
  return j.dump(2);
}

void write_split_dir(const std::filesystem::path& dir, const PreparedData& data) {
  std::filesystem::create_directories(dir);
  write_interactions(dir / "train.tsv", data.split.train);
  write_interactions(dir / "valid.tsv", data.split.valid);
  write_interactions(dir / "test.tsv", data.split.test);
  {
    std::ofstream out(dir / "titles.tsv");
    for (std::size_t k = 0; k < data.catalog.size(); ++k) out << k << '\t' << data.catalog.titles()[k] << '\n';
  }
  {
    std::ofstream out(dir / "users.tsv");
    for (std::size_t k = 0; k < data.users.size(); ++k) out << k << '\t' << data.users.raw[k] << '\n';
  }
  {
    std::ofstream out(dir / "items.tsv");
    for (std::size_t k = 0; k < data.items.size(); ++k) out << k << '\t' << data.items.raw[k] << '\n';
  }
  std::ofstream(dir / "stats.json") << stats_json(data.split, data.users.size(), data.items.size()) << '\n';
}

SplitDir read_split_dir(const std::filesystem::path& dir) {
  SplitDir out;
  out.split.train = read_interactions(dir / "train.tsv");
  out.split.valid = read_interactions(dir / "valid.tsv");
  out.split.test = read_interactions(dir / "test.tsv");
  const auto titles = read_titles(dir / "titles.tsv");
  std::vector<std::string> catalog(titles.size());
  for (const auto& [k, t] : titles) {
    std::size_t idx = 0;
    try {
      idx = std::stoul(k);
    } catch (const std::exception&) {
      throw DataError("titles.tsv: non-numeric item index '" + k + "'");
    }
    if (idx >= catalog.size()) throw DataError("titles.tsv: item index out of range");
    catalog[idx] = t;
  }
  out.catalog = Catalog(std::move(catalog));
  out.num_items = out.catalog.size();
  std::size_t users = 0;
  {
    std::ifstream in(dir / "users.tsv");
    std::string line;
    while (std::getline(in, line))
      if (!strip_cr(line).empty()) ++users;
  }
  for (const auto* part : {&out.split.train, &out.split.valid, &out.split.test})
    for (const auto& x : *part) {
      users = std::max(users, static_cast<std::size_t>(x.user) + 1);
      if (static_cast<std::size_t>(x.item) >= out.num_items)
        throw CatalogError("item " + std::to_string(x.item) + " has no title");
    }
  out.num_users = users;
  std::ifstream stats(dir / "stats.json");
  if (stats) {
    const auto j = nlohmann::json::parse(stats, nullptr, false);
    if (!j.is_discarded()) {
      out.split.t1 = j.value("t1", Timestamp{0});
      out.split.t2 = j.value("t2", Timestamp{0});
    }
  }
  return out;
}

}  // namespace collm::data
