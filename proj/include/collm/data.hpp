#pragma once

// Rating-log ingestion, label binarization, k-core filtering, temporal splits,
// warm/cold partitions and per-user positive histories.

#include "collm/common.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace collm::data {

struct Interaction {
  UserId user = 0;
  ItemId item = 0;
  double rating = 0.0;
  Timestamp timestamp = 0;
  int label = 0;

  bool operator==(const Interaction&) const = default;
};

/// Dense item index -> title.
class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<std::string> titles) : titles_(std::move(titles)) {}

  /// Throws CatalogError for unknown ids or empty titles.
  const std::string& title(ItemId item) const;
  std::size_t size() const { return titles_.size(); }
  const std::vector<std::string>& titles() const { return titles_; }

 private:
  std::vector<std::string> titles_;
};

struct TemporalSplit {
  std::vector<Interaction> train, valid, test;
  Timestamp t1 = 0, t2 = 0;
};

struct WarmColdPartition {
  std::vector<Interaction> warm, cold;
  std::vector<bool> is_warm;  // aligned with split.test
  int min_count = 3;
  bool conjunctive = true;
};

struct History {
  UserId user = 0;
  std::vector<std::pair<ItemId, Timestamp>> items;  // oldest first
  int max_len = 10;

  bool empty() const { return items.empty(); }
  std::size_t size() const { return items.size(); }
};

/// 1 iff rating > threshold. Ratings outside [1,5] raise InputDomainError.
int binarize(double rating, double threshold);

/// Iteratively drops users and items with fewer than k interactions until fixpoint.
/// Ids are left untouched; call `reindex` afterwards.
std::vector<Interaction> kcore_filter(const std::vector<Interaction>& interactions, int k);

/// train = ts <= t1, valid = t1 < ts <= t2, test = ts > t2. Order within each list
/// follows the input order.
TemporalSplit temporal_split(const std::vector<Interaction>& interactions, Timestamp t1, Timestamp t2);

/// Classifies each test interaction as warm when its user and its item each occur
/// at least `min_count` times in train (or either, when `conjunctive` is false).
WarmColdPartition warm_cold_partition(const TemporalSplit& split, int min_count, bool conjunctive = true);

/// The most recent `max_len` positive train interactions of `user` strictly before
/// `target_timestamp`, oldest first.
History build_history(UserId user, Timestamp target_timestamp, const std::vector<Interaction>& train,
                      int max_len);

/// Per-user sorted positives for fast repeated `build_history` queries.
class HistoryIndex {
 public:
  HistoryIndex() = default;
  HistoryIndex(const std::vector<Interaction>& train, std::size_t num_users);

  History query(UserId user, Timestamp target_timestamp, int max_len) const;

 private:
  std::vector<std::vector<std::pair<Timestamp, ItemId>>> by_user_;
};

/// Average number of train interactions per user that appears in train (rounded, >= 1).
int average_user_interactions(const std::vector<Interaction>& train);

// ---------------------------------------------------------------------------
// Raw files.

struct RawRating {
  std::string user, item;
  double rating = 0.0;
  Timestamp timestamp = 0;
};

/// Reads `user item rating timestamp` records separated by tabs or by "::".
std::vector<RawRating> read_ratings(const std::filesystem::path& path);

/// Reads `item title [...]` records separated by tabs or by "::".
std::unordered_map<std::string, std::string> read_titles(const std::filesystem::path& path);

/// Dense index <-> raw id mapping.
struct IdMap {
  std::vector<std::string> raw;
  std::unordered_map<std::string, std::int32_t> index;

  std::int32_t intern(const std::string& id);
  std::size_t size() const { return raw.size(); }
};

struct PreparedData {
  TemporalSplit split;
  Catalog catalog;
  IdMap users, items;
};

struct PrepareOptions {
  double threshold = 3.0;
  int kcore = 1;
  std::optional<Timestamp> t0;  // drop interactions with ts < t0
  Timestamp t1 = 0, t2 = 0;
};

/// binarize -> window -> k-core -> reindex -> split.
PreparedData prepare(const std::vector<RawRating>& ratings,
                     const std::unordered_map<std::string, std::string>& titles,
                     const PrepareOptions& opts);

/// Assigns contiguous indices in ascending order of the existing ids.
/// Returns the old ids indexed by new id, for users and items.
std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>> reindex(std::vector<Interaction>& interactions);

/// Calendar-month window ending at the latest timestamp: {t0, t1, t2} such that
/// [t0, t1] spans `train_months`, (t1, t2] `valid_months`, (t2, end] `test_months`.
struct MonthWindow {
  Timestamp t0, t1, t2;
};
MonthWindow month_window(Timestamp last_timestamp, int train_months, int valid_months, int test_months);

// Split directory layout: train.tsv valid.tsv test.tsv titles.tsv users.tsv items.tsv stats.json

void write_interactions(const std::filesystem::path& path, const std::vector<Interaction>& rows);
std::vector<Interaction> read_interactions(const std::filesystem::path& path);

void write_split_dir(const std::filesystem::path& dir, const PreparedData& data);

struct SplitDir {
  TemporalSplit split;
  Catalog catalog;
  std::size_t num_users = 0, num_items = 0;
};
SplitDir read_split_dir(const std::filesystem::path& dir);

/// Dataset size counts (users, items, interactions per split) as a JSON string.
std::string stats_json(const TemporalSplit& split, std::size_t num_users, std::size_t num_items);

}  // namespace collm::data
