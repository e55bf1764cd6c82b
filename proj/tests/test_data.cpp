#include "oracles.hpp"

#include <doctest.h>

#include "collm/data.hpp"

#include <filesystem>
#include <fstream>

using namespace collm;
using namespace collm::data;

namespace {

Interaction ix(UserId u, ItemId i, Timestamp ts = 0, int label = 1) {
  Interaction x;
  x.user = u;
  x.item = i;
  x.timestamp = ts;
  x.label = label;
  x.rating = label ? 5.0 : 1.0;
  return x;
}

std::vector<Interaction> random_log(Rng& rng, int n, int users, int items, Timestamp span) {
  std::uniform_int_distribution<int> u(0, users - 1), i(0, items - 1), l(0, 1);
  std::uniform_int_distribution<Timestamp> t(0, span);
  std::vector<Interaction> out;
  for (int k = 0; k < n; ++k) out.push_back(ix(u(rng), i(rng), t(rng), l(rng)));
  return out;
}

bool same_multiset(std::vector<Interaction> a, std::vector<Interaction> b) {
  auto key = [](const Interaction& x) { return std::tie(x.user, x.item, x.timestamp, x.label); };
  auto less = [&](const Interaction& x, const Interaction& y) { return key(x) < key(y); };
  std::sort(a.begin(), a.end(), less);
  std::sort(b.begin(), b.end(), less);
  return a == b;
}

}  // namespace

TEST_CASE("binarize") {
  CHECK(binarize(4, 3) == 1);
  CHECK(binarize(3, 3) == 0);
  CHECK(binarize(5, 4) == 1);
  CHECK(binarize(1, 3) == 0);
  CHECK_THROWS_AS(binarize(0.5, 3), InputDomainError);
  CHECK_THROWS_AS(binarize(5.5, 3), InputDomainError);
}

TEST_CASE("k-core examples") {
  CHECK(kcore_filter({ix(0, 0)}, 2).empty());
  std::vector<Interaction> full;
  for (int u = 0; u < 3; ++u)
    for (int i = 0; i < 3; ++i) full.push_back(ix(u, i));
  CHECK(kcore_filter(full, 3).size() == 9);
  CHECK_THROWS_AS(kcore_filter(full, 0), InputDomainError);
}

TEST_CASE("k-core cascade on a chain graph matches iterative peeling") {
  // users 0..4, items 0..4: a 2-regular core plus a tail whose removal cascades
  std::vector<Interaction> rows = {ix(0, 0), ix(0, 1), ix(1, 0), ix(1, 1),  // core
                                   ix(2, 1), ix(2, 2), ix(3, 2), ix(3, 3), ix(4, 3)};
  const auto got = kcore_filter(rows, 2);
  const auto want = oracle::kcore(rows, 2);
  CHECK(same_multiset(got, want));
  // the tail unravels: item 3 has degree 2 but user 4 has degree 1, and so on
  CHECK(got.size() == 4);
}

TEST_CASE("k-core matches the peeling oracle on random graphs and is sound") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto rows = random_log(rng, 60, 8, 8, 100);
    for (int k : {1, 2, 3, 5}) {
      const auto got = kcore_filter(rows, k);
      REQUIRE(same_multiset(got, oracle::kcore(rows, k)));
      std::map<int, int> ud, id;
      for (const auto& x : got) {
        ++ud[x.user];
        ++id[x.item];
      }
      for (const auto& [u, d] : ud) CHECK(d >= k);
      for (const auto& [i, d] : id) CHECK(d >= k);
    }
  }
}

TEST_CASE("temporal split") {
  const auto empty = temporal_split({}, 1, 2);
  CHECK(empty.train.empty());
  CHECK(empty.valid.empty());
  CHECK(empty.test.empty());

  const auto s = temporal_split({ix(0, 0, 1), ix(0, 1, 2), ix(0, 2, 3)}, 1, 2);
  REQUIRE(s.train.size() == 1);
  REQUIRE(s.valid.size() == 1);
  REQUIRE(s.test.size() == 1);
  CHECK(s.train[0].timestamp == 1);
  CHECK(s.valid[0].timestamp == 2);
  CHECK(s.test[0].timestamp == 3);
  CHECK_THROWS_AS(temporal_split({}, 2, 2), InputDomainError);
}

TEST_CASE("temporal split partitions every input with ordered boundaries") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto rows = random_log(rng, 80, 10, 10, 50);
    const auto s = temporal_split(rows, 20, 35);
    CHECK(s.train.size() + s.valid.size() + s.test.size() == rows.size());
    for (const auto& x : s.train) CHECK(x.timestamp <= 20);
    for (const auto& x : s.valid) CHECK((x.timestamp > 20 && x.timestamp <= 35));
    for (const auto& x : s.test) CHECK(x.timestamp > 35);
    std::vector<Interaction> all = s.train;
    all.insert(all.end(), s.valid.begin(), s.valid.end());
    all.insert(all.end(), s.test.begin(), s.test.end());
    CHECK(same_multiset(all, rows));
    const auto again = temporal_split(rows, 20, 35);
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
  }
}

TEST_CASE("warm/cold examples") {
  TemporalSplit s;
  for (int k = 0; k < 5; ++k) s.train.push_back(ix(0, 10 + k));
  for (int k = 0; k < 3; ++k) s.train.push_back(ix(1 + k, 0));
  s.test = {ix(0, 0), ix(9, 0)};
  const auto p = warm_cold_partition(s, 3);
  REQUIRE(p.is_warm.size() == 2);
  CHECK(p.is_warm[0]);   // user 5 rows, item 3 rows
  CHECK(!p.is_warm[1]);  // user without train rows
  CHECK(p.warm.size() + p.cold.size() == s.test.size());
  const auto dis = warm_cold_partition(s, 3, false);
  CHECK(dis.is_warm[1]);  // item alone is frequent enough under the disjunctive reading
}

TEST_CASE("warm/cold equals direct counting on random splits") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto rows = random_log(rng, 200, 15, 15, 100);
    const auto s = temporal_split(rows, 60, 80);
    for (bool conj : {true, false}) {
      const auto p = warm_cold_partition(s, 3, conj);
      REQUIRE(p.is_warm.size() == s.test.size());
      std::size_t warm = 0;
      for (std::size_t k = 0; k < s.test.size(); ++k) {
        int uc = 0, ic = 0;
        for (const auto& x : s.train) {
          uc += x.user == s.test[k].user;
          ic += x.item == s.test[k].item;
        }
        const bool expect = conj ? (uc >= 3 && ic >= 3) : (uc >= 3 || ic >= 3);
        CHECK(p.is_warm[k] == expect);
        warm += expect;
      }
      CHECK(p.warm.size() == warm);
      CHECK(p.warm.size() + p.cold.size() == s.test.size());
    }
  }
}

TEST_CASE("history examples") {
  std::vector<Interaction> train;
  for (int k = 0; k < 12; ++k) train.push_back(ix(0, k, 10 + k));
  const auto h = build_history(0, 100, train, 10);
  REQUIRE(h.size() == 10);
  CHECK(h.items.front().first == 2);
  CHECK(h.items.back().first == 11);

  const auto two = build_history(1, 100, {ix(1, 7, 5), ix(1, 3, 2)}, 10);
  REQUIRE(two.size() == 2);
  CHECK(two.items[0].first == 3);
  CHECK(two.items[1].first == 7);

  CHECK(build_history(5, 100, train, 10).empty());
  CHECK_THROWS_AS(build_history(0, 1, train, 0), InputDomainError);
}

TEST_CASE("history equals the sort-filter-truncate oracle and is causal") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto train = random_log(rng, 150, 6, 30, 40);  // heavy timestamp ties
    const HistoryIndex index(train, 6);
    for (int u = 0; u < 6; ++u)
      for (Timestamp ts : {0LL, 10LL, 25LL, 41LL})
        for (int len : {1, 3, 10}) {
          const auto h = build_history(u, ts, train, len);
          const auto want = oracle::history(u, ts, train, len);
          REQUIRE(h.items.size() == want.size());
          for (std::size_t k = 0; k < want.size(); ++k) {
            CHECK(h.items[k].first == want[k].first);
            CHECK(h.items[k].second == want[k].second);
            CHECK(h.items[k].second < ts);
            if (k > 0) CHECK(h.items[k - 1].second <= h.items[k].second);
          }
          const auto q = index.query(u, ts, len);
          CHECK(q.items == h.items);
        }
  }
}

TEST_CASE("month window boundaries") {
  const auto w = month_window(1046433600, 10, 5, 5);  // 2003-02-28 12:00 UTC
  CHECK(w.t2 == 1033214400);                           // 2002-09-28
  CHECK(w.t1 == 1019995200);                           // 2002-04-28
  CHECK(w.t0 == 993729600);                            // 2001-06-28
  CHECK(month_window(1585612800, 0, 0, 1).t2 == 1582934400);  // Mar 31 -> Feb 29
}

TEST_CASE("prepare pipeline on raw files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "collm_test_prepare";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream r(dir / "ratings.dat");
    // user::item::rating::ts, MovieLens style
    for (int u = 0; u < 4; ++u)
      for (int i = 0; i < 4; ++i) r << "u" << u << "::m" << i << "::" << (1 + (u + i) % 5) << "::" << (u * 4 + i) << "\n";
    r << "lonely::m9::5::99\n";
    std::ofstream t(dir / "movies.dat");
    for (int i = 0; i < 4; ++i) t << "m" << i << "::Film " << i << " (1999)::Drama\n";
    t << "m9::Caf\xe9 Society::Drama\n";  // Latin-1 byte
  }
  const auto ratings = read_ratings(dir / "ratings.dat");
  const auto titles = read_titles(dir / "movies.dat");
  CHECK(ratings.size() == 17);
  CHECK(titles.at("m9") == "Caf\xc3\xa9 Society");
  PrepareOptions po;
  po.threshold = 3;
  po.kcore = 2;
  po.t1 = 7;
  po.t2 = 11;
  const auto a = prepare(ratings, titles, po);
  const auto b = prepare(ratings, titles, po);
  CHECK(a.split.train == b.split.train);
  CHECK(a.split.test == b.split.test);
  CHECK(a.users.size() == 4);  // the singleton user is filtered out
  CHECK(a.items.size() == 4);
  CHECK(a.split.train.size() + a.split.valid.size() + a.split.test.size() == 16);
  for (const auto* part : {&a.split.train, &a.split.valid, &a.split.test})
    for (const auto& x : *part) {
      CHECK(x.user < 4);
      CHECK(x.item < 4);
      CHECK(x.label == (x.rating > 3 ? 1 : 0));
      CHECK_FALSE(a.catalog.title(x.item).empty());
    }

  write_split_dir(dir / "split", a);
  const auto sd = read_split_dir(dir / "split");
  CHECK(sd.split.train == a.split.train);
  CHECK(sd.split.valid == a.split.valid);
  CHECK(sd.split.test == a.split.test);
  CHECK(sd.catalog.titles() == a.catalog.titles());
  CHECK(sd.num_users == 4);
  CHECK(sd.split.t1 == 7);

  auto missing = titles;
  missing.erase("m0");
  CHECK_THROWS_AS(prepare(ratings, missing, po), CatalogError);
  CHECK_THROWS_AS(read_ratings(dir / "absent.dat"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("catalog lookups") {
  const Catalog c({"A", ""});
  CHECK(c.title(0) == "A");
  CHECK_THROWS_AS(c.title(1), CatalogError);
  CHECK_THROWS_AS(c.title(2), CatalogError);
  CHECK_THROWS_AS(c.title(-1), CatalogError);
}

TEST_CASE("average user interactions") {
  CHECK(average_user_interactions({ix(0, 0), ix(0, 1), ix(0, 2), ix(1, 0)}) == 2);
  CHECK(average_user_interactions({}) == 1);
}
