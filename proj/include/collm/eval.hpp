#pragma once

// Ranking metrics (AUC, UAUC, NDCG), ensemble averaging and warm/cold reports.

#include "collm/common.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace collm::eval {

struct Prediction {
  UserId user = 0;
  ItemId item = 0;
  double score = 0.0;
  int label = 0;
};

/// Probability that a random positive outranks a random negative, ties counted as
/// one half. Computed by rank sums. Throws UndefinedMetricError on single-class input.
double auc(std::span<const Prediction> preds);

struct UserAveraged {
  double value = 0.0;
  std::size_t eligible_users = 0;
  std::size_t skipped_users = 0;  // users lacking a positive or a negative
};

/// Unweighted mean of per-user AUC over users with both classes.
UserAveraged uauc(std::span<const Prediction> preds);

/// Mean per-user NDCG with binary gains and log2(rank + 1) discount over each
/// user's whole list. `cutoff` > 0 truncates the list. Score ties are broken by
/// ascending item id.
UserAveraged ndcg(std::span<const Prediction> preds, int cutoff = 0);

/// Row-wise (a + b) / 2 over identical (user, item) row sets; output follows the
/// row order of `a`. Throws AlignmentError otherwise.
std::vector<Prediction> ensemble_average(std::span<const Prediction> a, std::span<const Prediction> b);

struct MetricBlock {
  std::size_t rows = 0;
  std::size_t positives = 0;
  std::optional<double> auc, uauc, ndcg;
  std::size_t eligible_users = 0;
  std::size_t skipped_users = 0;
  std::vector<std::string> undefined;  // reasons for missing metrics
};

struct MetricsReport {
  MetricBlock all, warm, cold;
};

MetricBlock metric_block(std::span<const Prediction> preds, int ndcg_cutoff = 0);

/// Metrics on all rows and on the warm / cold subsets. `is_warm` is aligned with `preds`.
MetricsReport report(std::span<const Prediction> preds, const std::vector<bool>& is_warm, int ndcg_cutoff = 0);

std::string to_json(const MetricsReport& r);
std::string to_table(const MetricsReport& r);

/// Tab-separated `user item score label`.
void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

}  // namespace collm::eval
