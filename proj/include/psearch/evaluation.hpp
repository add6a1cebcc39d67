#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psearch/detector.hpp"
#include "psearch/geometry.hpp"

namespace psearch {

struct DetectionMetrics {
  real ap = 0;
  real recall = 0;
  int num_gt = 0;
  int num_detections = 0;
};

/// Detection AP/Recall at an IoU threshold: detections greedily matched to
/// GT in global score order (each GT claimed at most once), AP as the area
/// under the interpolated (precision-envelope) PR curve. Returns nullopt
/// when there is no GT at all rather than a silent NaN.
std::optional<DetectionMetrics> detection_pr(
    const std::vector<std::vector<Detection>>& detections_per_image,
    const std::vector<std::vector<Box>>& gt_per_image, real iou_thresh = 0.5);

/// Interpolated average precision over a ranked relevance list with
/// total_relevant as the recall denominator.
real average_precision(const std::vector<char>& relevance_in_rank_order, int total_relevant);

// ---------------------------------------------------------------------------
// Person search evaluation
// ---------------------------------------------------------------------------

struct GalleryEntry {
  std::string image_id;
  Detection detection;
  std::vector<real> embedding;
};

struct QueryRecord {
  std::string image_id;
  Box box;            // GT box of the query person
  int identity = -1;
  std::vector<real> embedding;
};

struct ImageAnnotation {
  std::vector<Box> boxes;
  std::vector<int> identities;
};
using AnnotationMap = std::map<std::string, ImageAnnotation>;

struct RankedCandidate {
  int gallery_index = -1;
  real similarity = 0;
  bool is_match = false;
};

struct QueryResult {
  int query_index = -1;
  real ap = 0;
  bool top1 = false;
  int num_relevant = 0;       // GT instances of the identity in the gallery
  bool identity_absent = false;
  std::vector<RankedCandidate> ranking;
};

struct SearchMetrics {
  real map = 0;
  real top1 = 0;
  int num_queries = 0;        // queries contributing to the means
  int num_absent = 0;         // queries whose identity has no gallery GT
  std::vector<QueryResult> per_query;
};

struct SearchOptions {
  bool use_cws = false;              // multiply similarity by detection score
  bool exclude_absent_queries = false;  // otherwise absent queries contribute AP 0
  real iou_thresh = 0.5;             // candidate matches GT when IoU > threshold
};

/// Ranks gallery candidates per query by cosine similarity (embeddings
/// L2-normalized for comparison) and computes mAP / top-1. A candidate is a
/// match when its image holds a yet-unclaimed GT box of the query identity
/// with IoU above the threshold. All entries from the query's own source
/// image are excluded from its gallery. Similarity ties break by gallery
/// insertion order.
SearchMetrics search_eval(const std::vector<QueryRecord>& queries,
                          const std::vector<GalleryEntry>& gallery,
                          const AnnotationMap& gallery_gt, const SearchOptions& opts = {});

// ---------------------------------------------------------------------------
// Dump formats (JSON-lines, round-trip exact)
// ---------------------------------------------------------------------------

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

void write_detections_jsonl(const std::filesystem::path& file,
                            const std::vector<ImageDetections>& dets);
std::vector<ImageDetections> read_detections_jsonl(const std::filesystem::path& file);

struct EmbeddingRecord {
  std::string image_id;
  Box box;
  std::optional<int> identity;
  std::vector<real> embedding;
  real score = 1.0;
};

void write_embeddings_jsonl(const std::filesystem::path& file,
                            const std::vector<EmbeddingRecord>& recs);
std::vector<EmbeddingRecord> read_embeddings_jsonl(const std::filesystem::path& file);

/// Pair the two dumps back into gallery entries (by image id + box order).
std::vector<GalleryEntry> gallery_from_dumps(const std::vector<ImageDetections>& dets,
                                             const std::vector<EmbeddingRecord>& recs);

}  // namespace psearch
