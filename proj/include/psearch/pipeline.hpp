#pragma once

#include <filesystem>
#include <optional>

#include "psearch/evaluation.hpp"
#include "psearch/model.hpp"
#include "psearch/synthdata.hpp"

namespace psearch {

/// Split-qualified image id ("gallery/scene_0004"), the key shared by
/// annotations, dumps and gallery entries.
std::string image_id_of(const DatasetSplit& split, std::size_t scene_index);

AnnotationMap annotations_of(const DatasetSplit& split);

/// Run the detector over every scene of the split (eval mode).
std::vector<ImageDetections> run_detector(PersonSearchModel& model, const DatasetSplit& split);

std::optional<DetectionMetrics> eval_detection(PersonSearchModel& model,
                                               const DatasetSplit& split);

/// Dynamic gallery: per image, decode_and_nms detections and one embedding
/// per detection. Deterministic in eval mode.
std::vector<GalleryEntry> build_gallery(PersonSearchModel& model, const DatasetSplit& split);

/// One query per labeled person in the split, embedded from its GT box.
std::vector<QueryRecord> embed_queries(PersonSearchModel& model, const DatasetSplit& split);

struct PersonSearchEval {
  std::optional<DetectionMetrics> detection;  // on the gallery split
  SearchMetrics search;
  SearchOptions options;
};

PersonSearchEval evaluate_person_search(PersonSearchModel& model, const Dataset& data,
                                        const SearchOptions& opts = {});

/// metrics.json {AP, Recall, mAP, top1, per_query: [...]} (+ optional CSV).
void write_metrics_json(const std::filesystem::path& file, const PersonSearchEval& eval);
void write_per_query_csv(const std::filesystem::path& file, const SearchMetrics& search);

/// Write the detections/embeddings dumps for a gallery split.
void write_gallery_dumps(PersonSearchModel& model, const DatasetSplit& split,
                         const std::filesystem::path& detections_file,
                         const std::filesystem::path& embeddings_file);

}  // namespace psearch
