#include "psearch/pipeline.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace psearch {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string image_id_of(const DatasetSplit& split, std::size_t scene_index) {
  const fs::path rel(split.scenes[scene_index].image);
  return split.dir.filename().string() + "/" + rel.stem().string();
}

AnnotationMap annotations_of(const DatasetSplit& split) {
  AnnotationMap map;
  for (std::size_t i = 0; i < split.scenes.size(); ++i) {
    map[image_id_of(split, i)] =
        ImageAnnotation{split.scenes[i].boxes, split.scenes[i].identities};
  }
  return map;
}

std::vector<ImageDetections> run_detector(PersonSearchModel& model, const DatasetSplit& split) {
  std::vector<ImageDetections> out;
  out.reserve(split.scenes.size());
  for (std::size_t i = 0; i < split.scenes.size(); ++i) {
    const Tensor image = load_ppm(split.dir / split.scenes[i].image);
    out.push_back(ImageDetections{image_id_of(split, i), model.detect(image)});
  }
  return out;
}

std::optional<DetectionMetrics> eval_detection(PersonSearchModel& model,
                                               const DatasetSplit& split) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Box>> gts;
  for (std::size_t i = 0; i < split.scenes.size(); ++i) {
    const Tensor image = load_ppm(split.dir / split.scenes[i].image);
    dets.push_back(model.detect(image));
    gts.push_back(split.scenes[i].boxes);
  }
  return detection_pr(dets, gts);
}

std::vector<GalleryEntry> build_gallery(PersonSearchModel& model, const DatasetSplit& split) {
  std::vector<GalleryEntry> gallery;
  for (std::size_t i = 0; i < split.scenes.size(); ++i) {
    const Tensor image = load_ppm(split.dir / split.scenes[i].image);
    const auto dets = model.detect(image);
    if (dets.empty()) continue;  // no detections, no entries
    std::vector<Box> boxes;
    for (const auto& d : dets) boxes.push_back(d.box);
    const Tensor emb = model.embed_boxes(image, boxes);
    for (std::size_t d = 0; d < dets.size(); ++d) {
      GalleryEntry e;
      e.image_id = image_id_of(split, i);
      e.detection = dets[d];
      e.embedding.assign(emb.data() + emb.offset(static_cast<int>(d), 0, 0, 0),
                         emb.data() + emb.offset(static_cast<int>(d), 0, 0, 0) + emb.c());
      gallery.push_back(std::move(e));
    }
  }
  return gallery;
}

std::vector<QueryRecord> embed_queries(PersonSearchModel& model, const DatasetSplit& split) {
  std::vector<QueryRecord> queries;
  for (std::size_t i = 0; i < split.scenes.size(); ++i) {
    const SceneRecord& sc = split.scenes[i];
    if (sc.boxes.empty()) continue;
    const Tensor image = load_ppm(split.dir / sc.image);
    const Tensor emb = model.embed_boxes(image, sc.boxes);
    for (std::size_t b = 0; b < sc.boxes.size(); ++b) {
      QueryRecord q;
      q.image_id = image_id_of(split, i);
      q.box = sc.boxes[b];
      q.identity = sc.identities[b];
      q.embedding.assign(emb.data() + emb.offset(static_cast<int>(b), 0, 0, 0),
                         emb.data() + emb.offset(static_cast<int>(b), 0, 0, 0) + emb.c());
      queries.push_back(std::move(q));
    }
  }
  return queries;
}

PersonSearchEval evaluate_person_search(PersonSearchModel& model, const Dataset& data,
                                        const SearchOptions& opts) {
  PersonSearchEval out;
  out.options = opts;
  out.detection = eval_detection(model, data.gallery);
  const auto gallery = build_gallery(model, data.gallery);
  const auto queries = embed_queries(model, data.query);
  out.search = search_eval(queries, gallery, annotations_of(data.gallery), opts);
  return out;
}

void write_metrics_json(const fs::path& file, const PersonSearchEval& eval) {
  json j;
  if (eval.detection) {
    j["detection"] = {{"ap", eval.detection->ap},
                      {"recall", eval.detection->recall},
                      {"num_gt", eval.detection->num_gt},
                      {"num_detections", eval.detection->num_detections}};
  } else {
    j["detection"] = nullptr;
  }
  j["search"] = {{"map", eval.search.map},
                 {"top1", eval.search.top1},
                 {"num_queries", eval.search.num_queries},
                 {"num_absent", eval.search.num_absent},
                 {"use_cws", eval.options.use_cws}};
  json per_query = json::array();
  for (const auto& q : eval.search.per_query) {
    per_query.push_back(json{{"query", q.query_index},
                             {"ap", q.ap},
                             {"top1", q.top1},
                             {"num_relevant", q.num_relevant},
                             {"identity_absent", q.identity_absent}});
  }
  j["per_query"] = std::move(per_query);
  std::ofstream os(file);
  if (!os) throw InputError("cannot write metrics: " + file.string());
  os << j.dump(2) << "\n";
}

void write_per_query_csv(const fs::path& file, const SearchMetrics& search) {
  std::ofstream os(file);
  if (!os) throw InputError("cannot write csv: " + file.string());
  os << "query,ap,top1,num_relevant,identity_absent\n";
  for (const auto& q : search.per_query) {
    os << q.query_index << "," << q.ap << "," << (q.top1 ? 1 : 0) << "," << q.num_relevant << ","
       << (q.identity_absent ? 1 : 0) << "\n";
  }
}

void write_gallery_dumps(PersonSearchModel& model, const DatasetSplit& split,
                         const fs::path& detections_file, const fs::path& embeddings_file) {
  const auto dets = run_detector(model, split);
  write_detections_jsonl(detections_file, dets);
  std::vector<EmbeddingRecord> recs;
  for (std::size_t i = 0; i < split.scenes.size(); ++i) {
    const std::string id = image_id_of(split, i);
    const auto it = std::find_if(dets.begin(), dets.end(),
                                 [&](const ImageDetections& d) { return d.image_id == id; });
    if (it == dets.end() || it->detections.empty()) continue;
    const Tensor image = load_ppm(split.dir / split.scenes[i].image);
    std::vector<Box> boxes;
    for (const auto& d : it->detections) boxes.push_back(d.box);
    const Tensor emb = model.embed_boxes(image, boxes);
    for (std::size_t d = 0; d < boxes.size(); ++d) {
      EmbeddingRecord r;
      r.image_id = id;
      r.box = boxes[d];
      r.score = it->detections[d].score;
      r.embedding.assign(emb.data() + emb.offset(static_cast<int>(d), 0, 0, 0),
                         emb.data() + emb.offset(static_cast<int>(d), 0, 0, 0) + emb.c());
      recs.push_back(std::move(r));
    }
  }
  write_embeddings_jsonl(embeddings_file, recs);
}

}  // namespace psearch
