#include "psearch/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace psearch {

using json = nlohmann::ordered_json;

real average_precision(const std::vector<char>& rel, int total_relevant) {
  if (total_relevant <= 0) return 0.0;
  const int n = static_cast<int>(rel.size());
  std::vector<real> precision(n), recall(n);
  int tp = 0;
  for (int k = 0; k < n; ++k) {
    if (rel[k]) ++tp;
    precision[k] = static_cast<real>(tp) / (k + 1);
    recall[k] = static_cast<real>(tp) / total_relevant;
  }
  // precision envelope: p(k) := max precision at any rank >= k
  for (int k = n - 2; k >= 0; --k) precision[k] = std::max(precision[k], precision[k + 1]);
  real ap = 0, prev_recall = 0;
  for (int k = 0; k < n; ++k) {
    if (recall[k] > prev_recall) {
      ap += (recall[k] - prev_recall) * precision[k];
      prev_recall = recall[k];
    }
  }
  return ap;
}

std::optional<DetectionMetrics> detection_pr(
    const std::vector<std::vector<Detection>>& detections_per_image,
    const std::vector<std::vector<Box>>& gt_per_image, real iou_thresh) {
  if (detections_per_image.size() != gt_per_image.size())
    throw InputError("detection_pr: per-image list sizes differ");
  int total_gt = 0;
  for (const auto& g : gt_per_image) total_gt += static_cast<int>(g.size());
  if (total_gt == 0) return std::nullopt;

  struct Flat {
    int image;
    int det;
    real score;
  };
  std::vector<Flat> flat;
  for (std::size_t i = 0; i < detections_per_image.size(); ++i) {
    for (std::size_t dIdx = 0; dIdx < detections_per_image[i].size(); ++dIdx) {
      flat.push_back({static_cast<int>(i), static_cast<int>(dIdx),
                      detections_per_image[i][dIdx].score});
    }
  }
  std::stable_sort(flat.begin(), flat.end(),
                   [](const Flat& a, const Flat& b) { return a.score > b.score; });

  std::vector<std::vector<char>> claimed(gt_per_image.size());
  for (std::size_t i = 0; i < gt_per_image.size(); ++i)
    claimed[i].assign(gt_per_image[i].size(), 0);

  std::vector<char> rel(flat.size(), 0);
  int matched = 0;
  for (std::size_t k = 0; k < flat.size(); ++k) {
    const auto& f = flat[k];
    const Box& db = detections_per_image[f.image][f.det].box;
    int best = -1;
    real best_iou = iou_thresh;
    for (std::size_t g = 0; g < gt_per_image[f.image].size(); ++g) {
      if (claimed[f.image][g]) continue;
      const real v = iou(db, gt_per_image[f.image][g]);
      if (v >= best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      claimed[f.image][best] = 1;
      rel[k] = 1;
      ++matched;
    }
  }

  DetectionMetrics m;
  m.num_gt = total_gt;
  m.num_detections = static_cast<int>(flat.size());
  m.recall = static_cast<real>(matched) / total_gt;
  m.ap = average_precision(rel, total_gt);
  return m;
}

namespace {

real cosine(const std::vector<real>& a, const std::vector<real>& b) {
  if (a.size() != b.size()) throw InputError("cosine: embedding dimensions differ");
  real dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const real denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0 ? dot / denom : 0.0;
}

}  // namespace

SearchMetrics search_eval(const std::vector<QueryRecord>& queries,
                          const std::vector<GalleryEntry>& gallery,
                          const AnnotationMap& gallery_gt, const SearchOptions& opts) {
  SearchMetrics out;
  real sum_ap = 0;
  int sum_top1 = 0;

  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const QueryRecord& q = queries[qi];
    QueryResult res;
    res.query_index = static_cast<int>(qi);

    // relevant GT instances of this identity outside the query image
    for (const auto& [img, ann] : gallery_gt) {
      if (img == q.image_id) continue;
      for (std::size_t g = 0; g < ann.identities.size(); ++g) {
        if (ann.identities[g] == q.identity) ++res.num_relevant;
      }
    }
    res.identity_absent = res.num_relevant == 0;
    if (res.identity_absent) {
      ++out.num_absent;
      if (opts.exclude_absent_queries) {
        out.per_query.push_back(std::move(res));
        continue;
      }
    }

    std::vector<RankedCandidate> cands;
    for (std::size_t gi = 0; gi < gallery.size(); ++gi) {
      if (gallery[gi].image_id == q.image_id) continue;
      real sim = cosine(q.embedding, gallery[gi].embedding);
      if (opts.use_cws) sim *= gallery[gi].detection.score;
      cands.push_back(RankedCandidate{static_cast<int>(gi), sim, false});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const RankedCandidate& a,
                                                    const RankedCandidate& b) {
      return a.similarity > b.similarity;
    });

    // claim GT instances in rank order: a candidate matches when its image
    // still holds an unclaimed GT box of the query identity with IoU above
    // the threshold
    std::map<std::string, std::vector<char>> claimed;
    std::vector<char> rel(cands.size(), 0);
    for (std::size_t k = 0; k < cands.size(); ++k) {
      const GalleryEntry& e = gallery[cands[k].gallery_index];
      auto it = gallery_gt.find(e.image_id);
      if (it == gallery_gt.end()) continue;
      const ImageAnnotation& ann = it->second;
      auto& cl = claimed[e.image_id];
      if (cl.empty()) cl.assign(ann.boxes.size(), 0);
      int best = -1;
      real best_iou = opts.iou_thresh;
      for (std::size_t g = 0; g < ann.boxes.size(); ++g) {
        if (cl[g] || ann.identities[g] != q.identity) continue;
        const real v = iou(e.detection.box, ann.boxes[g]);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        cl[best] = 1;
        rel[k] = 1;
        cands[k].is_match = true;
      }
    }

    res.ap = average_precision(rel, res.num_relevant);
    res.top1 = !cands.empty() && cands.front().is_match;
    res.ranking = std::move(cands);

    sum_ap += res.ap;
    sum_top1 += res.top1 ? 1 : 0;
    ++out.num_queries;
    out.per_query.push_back(std::move(res));
  }

  if (out.num_queries > 0) {
    out.map = sum_ap / out.num_queries;
    out.top1 = static_cast<real>(sum_top1) / out.num_queries;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dumps
// ---------------------------------------------------------------------------

void write_detections_jsonl(const std::filesystem::path& file,
                            const std::vector<ImageDetections>& dets) {
  std::ofstream os(file);
  if (!os) throw InputError("cannot open for writing: " + file.string());
  for (const auto& d : dets) {
    json rec;
    rec["image"] = d.image_id;
    json arr = json::array();
    for (const auto& det : d.detections) {
      arr.push_back(json{{"x1", det.box.x1},
                         {"y1", det.box.y1},
                         {"x2", det.box.x2},
                         {"y2", det.box.y2},
                         {"score", det.score}});
    }
    rec["detections"] = std::move(arr);
    os << rec.dump() << "\n";
  }
}

std::vector<ImageDetections> read_detections_jsonl(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw InputError("cannot open: " + file.string());
  std::vector<ImageDetections> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    ImageDetections d;
    d.image_id = rec.at("image").get<std::string>();
    for (const auto& j : rec.at("detections")) {
      d.detections.push_back(Detection{
          Box{j.at("x1").get<real>(), j.at("y1").get<real>(), j.at("x2").get<real>(),
              j.at("y2").get<real>()},
          j.at("score").get<real>()});
    }
    out.push_back(std::move(d));
  }
  return out;
}

void write_embeddings_jsonl(const std::filesystem::path& file,
                            const std::vector<EmbeddingRecord>& recs) {
  std::ofstream os(file);
  if (!os) throw InputError("cannot open for writing: " + file.string());
  for (const auto& r : recs) {
    json rec;
    rec["image"] = r.image_id;
    rec["box"] = {r.box.x1, r.box.y1, r.box.x2, r.box.y2};
    if (r.identity) rec["identity"] = *r.identity;
    rec["score"] = r.score;
    rec["embedding"] = r.embedding;
    os << rec.dump() << "\n";
  }
}

std::vector<EmbeddingRecord> read_embeddings_jsonl(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw InputError("cannot open: " + file.string());
  std::vector<EmbeddingRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    EmbeddingRecord r;
    r.image_id = rec.at("image").get<std::string>();
    const auto& b = rec.at("box");
    r.box = Box{b.at(0).get<real>(), b.at(1).get<real>(), b.at(2).get<real>(), b.at(3).get<real>()};
    if (rec.contains("identity")) r.identity = rec.at("identity").get<int>();
    r.score = rec.value("score", 1.0);
    r.embedding = rec.at("embedding").get<std::vector<real>>();
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<GalleryEntry> gallery_from_dumps(const std::vector<ImageDetections>& dets,
                                             const std::vector<EmbeddingRecord>& recs) {
  std::vector<GalleryEntry> out;
  std::size_t r = 0;
  for (const auto& d : dets) {
    for (const auto& det : d.detections) {
      if (r >= recs.size() || recs[r].image_id != d.image_id)
        throw InputError("gallery_from_dumps: dumps are not aligned");
      out.push_back(GalleryEntry{d.image_id, det, recs[r].embedding});
      ++r;
    }
  }
  if (r != recs.size()) throw InputError("gallery_from_dumps: extra embedding records");
  return out;
}

}  // namespace psearch
