#include <algorithm>
#include <numeric>

#include "falkit/errors.h"
#include "falkit/teachstudent.h"

namespace fal {

namespace {

struct Ranked {
  double score;
  std::size_t scene;
  std::size_t index;
};

double average_precision(const std::vector<std::vector<Detection>>& detections,
                         const std::vector<std::vector<GroundTruth>>& ground_truth,
                         std::size_t cls, double threshold, std::size_t gt_count) {
  std::vector<Ranked> ranked;
  for (std::size_t s = 0; s < detections.size(); ++s) {
    for (std::size_t i = 0; i < detections[s].size(); ++i) {
      if (detections[s][i].class_id == cls) {
        ranked.push_back({detections[s][i].score, s, i});
      }
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<std::vector<char>> taken(ground_truth.size());
  for (std::size_t s = 0; s < ground_truth.size(); ++s) {
    taken[s].assign(ground_truth[s].size(), 0);
  }
  Vec precision;
  Vec recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const Detection& d = detections[ranked[r].scene][ranked[r].index];
    const auto& gts = ground_truth[ranked[r].scene];
    double best = -1.0;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (gts[j].class_id != cls || taken[ranked[r].scene][j]) {
        continue;
      }
      const double v = iou(d.box, gts[j].box);
      if (v >= threshold && v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best_j < gts.size()) {
      taken[ranked[r].scene][best_j] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_count));
  }
  // Monotone precision envelope.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0;
  std::size_t cursor = 0;
  for (int k = 0; k <= 100; ++k) {
    const double level = static_cast<double>(k) / 100.0;
    while (cursor < recall.size() && recall[cursor] < level) {
      ++cursor;
    }
    if (cursor < recall.size()) {
      ap += precision[cursor];
    }
  }
  return ap / 101.0;
}

} // namespace

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) {
    t.push_back(0.5 + 0.05 * static_cast<double>(i));
  }
  return t;
}

double mean_average_precision(const std::vector<std::vector<Detection>>& detections,
                              const std::vector<std::vector<GroundTruth>>& ground_truth,
                              std::size_t num_classes,
                              const std::vector<double>& iou_thresholds) {
  if (detections.size() != ground_truth.size()) {
    throw ShapeError("mean_average_precision: detections and ground truth cover different scenes");
  }
  if (ground_truth.empty()) {
    throw InvalidInput("mean_average_precision: need at least one scene");
  }
  if (iou_thresholds.empty()) {
    throw InvalidInput("mean_average_precision: need at least one IoU threshold");
  }
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& gts : ground_truth) {
    for (const auto& g : gts) {
      if (g.class_id >= num_classes) {
        throw InvalidInput("mean_average_precision: ground truth class out of range");
      }
      ++counts[g.class_id];
    }
  }
  double total = 0.0;
  for (double thr : iou_thresholds) {
    double sum = 0.0;
    std::size_t classes = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (counts[c] == 0) {
        continue;
      }
      sum += average_precision(detections, ground_truth, c, thr, counts[c]);
      ++classes;
    }
    total += classes == 0 ? 0.0 : sum / static_cast<double>(classes);
  }
  return total / static_cast<double>(iou_thresholds.size());
}

std::vector<Detection> to_detections(const DetectorOutput& out) {
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < out.logits.size(); ++i) {
    const Vec p = softmax(out.logits[i]);
    const auto top = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    if (top + 1 == p.size()) {
      continue;
    }
    dets.push_back({top, p[top], out.proposals[i].b});
  }
  return dets;
}

double evaluate_map(const DetectorParams& detector, const std::vector<Scene>& scenes,
                    const std::vector<double>& iou_thresholds) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruth>> gts;
  dets.reserve(scenes.size());
  gts.reserve(scenes.size());
  for (const auto& s : scenes) {
    dets.push_back(to_detections(detector_forward(detector, s.tokens())));
    gts.push_back(s.ground_truth());
  }
  return mean_average_precision(dets, gts, detector.num_classes, iou_thresholds);
}

} // namespace fal
