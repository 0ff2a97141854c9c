#include "pdse/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace pdse {

namespace {

struct Candidate {
  Detection det;
  std::size_t order = 0;  // level-major candidate index, the final tie-break
};

bool by_score(const Candidate& a, const Candidate& b) {
  return a.det.score != b.det.score ? a.det.score > b.det.score : a.order < b.order;
}

}  // namespace

std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_thresh) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (const std::size_t i : order) {
    bool suppressed = false;
    for (const std::size_t k : kept) {
      if (iou(boxes[i], boxes[k]) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

template <typename T>
std::vector<std::vector<Detection>> postprocess(const HeadOutputs<T>& outputs, const AnchorSet& anchors,
                                                int num_classes, double image_width, double image_height,
                                                const PostprocessConfig& config) {
  const std::size_t levels = outputs.class_logits.size();
  if (levels != anchors.levels.size() || outputs.box_deltas.size() != levels || levels == 0) {
    throw ShapeError("postprocess: head outputs and anchors have different level counts");
  }
  const std::int64_t a = anchors.anchors_per_cell, k = num_classes;
  const std::int64_t batch = outputs.class_logits[0].dim(0);
  for (std::size_t l = 0; l < levels; ++l) {
    const auto& cls = outputs.class_logits[l];
    const auto& box = outputs.box_deltas[l];
    const std::int64_t cells = anchors.heights[l] * anchors.widths[l];
    if (cls.rank() != 4 || box.rank() != 4 || cls.dim(0) != batch || box.dim(0) != batch ||
        cls.dim(1) != a * k || box.dim(1) != a * 4 || cls.dim(2) * cls.dim(3) != cells ||
        box.dim(2) != cls.dim(2) || box.dim(3) != cls.dim(3) ||
        static_cast<std::int64_t>(anchors.levels[l].size()) != cells * a) {
      throw ShapeError("postprocess: level " + std::to_string(l) + " outputs " + shape_str(cls.shape()) + "/" +
                       shape_str(box.shape()) + " do not match " + std::to_string(anchors.levels[l].size()) +
                       " anchors");
    }
  }
  const double logit_thresh = std::log(config.score_thresh / (1.0 - config.score_thresh));

  std::vector<std::vector<Detection>> result(static_cast<std::size_t>(batch));
  for (std::int64_t n = 0; n < batch; ++n) {
    std::vector<Candidate> candidates;
    std::size_t order_base = 0;
    for (std::size_t l = 0; l < levels; ++l) {
      const auto cls = outputs.class_logits[l].data();
      const auto box = outputs.box_deltas[l].data();
      const std::int64_t hw = anchors.heights[l] * anchors.widths[l];
      const std::size_t level_candidates = static_cast<std::size_t>(hw * a * k);
      std::vector<Candidate> level;
      for (std::int64_t cell = 0; cell < hw; ++cell) {
        for (std::int64_t ai = 0; ai < a; ++ai) {
          for (std::int64_t c = 0; c < k; ++c) {
            const double z = static_cast<double>(cls[static_cast<std::size_t>((n * a * k + ai * k + c) * hw + cell)]);
            if (z < logit_thresh - 1e-6) continue;  // cheap reject; exact test below
            const double score = 1.0 / (1.0 + std::exp(-z));
            if (!(score > config.score_thresh)) continue;
            Candidate cand;
            cand.det.score = score;
            cand.det.class_id = static_cast<int>(c + 1);
            cand.order = order_base + static_cast<std::size_t>((cell * a + ai) * k + c);
            level.push_back(cand);
          }
        }
      }
      const std::size_t topk = std::min<std::size_t>(level.size(), static_cast<std::size_t>(config.pre_nms_topk));
      std::partial_sort(level.begin(), level.begin() + static_cast<std::ptrdiff_t>(topk), level.end(), by_score);
      level.resize(topk);
      for (auto& cand : level) {
        const std::size_t local = cand.order - order_base;
        const std::int64_t anchor = static_cast<std::int64_t>(local) / k;
        const std::int64_t cell = anchor / a, ai = anchor % a;
        std::array<double, 4> d{};
        for (std::int64_t j = 0; j < 4; ++j) {
          d[static_cast<std::size_t>(j)] = static_cast<double>(box[static_cast<std::size_t>((n * a * 4 + ai * 4 + j) * hw + cell)]);
        }
        cand.det.box = clip_box(decode_box(anchors.levels[l][static_cast<std::size_t>(anchor)], d), image_width,
                                image_height);
      }
      for (auto& cand : level) {
        if (cand.det.box.x2 > cand.det.box.x1 && cand.det.box.y2 > cand.det.box.y1) candidates.push_back(cand);
      }
      order_base += level_candidates;
    }

    std::vector<Candidate> kept;
    for (int c = 1; c <= num_classes; ++c) {
      std::vector<Candidate> same;
      for (const auto& cand : candidates)
        if (cand.det.class_id == c) same.push_back(cand);
      std::sort(same.begin(), same.end(), by_score);
      std::vector<Box> boxes;
      std::vector<double> scores;
      for (const auto& cand : same) {
        boxes.push_back(cand.det.box);
        scores.push_back(cand.det.score);
      }
      for (const std::size_t i : nms(boxes, scores, config.nms_iou)) kept.push_back(same[i]);
    }
    std::sort(kept.begin(), kept.end(), by_score);
    if (kept.size() > static_cast<std::size_t>(config.max_dets)) kept.resize(static_cast<std::size_t>(config.max_dets));
    for (const auto& cand : kept) result[static_cast<std::size_t>(n)].push_back(cand.det);
  }
  return result;
}

template std::vector<std::vector<Detection>> postprocess<float>(const HeadOutputs<float>&, const AnchorSet&, int,
                                                                double, double, const PostprocessConfig&);
template std::vector<std::vector<Detection>> postprocess<double>(const HeadOutputs<double>&, const AnchorSet&, int,
                                                                 double, double, const PostprocessConfig&);

}  // namespace pdse
