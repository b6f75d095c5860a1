#include "metadcseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace metadcseg {

namespace {

void same_shape(const LabelMask& a, const LabelMask& b, const char* who) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument(std::string(who) + ": mask shapes differ");
  }
}

}  // namespace

double dsc(const LabelMask& pred, const LabelMask& gt) {
  same_shape(pred, gt, "dsc");
  std::size_t np = 0, ng = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] != 0, g = gt.labels[i] != 0;
    np += p;
    ng += g;
    both += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(np + ng);
}

IouResult iou(const LabelMask& pred, const LabelMask& gt, int classes, bool foreground_only) {
  same_shape(pred, gt, "miou");
  if (classes < 1) throw std::invalid_argument("miou: classes must be positive");
  std::vector<std::size_t> tp(classes), fp(classes), fn(classes);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const int p = pred.labels[i], g = gt.labels[i];
    if (p < 0 || p >= classes || g < 0 || g >= classes) throw std::out_of_range("miou: label out of range");
    if (p == g) {
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  IouResult r;
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < classes; ++c) {
    const std::size_t den = tp[c] + fp[c] + fn[c];
    const double v = den == 0 ? 1.0 : static_cast<double>(tp[c]) / static_cast<double>(den);
    r.per_class.push_back(v);
    if (foreground_only && c == 0 && classes > 1) continue;
    sum += v;
    ++counted;
  }
  r.miou = sum / counted;
  return r;
}

double miou(const LabelMask& pred, const LabelMask& gt, int classes, bool foreground_only) {
  return iou(pred, gt, classes, foreground_only).miou;
}

std::vector<int> boundary_pixels(const LabelMask& m) {
  std::vector<int> out;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      bool edge = false;
      for (int dy = -1; dy <= 1 && !edge; ++dy) {
        for (int dx = -1; dx <= 1 && !edge; ++dx) {
          const int yy = y + dy, xx = x + dx;
          edge = yy < 0 || xx < 0 || yy >= m.height || xx >= m.width || !m.at(yy, xx);
        }
      }
      if (edge) out.push_back(y * m.width + x);
    }
  }
  return out;
}

namespace {

double directed(const std::vector<int>& a, const std::vector<int>& b, int width) {
  double worst = 0.0;
  for (int p : a) {
    const int py = p / width, px = p % width;
    double best = INFINITY;
    for (int q : b) {
      const double dy = py - q / width, dx = px - q % width;
      best = std::min(best, dy * dy + dx * dx);
      if (best == 0.0) break;
    }
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

}  // namespace

double hausdorff(const LabelMask& pred, const LabelMask& gt) {
  same_shape(pred, gt, "hausdorff");
  const auto a = boundary_pixels(pred);
  const auto b = boundary_pixels(gt);
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) {
    const double h = pred.height - 1, w = pred.width - 1;
    return std::sqrt(h * h + w * w);
  }
  return std::max(directed(a, b, pred.width), directed(b, a, pred.width));
}

double cost_efficiency(double delta_miou, double time_i, double time_ref, double mem_i, double mem_ref) {
  if (!(time_i > 0.0 && time_ref > 0.0 && mem_i > 0.0 && mem_ref > 0.0)) {
    throw std::invalid_argument("cost_efficiency: times and memory must be positive");
  }
  const double ratio = (time_i / time_ref) * (mem_i / mem_ref);
  if (std::abs(ratio - 1.0) < 1e-12) {
    throw std::domain_error("cost_efficiency: undefined for a unit resource ratio");
  }
  return delta_miou / (ratio - 1.0);
}

EvalRecord evaluate_masks(int id, const LabelMask& pred, const LabelMask& gt, int classes) {
  return EvalRecord{id, miou(pred, gt, classes), dsc(pred, gt), hausdorff(pred, gt)};
}

EvalSummary summarize(std::vector<EvalRecord> records) {
  EvalSummary s;
  s.records = std::move(records);
  if (s.records.empty()) return s;
  for (const auto& r : s.records) {
    s.mean_miou += r.miou;
    s.mean_dsc += r.dsc;
    s.mean_hd += r.hd;
  }
  const double n = static_cast<double>(s.records.size());
  s.mean_miou /= n;
  s.mean_dsc /= n;
  s.mean_hd /= n;
  return s;
}

void write_jsonl(std::ostream& os, const EvalRecord& r) {
  os << nlohmann::json{{"id", r.id}, {"miou", r.miou}, {"dsc", r.dsc}, {"hd", r.hd}}.dump() << '\n';
}

}  // namespace metadcseg
