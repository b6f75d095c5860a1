#pragma once

#include <iosfwd>
#include <vector>

#include "metadcseg/datakit.hpp"

namespace metadcseg {

/// 2|a & b| / (|a| + |b|) over non-zero labels; 1 when both are empty.
double dsc(const LabelMask& pred, const LabelMask& gt);

struct IouResult {
  double miou = 0.0;
  std::vector<double> per_class;
};

/// Mean over classes of TP / (TP + FP + FN). A class absent from both masks
/// scores 1. With foreground_only, class 0 is left out of the mean.
IouResult iou(const LabelMask& pred, const LabelMask& gt, int classes, bool foreground_only = false);
double miou(const LabelMask& pred, const LabelMask& gt, int classes, bool foreground_only = false);

/// Foreground pixels with at least one 8-neighbour that is background or
/// outside the image.
std::vector<int> boundary_pixels(const LabelMask& mask);

/// Symmetric Hausdorff distance between the boundary pixel sets. One empty
/// set gives the image diagonal sqrt((H-1)^2 + (W-1)^2); both empty give 0.
double hausdorff(const LabelMask& pred, const LabelMask& gt);

/// delta_miou / ((time_i / time_ref) * (mem_i / mem_ref) - 1). Throws when the
/// resource product is 1 (undefined) or a denominator is not positive.
double cost_efficiency(double delta_miou, double time_i, double time_ref, double mem_i, double mem_ref);

struct EvalRecord {
  int id = 0;
  double miou = 0.0;
  double dsc = 0.0;
  double hd = 0.0;
};

struct EvalSummary {
  std::vector<EvalRecord> records;
  double mean_miou = 0.0;
  double mean_dsc = 0.0;
  double mean_hd = 0.0;
};

EvalRecord evaluate_masks(int id, const LabelMask& pred, const LabelMask& gt, int classes = 2);
EvalSummary summarize(std::vector<EvalRecord> records);

/// One {"id","miou","dsc","hd"} object per line.
void write_jsonl(std::ostream& os, const EvalRecord& r);

}  // namespace metadcseg
