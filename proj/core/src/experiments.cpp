#include "metadcseg/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "metadcseg/noisegen.hpp"
#include "metadcseg/trainer.hpp"

namespace metadcseg {

using nlohmann::json;

MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return r;
}

namespace {

AblationRow run_row(const TrainConfig& base, const Dataset& ds, std::string name, bool meta, bool dcd, bool dice,
                    int seeds) {
  AblationRow row;
  row.name = std::move(name);
  row.meta = meta;
  row.dcd = dcd;
  row.dice = dice;
  std::vector<double> m, d, h;
  for (int s = 0; s < seeds; ++s) {
    TrainConfig cfg = base;
    cfg.meta = meta;
    cfg.dcd = dcd;
    cfg.dice = dice;
    cfg.seed = base.seed + static_cast<std::uint64_t>(s);
    TrainHooks hooks;
    hooks.keep_log = false;
    const TrainResult res = train(cfg, ds, hooks);
    EvalSummary ev = evaluate(res.checkpoint, ds);
    m.push_back(ev.mean_miou);
    d.push_back(ev.mean_dsc);
    h.push_back(ev.mean_hd);
    row.seeds.push_back(cfg.seed);
    row.runs.push_back(std::move(ev));
  }
  row.miou = mean_sd(m);
  row.dsc = mean_sd(d);
  row.hd = mean_sd(h);
  return row;
}

json stat(const MeanSd& s) { return json{{"mean", s.mean}, {"sd", s.sd}}; }

json row_json(const AblationRow& r) {
  json runs = json::array();
  for (std::size_t k = 0; k < r.runs.size(); ++k) {
    runs.push_back({{"seed", r.seeds[k]},
                    {"miou", r.runs[k].mean_miou},
                    {"dsc", r.runs[k].mean_dsc},
                    {"hd", r.runs[k].mean_hd}});
  }
  return json{{"name", r.name}, {"meta", r.meta},         {"dcd", r.dcd}, {"dice", r.dice},
              {"miou", stat(r.miou)}, {"dsc", stat(r.dsc)}, {"hd", stat(r.hd)}, {"runs", runs}};
}

}  // namespace

AblationTable ablate(const TrainConfig& cfg, const Dataset& ds, const AblationOptions& opt) {
  if (opt.seeds < 1) throw std::invalid_argument("ablate: need at least one seed");
  AblationTable t;
  t.rows.push_back(run_row(cfg, ds, "all", true, true, true, opt.seeds));
  t.rows.push_back(run_row(cfg, ds, "-meta", false, true, true, opt.seeds));
  t.rows.push_back(run_row(cfg, ds, "-dcd", true, false, true, opt.seeds));
  t.rows.push_back(run_row(cfg, ds, "-dice", true, true, false, opt.seeds));
  if (opt.with_baseline) t.baseline = run_row(cfg, ds, "baseline", false, false, false, opt.seeds);
  return t;
}

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) rows.push_back(row_json(r));
  json j{{"rows", rows}};
  j["baseline"] = t.baseline ? row_json(*t.baseline) : json(nullptr);
  return j;
}

std::vector<MetaSizeRow> meta_size_study(const TrainConfig& cfg, const Dataset& pool, std::vector<double> fracs) {
  if (fracs.empty()) throw std::invalid_argument("meta_size_study: no fractions");
  std::sort(fracs.begin(), fracs.end());
  for (double f : fracs) {
    if (!(f > 0.0 && f + cfg.test_frac < 1.0)) {
      throw std::invalid_argument("meta_size_study: fraction " + std::to_string(f) + " out of range");
    }
  }
  Dataset bare = pool;
  bare.tags.clear();
  for (auto& it : bare.items) it.noisy.reset();

  std::vector<MetaSizeRow> rows;
  for (double f : fracs) {
    TrainConfig c = cfg;
    c.metaval_frac = f;
    Dataset ds = split(bare, f, c.test_frac, c.data_seed);
    corrupt_dataset(ds, c.noise_level, c.data_seed);
    TrainHooks hooks;
    hooks.keep_log = false;
    const TrainResult res = train(c, ds, hooks);
    MetaSizeRow row;
    row.frac = f;
    row.metaval_items = static_cast<int>(ds.indices(SplitTag::kMetaVal).size());
    row.train_items = static_cast<int>(ds.indices(SplitTag::kTrain).size());
    row.eval = evaluate(res.checkpoint, ds);
    row.wall_seconds = res.wall_seconds;
    row.peak_bytes = res.peak_tape_bytes;
    if (!rows.empty()) {
      const MetaSizeRow& ref = rows.front();
      try {
        row.ce = cost_efficiency(100.0 * (row.eval.mean_miou - ref.eval.mean_miou), row.wall_seconds,
                                 ref.wall_seconds, static_cast<double>(row.peak_bytes),
                                 static_cast<double>(ref.peak_bytes));
      } catch (const std::domain_error&) {
        row.ce.reset();
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const std::vector<MetaSizeRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"frac", r.frac},
                   {"metaval_items", r.metaval_items},
                   {"train_items", r.train_items},
                   {"miou", r.eval.mean_miou},
                   {"dsc", r.eval.mean_dsc},
                   {"hd", r.eval.mean_hd},
                   {"wall_seconds", r.wall_seconds},
                   {"peak_bytes", r.peak_bytes},
                   {"ce", r.ce ? json(*r.ce) : json("-")}});
  }
  return out;
}

}  // namespace metadcseg
