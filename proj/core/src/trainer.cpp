#include "metadcseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>

#include "metadcseg/dcd.hpp"
#include "metadcseg/noisegen.hpp"
#include "metadcseg/objective.hpp"

namespace metadcseg {

using diff::Tape;
using diff::Var;
using nlohmann::json;

Dataset prepare_dataset(const TrainConfig& cfg) {
  if (!cfg.data_dir.empty()) {
    Dataset ds = load_dataset(cfg.data_dir);
    for (std::size_t i : ds.indices(SplitTag::kTrain)) {
      if (!ds.items[i].noisy) {
        throw std::runtime_error("dataset " + cfg.data_dir + " has no noisy mask for train item " +
                                 std::to_string(ds.items[i].id) + "; run `corrupt` first");
      }
    }
    return ds;
  }
  Dataset ds = split(gen_synthetic(cfg.n, cfg.h, cfg.w, cfg.data_seed), cfg.metaval_frac, cfg.test_frac,
                     cfg.data_seed);
  corrupt_dataset(ds, cfg.noise_level, cfg.data_seed);
  return ds;
}

namespace {

// Flip code: bit 0 mirrors x, bit 1 mirrors y. Each flip is an involution.
std::size_t flip_index(std::size_t p, int h, int w, int code) {
  int y = static_cast<int>(p / static_cast<std::size_t>(w));
  int x = static_cast<int>(p % static_cast<std::size_t>(w));
  if (code & 1) x = w - 1 - x;
  if (code & 2) y = h - 1 - y;
  return static_cast<std::size_t>(y) * w + x;
}

template <typename T>
std::vector<T> flip_plane(std::span<const T> v, int h, int w, int code, int channels = 1) {
  if (code == 0) return {v.begin(), v.end()};
  std::vector<T> out(v.size());
  const std::size_t n = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t q = flip_index(p, h, w, code);
    for (int c = 0; c < channels; ++c) out[q * channels + c] = v[p * channels + c];
  }
  return out;
}

ImagePlane flip(const ImagePlane& im, int code) {
  ImagePlane out = im;
  out.values = flip_plane<double>(im.values, im.height, im.width, code, im.channels);
  return out;
}

LabelMask flip(const LabelMask& m, int code) {
  LabelMask out = m;
  out.labels = flip_plane<int>(m.labels, m.height, m.width, code);
  return out;
}

template <typename Real>
typename Tape<Real>::Buffer buffer(std::span<const double> v) {
  return typename Tape<Real>::Buffer(v.begin(), v.end());
}

json number_or_null(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

template <typename Real>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const Dataset& ds, const TrainHooks& hooks)
      : cfg_(cfg),
        ds_(ds),
        hooks_(hooks),
        train_idx_(ds.indices(SplitTag::kTrain)),
        val_idx_(ds.indices(SplitTag::kMetaVal)),
        theta_(init_params(cfg.net, cfg.seed)),
        velocity_(theta_.size(), 0.0),
        tracker_(cfg.net.feature_dim),
        rng_(Rng::stream(cfg.seed, streams::kTrain)) {
    if (train_idx_.empty()) throw std::invalid_argument("train: dataset has no train items");
    if (val_idx_.empty() && cfg.meta) throw std::invalid_argument("train: meta phase needs metaval items");
    const auto& first = ds.items[train_idx_.front()].image;
    height_ = first.height;
    width_ = first.width;
    cfg.net.validate(height_, width_);
    for (std::size_t i : train_idx_) {
      const auto& it = ds.items[i];
      if (!it.noisy) throw std::invalid_argument("train: item " + std::to_string(it.id) + " has no noisy mask");
      if (it.image.height != height_ || it.image.width != width_ || it.noisy->height != height_ ||
          it.noisy->width != width_) {
        throw std::invalid_argument("train: all items must share one image size");
      }
    }
    maps_ = init_weight_maps(static_cast<int>(train_idx_.size()), height_, width_);
    if (cfg.ema) ema_ = theta_.values();
  }

  TrainResult run() {
    diff::ArenaStats::reset_peak();
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res;
    const int n = static_cast<int>(train_idx_.size());
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::vector<int> order(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      for (int i = n; i > 1; --i) std::swap(order[static_cast<std::size_t>(i - 1)], order[rng_.below(static_cast<std::uint64_t>(i))]);
      for (int b = 0; b < n; b += cfg_.batch_size) {
        std::vector<int> batch(order.begin() + b, order.begin() + std::min(n, b + cfg_.batch_size));
        std::vector<int> flips(batch.size(), 0);
        if (cfg_.augment) {
          for (int& f : flips) f = static_cast<int>(rng_.below(4));
        }
        json rec;
        try {
          rec = step(epoch, batch, flips);
        } catch (const diff::NumericFault& e) {
          json diag{{"epoch", epoch}, {"step", step_}, {"error", e.what()}, {"op", e.op()}, {"index", e.index()}};
          emit(diag, res);
          throw TrainingAborted(std::string("training aborted at step ") + std::to_string(step_) + ": " + e.what());
        }
        if (cfg_.log_wall_time) {
          rec["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        emit(rec, res);
        ++step_;
      }
    }
    res.steps = step_;
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.peak_tape_bytes = diff::ArenaStats::peak_bytes();
    res.checkpoint.cfg = cfg_.net;
    res.checkpoint.params = theta_;
    if (cfg_.ema) res.checkpoint.params.values() = ema_;
    res.weights = std::move(maps_);
    return res;
  }

 private:
  struct Item {
    int pos = 0;
    int flip = 0;
    ImagePlane image;
    LabelMask noisy;
    NetVars<Real> net;
    Var f, g;
  };

  void emit(const json& rec, TrainResult& res) {
    if (hooks_.log) *hooks_.log << rec.dump() << '\n';
    if (hooks_.on_record) hooks_.on_record(rec);
    if (hooks_.keep_log) res.log.push_back(rec);
  }

  std::vector<double> plane(const std::vector<double>& v, const Item& it) const {
    return flip_plane<double>(maps_.plane(v, it.pos), height_, width_, it.flip);
  }

  json step(int epoch, const std::vector<int>& batch, const std::vector<int>& flips) {
    const bool warm = epoch < cfg_.warmup_epochs;
    const bool meta_on = cfg_.meta && !warm;
    const bool dcd_on = cfg_.dcd && !warm;
    const double lr = cfg_.lr_at(epoch);
    const int P = static_cast<int>(theta_.size());

    Tape<Real> tape;
    const Var th = tape.variable({P}, buffer<Real>(theta_.values()));

    std::vector<Item> items(batch.size());
    MetaTerms terms;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      Item& it = items[k];
      it.pos = batch[k];
      it.flip = flips[k];
      const DataItem& src = ds_.items[train_idx_[static_cast<std::size_t>(it.pos)]];
      it.image = flip(src.image, it.flip);
      it.noisy = flip(*src.noisy, it.flip);
      it.net = forward<Real>(tape, th, theta_, cfg_.net, it.image);
      it.f = diff::cross_entropy(tape, it.net.logits, std::span<const int>(it.noisy.labels));
      if (meta_on) {
        const auto& pv = tape.value(it.net.probs);
        const std::vector<double> probs(pv.begin(), pv.end());
        const LabelMask pseudo = pseudo_labels(probs, height_, width_, cfg_.net.classes);
        it.g = diff::cross_entropy(tape, it.net.logits, std::span<const int>(pseudo.labels));
        terms.f.push_back(it.f);
        terms.g.push_back(it.g);
      }
    }

    std::optional<double> val_loss, min_rect, norm_dev;
    int resets = 0;
    if (meta_on) {
      std::vector<std::vector<double>> a_hat, b_hat;
      BatchWeights bw;
      for (const Item& it : items) {
        a_hat.push_back(plane(maps_.alpha_n, it));
        b_hat.push_back(plane(maps_.beta_n, it));
      }
      for (std::size_t k = 0; k < items.size(); ++k) {
        bw.alpha.emplace_back(a_hat[k]);
        bw.beta.emplace_back(b_hat[k]);
      }
      const std::vector<double> grad = weighted_grad(tape, th, terms, bw);
      std::vector<double> theta_hat = theta_.values();
      for (std::size_t k = 0; k < theta_hat.size(); ++k) theta_hat[k] -= lr * grad[k];

      std::vector<double> val_grad;
      {
        Tape<Real> vt;
        const Var vth = vt.variable({P}, buffer<Real>(theta_hat));
        Var lv = vt.constant({1}, {Real(0)});
        for (int j = 0; j < cfg_.meta_batch_size; ++j) {
          const DataItem& v = ds_.items[val_idx_[val_cursor_++ % val_idx_.size()]];
          const auto out = forward<Real>(vt, vth, theta_, cfg_.net, v.image);
          lv = diff::add(vt, lv, diff::sum(vt, diff::cross_entropy(vt, out.logits, std::span<const int>(v.clean.labels))));
        }
        vt.backward(lv);
        val_loss = static_cast<double>(vt.scalar(lv));
        const auto g = vt.grad(vth);
        val_grad.assign(g.begin(), g.end());
      }

      MetaGrad mg = meta_grads_on_tape(tape, th, terms, val_grad, lr);
      for (std::size_t k = 0; k < items.size(); ++k) {
        mg.d_alpha[k] = flip_plane<double>(mg.d_alpha[k], height_, width_, items[k].flip);
        mg.d_beta[k] = flip_plane<double>(mg.d_beta[k], height_, width_, items[k].flip);
      }
      const UpdateReport rep = update_rectify_normalize(maps_, batch, mg, cfg_.meta_lr_scale * lr);
      resets = rep.resets;
      min_rect = rep.min_rectified;
      norm_dev = rep.max_norm_dev;
    }

    std::vector<ImageLossTerms> losses(items.size());
    int fallbacks = 0;
    double gamma_sum = 0.0;
    for (std::size_t k = 0; k < items.size(); ++k) {
      const Item& it = items[k];
      const std::vector<int> shape = tape.shape(it.f);
      auto weighted = [&](const std::vector<double>& a, const std::vector<double>& b) {
        Var m = diff::mul(tape, tape.constant(shape, buffer<Real>(plane(a, it))), it.f);
        if (meta_on) m = diff::add(tape, m, diff::mul(tape, tape.constant(shape, buffer<Real>(plane(b, it))), it.g));
        return m;
      };
      ImageLossTerms& lt = losses[k];
      lt.base_map = weighted(maps_.alpha_n, maps_.beta_n);
      lt.boundary_map = lt.base_map;
      const std::vector<double> gamma = plane(maps_.alpha_r, it);
      const std::vector<double> gamma_b = plane(maps_.beta_r, it);
      std::vector<double> g(gamma.size());
      for (std::size_t p = 0; p < g.size(); ++p) {
        g[p] = gamma[p] + gamma_b[p];
        gamma_sum += g[p];
      }
      if (dcd_on) {
        const auto& fv = tape.value(it.net.features);
        const std::vector<double> feats(fv.begin(), fv.end());
        const auto& pv = tape.value(it.net.probs);
        std::vector<double> pfg(g.size());
        for (std::size_t p = 0; p < pfg.size(); ++p) pfg[p] = static_cast<double>(pv[p * cfg_.net.classes + 1]);
        const auto edges = detect_edges(it.image, cfg_.edge_percentile);
        const auto regions = decompose_regions(pfg, cfg_.tau, edges);
        const Centers centers = weighted_centers(feats, cfg_.net.feature_dim, g, regions, tracker_,
                                                 CenterOptions{cfg_.tau_min});
        fallbacks += centers.fallbacks();
        tracker_.observe(centers);
        const DcdValues dv = dcd_map(feats, cfg_.net.feature_dim, centers, regions.bd,
                                     DcdOptions{cfg_.dcd_eps, cfg_.dcd_max});
        lt.bd.assign(regions.bd.begin(), regions.bd.end());
        lt.bd_weights = boundary_weights(dv.clipped, cfg_.tau_dcd);
      }
      if (cfg_.dice) lt.dice = dice_loss(tape, it.net.probs, it.noisy);
    }
    const TotalVars tv = total_loss(tape, std::span<const ImageLossTerms>(losses), cfg_.lambda1, cfg_.lambda2);
    const LossBreakdown br = breakdown(tape, tv, cfg_.lambda1, cfg_.lambda2);
    tape.backward(tv.total);
    const auto gr = tape.grad(th);

    double nrm = 0.0;
    for (Real v : gr) nrm += static_cast<double>(v) * static_cast<double>(v);
    nrm = std::sqrt(nrm);
    const double scale = nrm > cfg_.grad_clip ? cfg_.grad_clip / nrm : 1.0;
    double clipped_sq = 0.0;
    auto& th_v = theta_.values();
    for (std::size_t k = 0; k < th_v.size(); ++k) {
      const double gk = static_cast<double>(gr[k]) * scale;
      clipped_sq += gk * gk;
      velocity_[k] = cfg_.momentum * velocity_[k] + gk + cfg_.weight_decay * th_v[k];
      th_v[k] -= lr * velocity_[k];
    }
    if (cfg_.ema) {
      for (std::size_t k = 0; k < th_v.size(); ++k) ema_[k] = cfg_.ema_decay * ema_[k] + (1.0 - cfg_.ema_decay) * th_v[k];
    }

    return json{{"epoch", epoch},
                {"step", step_},
                {"phase", warm ? "warmup" : "main"},
                {"lr", lr},
                {"base", br.base},
                {"boundary", br.boundary},
                {"dice", br.dice},
                {"total", br.total},
                {"val_loss", number_or_null(val_loss)},
                {"mean_gamma", gamma_sum / static_cast<double>(items.size() * maps_.pixels())},
                {"fallback_centers", fallbacks},
                {"reset_weights", resets},
                {"min_rectified", number_or_null(min_rect)},
                {"max_norm_dev", number_or_null(norm_dev)},
                {"grad_norm", nrm},
                {"grad_norm_clipped", std::sqrt(clipped_sq)}};
  }

  const TrainConfig& cfg_;
  const Dataset& ds_;
  const TrainHooks& hooks_;
  std::vector<std::size_t> train_idx_, val_idx_;
  int height_ = 0, width_ = 0;
  diff::ParamVector theta_;
  std::vector<double> velocity_;
  std::vector<double> ema_;
  WeightMaps maps_;
  CenterTracker tracker_;
  Rng rng_;
  long step_ = 0;
  std::size_t val_cursor_ = 0;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& ds, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.precision == Precision::kF32) return Trainer<float>(cfg, ds, hooks).run();
  return Trainer<double>(cfg, ds, hooks).run();
}

EvalSummary evaluate(const Checkpoint& ckpt, const Dataset& ds, SplitTag tag) {
  const auto idx = ds.indices(tag);
  if (idx.empty()) throw std::invalid_argument(std::string("evaluate: no ") + to_string(tag) + " items");
  std::vector<EvalRecord> recs;
  for (std::size_t i : idx) {
    const DataItem& it = ds.items[i];
    const ForwardOutput out = forward(ckpt.cfg, ckpt.params, it.image);
    const LabelMask pred = pseudo_labels(out.probs, out.height, out.width, ckpt.cfg.classes);
    recs.push_back(evaluate_masks(it.id, pred, it.clean, ckpt.cfg.classes));
  }
  return summarize(std::move(recs));
}

TrainResult train_to_dir(const TrainConfig& cfg, const Dataset& ds, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl");
  if (!log) throw std::runtime_error("cannot write " + (out_dir / "train_log.jsonl").string());
  TrainHooks hooks;
  hooks.log = &log;
  hooks.keep_log = false;
  TrainResult res = train(cfg, ds, hooks);
  save_checkpoint(out_dir / "model.mdcp", res.checkpoint);
  save_weight_maps(out_dir / "weights.mdwm", res.weights);
  std::ofstream(out_dir / "config.json") << config_to_json(cfg).dump(2) << '\n';
  std::ofstream(out_dir / "timing.json")
      << json{{"wall_seconds", res.wall_seconds}, {"steps", res.steps}, {"peak_tape_bytes", res.peak_tape_bytes}}.dump()
      << '\n';
  return res;
}

}  // namespace metadcseg
