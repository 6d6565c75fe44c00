#include "apmg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "apmg/optim.hpp"
#include "apmg/rng.hpp"

namespace apmg {

void TrainConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("iterations must be non-negative");
  if (batch_size < 2) throw std::invalid_argument("batch size must be at least 2");
  if (!(lr_main > 0.0) || !(lr_transform > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (delay_start < 0 || transform_ma_window < 1 || plateau_window < 1 || plateau_max_triggers < 1)
    throw std::invalid_argument("window sizes must be positive");
  if (!(plateau_factor > 1.0)) throw std::invalid_argument("plateau factor must exceed 1");
}

int TrainConfig::hard_stop_iteration() const {
  return static_cast<int>(std::ceil(transform_hard_stop_fraction * iterations));
}

std::string to_json_line(const LogEntry& e) {
  nlohmann::json j;
  j["iter"] = e.iter;
  j["l_rec"] = e.l_rec;
  j["l_density"] = e.l_density ? nlohmann::json(*e.l_density) : nlohmann::json(nullptr);
  j["lr"] = e.lr;
  auto flags = nlohmann::json::array();
  if (e.l_density) flags.push_back("density_step");
  if (e.transform_stopped) flags.push_back("transform_stop");
  if (e.plateau_reduce) flags.push_back("plateau_reduce");
  if (e.plateau_stop) flags.push_back("plateau_stop");
  j["flags"] = flags;
  return j.dump();
}

void TrainLog::write_jsonl(std::ostream& out) const {
  for (const auto& e : entries) out << to_json_line(e) << '\n';
}

bool transform_stop_check(std::span<const double> history, const TrainConfig& cfg, int iter) {
  if (iter >= cfg.hard_stop_iteration()) return true;
  const std::size_t w = static_cast<std::size_t>(cfg.transform_ma_window);
  if (history.size() < 2 * w) return false;
  const auto last = history.end();
  const double cur = std::accumulate(last - w, last, 0.0) / static_cast<double>(w);
  const double prev = std::accumulate(last - 2 * w, last - w, 0.0) / static_cast<double>(w);
  const double gain = prev - cur;
  const bool improved = gain > 0.0 && gain >= cfg.transform_improve_threshold * std::abs(prev);
  return !improved;
}

PlateauScheduler::PlateauScheduler(double lr, int window, double threshold, double factor, int max_triggers)
    : lr_(lr), window_(window), threshold_(threshold), factor_(factor), max_triggers_(max_triggers) {}

PlateauScheduler::PlateauScheduler(const TrainConfig& cfg)
    : PlateauScheduler(cfg.lr_main, cfg.plateau_window, cfg.plateau_threshold, cfg.plateau_factor,
                       cfg.plateau_max_triggers) {}

PlateauAction PlateauScheduler::step(double loss) {
  sum_ += loss;
  if (++count_ < window_) return PlateauAction::none;
  const double mean = sum_ / count_;
  sum_ = 0.0;
  count_ = 0;
  if (!have_prev_) {
    have_prev_ = true;
    prev_mean_ = mean;
    return PlateauAction::none;
  }
  const double gain = prev_mean_ - mean;
  prev_mean_ = mean;
  if (gain > 0.0 && gain >= threshold_ * std::abs(mean + gain)) return PlateauAction::none;
  ++triggers_;
  lr_ /= factor_;
  return triggers_ >= max_triggers_ ? PlateauAction::stop : PlateauAction::reduce_lr;
}

void sample_batch(std::uint64_t seed, int iter, std::span<Vec3f> out) {
  const std::uint64_t base = static_cast<std::uint64_t>(iter) * out.size() * 3;
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d)
      out[i][d] = static_cast<float>(2.0 * uniform01(seed, base + 3 * i + d) - 1.0);
}

void fit_range(Model& model, const Volume& volume) {
  model.vmin = volume.vmin();
  model.vmax = volume.vmax();
}

namespace {

void pack_transforms(const std::vector<Transform<float>>& src, std::vector<float>& dst) {
  dst.resize(src.size() * 12);
  for (std::size_t m = 0; m < src.size(); ++m)
    std::copy(src[m].begin(), src[m].begin() + 12, dst.begin() + m * 12);
}

void unpack_transforms(const std::vector<float>& src, std::vector<Transform<float>>& dst) {
  for (std::size_t m = 0; m < dst.size(); ++m) std::copy(src.begin() + m * 12, src.begin() + (m + 1) * 12, dst[m].begin());
}

template <class V>
void zero(V& v) {
  std::fill(v.begin(), v.end(), typename V::value_type{});
}

}  // namespace

TrainLog train_single(Model& model, const Volume& volume, const TrainConfig& cfg,
                      const std::function<void(const LogEntry&)>& on_entry) {
  cfg.validate();
  model.config.validate();
  TrainLog log;
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.iterations == 0) return log;

  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<Vec3f> coords(batch);
  std::vector<float> targets(batch), sq_errors(batch);
  GradientSet<float> grads = GradientSet<float>::zeros_like(model);

  AdamState s_grids(model.grids.size()), s_w1(model.w1.size()), s_w2(model.w2.size()), s_w3(model.w3.size()),
      s_tf(model.transforms.size() * 12);
  std::vector<float> tf_params, tf_grads(model.transforms.size() * 12);

  PlateauScheduler plateau(cfg);
  double lr_main = cfg.lr_main;
  double lr_tf = cfg.lr_transform;
  bool transforms_stopped = cfg.freeze_transforms;
  std::vector<double> density_history;
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(batch);

  for (int it = 0; it < cfg.iterations; ++it) {
    LogEntry entry;
    entry.iter = it;

    sample_batch(cfg.seed, it, coords);
#pragma omp parallel for schedule(static) if (cfg.exec == Exec::parallel)
    for (std::ptrdiff_t i = 0; i < n; ++i) targets[i] = volume.sample(coords[i]);

    // (1) grids + decoder from the reconstruction loss.
    zero(grads.d_grids);
    zero(grads.d_w1);
    zero(grads.d_w2);
    zero(grads.d_w3);
    entry.l_rec = recon_loss_and_grads<float>(model, coords, targets, grads, sq_errors, cfg.exec);
    adam_step<float>(model.grids, grads.d_grids, s_grids, lr_main);
    adam_step<float>(model.w1, grads.d_w1, s_w1, lr_main);
    adam_step<float>(model.w2, grads.d_w2, s_w2, lr_main);
    adam_step<float>(model.w3, grads.d_w3, s_w3, lr_main);

    // (2) transforms from the density loss, after the delayed start and until stopped.
    if (!transforms_stopped && it >= cfg.hard_stop_iteration()) {
      transforms_stopped = true;
      entry.transform_stopped = true;
      log.transform_stop_iteration = it;
    }
    if (!transforms_stopped && it >= cfg.delay_start) {
      for (auto& g : grads.d_transforms) zero(g);
      const double l_density = density_loss_and_grads<float>(model, coords, sq_errors, grads, cfg.exec);
      entry.l_density = l_density;
      for (std::size_t m = 0; m < grads.d_transforms.size(); ++m)
        std::copy(grads.d_transforms[m].begin(), grads.d_transforms[m].begin() + 12, tf_grads.begin() + m * 12);
      pack_transforms(model.transforms, tf_params);
      adam_step<float>(tf_params, tf_grads, s_tf, lr_tf);
      unpack_transforms(tf_params, model.transforms);
      density_history.push_back(l_density);
      if (transform_stop_check(density_history, cfg, it)) {
        transforms_stopped = true;
        entry.transform_stopped = true;
        log.transform_stop_iteration = it;
      }
    }

    entry.lr = lr_main;
    if (cfg.plateau_enabled) {
      const PlateauAction action = plateau.step(entry.l_rec);
      if (action != PlateauAction::none) {
        log.plateau_triggers.push_back(it);
        lr_main /= cfg.plateau_factor;
        lr_tf /= cfg.plateau_factor;
        entry.plateau_reduce = action == PlateauAction::reduce_lr;
        entry.plateau_stop = action == PlateauAction::stop;
      }
    }
    log.entries.push_back(entry);
    if (on_entry) on_entry(entry);
    if (entry.plateau_stop) break;
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

double psnr_from_mse(double mse, double range) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(range * range / mse));
}

double psnr(const Model& model, const Volume& volume, Exec exec) {
  const auto [w, h, d] = volume.dims();
  const std::size_t slice = static_cast<std::size_t>(w) * h;
  std::vector<Vec3f> coords(slice);
  std::vector<float> out(slice);
  double sq = 0.0;
  for (int z = 0; z < d; ++z) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        coords[x + static_cast<std::size_t>(w) * y] = {static_cast<float>(volume.vertex_coord(0, x)),
                                                       static_cast<float>(volume.vertex_coord(1, y)),
                                                       static_cast<float>(volume.vertex_coord(2, z))};
    forward_batch<float>(model, coords, out, exec);
    const float* truth = volume.data().data() + slice * z;
    for (std::size_t i = 0; i < slice; ++i) {
      const double e = double(out[i]) - double(truth[i]);
      sq += e * e;
    }
  }
  return psnr_from_mse(sq / static_cast<double>(volume.size()), double(volume.vmax()) - double(volume.vmin()));
}

}  // namespace apmg
