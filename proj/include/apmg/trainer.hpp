#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apmg/kernels.hpp"
#include "apmg/model.hpp"
#include "apmg/volume.hpp"

namespace apmg {

struct TrainConfig {
  int iterations = 50'000;
  int batch_size = 100'000;
  double lr_main = 0.01;
  double lr_transform = 0.001;
  int delay_start = 500;
  int transform_ma_window = 1000;
  double transform_improve_threshold = 1e-4;
  double transform_hard_stop_fraction = 0.8;
  int plateau_window = 500;
  double plateau_threshold = 1e-4;
  double plateau_factor = 10.0;
  int plateau_max_triggers = 3;
  bool plateau_enabled = true;
  /// Disables transform updates entirely (transforms stay at initialization).
  bool freeze_transforms = false;
  std::uint64_t seed = 0;
  Exec exec = Exec::parallel;

  void validate() const;
  /// First iteration at which transform updates are stopped unconditionally.
  int hard_stop_iteration() const;
};

struct LogEntry {
  int iter = 0;
  double l_rec = 0.0;
  std::optional<double> l_density;
  double lr = 0.0;
  bool transform_stopped = false;  // stop flag set during this iteration
  bool plateau_reduce = false;
  bool plateau_stop = false;
};

struct TrainLog {
  std::vector<LogEntry> entries;
  int transform_stop_iteration = -1;
  std::vector<int> plateau_triggers;
  double wall_seconds = 0.0;

  std::size_t iterations_run() const { return entries.size(); }
  void write_jsonl(std::ostream& out) const;
};

std::string to_json_line(const LogEntry& e);

/// Pure transform early-stopping predicate over the density-loss history.
/// True once iter reaches the hard-stop fraction, or when the latest
/// window-average improved on the one a full window earlier by less than the
/// relative threshold.
bool transform_stop_check(std::span<const double> density_history, const TrainConfig& cfg, int iter);

enum class PlateauAction { none, reduce_lr, stop };

/// Window-mean plateau detector: compares consecutive non-overlapping windows
/// of the observed loss; each non-improving window divides lr by `factor`, and
/// the `max_triggers`-th one requests a stop.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, int window, double threshold, double factor, int max_triggers);
  explicit PlateauScheduler(const TrainConfig& cfg);

  PlateauAction step(double loss);
  double lr() const { return lr_; }
  int triggers() const { return triggers_; }

 private:
  double lr_;
  int window_;
  double threshold_;
  double factor_;
  int max_triggers_;
  int triggers_ = 0;
  int count_ = 0;
  double sum_ = 0.0;
  bool have_prev_ = false;
  double prev_mean_ = 0.0;
};

/// Coordinates of training iteration `iter`, uniform in [-1,1]^3.
void sample_batch(std::uint64_t seed, int iter, std::span<Vec3f> out);

/// Fits `model` to `volume`. The model's value range is not touched; set it
/// from the data before calling (see fit_range).
TrainLog train_single(Model& model, const Volume& volume, const TrainConfig& cfg,
                      const std::function<void(const LogEntry&)>& on_entry = {});

void fit_range(Model& model, const Volume& volume);

inline constexpr double kPsnrCap = 200.0;

/// Data-space PSNR over every lattice vertex of `volume`, capped at 200 dB.
double psnr(const Model& model, const Volume& volume, Exec exec = Exec::parallel);
double psnr_from_mse(double mse, double range);

}  // namespace apmg
