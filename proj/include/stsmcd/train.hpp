#pragma once

// Optimization loop, evaluation, and the run-directory files that connect
// them.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <vector>

#include "stsmcd/data.hpp"
#include "stsmcd/metrics.hpp"
#include "stsmcd/models.hpp"

namespace stsmcd::train {

/// Adam with decoupled weight decay: p <- p (1 - lr wd), then the usual
/// bias-corrected moment step.
struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-3;
};

class AdamW {
 public:
  AdamW(const ParamStore& store, AdamWOptions opt);
  /// Applies one update from the gradients currently held by the parameters.
  void step(ParamStore& store);
  std::size_t steps() const noexcept { return t_; }
  const AdamWOptions& options() const noexcept { return opt_; }

 private:
  AdamWOptions opt_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// Composite loss of one sample for the model's task.
Var task_loss(const models::Probabilities& p, const data::Sample& s, Task task);

struct TrainOptions {
  AdamWOptions optim;
  std::size_t batch = 16;
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
  bool augment = true;
  unsigned workers = 1;
};

struct StepReport {
  std::size_t iteration;  // 1-based
  double loss;            // batch mean
};

/// Trains in place. Every iteration draws `batch` samples from a reshuffled
/// epoch order, augments each with a seed derived from (seed, iteration,
/// slot), builds one graph per sample and reduces the gradients in slot
/// order, so the result does not depend on `workers`. Throws NumericFault on
/// a non-finite loss.
std::vector<double> train(models::Model& model, const data::Dataset& ds, const TrainOptions& opt,
                          const std::function<void(const StepReport&)>& on_step = {});

struct Prediction {
  std::string id;
  LabelMap change;                    // bcd, scd
  LabelMap semantic_t1, semantic_t2;  // scd: land cover where change is predicted, 0 elsewhere
  LabelMap loc, clf;                  // bda: clf is 0 outside predicted buildings
};

/// Hard maps from one forward pass. Land-cover and damage classes are chosen
/// among the non-zero classes and only where change or a building is predicted.
Prediction predict(const models::Model& model, const Tensor& t1, const Tensor& t2);

struct Evaluation {
  metrics::Report report;
  std::vector<Prediction> predictions;
};

/// Scores the model on every sample, optionally degrading both images first.
/// SCD confusion pools the T1 and T2 maps; BCD scores are also reported for
/// SCD.
Evaluation evaluate(const models::Model& model, const data::Dataset& ds,
                    const data::Perturbation& perturb = {}, std::uint64_t seed = 0);

/// One raster per sample and map under dir/PRED_*/.
void write_predictions(const Evaluation& ev, Task task, const std::filesystem::path& dir);

// --- run directory -----------------------------------------------------------

/// Everything needed to rebuild a model for a checkpoint.
struct RunConfig {
  Task task = Task::bcd;
  models::ModelConfig model;
  std::uint64_t seed = 0;
};

void write_run_config(const RunConfig& rc, const std::filesystem::path& path);
RunConfig read_run_config(const std::filesystem::path& path);

/// Parses `key = value` lines; '#' starts a comment.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path);

}  // namespace stsmcd::train
