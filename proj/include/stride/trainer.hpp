#pragma once

#include <fstream>
#include <thread>
#include <vector>

#include "stride/autodiff.hpp"
#include "stride/common.hpp"
#include "stride/envs.hpp"
#include "stride/optim.hpp"

namespace stride {

/// Shared training knobs. Every learned model trains under the same capacity
/// and budget so comparisons stay fair.
struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 256;
  int steps = 2000;
  double lambda_fm = 1.0;  // weight of the flow-matching term (joint objective)
  int nfe_train = 10;      // sampler steps inside the training-time prediction
  uint64_t seed = 0;
  bool grad_through_sampler = true;
  double sigma_min = 1e-2;
  std::vector<int> hidden = {64, 64};
  int time_embed_dim = 16;
  double diag_eps = 1e-4;

  void validate() const {
    if (lr <= 0 || batch_size < 1 || steps < 1 || nfe_train < 1)
      throw DataError("TrainConfig: lr, batch_size, steps, nfe_train must be positive");
    if (lambda_fm < 0) throw DataError("TrainConfig: lambda_fm must be >= 0");
    if (!(sigma_min > 0 && sigma_min < 1)) throw DataError("TrainConfig: sigma_min in (0,1)");
  }
};

struct TrainCurvePoint {
  int step;
  double total;
  double accel_mse;
  double aux;  // model-specific second component (flow-matching / denoising)
};

inline void write_curve_csv(const std::vector<TrainCurvePoint>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "step,total_loss,accel_mse,fm_loss\n";
  for (const TrainCurvePoint& p : curve)
    out << p.step << ',' << format_double(p.total) << ',' << format_double(p.accel_mse) << ','
        << format_double(p.aux) << '\n';
}

/// Pre-drawn randomness for one datum. All draws happen on the main thread in
/// datum order, so results are bit-identical for any worker count.
struct DatumDraw {
  Vec z0;         // standard normal, model dimension
  double t;       // uniform [0,1] flow time
  Vec noise;      // standard normal, sized by the caller's noise_dim
  int t_index;    // uniform {1..T} diffusion step (0 when unused)
  uint64_t salt;  // seed for any extra per-datum stream a loss needs
};

struct DatumLoss {
  ad::Var total;
  double accel_sq = 0.0;
  double aux = 0.0;
};

// Fixed chunk count keeps the gradient reduction order independent of how
// many threads actually run.
inline constexpr int kTrainChunks = 4;

/// Minibatch Adam loop over a dataset. `record` runs on worker threads and
/// writes one datum's loss onto the given tape:
///   record(tape, params_vars, record_index, draw, chunk_id) -> DatumLoss
/// Next-observation models pass sample_range = size-1 so index+1 stays valid.
/// Throws NumericalError with diagnostics if the loss diverges.
template <class RecordFn>
std::vector<TrainCurvePoint> run_training(Vec& params, const TrajectoryDataset& ds,
                                          const TrainConfig& cfg, int schedule_T,
                                          RecordFn&& record, int sample_range = -1,
                                          int noise_dim = -1) {
  cfg.validate();
  int n = ds.dof();
  if (noise_dim < 0) noise_dim = n;
  size_t data_count =
      sample_range > 0 ? static_cast<size_t>(sample_range) : ds.records.size();
  if (data_count == 0 || data_count > ds.records.size())
    throw DataError("run_training: bad sample range");

  Adam adam(cfg.lr, params.size());
  Rng rng = Rng(cfg.seed).fork(7);
  std::vector<TrainCurvePoint> curve;
  curve.reserve(cfg.steps);

  int batch = cfg.batch_size;
  std::vector<int> indices(batch);
  std::vector<DatumDraw> draws(batch);
  std::vector<Vec> chunk_grad(kTrainChunks, Vec(params.size(), 0.0));
  std::vector<Vec> chunk_terms(kTrainChunks, Vec(3, 0.0));
  std::vector<ad::Tape> tapes(kTrainChunks);
  std::vector<std::string> chunk_error(kTrainChunks);
  Vec grad(params.size());

  int hw = static_cast<int>(std::thread::hardware_concurrency());
  int n_threads = std::max(1, std::min(kTrainChunks, hw > 0 ? hw : 1));

  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < batch; ++b) {
      indices[b] = rng.uniform_int(static_cast<int>(data_count));
      DatumDraw& d = draws[b];
      d.z0.resize(n);
      rng.fill_normal(d.z0);
      d.t = rng.uniform01();
      d.noise.resize(noise_dim);
      rng.fill_normal(d.noise);
      d.t_index = schedule_T > 0 ? 1 + rng.uniform_int(schedule_T) : 0;
      d.salt = rng.next_u64();
    }

    auto run_chunk = [&](int c) {
      chunk_error[c].clear();
      Vec& g = chunk_grad[c];
      std::fill(g.begin(), g.end(), 0.0);
      Vec& terms = chunk_terms[c];
      std::fill(terms.begin(), terms.end(), 0.0);
      int lo = static_cast<int>(static_cast<long long>(batch) * c / kTrainChunks);
      int hi = static_cast<int>(static_cast<long long>(batch) * (c + 1) / kTrainChunks);
      ad::Tape& tape = tapes[c];
      std::vector<double> adj;
      try {
        tape.clear();
        std::vector<ad::Var> pv = tape.inputs(params);
        size_t mark = tape.size();
        for (int b = lo; b < hi; ++b) {
          tape.rewind(mark);
          DatumLoss dl;
          try {
            dl = record(tape, pv.data(), indices[b], draws[b], c);
          } catch (const NumericalError& e) {
            throw NumericalError("datum " + std::to_string(indices[b]) + ": " + e.what());
          }
          tape.backward(dl.total, adj);
          for (size_t i = 0; i < params.size(); ++i) g[i] += adj[i];
          terms[0] += dl.total.val();
          terms[1] += dl.accel_sq;
          terms[2] += dl.aux;
        }
      } catch (const std::exception& e) {
        chunk_error[c] = e.what();
      }
    };

    if (n_threads > 1) {
      std::vector<std::thread> workers;
      for (int c = 0; c < kTrainChunks; ++c) workers.emplace_back(run_chunk, c);
      for (auto& w : workers) w.join();
    } else {
      for (int c = 0; c < kTrainChunks; ++c) run_chunk(c);
    }
    for (int c = 0; c < kTrainChunks; ++c)
      if (!chunk_error[c].empty())
        throw NumericalError("training failed at step " + std::to_string(step) + ": " +
                             chunk_error[c]);

    double total = 0.0, accel = 0.0, aux = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0);
    for (int c = 0; c < kTrainChunks; ++c) {
      for (size_t i = 0; i < params.size(); ++i) grad[i] += chunk_grad[c][i];
      total += chunk_terms[c][0];
      accel += chunk_terms[c][1];
      aux += chunk_terms[c][2];
    }
    double inv_b = 1.0 / batch;
    for (double& gv : grad) gv *= inv_b;
    total *= inv_b;
    accel *= inv_b;
    aux *= inv_b;

    if (!std::isfinite(total) || total > 1e6)
      throw NumericalError("training diverged at step " + std::to_string(step) + ": loss " +
                           std::to_string(total) + " (accel " + std::to_string(accel) + ", aux " +
                           std::to_string(aux) + ")");

    adam.step(params, grad);
    curve.push_back({step, total, accel, aux});
  }
  return curve;
}

}  // namespace stride
