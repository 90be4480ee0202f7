#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lmdet/checkpoint.hpp"
#include "lmdet/dataset.hpp"
#include "lmdet/model.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

/// Mean over all elements of -[t*log(p) + (1-t)*log(1-p)], with p clamped
/// to [1e-7, 1 - 1e-7]. Elements whose raw prediction lies outside the
/// clamp range get zero gradient.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target);

template <class T>
Tensor<T> bce_loss(const HeatmapStack<T>& pred, const HeatmapStack<T>& target);

/// Triangular wave: linear ascent low -> high over the first half of each
/// cycle, descent back over the second half. cycle_steps is the full period.
struct LrSchedule {
    double low = 1e-4;
    double high = 5e-3;
    long long cycle_steps = 0;
};

double cyclic_lr(long long step, const LrSchedule& sched);

/// One Adam update over the named parameters; beta1 0.9, beta2 0.999,
/// eps 1e-8, moments in double. Each slot carries its own update count, so
/// bias correction stays exact when domains are stepped sparsely. Missing
/// gradients count as zero; non-finite gradients abort with the name.
template <class T>
void adam_step(ParamStore<T>& store, const std::vector<std::string>& names,
               std::map<std::string, AdamSlot>& slots, double lr);

struct TrainConfig {
    std::string preset = "toy";  // "toy" or "paper"
    int epochs = 1;
    int batch_size = 8;
    double lr_low = 1e-4;
    double lr_high = 5e-3;
    long long cycle_steps = 0;  // 0 resolves to two epochs of steps
    unsigned long long seed = 0;
    double sigma = 3.0;
    int input_size = 64;
    bool aux_guidance = false;  // adds bce(guidance, target) with weight 1

    void validate() const;
};

/// Architecture for the preset with the configured target sigma.
NetworkConfig network_config_for(const TrainConfig& cfg);

/// Batches one epoch of training yields: whole chunks plus any remainder
/// except size-1 remainders, summed over domains.
long long steps_per_epoch(const std::vector<DatasetManifest>& manifests,
                          int batch_size);

struct EpochStats {
    int epoch = 0;        // 1-based
    double lr = 0.0;      // last step's learning rate
    double train_loss = 0.0;
    std::vector<std::pair<std::string, double>> val_loss;  // manifest order
    double total_val = 0.0;  // sum of the per-domain means
    std::vector<double> step_losses;
};

/// best is the minimum-total-validation-loss snapshot; best_epoch is -1
/// when no epoch improved on the incoming checkpoint's record (possible
/// only when resuming), and best is then empty.
struct TrainResult {
    Checkpoint best;
    Checkpoint last;
    std::vector<EpochStats> history;
    int best_epoch = -1;
};

/// Multi-domain training from scratch. Manifests with an empty val split
/// have 20% of train (at least one record) carved off as validation. Each
/// step updates the shared namespace plus the batch domain's namespace.
template <class T>
TrainResult train(const TrainConfig& cfg, std::vector<DatasetManifest> manifests);

/// Continues a run from its last snapshot. The architecture derived from
/// cfg and the manifests must match the checkpoint header; optimizer state,
/// sampler state, and the best-loss record are restored, so the combined
/// loss sequence equals an uninterrupted run.
template <class T>
TrainResult resume_train(const Checkpoint& ckpt, const TrainConfig& cfg,
                         std::vector<DatasetManifest> manifests);

/// Adds new_spec next to the checkpoint's domains, seeding its parameters
/// from the donor (default: the first registered domain), and trains only
/// the new namespace; every shared parameter and buffer stays bit-identical.
/// The architecture, sigma, and input extent come from the checkpoint;
/// cfg.preset, cfg.sigma, and cfg.input_size are ignored.
template <class T>
TrainResult transfer(const Checkpoint& ckpt, const DomainSpec& new_spec,
                     DatasetManifest manifest, const TrainConfig& cfg,
                     const std::string& donor = "");

/// Rebuilds the network described by the checkpoint header and restores
/// every parameter and buffer. T must match the stored precision.
template <class T>
Network<T> network_from_checkpoint(const Checkpoint& ckpt);

/// Landmarks for one record in its original geometry: resize to the model
/// input extent, decode the fused heatmap, map the coordinates back.
template <class T>
LandmarkSet predict_landmarks(Network<T>& net, const std::string& domain,
                              const SampleRecord& record, int input_size);

/// Radial errors over a whole split in original geometry, spacing resolved
/// per image from the domain's rule.
template <class T>
std::vector<double> split_errors(Network<T>& net, const DomainSpec& spec,
                                 const std::vector<SampleRecord>& records,
                                 int input_size);

}  // namespace lmdet
