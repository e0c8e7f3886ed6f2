#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cstn/config.hpp"
#include "cstn/io.hpp"
#include "cstn/metrics.hpp"
#include "cstn/model.hpp"
#include "cstn/synth.hpp"

namespace cstn {

/// First-order optimizers over named parameters. Slots are keyed by
/// parameter name so checkpoints can carry them; a parameter without a
/// gradient this step is treated as gradient zero.
class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step(NamedParams& params) = 0;
    /// Slot tensors for checkpoints, names already prefixed with "opt/".
    virtual std::vector<std::pair<std::string, Tensor>> state() const = 0;
    virtual void load_state(const Checkpoint& c) = 0;
};

/// Adam with bias correction; betas fixed at (0.9, 0.999), eps 1e-8.
class Adam : public Optimizer {
public:
    explicit Adam(double lr) : lr_(lr) {}
    void step(NamedParams& params) override;
    std::vector<std::pair<std::string, Tensor>> state() const override;
    void load_state(const Checkpoint& c) override;

private:
    struct Slot {
        std::string name;
        std::vector<double> m, v;
    };
    Slot& slot(const std::string& name, size_t n);
    double lr_;
    std::int64_t t_ = 0;
    std::vector<Slot> slots_;
};

/// Plain SGD; stateless apart from the learning rate.
class Sgd : public Optimizer {
public:
    explicit Sgd(double lr) : lr_(lr) {}
    void step(NamedParams& params) override;
    std::vector<std::pair<std::string, Tensor>> state() const override { return {}; }
    void load_state(const Checkpoint&) override {}

private:
    double lr_;
};

std::unique_ptr<Optimizer> make_optimizer(const std::string& name, double lr);

/// How evaluate() turns model outputs into boxes.
struct EvalOptions {
    bool use_transform = true;   // false: decode default (identity) boxes
    int single_scale_level = -1; // -1 both levels; 0/1 restrict to one
};

struct EvalResult {
    std::vector<EvalRecord> records;
    MetricsReport metrics;
};

/// Runs the model over a sample list (no gradients, batchnorm in eval
/// mode) and scores every sample: joint-argmax class, marginal class, and
/// the top-5 gt-class boxes with IoUs.
EvalResult evaluate(CstnModel& model, const std::vector<WeakSample>& samples,
                    const EvalOptions& opts, int batch = 32);

/// One line per epoch: epoch number, loss components, validation Top-1
/// Class and Top-1 Loc.
struct EpochLog {
    int epoch = 0;
    double loss = 0.0, loss_cls = 0.0, loss_theta = 0.0, loss_scale = 0.0;
    double top1_class = 0.0, top1_loc = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    Checkpoint checkpoint;
};

/// Snapshot of model + optimizer + data order; config_text is the full
/// config so the checkpoint alone can rebuild the run.
Checkpoint make_checkpoint(const TrainConfig& cfg, CstnModel& model, const Optimizer& opt,
                           std::uint64_t epoch, std::uint64_t data_rng_state);

/// Rebuilds the model a checkpoint was saved from (architecture from the
/// embedded config, weights and buffers from the tensor table).
CstnModel model_from_checkpoint(const Checkpoint& c);

/// Copies parameter/buffer tensors from the table into a live model;
/// names must match the model exactly.
void load_model_state(CstnModel& model, const Checkpoint& c);

/// Trains on the given dataset. resume, when non-null, restores model,
/// optimizer, epoch counter, and data order before continuing. Per-epoch
/// reporting runs through on_epoch when provided (also receives each log
/// row). NaN in any loss component aborts with the batch id and all
/// component values in the message.
TrainResult train(const TrainConfig& cfg, const Dataset& ds, const Checkpoint* resume = nullptr,
                  const std::function<void(const EpochLog&)>& on_epoch = nullptr);

} // namespace cstn
