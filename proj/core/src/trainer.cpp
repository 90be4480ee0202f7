#include "lmdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lmdet/errors.hpp"
#include "lmdet/metrics.hpp"
#include "lmdet/ops.hpp"

namespace lmdet {

template <class T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (!shape_eq(pred.shape(), target.shape()))
        throw ShapeError("bce_loss: shape mismatch " + shape_str(pred.shape()) +
                         " vs " + shape_str(target.shape()));
    const double lo = static_cast<double>(static_cast<T>(1e-7));
    const double hi = static_cast<double>(static_cast<T>(1.0 - 1e-7));
    const auto& p = pred.values();
    const auto& t = target.values();
    const std::size_t n = p.size();
    if (n == 0) throw ShapeError("bce_loss: empty prediction");
    long double acc = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
        const double pc = std::min(std::max(static_cast<double>(p[i]), lo), hi);
        const double tv = static_cast<double>(t[i]);
        acc -= tv * std::log(pc) + (1.0 - tv) * std::log1p(-pc);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<long double>(n)));
    const double inv_n = 1.0 / static_cast<double>(n);
    ops::attach_op(out, "bce_loss", {pred, target}, [lo, hi, inv_n](Node<T>& nd) {
        const double g = static_cast<double>((*nd.out_grad)[0]);
        const auto& pv = nd.inputs[0].values();
        const auto& tv = nd.inputs[1].values();
        if (nd.inputs[0].requires_grad()) {
            auto& gp = nd.inputs[0].grad();
            for (std::size_t i = 0; i < pv.size(); ++i) {
                const double praw = static_cast<double>(pv[i]);
                if (praw < lo || praw > hi) continue;  // clamp blocks the gradient
                const double d = (praw - static_cast<double>(tv[i])) /
                                 (praw * (1.0 - praw));
                gp[i] += static_cast<T>(g * d * inv_n);
            }
        }
        if (nd.inputs[1].requires_grad()) {
            auto& gt = nd.inputs[1].grad();
            for (std::size_t i = 0; i < pv.size(); ++i) {
                const double pc =
                    std::min(std::max(static_cast<double>(pv[i]), lo), hi);
                const double d = std::log1p(-pc) - std::log(pc);
                gt[i] += static_cast<T>(g * d * inv_n);
            }
        }
    });
    return out;
}

template <class T>
Tensor<T> bce_loss(const HeatmapStack<T>& pred, const HeatmapStack<T>& target) {
    return bce_loss(pred.scores, target.scores);
}

double cyclic_lr(long long step, const LrSchedule& sched) {
    if (step < 0) throw ContractError("cyclic_lr: negative step");
    if (sched.cycle_steps < 2)
        throw ContractError("cyclic_lr: cycle length must be at least 2 steps");
    if (!(sched.low > 0.0) || !(sched.high >= sched.low))
        throw ContractError("cyclic_lr: need 0 < low <= high");
    const long long period = sched.cycle_steps;
    const long long half = period / 2;
    const long long phase = step % period;
    const double span = sched.high - sched.low;
    if (phase <= half)
        return sched.low + span * static_cast<double>(phase) / static_cast<double>(half);
    return sched.high -
           span * static_cast<double>(phase - half) / static_cast<double>(period - half);
}

template <class T>
void adam_step(ParamStore<T>& store, const std::vector<std::string>& names,
               std::map<std::string, AdamSlot>& slots, double lr) {
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double eps = 1e-8;
    for (const auto& name : names) {
        Tensor<T>* param = store.find_param(name);
        if (!param) throw ContractError("adam_step: unknown parameter '" + name + "'");
        const std::size_t n = param->size();
        auto grad = param->grad_storage();
        if (grad)
            for (std::size_t i = 0; i < n; ++i)
                if (!std::isfinite(static_cast<double>((*grad)[i])))
                    throw NumericError("non-finite gradient in parameter '" + name +
                                       "'");
        AdamSlot& slot = slots[name];
        if (slot.m.empty()) {
            slot.m.assign(n, 0.0);
            slot.v.assign(n, 0.0);
        } else if (slot.m.size() != n) {
            throw ContractError("adam_step: state size mismatch for '" + name + "'");
        }
        slot.t += 1;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(slot.t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(slot.t));
        auto& vals = param->values();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = grad ? static_cast<double>((*grad)[i]) : 0.0;
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
            const double update =
                lr * (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + eps);
            vals[i] = static_cast<T>(static_cast<double>(vals[i]) - update);
        }
    }
}

void TrainConfig::validate() const {
    if (preset != "toy" && preset != "paper")
        throw ContractError("train config: unknown preset '" + preset + "'");
    if (epochs < 1) throw ContractError("train config: epochs must be at least 1");
    if (batch_size < 1) throw ContractError("train config: batch size must be at least 1");
    if (!(lr_low > 0.0) || !(lr_high > lr_low))
        throw ContractError("train config: need 0 < lr_low < lr_high");
    if (cycle_steps != 0 && cycle_steps < 2)
        throw ContractError("train config: cycle length must be 0 (auto) or at least 2");
    if (!(sigma > 0.0)) throw ContractError("train config: sigma must be positive");
    if (input_size < 1) throw ContractError("train config: input size must be positive");
}

NetworkConfig network_config_for(const TrainConfig& cfg) {
    cfg.validate();
    NetworkConfig net =
        cfg.preset == "paper" ? paper_network_config() : toy_network_config();
    net.sigma = cfg.sigma;
    return net;
}

long long steps_per_epoch(const std::vector<DatasetManifest>& manifests,
                          int batch_size) {
    if (batch_size < 1) throw ContractError("steps_per_epoch: batch size must be >= 1");
    long long total = 0;
    for (const auto& m : manifests) {
        const long long n = static_cast<long long>(m.train.size());
        total += n / batch_size + (n % batch_size > 1 ? 1 : 0);
    }
    return total;
}

namespace {

/// When a manifest ships no validation records, the tail 20% of train
/// (at least one record) becomes the validation split.
void carve_val(DatasetManifest& m) {
    if (!m.val.empty()) return;
    const std::size_t n = m.train.size();
    if (n == 0) throw DataError("domain '" + m.spec.name + "': empty train split");
    const std::size_t take = std::max<std::size_t>(1, n / 5);
    if (take >= n)
        throw DataError("domain '" + m.spec.name +
                        "': train split too small to carve a validation split");
    m.val.assign(m.train.end() - static_cast<std::ptrdiff_t>(take), m.train.end());
    m.train.resize(n - take);
}

template <class T>
struct Session {
    TrainConfig cfg;
    std::vector<DatasetManifest> data;
    Network<T> net;
    std::string arch;
    MixedSampler sampler;
    std::map<std::string, AdamSlot> slots;
    std::map<std::string, std::vector<std::string>> updates;  // domain -> step set
    bool eval_forward = false;  // transfer trains through eval-mode forward
    long long step = 0;
    int next_epoch = 0;
    double best_total = std::numeric_limits<double>::infinity();
    Checkpoint best_snapshot;
    int best_epoch = -1;

    Session(const TrainConfig& c, std::vector<DatasetManifest> d, Network<T> n,
            std::string a, bool freeze_shared)
        : cfg(c),
          data(std::move(d)),
          net(std::move(n)),
          arch(std::move(a)),
          sampler(data, c.batch_size, c.seed + 1),
          eval_forward(freeze_shared) {
        if (cfg.input_size % net.cfg.encoder.required_divisor() != 0)
            throw ContractError("train: input size " + std::to_string(cfg.input_size) +
                                " must be a multiple of " +
                                std::to_string(net.cfg.encoder.required_divisor()));
        std::vector<std::string> shared;
        std::map<std::string, std::vector<std::string>> per_domain;
        for (const auto& e : net.store.params()) {
            const std::string dom = ParamStore<T>::domain_of(e.name);
            if (dom.empty())
                shared.push_back(e.name);
            else
                per_domain[dom].push_back(e.name);
        }
        for (const auto& m : data) {
            auto it = per_domain.find(m.spec.name);
            if (it == per_domain.end())
                throw ContractError("train: network has no domain '" + m.spec.name +
                                    "'");
            if (m.val.empty())
                throw ContractError("train: domain '" + m.spec.name +
                                    "' has no validation split");
            std::vector<std::string> names;
            if (!freeze_shared) names = shared;
            names.insert(names.end(), it->second.begin(), it->second.end());
            updates.emplace(m.spec.name, std::move(names));
        }
    }
};

template <class T>
Checkpoint snapshot(const Session<T>& s, int epochs_done) {
    Checkpoint ckpt;
    ckpt.arch_text = s.arch;
    capture_params(s.net.store, ckpt);
    ckpt.adam = s.slots;
    ckpt.step = s.step;
    ckpt.epoch = epochs_done;
    ckpt.best_val_loss = s.best_total;
    ckpt.sampler_state = s.sampler.save_state();
    return ckpt;
}

/// Mean validation loss over one domain, weighted by sample count. The
/// val records are staged as a train split so load_batch can address them.
template <class T>
double domain_val_loss(Session<T>& s, const DatasetManifest& m) {
    DatasetManifest staged;
    staged.spec = m.spec;
    staged.root = m.root;
    staged.train = m.val;
    NoGradGuard guard;
    long double acc = 0.0L;
    const int total = static_cast<int>(staged.train.size());
    for (int at = 0; at < total; at += s.cfg.batch_size) {
        Batch batch;
        batch.domain = m.spec.name;
        const int end = std::min(total, at + s.cfg.batch_size);
        for (int i = at; i < end; ++i) batch.indices.push_back(i);
        auto loaded = load_batch<T>(staged, batch, s.cfg.input_size, s.cfg.input_size);
        Tensor<T> targets = batch_targets<T>(loaded.labels, s.cfg.input_size,
                                             s.cfg.input_size, s.cfg.sigma);
        auto out = s.net.forward(loaded.images, batch.domain, false);
        Tensor<T> loss = bce_loss(out.fused, targets);
        if (s.cfg.aux_guidance) loss = ops::add(loss, bce_loss(out.guidance, targets));
        acc += static_cast<long double>(loss.values()[0]) * (end - at);
    }
    return static_cast<double>(acc / total);
}

template <class T>
TrainResult run_session(Session<T>& s) {
    const long long spe = steps_per_epoch(s.data, s.cfg.batch_size);
    if (spe == 0)
        throw DataError("training splits yield no batches at batch size " +
                        std::to_string(s.cfg.batch_size));
    const LrSchedule sched{s.cfg.lr_low, s.cfg.lr_high,
                           s.cfg.cycle_steps == 0 ? 2 * spe : s.cfg.cycle_steps};
    TrainResult result;
    for (int epoch = s.next_epoch; epoch < s.cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch + 1;
        long double loss_acc = 0.0L;
        for (const auto& batch : s.sampler.next_epoch()) {
            const double lr = cyclic_lr(s.step, sched);
            auto loaded = load_batch<T>(s.data[static_cast<std::size_t>(batch.manifest)],
                                        batch, s.cfg.input_size, s.cfg.input_size);
            Tensor<T> targets = batch_targets<T>(loaded.labels, s.cfg.input_size,
                                                 s.cfg.input_size, s.cfg.sigma);
            auto out = s.net.forward(loaded.images, batch.domain, !s.eval_forward);
            Tensor<T> loss = bce_loss(out.fused, targets);
            if (s.cfg.aux_guidance) loss = ops::add(loss, bce_loss(out.guidance, targets));
            const double loss_val = static_cast<double>(loss.values()[0]);
            if (!std::isfinite(loss_val))
                throw NumericError("non-finite training loss at step " +
                                   std::to_string(s.step));
            s.net.store.zero_grads();
            backward(loss);
            adam_step(s.net.store, s.updates.at(batch.domain), s.slots, lr);
            s.step += 1;
            stats.lr = lr;
            stats.step_losses.push_back(loss_val);
            loss_acc += loss_val;
        }
        stats.train_loss = stats.step_losses.empty()
                               ? 0.0
                               : static_cast<double>(
                                     loss_acc / static_cast<long double>(
                                                    stats.step_losses.size()));
        long double total_val = 0.0L;
        for (const auto& m : s.data) {
            const double vl = domain_val_loss(s, m);
            stats.val_loss.emplace_back(m.spec.name, vl);
            total_val += vl;
        }
        stats.total_val = static_cast<double>(total_val);
        if (stats.total_val < s.best_total) {
            s.best_total = stats.total_val;
            s.best_epoch = epoch + 1;
            s.best_snapshot = snapshot(s, epoch + 1);
        }
        result.history.push_back(std::move(stats));
    }
    result.best_epoch = s.best_epoch;
    if (s.best_epoch >= 0) result.best = std::move(s.best_snapshot);
    result.last = snapshot(s, s.cfg.epochs);
    return result;
}

template <class T>
std::pair<Network<T>, std::vector<DomainSpec>> build_network(
    const TrainConfig& cfg, const std::vector<DatasetManifest>& manifests) {
    std::vector<DomainSpec> specs;
    for (const auto& m : manifests) specs.push_back(m.spec);
    Rng rng(cfg.seed);
    Network<T> net = make_network<T>(network_config_for(cfg), specs, rng);
    return {std::move(net), std::move(specs)};
}

}  // namespace

template <class T>
TrainResult train(const TrainConfig& cfg, std::vector<DatasetManifest> manifests) {
    cfg.validate();
    if (manifests.empty()) throw ContractError("train: no dataset manifests");
    for (auto& m : manifests) carve_val(m);
    auto [net, specs] = build_network<T>(cfg, manifests);
    std::string arch = arch_text(net.cfg, specs, cfg.input_size);
    Session<T> session(cfg, std::move(manifests), std::move(net), std::move(arch),
                       false);
    return run_session(session);
}

template <class T>
TrainResult resume_train(const Checkpoint& ckpt, const TrainConfig& cfg,
                         std::vector<DatasetManifest> manifests) {
    cfg.validate();
    if (manifests.empty()) throw ContractError("resume: no dataset manifests");
    for (auto& m : manifests) carve_val(m);
    auto [net, specs] = build_network<T>(cfg, manifests);
    std::string arch = arch_text(net.cfg, specs, cfg.input_size);
    if (arch != ckpt.arch_text)
        throw DataError(
            "checkpoint architecture does not match the requested configuration");
    if (ckpt.epoch >= cfg.epochs)
        throw DataError("checkpoint has already completed " +
                        std::to_string(ckpt.epoch) +
                        " epochs; raise the epoch target to resume");
    restore_params(ckpt, net.store);
    Session<T> session(cfg, std::move(manifests), std::move(net), std::move(arch),
                       false);
    session.slots = ckpt.adam;
    session.step = ckpt.step;
    session.next_epoch = ckpt.epoch;
    session.best_total = ckpt.best_val_loss;
    if (!ckpt.sampler_state.empty()) session.sampler.load_state(ckpt.sampler_state);
    return run_session(session);
}

template <class T>
TrainResult transfer(const Checkpoint& ckpt, const DomainSpec& new_spec,
                     DatasetManifest manifest, const TrainConfig& cfg,
                     const std::string& donor) {
    cfg.validate();
    if (manifest.spec.name != new_spec.name)
        throw ContractError("transfer: manifest domain '" + manifest.spec.name +
                            "' does not match the new domain '" + new_spec.name + "'");
    Network<T> net = network_from_checkpoint<T>(ckpt);
    const ArchInfo info = parse_arch_text(ckpt.arch_text);
    Rng rng(cfg.seed);
    net.add_domain(new_spec, donor.empty() ? info.domains.front().name : donor, rng);
    carve_val(manifest);
    TrainConfig effective = cfg;
    effective.sigma = info.net.sigma;
    effective.input_size = info.input_size;
    std::vector<DomainSpec> specs = info.domains;
    specs.push_back(new_spec);
    std::string arch = arch_text(net.cfg, specs, effective.input_size);
    std::vector<DatasetManifest> data;
    data.push_back(std::move(manifest));
    Session<T> session(effective, std::move(data), std::move(net), std::move(arch),
                       true);
    return run_session(session);
}

template <class T>
Network<T> network_from_checkpoint(const Checkpoint& ckpt) {
    const ArchInfo info = parse_arch_text(ckpt.arch_text);
    Rng rng(0);
    Network<T> net = make_network<T>(info.net, info.domains, rng);
    restore_params(ckpt, net.store);
    return net;
}

template <class T>
LandmarkSet predict_landmarks(Network<T>& net, const std::string& domain,
                              const SampleRecord& record, int input_size) {
    Sample<T> resized = resize_sample(load_sample<T>(record), input_size, input_size);
    NoGradGuard guard;
    Tensor<T> image = ops::reshape(resized.image, {1, input_size, input_size, 1});
    auto out = net.forward(image, domain, false);
    LandmarkSet decoded =
        decode_landmarks(slice_stack(out.fused, 0, HeatmapRole::fused));
    return rescale_coords(decoded, record.height, record.width);
}

template <class T>
std::vector<double> split_errors(Network<T>& net, const DomainSpec& spec,
                                 const std::vector<SampleRecord>& records,
                                 int input_size) {
    std::vector<double> errors;
    for (const auto& record : records) {
        LandmarkSet pred = predict_landmarks(net, spec.name, record, input_size);
        const double spacing = spacing_for(spec, record.landmarks);
        const auto errs = radial_errors(pred, record.landmarks, spacing);
        errors.insert(errors.end(), errs.begin(), errs.end());
    }
    return errors;
}

#define LMDET_INSTANTIATE_TRAINER(T)                                                   \
    template Tensor<T> bce_loss<T>(const Tensor<T>&, const Tensor<T>&);                \
    template Tensor<T> bce_loss<T>(const HeatmapStack<T>&, const HeatmapStack<T>&);    \
    template void adam_step<T>(ParamStore<T>&, const std::vector<std::string>&,        \
                               std::map<std::string, AdamSlot>&, double);              \
    template TrainResult train<T>(const TrainConfig&, std::vector<DatasetManifest>);   \
    template TrainResult resume_train<T>(const Checkpoint&, const TrainConfig&,        \
                                         std::vector<DatasetManifest>);                \
    template TrainResult transfer<T>(const Checkpoint&, const DomainSpec&,             \
                                     DatasetManifest, const TrainConfig&,              \
                                     const std::string&);                              \
    template Network<T> network_from_checkpoint<T>(const Checkpoint&);                 \
    template LandmarkSet predict_landmarks<T>(Network<T>&, const std::string&,         \
                                              const SampleRecord&, int);               \
    template std::vector<double> split_errors<T>(Network<T>&, const DomainSpec&,       \
                                                 const std::vector<SampleRecord>&,     \
                                                 int);

LMDET_INSTANTIATE_TRAINER(float)
LMDET_INSTANTIATE_TRAINER(double)

}  // namespace lmdet
