#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ssfl/aggregation.hpp"
#include "ssfl/augment.hpp"
#include "ssfl/config.hpp"
#include "ssfl/dataset.hpp"
#include "ssfl/diversity.hpp"
#include "ssfl/losses.hpp"
#include "ssfl/model.hpp"
#include "ssfl/optim.hpp"
#include "ssfl/partitioner.hpp"
#include "ssfl/serialize.hpp"

namespace ssfl {

/// One communication round's log line.
struct RoundRecord {
    long long round = 0;
    double lr = 0.0;
    std::vector<int> participants;
    std::vector<std::vector<int>> groups;
    double mean_user_loss = 0.0;
    double server_loss = 0.0;
    std::optional<double> test_accuracy;
    std::vector<DiversityEntry> diversity;
};

inline ordered_json round_record_to_json(const RoundRecord& r) {
    ordered_json j;
    j["round"] = r.round;
    j["lr"] = r.lr;
    j["participants"] = r.participants;
    j["groups"] = r.groups;
    j["mean_user_loss"] = r.mean_user_loss;
    j["server_loss"] = r.server_loss;
    if (r.test_accuracy) j["test_accuracy"] = *r.test_accuracy;
    ordered_json div;
    for (const auto& e : r.diversity) {
        switch (e.status) {
        case DiversityEntry::Status::ok: div[e.name] = e.value; break;
        case DiversityEntry::Status::divergent: div[e.name] = "divergent"; break;
        case DiversityEntry::Status::undefined: div[e.name] = "undefined"; break;
        }
    }
    j["diversity"] = div;
    return j;
}

inline std::string records_to_jsonl(const std::vector<RoundRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += round_record_to_json(r).dump();
        out += "\n";
    }
    return out;
}

/// Eval-mode accuracy: argmax prediction (ties to the lower class index),
/// fraction correct.
inline double evaluate(const ParameterState& state, const Tensor& samples, const std::vector<int>& labels) {
    const int total = samples.batch();
    if (total < 1) throw InvalidInputError("evaluate: empty test set");
    ParameterState scratch = state;
    const std::size_t sample_sz = samples.sample_size();
    long long correct = 0;
    const int chunk = 512;
    for (int start = 0; start < total; start += chunk) {
        const int nb = std::min(chunk, total - start);
        std::vector<int> shape = samples.shape;
        shape[0] = nb;
        Tensor batch(shape);
        std::copy(samples.data.begin() + static_cast<std::ptrdiff_t>(start * sample_sz),
                  samples.data.begin() + static_cast<std::ptrdiff_t>((start + nb) * sample_sz), batch.data.begin());
        const auto cache = forward(scratch, batch, Mode::eval);
        const int d = cache.logits.shape[1];
        for (int i = 0; i < nb; ++i) {
            const double* row = cache.logits.sample(i);
            int best = 0;
            for (int j = 1; j < d; ++j)
                if (row[j] > row[best]) best = j;
            correct += best == labels[static_cast<std::size_t>(start + i)];
        }
    }
    return static_cast<double>(correct) / total;
}

namespace detail {

inline void parallel_for(int task_count, int threads, const std::function<void(int)>& fn) {
    threads = std::max(1, std::min(threads, task_count));
    if (threads == 1) {
        for (int i = 0; i < task_count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= task_count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace detail

/// Everything local training needs besides the data. The lr clock is global:
/// step = round * T + local_step, shared by users and the server.
struct LocalTrainContext {
    Objective objective = Objective::crl;
    double tau = 0.95;
    AugmentConfig augment;
    OptimizerConfig optimizer;
    int local_steps = 1;
    int batch_size = 64;
    std::uint64_t schedule_seed = 0;
    std::uint64_t stream_tag = stream_tag::kUserStep;
    std::uint64_t party_id = 0;
};

struct LocalTrainResult {
    ParameterState state;
    double mean_loss = 0.0;
};

/// Runs T local optimizer steps from `start` on this party's data. Each
/// step draws B samples with replacement and re-samples the augmentation,
/// both from a stream keyed by (seed, tag, party, round, step).
inline LocalTrainResult local_train(const ParameterState& start, const Tensor& x, const std::vector<int>& labels,
                                    const LocalTrainContext& ctx, long long round) {
    LocalTrainResult out;
    out.state = start;
    const int n = x.batch();
    if (n < 1) throw InvalidInputError("local_train: empty dataset");
    const std::size_t sample_sz = x.sample_size();
    const double total_steps = ctx.optimizer.schedule.total_steps();
    double loss_acc = 0.0;

    for (int step = 0; step < ctx.local_steps; ++step) {
        RngStream stream{ctx.schedule_seed, ctx.stream_tag, ctx.party_id, static_cast<std::uint64_t>(round),
                         static_cast<std::uint64_t>(step)};
        std::vector<int> shape = x.shape;
        shape[0] = ctx.batch_size;
        Tensor batch(shape);
        std::vector<int> batch_labels(static_cast<std::size_t>(ctx.batch_size), -1);
        for (int i = 0; i < ctx.batch_size; ++i) {
            const int pick = static_cast<int>(stream.uniform_u64(static_cast<std::uint64_t>(n)));
            std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(pick * sample_sz),
                      x.data.begin() + static_cast<std::ptrdiff_t>((pick + 1) * sample_sz),
                      batch.data.begin() + static_cast<std::ptrdiff_t>(i * sample_sz));
            if (!labels.empty()) batch_labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(pick)];
        }

        long long global_step = round * ctx.local_steps + step;
        if (static_cast<double>(global_step) >= total_steps)
            global_step = static_cast<long long>(std::ceil(total_steps)) - 1; // final partial round reuses the last lr
        const double lr = cosine_lr(global_step, ctx.optimizer.schedule);

        LossOutput loss;
        std::vector<double> grad;
        switch (ctx.objective) {
        case Objective::crl: {
            const Tensor weak = weak_augment(batch, ctx.augment, stream);
            const Tensor strong = strong_augment(batch, ctx.augment, stream);
            const auto weak_cache = forward(out.state, weak, Mode::train);
            const auto strong_cache = forward(out.state, strong, Mode::train);
            loss = crl_user_loss(weak_cache.logits, strong_cache.logits, ctx.tau);
            grad = backward(out.state, strong_cache, loss.logit_gradients);
            break;
        }
        case Objective::self_training: {
            const Tensor weak = weak_augment(batch, ctx.augment, stream);
            const auto cache = forward(out.state, weak, Mode::train);
            loss = self_training_loss(cache.logits, ctx.tau);
            grad = backward(out.state, cache, loss.logit_gradients);
            break;
        }
        case Objective::supervised_oracle: {
            const Tensor weak = weak_augment(batch, ctx.augment, stream);
            const auto cache = forward(out.state, weak, Mode::train);
            loss = supervised_user_loss(cache.logits, batch_labels);
            grad = backward(out.state, cache, loss.logit_gradients);
            break;
        }
        }
        sgd_step(out.state, grad, lr, ctx.optimizer);
        loss_acc += loss.value;
    }
    out.mean_loss = loss_acc / ctx.local_steps;
    return out;
}

/// The simulation state threaded through rounds.
struct FederationState {
    ParameterState global_avg;                       // w_avg^t
    std::vector<ParameterState> user_states;         // K entries
    std::vector<ParameterState> prev_group_avgs;     // w_avg,i^t from round t-1
    std::map<int, std::size_t> prev_group_of;        // user id -> group index at round t-1
};

struct SimulationSetup {
    ExperimentConfig cfg;
    ModelSpec model_spec;
    OptimizerConfig optimizer;
    Tensor server_x;
    std::vector<int> server_labels;
    std::vector<Tensor> user_x;
    std::vector<std::vector<int>> user_labels;
    Tensor test_x;
    std::vector<int> test_labels;
    long long total_rounds = 0;

    LocalTrainContext user_context(int user_id) const {
        LocalTrainContext ctx;
        ctx.objective = cfg.objective;
        ctx.tau = cfg.tau;
        ctx.augment = cfg.augment;
        ctx.optimizer = optimizer;
        ctx.local_steps = cfg.local_steps;
        ctx.batch_size = cfg.batch_size;
        ctx.schedule_seed = cfg.schedule_seed;
        ctx.stream_tag = stream_tag::kUserStep;
        ctx.party_id = static_cast<std::uint64_t>(user_id);
        return ctx;
    }

    LocalTrainContext server_context() const {
        LocalTrainContext ctx = user_context(0);
        ctx.objective = Objective::supervised_oracle; // the server loss is plain supervised CE
        ctx.stream_tag = stream_tag::kServerStep;
        ctx.party_id = 0;
        return ctx;
    }
};

/// Splits the loaded dataset per the partition plan and freezes every
/// derived quantity a round needs.
inline SimulationSetup prepare_simulation(const ExperimentConfig& cfg) {
    cfg.validate();
    SimulationSetup sim;
    sim.cfg = cfg;

    const LoadedData data = load_dataset(cfg.dataset);
    const auto plan = make_plan(data.train.class_counts(), cfg.users, cfg.noniid_r, cfg.server_samples);
    const auto assignment = synthesize_assignment(data.train.labels, plan, cfg.partition_seed);

    const std::size_t sample_sz = data.train.x.sample_size();
    auto gather = [&](const std::vector<int>& ids, Tensor& x, std::vector<int>& labels) {
        std::vector<int> shape = data.train.x.shape;
        shape[0] = static_cast<int>(ids.size());
        x = Tensor(shape);
        labels.resize(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::copy(data.train.x.data.begin() + static_cast<std::ptrdiff_t>(ids[i] * sample_sz),
                      data.train.x.data.begin() + static_cast<std::ptrdiff_t>((ids[i] + 1) * sample_sz),
                      x.data.begin() + static_cast<std::ptrdiff_t>(i * sample_sz));
            labels[i] = data.train.labels[static_cast<std::size_t>(ids[i])];
        }
    };
    gather(assignment.server_indices, sim.server_x, sim.server_labels);
    sim.user_x.resize(static_cast<std::size_t>(cfg.users));
    sim.user_labels.resize(static_cast<std::size_t>(cfg.users));
    for (int k = 0; k < cfg.users; ++k)
        gather(assignment.user_indices[static_cast<std::size_t>(k)], sim.user_x[static_cast<std::size_t>(k)],
               sim.user_labels[static_cast<std::size_t>(k)]);
    sim.test_x = data.test.x;
    sim.test_labels = data.test.labels;

    sim.model_spec = ModelSpec{cfg.arch, cfg.norm, cfg.model_groups, data.train.input_shape(), data.train.class_count};

    LrSchedule sched;
    sched.base_lr = cfg.lr;
    sched.period_coeff = cfg.cosine_c;
    sched.epochs = cfg.epochs;
    sched.samples_per_epoch = cfg.samples_per_epoch > 0 ? cfg.samples_per_epoch : data.train.size();
    sched.batch_size = cfg.batch_size;
    sched.warmup_epochs = cfg.warmup_epochs;
    sched.floor = cfg.lr_floor;
    sched.validate();
    sim.optimizer.schedule = sched;
    sim.optimizer.momentum_coeff = cfg.momentum;
    sim.optimizer.weight_decay = cfg.weight_decay;

    sim.total_rounds = static_cast<long long>(
        std::ceil(sched.total_steps() / static_cast<double>(cfg.local_steps)));
    return sim;
}

inline FederationState init_federation(const SimulationSetup& sim) {
    FederationState fed;
    fed.global_avg = init_model(sim.model_spec, sim.cfg.weight_seed);
    fed.user_states.assign(static_cast<std::size_t>(sim.cfg.users), fed.global_avg);
    return fed;
}

/// One communication round: broadcast, T local steps at the participants
/// and the server, diversity measurement, aggregation, evaluation.
inline RoundRecord run_round(const SimulationSetup& sim, FederationState& fed, long long round, int threads = 1) {
    const ExperimentConfig& cfg = sim.cfg;
    RoundRecord record;
    record.round = round;
    {
        long long start_step = round * cfg.local_steps;
        const double total = sim.optimizer.schedule.total_steps();
        if (static_cast<double>(start_step) >= total) start_step = static_cast<long long>(std::ceil(total)) - 1;
        record.lr = cosine_lr(start_step, sim.optimizer.schedule);
    }

    RngStream participant_stream{cfg.schedule_seed, stream_tag::kParticipants, static_cast<std::uint64_t>(round)};
    record.participants = sample_participants(cfg.users, cfg.participants, participant_stream);

    AggregationPlan plan;
    if (cfg.averaging == Averaging::grouping) {
        RngStream group_stream{cfg.schedule_seed, stream_tag::kGroups, static_cast<std::uint64_t>(round)};
        plan = make_groups(record.participants, cfg.groups, group_stream);
    } else {
        plan.participants = record.participants;
        plan.groups = {record.participants};
    }
    record.groups = plan.groups;

    // Broadcast: a re-selected member of last round's group i continues
    // from that group's average, everyone else from the global average.
    const int c = cfg.participants;
    std::vector<const ParameterState*> broadcast(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) {
        const int user = record.participants[static_cast<std::size_t>(i)];
        const auto it = fed.prev_group_of.find(user);
        broadcast[static_cast<std::size_t>(i)] =
            (cfg.averaging == Averaging::grouping && it != fed.prev_group_of.end())
                ? &fed.prev_group_avgs[it->second]
                : &fed.global_avg;
    }

    // Fan-out: participants and the server train independently, then each
    // produces its diversity vectors.
    struct PartyOutput {
        LocalTrainResult trained;
        std::vector<double> fullgrad;
        std::vector<double> delta;
    };
    std::vector<PartyOutput> outputs(static_cast<std::size_t>(c) + 1);
    detail::parallel_for(c + 1, threads, [&](int task) {
        if (task < c) {
            const int user = record.participants[static_cast<std::size_t>(task)];
            const auto& x = sim.user_x[static_cast<std::size_t>(user)];
            const auto& labels = sim.user_labels[static_cast<std::size_t>(user)];
            auto& out = outputs[static_cast<std::size_t>(task)];
            out.trained = local_train(*broadcast[static_cast<std::size_t>(task)], x, labels,
                                      sim.user_context(user), round);
            out.fullgrad = full_data_gradient(out.trained.state, x, labels, cfg.objective, cfg.tau);
            out.delta = cumulative_delta(*broadcast[static_cast<std::size_t>(task)], out.trained.state);
        } else {
            auto& out = outputs[static_cast<std::size_t>(c)];
            out.trained = local_train(fed.global_avg, sim.server_x, sim.server_labels, sim.server_context(), round);
            out.fullgrad = server_full_gradient(out.trained.state, sim.server_x, sim.server_labels);
            out.delta = cumulative_delta(fed.global_avg, out.trained.state);
        }
    });

    double user_loss_acc = 0.0;
    for (int i = 0; i < c; ++i) {
        const auto& out = outputs[static_cast<std::size_t>(i)];
        if (!detail::all_finite(out.trained.state.weights))
            throw TrainingDivergedError("training diverged (NaN weights) at round " + std::to_string(round) +
                                        ", user " + std::to_string(record.participants[static_cast<std::size_t>(i)]));
        user_loss_acc += out.trained.mean_loss;
    }
    const auto& server_out = outputs[static_cast<std::size_t>(c)];
    if (!detail::all_finite(server_out.trained.state.weights))
        throw TrainingDivergedError("training diverged (NaN weights) at round " + std::to_string(round) + ", server");
    record.mean_user_loss = user_loss_acc / c;
    record.server_loss = server_out.trained.mean_loss;

    GradientSet fullgrad_set, delta_set;
    fullgrad_set.round = round;
    fullgrad_set.kind = GradientKind::full_data_gradient;
    delta_set.round = round;
    delta_set.kind = GradientKind::cumulative_delta;
    for (int i = 0; i < c; ++i) {
        fullgrad_set.user_vectors.push_back(outputs[static_cast<std::size_t>(i)].fullgrad);
        delta_set.user_vectors.push_back(outputs[static_cast<std::size_t>(i)].delta);
    }
    fullgrad_set.server_vector = server_out.fullgrad;
    delta_set.server_vector = server_out.delta;
    record.diversity = diversity_report(fullgrad_set, delta_set);

    // Aggregate. Both averagers consume the end-of-round states; fedavg
    // receives them in ascending user-id order (its canonical order).
    std::vector<ParameterState> participant_states;
    participant_states.reserve(static_cast<std::size_t>(c));
    AggregateResult aggregate;
    if (cfg.averaging == Averaging::grouping) {
        for (int i = 0; i < c; ++i) participant_states.push_back(outputs[static_cast<std::size_t>(i)].trained.state);
        aggregate = grouping_average(server_out.trained.state, participant_states, plan);
    } else {
        std::vector<int> order(static_cast<std::size_t>(c));
        for (int i = 0; i < c; ++i) order[static_cast<std::size_t>(i)] = i;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return record.participants[static_cast<std::size_t>(a)] < record.participants[static_cast<std::size_t>(b)];
        });
        for (int i : order) participant_states.push_back(outputs[static_cast<std::size_t>(i)].trained.state);
        aggregate = fedavg(server_out.trained.state, participant_states);
    }
    if (!detail::all_finite(aggregate.global_avg.weights))
        throw TrainingDivergedError("training diverged (NaN weights) at round " + std::to_string(round) +
                                    ", aggregation");

    // Commit: participants keep their end-of-round states, non-participants
    // are untouched.
    for (int i = 0; i < c; ++i)
        fed.user_states[static_cast<std::size_t>(record.participants[static_cast<std::size_t>(i)])] =
            outputs[static_cast<std::size_t>(i)].trained.state;
    fed.global_avg = aggregate.global_avg;
    fed.prev_group_avgs = aggregate.group_avgs;
    fed.prev_group_of.clear();
    if (cfg.averaging == Averaging::grouping) {
        for (std::size_t g = 0; g < plan.groups.size(); ++g)
            for (int user : plan.groups[g]) fed.prev_group_of[user] = g;
    }

    const bool last_round = round + 1 == sim.total_rounds;
    if ((round + 1) % cfg.eval_every == 0 || last_round)
        record.test_accuracy = evaluate(fed.global_avg, sim.test_x, sim.test_labels);
    return record;
}

struct ExperimentResult {
    std::vector<RoundRecord> records;
    ParameterState final_state;
};

/// Runs ceil(E*M/(B*T)) rounds. Fully deterministic given the config seeds,
/// whatever `threads` is.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, int threads = 1,
                                       const std::function<void(const RoundRecord&)>& sink = {}) {
    const SimulationSetup sim = prepare_simulation(cfg);
    FederationState fed = init_federation(sim);
    ExperimentResult result;
    result.records.reserve(static_cast<std::size_t>(sim.total_rounds));
    for (long long round = 0; round < sim.total_rounds; ++round) {
        RoundRecord record = run_round(sim, fed, round, threads);
        if (sink) sink(record);
        result.records.push_back(std::move(record));
    }
    result.final_state = std::move(fed.global_avg);
    return result;
}

} // namespace ssfl
