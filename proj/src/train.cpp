#include "gw/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

namespace gw::train {

TrainConfig router_defaults() { return TrainConfig{}; }

TrainConfig mnist_router_defaults() {
  TrainConfig cfg;
  cfg.model = "gw";
  cfg.variant = "mnist";
  cfg.n_layer = 2;
  cfg.hidden = 64;
  cfg.lr = 2e-3;
  cfg.weight_decay = 1e-5;
  cfg.dropout = 0.2;
  cfg.batch_size = 512;
  cfg.epochs = 10000;
  return cfg;
}

TrainConfig lstm_defaults() {
  TrainConfig cfg;
  cfg.model = "lstm";
  cfg.n_layer = 4;
  cfg.hidden = 96;
  cfg.lr = 1e-4;
  cfg.weight_decay = 2.1e-3;
  cfg.dropout = 0.27;
  return cfg;
}

TrainConfig transformer_defaults() {
  TrainConfig cfg;
  cfg.model = "transformer";
  cfg.n_layer = 3;
  cfg.hidden = 64;
  cfg.n_head = 4;
  cfg.lr = 3.6e-3;
  cfg.weight_decay = 1.6e-4;
  cfg.dropout = 0.011;
  cfg.transformer_bias = false;
  return cfg;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

namespace {

// Generic full-batch / minibatch loop with best-by-train-loss snapshotting.
template <typename StepFn>
TrainLog run_epochs(nn::ParameterStore& params, const TrainConfig& cfg, StepFn&& step) {
  nn::AdamW opt(cfg.lr, cfg.weight_decay);
  TrainLog log;
  log.best_loss = std::numeric_limits<Scalar>::infinity();
  std::vector<Array> best;
  for (int e = 0; e < cfg.epochs; ++e) {
    Scalar loss = step(opt);
    log.epoch_loss.push_back(loss);
    if (loss < log.best_loss) {
      log.best_loss = loss;
      log.best_epoch = e;
      best = params.snapshot_values();
    }
  }
  if (!best.empty()) params.restore_values(best);
  return log;
}

std::vector<std::vector<task::AdditionSample>> make_batches(
    const std::vector<task::AdditionSample>& samples, Index batch_size, Rng& rng) {
  if (batch_size <= 0 || batch_size >= static_cast<Index>(samples.size()))
    return {samples};
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::vector<task::AdditionSample>> batches;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<task::AdditionSample> b;
    for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      b.push_back(samples[order[i]]);
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace

TrainLog train_router(model::GwModel& m, const std::vector<task::AdditionSample>& samples,
                      const TrainConfig& cfg,
                      std::span<const nn::ParameterStore* const> frozen_stores) {
  for (const nn::ParameterStore* store : frozen_stores)
    for (const auto& e : store->entries())
      if (!e.frozen)
        throw ValueError("train_router: non-router parameter '" + e.name +
                         "' is not frozen");
  Rng data_rng(cfg.seed ^ 0x9e3779b9u);
  Rng dropout_rng(cfg.seed ^ 0x7f4a7c15u);
  return run_epochs(m.params, cfg, [&](nn::AdamW& opt) {
    Scalar total = 0;
    Index count = 0;
    for (auto& batch : make_batches(samples, cfg.batch_size, data_rng)) {
      Tape tape;
      model::RolloutOptions o;
      o.dropout_rng = &dropout_rng;
      model::RolloutResult r = model::rollout(m, batch, o);
      tape.backward(r.loss);
      opt.step(m.params);
      total += r.loss.item() * static_cast<Scalar>(batch.size());
      count += static_cast<Index>(batch.size());
    }
    return total / static_cast<Scalar>(count);
  });
}

model::GwModel train_onehot_router(const TrainConfig& cfg, TrainLog* log) {
  task::GeneralizationSplit split = task::make_split(cfg.condition, cfg.seed);
  std::vector<task::AdditionSample> samples =
      task::samples_from_pairs(split.train_pairs, cfg.horizon);
  model::GwModel m =
      model::make_onehot_model(cfg.seed, cfg.n_layer, cfg.hidden, cfg.dropout);
  m.config.readout = cfg.readout;
  m.config.normalize_instruction = cfg.normalize_instruction;
  m.config.horizon = cfg.horizon;
  TrainLog l = train_router(m, samples, cfg);
  if (log) *log = l;
  return m;
}

baselines::LstmAdder train_lstm(const TrainConfig& cfg, TrainLog* log) {
  task::GeneralizationSplit split = task::make_split(cfg.condition, cfg.seed);
  std::vector<task::AdditionSample> samples =
      task::samples_from_pairs(split.train_pairs, cfg.horizon);
  baselines::LstmAdder m(cfg.seed, cfg.n_layer, cfg.hidden, cfg.dropout);
  Rng data_rng(cfg.seed ^ 0x9e3779b9u);
  Rng dropout_rng(cfg.seed ^ 0x7f4a7c15u);
  TrainLog l = run_epochs(m.params, cfg, [&](nn::AdamW& opt) {
    Scalar total = 0;
    Index count = 0;
    for (auto& batch : make_batches(samples, cfg.batch_size, data_rng)) {
      Tape tape;
      auto r = m.rollout(batch, &dropout_rng);
      tape.backward(r.loss);
      opt.step(m.params);
      total += r.loss.item() * static_cast<Scalar>(batch.size());
      count += static_cast<Index>(batch.size());
    }
    return total / static_cast<Scalar>(count);
  });
  if (log) *log = l;
  return m;
}

baselines::TransformerAdder train_transformer(const TrainConfig& cfg, TrainLog* log) {
  task::GeneralizationSplit split = task::make_split(cfg.condition, cfg.seed);
  std::vector<task::AdditionSample> samples =
      task::samples_from_pairs(split.train_pairs, cfg.horizon);
  baselines::TransformerAdder m(cfg.seed, cfg.n_layer, cfg.hidden, cfg.n_head,
                                cfg.dropout, cfg.transformer_bias);
  Rng data_rng(cfg.seed ^ 0x9e3779b9u);
  Rng dropout_rng(cfg.seed ^ 0x7f4a7c15u);
  TrainLog l = run_epochs(m.params, cfg, [&](nn::AdamW& opt) {
    Scalar total = 0;
    Index count = 0;
    for (auto& batch : make_batches(samples, cfg.batch_size, data_rng)) {
      Tape tape;
      auto r = m.rollout(batch, &dropout_rng);
      tape.backward(r.loss);
      opt.step(m.params);
      total += r.loss.item() * static_cast<Scalar>(batch.size());
      count += static_cast<Index>(batch.size());
    }
    return total / static_cast<Scalar>(count);
  });
  if (log) *log = l;
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

struct Outcome {
  std::vector<int> predictions;
  std::vector<Scalar> per_step_accuracy;
  Scalar mean_loss = 0;
};

void fill_report(EvalReport& rep, const std::vector<task::AdditionSample>& samples,
                 const std::vector<int>& predictions, Scalar mean_loss,
                 Scalar per_step_avg) {
  rep.mean_loss = mean_loss;
  rep.accuracy_per_step_averaged = per_step_avg;
  rep.pair_accuracy = Eigen::MatrixXd::Constant(9, 10, -1.0);
  Eigen::MatrixXd hits = Eigen::MatrixXd::Zero(9, 10), counts = Eigen::MatrixXd::Zero(9, 10);
  Index correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    bool ok = predictions[i] == s.target;
    correct += ok;
    if (s.a_left >= 1 && s.a_left <= 9) {
      hits(s.a_left - 1, s.a_right) += ok;
      counts(s.a_left - 1, s.a_right) += 1;
    }
  }
  for (Index a = 0; a < 9; ++a)
    for (Index r = 0; r < 10; ++r)
      if (counts(a, r) > 0) rep.pair_accuracy(a, r) = hits(a, r) / counts(a, r);
  rep.accuracy = static_cast<Scalar>(correct) / static_cast<Scalar>(samples.size());
}

Scalar per_step_accuracy_from_records(const std::vector<model::RunRecord>& records,
                                      const std::vector<task::AdditionSample>& samples) {
  if (records.empty()) return 0;
  // records are ordered t-major then sample
  std::size_t b = samples.size();
  std::size_t horizon = records.size() / b;
  Scalar acc = 0;
  for (std::size_t t = 0; t < horizon; ++t) {
    Index ok = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& r = records[t * b + i];
      Index best = 0;
      for (Index c = 1; c < 10; ++c)
        if (r.output[c] > r.output[best]) best = c;
      ok += static_cast<int>(best) == samples[i].target;
    }
    acc += static_cast<Scalar>(ok) / static_cast<Scalar>(b);
  }
  return acc / static_cast<Scalar>(horizon);
}

}  // namespace

EvalReport evaluate_gw(model::GwModel& m, const std::vector<task::AdditionSample>& samples,
                       model::Readout mode, bool keep_records,
                       model::HiddenSource hidden_source) {
  EvalReport rep;
  rep.model_kind = "gw";
  rep.trainable_params = m.params.trainable_count();
  model::RolloutResult r = model::rollout(m, samples);
  auto records = model::collect_records(r, samples, "gw", hidden_source);
  fill_report(rep, samples, model::readout(r, mode), r.loss.item(),
              per_step_accuracy_from_records(records, samples));
  rep.accuracy_gate_argmax =
      static_cast<Scalar>([&] {
        auto p = model::readout(r, model::Readout::gate_argmax);
        Index ok = 0;
        for (std::size_t i = 0; i < samples.size(); ++i) ok += p[i] == samples[i].target;
        return static_cast<Scalar>(ok) / static_cast<Scalar>(samples.size());
      }());
  rep.accuracy_final_step =
      static_cast<Scalar>([&] {
        auto p = model::readout(r, model::Readout::final_step);
        Index ok = 0;
        for (std::size_t i = 0; i < samples.size(); ++i) ok += p[i] == samples[i].target;
        return static_cast<Scalar>(ok) / static_cast<Scalar>(samples.size());
      }());
  if (keep_records) rep.records = std::move(records);
  return rep;
}

EvalReport evaluate_lstm(baselines::LstmAdder& m,
                         const std::vector<task::AdditionSample>& samples,
                         model::Readout mode, bool keep_records) {
  EvalReport rep;
  rep.model_kind = "lstm";
  rep.trainable_params = m.params.trainable_count();
  auto r = m.rollout(samples);
  auto records = baselines::collect_records(r, samples, "lstm");
  fill_report(rep, samples, baselines::readout(r, mode), r.loss.item(),
              per_step_accuracy_from_records(records, samples));
  if (keep_records) rep.records = std::move(records);
  return rep;
}

EvalReport evaluate_transformer(baselines::TransformerAdder& m,
                                const std::vector<task::AdditionSample>& samples,
                                model::Readout mode, bool keep_records) {
  EvalReport rep;
  rep.model_kind = "transformer";
  rep.trainable_params = m.params.trainable_count();
  auto r = m.rollout(samples);
  auto records = baselines::collect_records(r, samples, "transformer");
  fill_report(rep, samples, baselines::readout(r, mode), r.loss.item(),
              per_step_accuracy_from_records(records, samples));
  if (keep_records) rep.records = std::move(records);
  return rep;
}

void write_report_json(const EvalReport& rep, const std::string& path) {
  nlohmann::json j;
  j["model"] = rep.model_kind;
  j["condition"] = rep.condition;
  j["seed"] = rep.seed;
  j["accuracy"] = rep.accuracy;
  j["accuracy_per_step_averaged"] = rep.accuracy_per_step_averaged;
  if (rep.accuracy_gate_argmax) j["accuracy_gate_argmax"] = *rep.accuracy_gate_argmax;
  if (rep.accuracy_final_step) j["accuracy_final_step"] = *rep.accuracy_final_step;
  j["mean_loss"] = rep.mean_loss;
  j["trainable_params"] = rep.trainable_params;
  std::vector<std::vector<Scalar>> matrix;
  for (Index a = 0; a < rep.pair_accuracy.rows(); ++a) {
    std::vector<Scalar> row;
    for (Index r = 0; r < rep.pair_accuracy.cols(); ++r)
      row.push_back(rep.pair_accuracy(a, r));
    matrix.push_back(std::move(row));
  }
  j["pair_accuracy"] = matrix;
  std::ofstream os(path);
  if (!os) throw IoError("report: cannot open '" + path + "' for writing");
  os << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Generalization suite
// ---------------------------------------------------------------------------

Scalar ci95_half_width(const std::vector<Scalar>& values) {
  if (values.size() < 2) return 0;
  // two-sided 97.5% Student t quantiles for df = 1..29; normal beyond
  static const Scalar t[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365,
                             2.306,  2.262, 2.228, 2.201, 2.179, 2.160, 2.145,
                             2.131,  2.120, 2.110, 2.101, 2.093, 2.086, 2.080,
                             2.074,  2.069, 2.064, 2.060, 2.056, 2.052, 2.048,
                             2.045};
  std::size_t df = values.size() - 1;
  Scalar q = df <= 29 ? t[df - 1] : 1.96;
  Scalar mean = std::accumulate(values.begin(), values.end(), 0.0) /
                static_cast<Scalar>(values.size());
  Scalar ss = 0;
  for (Scalar v : values) ss += (v - mean) * (v - mean);
  Scalar sd = std::sqrt(ss / static_cast<Scalar>(values.size() - 1));
  return q * sd / std::sqrt(static_cast<Scalar>(values.size()));
}

namespace {

struct Job {
  std::string condition;
  std::string model;
  unsigned seed;
  std::size_t row;  // destination row in the result table
};

Scalar run_one(const SuiteOptions& opts, const Job& job, Index* params_out) {
  TrainConfig cfg;
  if (job.model == "gw") {
    cfg = router_defaults();
    cfg.epochs = opts.gw_epochs;
  } else if (job.model == "lstm") {
    cfg = lstm_defaults();
    cfg.epochs = opts.lstm_epochs;
  } else if (job.model == "transformer") {
    cfg = transformer_defaults();
    cfg.epochs = opts.transformer_epochs;
  } else {
    throw ValueError("suite: unknown model '" + job.model + "'");
  }
  cfg.condition = job.condition;
  cfg.seed = job.seed;

  task::GeneralizationSplit split = task::make_split(job.condition, job.seed);
  std::vector<task::AdditionSample> test = task::samples_from_pairs(split.test_pairs);

  EvalReport rep;
  if (job.model == "gw") {
    model::GwModel m = train_onehot_router(cfg);
    rep = evaluate_gw(m, test, model::Readout::time_averaged, !opts.out_dir.empty());
    if (!opts.out_dir.empty()) {
      std::filesystem::path dir = std::filesystem::path(opts.out_dir) / "generalize" /
                                  job.model / job.condition / std::to_string(job.seed);
      std::filesystem::create_directories(dir);
      nn::save_checkpoint(m.params, (dir / "checkpoint.bin").string());
      model::write_records_csv(rep.records, (dir / "runresult.csv").string());
      rep.condition = job.condition;
      rep.seed = job.seed;
      write_report_json(rep, (dir / "report.json").string());
    }
  } else if (job.model == "lstm") {
    baselines::LstmAdder m = train_lstm(cfg);
    rep = evaluate_lstm(m, test, model::Readout::time_averaged, !opts.out_dir.empty());
    if (!opts.out_dir.empty()) {
      std::filesystem::path dir = std::filesystem::path(opts.out_dir) / "generalize" /
                                  job.model / job.condition / std::to_string(job.seed);
      std::filesystem::create_directories(dir);
      nn::save_checkpoint(m.params, (dir / "checkpoint.bin").string());
      model::write_records_csv(rep.records, (dir / "runresult.csv").string());
      rep.condition = job.condition;
      rep.seed = job.seed;
      write_report_json(rep, (dir / "report.json").string());
    }
  } else {
    baselines::TransformerAdder m = train_transformer(cfg);
    rep = evaluate_transformer(m, test, model::Readout::time_averaged,
                               !opts.out_dir.empty());
    if (!opts.out_dir.empty()) {
      std::filesystem::path dir = std::filesystem::path(opts.out_dir) / "generalize" /
                                  job.model / job.condition / std::to_string(job.seed);
      std::filesystem::create_directories(dir);
      nn::save_checkpoint(m.params, (dir / "checkpoint.bin").string());
      model::write_records_csv(rep.records, (dir / "runresult.csv").string());
      rep.condition = job.condition;
      rep.seed = job.seed;
      write_report_json(rep, (dir / "report.json").string());
    }
  }
  *params_out = rep.trainable_params;
  return rep.accuracy;
}

}  // namespace

std::vector<SuiteRow> run_generalization_suite(const SuiteOptions& opts) {
  std::vector<SuiteRow> rows;
  std::vector<Job> jobs;
  for (const std::string& cond : opts.conditions)
    for (const std::string& mdl : opts.models) {
      SuiteRow row;
      row.condition = cond;
      row.model = mdl;
      row.seed_accuracy.resize(static_cast<std::size_t>(opts.n_seeds), 0);
      for (int s = 0; s < opts.n_seeds; ++s)
        jobs.push_back(Job{cond, mdl, static_cast<unsigned>(s), rows.size()});
      rows.push_back(std::move(row));
    }

  std::mutex mu;
  std::size_t next = 0;
  std::vector<Index> params_per_row(rows.size(), 0);
  auto worker = [&] {
    for (;;) {
      std::size_t mine;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= jobs.size()) return;
        mine = next++;
      }
      const Job& job = jobs[mine];
      Index params = 0;
      Scalar acc = run_one(opts, job, &params);
      {
        std::lock_guard<std::mutex> lock(mu);
        rows[job.row].seed_accuracy[job.seed] = acc;
        params_per_row[job.row] = params;
      }
    }
  };
  int n_workers = std::max(1, opts.n_workers);
  std::vector<std::thread> pool;
  for (int i = 0; i < n_workers - 1; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  for (std::size_t i = 0; i < rows.size(); ++i) {
    SuiteRow& r = rows[i];
    r.trainable_params = params_per_row[i];
    r.mean_accuracy = std::accumulate(r.seed_accuracy.begin(), r.seed_accuracy.end(), 0.0) /
                      static_cast<Scalar>(r.seed_accuracy.size());
    r.ci95 = ci95_half_width(r.seed_accuracy);
  }
  return rows;
}

void write_suite_csv(const std::vector<SuiteRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("suite: cannot open '" + path + "' for writing");
  std::size_t n_seeds = rows.empty() ? 0 : rows[0].seed_accuracy.size();
  os << "condition,model,mean_accuracy,ci95,trainable_params";
  for (std::size_t s = 0; s < n_seeds; ++s) os << ",seed" << s;
  os << "\n";
  os.precision(10);
  for (const SuiteRow& r : rows) {
    os << r.condition << ',' << r.model << ',' << r.mean_accuracy << ',' << r.ci95
       << ',' << r.trainable_params;
    for (Scalar a : r.seed_accuracy) os << ',' << a;
    os << "\n";
  }
}

}  // namespace gw::train
