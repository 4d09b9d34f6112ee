#include "skipvit/trainer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "skipvit/errors.hpp"
#include "skipvit/numerics/allocator.hpp"
#include "skipvit/numerics/ops.hpp"
#include "skipvit/trainer/optimizer.hpp"
#include "skipvit/vit/checkpoint.hpp"

namespace skipvit::trainer {

namespace {

using Clock = std::chrono::steady_clock;
using json = nlohmann::ordered_json;

json histogram_json(const Histogram& h) {
  json out = json::object();
  for (const auto& [count, times] : h) out[std::to_string(count)] = times;
  return out;
}

template <typename T>
std::size_t correct_count(const numerics::Tensor<T>& logits, std::span<const std::int32_t> labels) {
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  const auto data = logits.data();
  std::size_t hits = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = data.data() + b * classes;
    const auto best = static_cast<std::int32_t>(std::max_element(row, row + classes) - row);
    hits += best == labels[b];
  }
  return hits;
}

std::ofstream open_truncated(const std::filesystem::path& path) {
  if (path.empty()) return {};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

template <typename T>
double top1(const numerics::Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("top1: logits " + numerics::shape_to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) return 0.0;
  return 100.0 * double(correct_count(logits, labels)) / double(labels.size());
}

std::string to_json_line(const EpochMetrics& m) {
  json j;
  j["epoch"] = m.epoch;
  j["dropping"] = m.dropping;
  j["steps"] = m.steps;
  j["samples"] = m.samples;
  j["train_loss"] = m.train_loss;
  j["train_top1"] = m.train_top1;
  j["val_top1"] = m.val_top1 ? json(*m.val_top1) : json(nullptr);
  j["lr"] = m.final_lr;
  json layers = json::array();
  for (const auto& l : m.layers) {
    layers.push_back({{"layer", l.layer},
                      {"attention_tokens", histogram_json(l.attention)},
                      {"ffn_tokens", histogram_json(l.ffn)}});
  }
  j["layers"] = std::move(layers);
  json stages = json::array();
  for (const auto& s : m.stages) {
    stages.push_back({{"layer", s.layer}, {"kept_patches", histogram_json(s.kept_patches)}});
  }
  j["stages"] = std::move(stages);
  return j.dump();
}

std::string to_timing_line(const EpochMetrics& m) {
  json j;
  j["epoch"] = m.epoch;
  j["samples_per_sec"] = m.samples_per_sec;
  return j.dump();
}

template <typename T>
RunMetrics train(vit::VisionTransformer<T>& model, const skipdrop::DropSchedule& schedule,
                 const TrainConfig& config, const DatasetSplits& data, const TrainOutputs& outputs,
                 const TrainHooks& hooks) {
  validate(config);
  skipdrop::validate(schedule, model.config());
  numerics::retain_freed_memory();
  const auto& train_set = data.train;
  if (train_set.size() == 0) throw ValidationError("dataset: training split is empty");
  if (train_set.num_classes > model.config().num_classes) {
    throw ValidationError("model.num_classes: " + std::to_string(model.config().num_classes) +
                          " is smaller than the dataset's " + std::to_string(train_set.num_classes));
  }

  const Normalizer normalizer = Normalizer::fit(train_set);
  AdamW<T> optimizer(model.parameters());
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  auto metrics_out = open_truncated(outputs.metrics);
  auto timing_out = open_truncated(outputs.timing);
  const std::size_t depth = model.config().depth;

  RunMetrics run;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochMetrics em;
    em.epoch = epoch;
    em.dropping = schedule.active_at(epoch);
    em.layers.resize(depth);
    for (std::size_t l = 0; l < depth; ++l) em.layers[l].layer = l;
    double loss_sum = 0, seconds = 0;
    std::size_t hits = 0;

    for (std::size_t s = 0; s < per_epoch && !stop; ++s) {
      const std::size_t first = s * config.batch_size;
      const std::size_t count = std::min(config.batch_size, train_set.size() - first);
      const std::span<const std::size_t> idx(order.data() + first, count);
      const auto images = normalizer.batch<T>(train_set, idx);
      std::vector<std::int32_t> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = train_set.labels[idx[i]];

      const auto start = Clock::now();
      model.zero_grad();
      auto result = model.forward(images, schedule, epoch);
      auto loss = numerics::cross_entropy(result.logits, labels);
      const double value = double(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(s));
      }
      numerics::backward(loss);
      em.final_lr = lr_at(config, epoch, s, per_epoch);
      optimizer.step(model.parameters(), em.final_lr, config.weight_decay);
      seconds += std::chrono::duration<double>(Clock::now() - start).count();

      loss_sum += value;
      hits += correct_count(result.logits, labels);
      em.samples += count;
      ++em.steps;
      for (std::size_t l = 0; l < depth; ++l) {
        ++em.layers[l].attention[result.layer_tokens[l].attention];
        ++em.layers[l].ffn[result.layer_tokens[l].ffn];
      }
      for (const auto& st : result.stages) {
        auto it = std::find_if(em.stages.begin(), em.stages.end(),
                               [&](const StageHistogram& h) { return h.layer == st.layer; });
        if (it == em.stages.end()) it = em.stages.insert(em.stages.end(), StageHistogram{st.layer, {}});
        ++it->kept_patches[st.kept_patches];
      }
      ++run.steps;
      run.final_loss = value;
      if (hooks.on_step && !hooks.on_step(run.steps, value)) stop = true;
      if (config.max_steps > 0 && run.steps >= config.max_steps) stop = true;
    }
    if (stop) run.stopped_early = true;

    em.train_loss = loss_sum / double(em.steps);
    em.train_top1 = 100.0 * double(hits) / double(em.samples);
    em.samples_per_sec = seconds > 0 ? double(em.samples) / seconds : 0.0;
    const bool last = stop || epoch + 1 == config.epochs;
    if (data.val.size() > 0 && (last || (epoch + 1) % config.eval_every == 0)) {
      em.val_top1 = evaluate(model, data.val, normalizer,
                             config.eval_dropping ? schedule : skipdrop::DropSchedule::none(), epoch,
                             config.batch_size);
    }
    spdlog::info("epoch {} loss {:.4f} train {:.2f}% val {} ({:.1f} samples/s){}", epoch,
                 em.train_loss, em.train_top1,
                 em.val_top1 ? fmt::format("{:.2f}%", *em.val_top1) : std::string("-"),
                 em.samples_per_sec, em.dropping ? " dropping" : "");
    if (metrics_out.is_open()) metrics_out << to_json_line(em) << '\n' << std::flush;
    if (timing_out.is_open()) timing_out << to_timing_line(em) << '\n' << std::flush;
    run.epochs.push_back(std::move(em));
    if (hooks.on_epoch && !hooks.on_epoch(run.epochs.back())) {
      run.stopped_early = true;
      stop = true;
    }
  }
  if (!outputs.checkpoint.empty()) {
    if (outputs.checkpoint.has_parent_path()) {
      std::filesystem::create_directories(outputs.checkpoint.parent_path());
    }
    vit::save_checkpoint(model, outputs.checkpoint);
  }
  return run;
}

template <typename T>
double evaluate(const vit::VisionTransformer<T>& model, const Dataset& split,
                const Normalizer& normalizer, const skipdrop::DropSchedule& schedule,
                std::size_t epoch, std::size_t batch_size) {
  if (split.size() == 0) return 0.0;
  numerics::NoGradGuard no_grad;
  std::size_t hits = 0;
  std::vector<std::size_t> idx;
  for (std::size_t first = 0; first < split.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, split.size() - first);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), first);
    const auto result = model.forward(normalizer.batch<T>(split, idx), schedule, epoch);
    hits += correct_count(result.logits,
                          std::span<const std::int32_t>(split.labels.data() + first, count));
  }
  return 100.0 * double(hits) / double(split.size());
}

template <typename T>
BenchmarkResult benchmark(const vit::VisionTransformer<T>& model,
                          const skipdrop::DropSchedule& schedule, const TrainConfig& config,
                          const Dataset& data, std::size_t batches, std::size_t discard) {
  if (batches <= discard) {
    throw ValidationError("bench.batches: must exceed the " + std::to_string(discard) +
                          " discarded warm-up batches");
  }
  if (data.size() == 0) throw ValidationError("dataset: benchmark split is empty");
  numerics::retain_freed_memory();
  auto copy = model.clone();
  AdamW<T> optimizer(copy.parameters());
  const Normalizer normalizer = Normalizer::fit(data);
  const std::size_t epoch = schedule.warmup_epochs;

  BenchmarkResult out;
  out.discarded = discard;
  std::vector<std::size_t> idx(config.batch_size);
  std::vector<std::int32_t> labels(config.batch_size);
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      idx[i] = (b * config.batch_size + i) % data.size();
      labels[i] = data.labels[idx[i]];
    }
    const auto images = normalizer.batch<T>(data, idx);
    const auto start = Clock::now();
    copy.zero_grad();
    auto result = copy.forward(images, schedule, epoch, {false, false});
    auto loss = numerics::cross_entropy(result.logits, labels);
    numerics::backward(loss);
    optimizer.step(copy.parameters(), config.learning_rate, config.weight_decay);
    const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
    if (b >= discard) out.step_seconds.push_back(seconds);
    out.final_loss = double(loss.item());
  }
  std::vector<double> rates;
  for (double s : out.step_seconds) rates.push_back(double(config.batch_size) / s);
  std::sort(rates.begin(), rates.end());
  const std::size_t n = rates.size();
  out.samples_per_sec = n % 2 ? rates[n / 2] : 0.5 * (rates[n / 2 - 1] + rates[n / 2]);
  return out;
}

#define SKIPVIT_INSTANTIATE_TRAINER(T)                                                            \
  template double top1(const numerics::Tensor<T>&, std::span<const std::int32_t>);                \
  template RunMetrics train(vit::VisionTransformer<T>&, const skipdrop::DropSchedule&,            \
                            const TrainConfig&, const DatasetSplits&, const TrainOutputs&,        \
                            const TrainHooks&);                                                   \
  template double evaluate(const vit::VisionTransformer<T>&, const Dataset&, const Normalizer&,   \
                           const skipdrop::DropSchedule&, std::size_t, std::size_t);              \
  template BenchmarkResult benchmark(const vit::VisionTransformer<T>&,                            \
                                     const skipdrop::DropSchedule&, const TrainConfig&,           \
                                     const Dataset&, std::size_t, std::size_t);

SKIPVIT_INSTANTIATE_TRAINER(float)
SKIPVIT_INSTANTIATE_TRAINER(double)

#undef SKIPVIT_INSTANTIATE_TRAINER

}  // namespace skipvit::trainer
