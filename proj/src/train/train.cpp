#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "balr/checkpoint.hpp"
#include "balr/errors.hpp"
#include "balr/training.hpp"
#include "json.hpp"

namespace balr {
namespace {

bool finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

nlohmann::ordered_json metrics_json(const MetricsReport& m) {
  return {{"dice", m.dice}, {"miou", m.miou}, {"recall", m.recall}, {"precision", m.precision},
          {"accuracy", m.accuracy}};
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void Schedule::validate() const {
  if (epochs < 0) throw ScheduleError("schedule: epochs must be non-negative");
  if (!(lr0 >= 0) || !(lr_min >= 0) || !std::isfinite(lr0) || !std::isfinite(lr_min))
    throw ScheduleError("schedule: learning rates must be finite and non-negative");
  if (lr_min > lr0) throw ScheduleError("schedule: lr_min exceeds lr0");
}

double cosine_lr(double t, const Schedule& s) {
  s.validate();
  const auto T = static_cast<double>(s.epochs);
  if (!(t >= 0.0) || t > T)
    throw ScheduleError("cosine_lr: t = " + fmt(t) + " outside [0, " + std::to_string(s.epochs) + "]");
  if (!s.cosine || s.epochs == 0) return s.lr0;
  return s.lr_min + 0.5 * (s.lr0 - s.lr_min) * (1.0 + std::cos(std::numbers::pi * t / T));
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    const auto g = p.grad_data();
    auto w = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

Tensor segmentation_loss(const Tensor& logits, const Tensor& masks) {
  const auto p = sigmoid(logits);
  const std::vector<std::int64_t> axes{1, 2, 3};
  const auto inter = sum(p * masks, axes, false);
  const auto denom = sum(p, axes, false) + sum(masks, axes, false);
  const auto dice = add_scalar(scale(inter, 2.0), 1.0) / add_scalar(denom, 1.0);
  return add_scalar(neg(mean(dice)), 1.0) + bce_with_logits(logits, masks);
}

MetricsReport evaluate(const Model& model, const std::vector<SegSample>& samples, std::int64_t batch_size) {
  if (samples.empty()) return {};
  NoGradGuard guard;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<MetricsReport> per_sample;
  const auto bs = static_cast<std::size_t>(std::max<std::int64_t>(1, batch_size));
  for (std::size_t b = 0; b < order.size(); b += bs) {
    const auto e = std::min(order.size(), b + bs);
    const auto pred = binarize_logits(forward_segment(model, stack_images(samples, order, b, e)));
    const auto plane = pred.numel() / static_cast<std::int64_t>(e - b);
    for (std::size_t i = b; i < e; ++i) {
      const auto off = static_cast<std::size_t>(plane) * (i - b);
      const auto pr = Tensor::from_vector(samples[i].mask.shape(), pred.data().subspan(off, static_cast<std::size_t>(plane)));
      per_sample.push_back(metrics(pr, samples[i].mask));
    }
  }
  return mean_metrics(per_sample);
}

TrainHistory train(Model& model, const DataSplit& data, const Schedule& schedule, std::uint64_t seed,
                   const TrainOptions& opts) {
  schedule.validate();
  if (opts.batch_size < 1) throw ConfigError("train: batch_size must be positive");
  if (schedule.epochs > 0 && data.train.empty()) throw ConfigError("train: empty training split");
  TrainHistory h;
  Adam adam(model.trainable());
  auto rng = Rng::substream(seed, "train.shuffle");
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(opts.batch_size);

  for (std::int64_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = cosine_lr(static_cast<double>(epoch), schedule);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const auto e = std::min(order.size(), b + bs);
      adam.zero_grad();
      Tensor loss;
      try {
        loss = segmentation_loss(forward_segment(model, stack_images(data.train, order, b, e)),
                                 stack_masks(data.train, order, b, e));
        loss.backward();
      } catch (const NumericError& err) {
        throw DivergenceError("train: non-finite values at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches) + " (lr " + fmt(lr) + "): " + err.what());
      }
      const double l = loss.item();
      if (!std::isfinite(l))
        throw DivergenceError("train: loss is " + fmt(l) + " at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches) + " (lr " + fmt(lr) + ")");
      for (const auto& p : model.trainable())
        if (p.has_grad() && !finite(p.grad_data()))
          throw DivergenceError("train: non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batches));
      adam.step(lr);
      loss_sum += l;
      ++batches;
    }
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(batches), evaluate(model, data.val, opts.batch_size)};
    if (h.best_epoch < 0 || rec.val.dice > h.best_val_dice) {
      h.best_epoch = epoch;
      h.best_val_dice = rec.val.dice;
      h.best_checkpoint = serialize_model(model);
    }
    h.epochs.push_back(rec);
  }
  adam.zero_grad();
  if (opts.restore_best && !h.best_checkpoint.empty()) copy_parameters(deserialize_model(h.best_checkpoint), model);
  return h;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream out;
  out << "epoch,lr,train_loss,val_dice,val_miou,val_recall,val_precision,val_accuracy\n";
  for (const auto& e : epochs)
    out << e.epoch << ',' << fmt(e.lr) << ',' << fmt(e.train_loss) << ',' << fmt(e.val.dice) << ','
        << fmt(e.val.miou) << ',' << fmt(e.val.recall) << ',' << fmt(e.val.precision) << ',' << fmt(e.val.accuracy)
        << '\n';
  return out.str();
}

std::string TrainHistory::to_json() const {
  nlohmann::ordered_json j;
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : epochs)
    j["epochs"].push_back(
        {{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"val", metrics_json(e.val)}});
  j["best_epoch"] = best_epoch < 0 ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(best_epoch);
  j["best_val_dice"] = best_epoch < 0 ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(best_val_dice);
  return j.dump(2);
}

}  // namespace balr
