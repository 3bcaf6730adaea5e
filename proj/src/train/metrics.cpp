#include <cmath>

#include "balr/errors.hpp"
#include "balr/training.hpp"

namespace balr {
namespace {

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    throw ValidationError("metrics: prediction " + shape_str(pred.shape()) + " and ground truth " +
                          shape_str(gt.shape()) + " differ in shape");
  ConfusionCounts c;
  const auto p = pred.data(), g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if ((p[i] != 0.0 && p[i] != 1.0) || (g[i] != 0.0 && g[i] != 1.0))
      throw ValidationError("metrics: masks must be binary, found " + std::to_string(p[i] != 0.0 && p[i] != 1.0 ? p[i] : g[i]) +
                            " at flat index " + std::to_string(i));
    const bool pp = p[i] == 1.0, gg = g[i] == 1.0;
    if (pp && gg)
      ++c.tp;
    else if (pp)
      ++c.fp;
    else if (gg)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

MetricsReport metrics_from_counts(const ConfusionCounts& c) {
  MetricsReport r;
  r.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  r.miou = ratio(c.tp, c.tp + c.fp + c.fn);
  r.recall = ratio(c.tp, c.tp + c.fn);
  r.precision = ratio(c.tp, c.tp + c.fp);
  r.accuracy = ratio(c.tp + c.tn, c.tp + c.fp + c.fn + c.tn);
  return r;
}

MetricsReport metrics(const Tensor& pred, const Tensor& gt) { return metrics_from_counts(confusion(pred, gt)); }

MetricsReport mean_metrics(const std::vector<MetricsReport>& reports) {
  MetricsReport m;
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.dice += r.dice;
    m.miou += r.miou;
    m.recall += r.recall;
    m.precision += r.precision;
    m.accuracy += r.accuracy;
  }
  const double n = static_cast<double>(reports.size());
  m.dice /= n;
  m.miou /= n;
  m.recall /= n;
  m.precision /= n;
  m.accuracy /= n;
  return m;
}

Tensor binarize_logits(const Tensor& logits) {
  Buffer out(logits.data().size());
  const auto d = logits.data();
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] > 0.0 ? 1.0 : 0.0;
  return Tensor::from_buffer(logits.shape(), std::move(out));
}

}  // namespace balr
