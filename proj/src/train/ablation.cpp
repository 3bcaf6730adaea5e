#include "balr/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "balr/errors.hpp"
#include "json.hpp"

namespace balr {
namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

HarnessConfig AblationArm::apply(HarnessConfig cfg) const {
  cfg.use_lr_attention = lr_tensor;
  cfg.use_adapters = adapters;
  cfg.use_cden = cden;
  return cfg;
}

std::array<AblationArm, 4> ablation_arms() {
  return {{{"none", false, false, false},
           {"lr_tensor", true, false, false},
           {"lr_tensor+adapters", true, true, false},
           {"lr_tensor+adapters+cden", true, true, true}}};
}

HarnessConfig ablation_desk_config() {
  HarnessConfig c;
  c.image_size = 32;
  c.patch_size = 4;
  c.embed_dim = 48;
  c.depth = 4;
  c.heads = 4;
  c.mlp_ratio = 2;
  c.adapter_rank = 8;
  c.attn_ranks = {8, 8, 8};
  c.head_channels = 8;
  return c;
}

MeanSd mean_sd(const std::vector<double>& values) {
  MeanSd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  if (values.size() < 2) return r;
  double ss = 0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return r;
}

AblationTable ablation_run(const std::vector<std::uint64_t>& seeds, const AblationOptions& opts) {
  if (seeds.size() < 3)
    throw ConfigError("ablation_run: need at least 3 seeds, got " + std::to_string(seeds.size()));
  AblationTable table;
  table.difficulty = opts.difficulty;
  for (const auto& arm : ablation_arms()) {
    AblationRow row;
    row.arm = arm;
    row.seeds = seeds;
    std::vector<double> dice, miou;
    for (auto seed : seeds) {
      const auto data = split_dataset(synth_dataset(seed, opts.dataset_size, opts.base.image_size, opts.difficulty));
      auto model = build_balr_model(arm.apply(opts.base), seed);
      train(model, data, opts.schedule, seed, opts.train);
      const auto m = evaluate(model, data.test, opts.train.batch_size);
      row.test.push_back(m);
      dice.push_back(m.dice);
      miou.push_back(m.miou);
      if (opts.log) opts.log("ablate: " + arm.name + " seed " + std::to_string(seed) + " test dice " + fmt(m.dice));
    }
    row.dice = mean_sd(dice);
    row.miou = mean_sd(miou);
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string AblationTable::to_csv() const {
  std::ostringstream out;
  out << "arm,lr_tensor,adapters,cden,seeds,mdsc_mean,mdsc_sd,miou_mean,miou_sd\n";
  for (const auto& r : rows)
    out << r.arm.name << ',' << r.arm.lr_tensor << ',' << r.arm.adapters << ',' << r.arm.cden << ','
        << r.seeds.size() << ',' << fmt(r.dice.mean) << ',' << fmt(r.dice.sd) << ',' << fmt(r.miou.mean) << ','
        << fmt(r.miou.sd) << '\n';
  return out.str();
}

std::string AblationTable::to_json() const {
  nlohmann::ordered_json j;
  j["difficulty"] = difficulty;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row{{"arm", r.arm.name},
                               {"lr_tensor", r.arm.lr_tensor},
                               {"adapters", r.arm.adapters},
                               {"cden", r.arm.cden},
                               {"seeds", r.seeds},
                               {"mdsc", {{"mean", r.dice.mean}, {"sd", r.dice.sd}}},
                               {"miou", {{"mean", r.miou.mean}, {"sd", r.miou.sd}}}};
    row["per_seed"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < r.test.size(); ++i)
      row["per_seed"].push_back({{"seed", r.seeds[i]}, {"dice", r.test[i].dice}, {"miou", r.test[i].miou}});
    j["rows"].push_back(row);
  }
  return j.dump(2);
}

}  // namespace balr
