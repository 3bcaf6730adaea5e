#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "balr/ablation.hpp"
#include "balr/adapter.hpp"
#include "balr/bench.hpp"
#include "balr/checkpoint.hpp"
#include "balr/config.hpp"
#include "balr/errors.hpp"
#include "balr/harness.hpp"
#include "balr/instrument.hpp"
#include "balr/training.hpp"
#include "balr/verify.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace balr;

namespace {

enum ExitCode : int {
  kOk = 0,
  kVerifyFailed = 1,
  kConfigError = 2,
  kInstrumentationFailed = 3,
  kDiverged = 4,
};

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  bool no_instrument = false;
};

struct InstrumentationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

ConfigDocument load_config(const CommonArgs& args, std::initializer_list<const char*> allowed) {
  if (args.config_path.empty()) return {};
  auto doc = parse_config_file(args.config_path);
  for (const auto& s : doc.sections) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || s.name == a;
    if (!ok) {
      if (s.name.empty() && !s.entries.empty())
        throw FormatError("key '" + s.entries.front().key + "' outside any section", s.entries.front().line,
                          s.entries.front().key_column);
      if (!s.name.empty()) throw FormatError("unknown section [" + s.name + "]", s.line, 1);
    }
  }
  return doc;
}

fs::path prepare_out(const CommonArgs& args) {
  fs::path dir(args.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  const auto probe = dir / ".balr-write-probe";
  std::ofstream f(probe);
  if (!f) throw ConfigError("output directory '" + dir.string() + "' is not writable");
  f.close();
  fs::remove(probe, ec);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
  if (!text.empty() && text.back() != '\n') f << '\n';
}

std::vector<std::int64_t> parse_list(const std::string& text) {
  std::vector<std::int64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    std::int64_t v = 0;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    while (pos < item.size() && item[pos] == ' ') ++pos;
    if (item.empty() || pos != item.size()) throw ConfigError("invalid integer '" + item + "' in list '" + text + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

void read_schedule(SectionReader& r, Schedule& s) {
  r.read("lr0", s.lr0);
  r.read("lr_min", s.lr_min);
  r.read("epochs", s.epochs);
  r.read("cosine", s.cosine);
}

// bench-attention

struct BenchArgs {
  std::string mechanism = "both";
  std::string n_sweep;
  std::int64_t n = 0;
};

double slope(double f0, double f1, double n0, double n1) { return std::log(f1 / f0) / std::log(n1 / n0); }

int cmd_bench_attention(const CommonArgs& args, const BenchArgs& b) {
  const auto doc = load_config(args, {"bench"});
  std::int64_t d = 256, heads = 8;
  std::vector<std::int64_t> sweep{512, 1024, 2048, 4096};
  std::array<std::int64_t, 3> ranks{8, 8, 8};
  bool rope = true, backward = true;
  {
    SectionReader r(doc.find("bench"));
    r.read("d", d);
    r.read("heads", heads);
    r.read("n_sweep", sweep);
    r.read("ranks", ranks);
    r.read("rope_enabled", rope);
    r.read("backward", backward);
    r.finish();
  }
  if (!b.n_sweep.empty()) sweep = parse_list(b.n_sweep);
  if (b.n > 0) sweep = {b.n};
  for (auto n : sweep)
    if (n < 1) throw ConfigError("n-sweep entries must be >= 1");
  if (heads < 1 || d % heads != 0) throw ConfigError("bench: d must be a positive multiple of heads");

  std::vector<Mechanism> mechanisms;
  if (b.mechanism == "both")
    mechanisms = {Mechanism::Baseline, Mechanism::LrTensor};
  else
    mechanisms = {parse_mechanism(b.mechanism)};

  TensorAttnConfig cfg;
  cfg.d = d;
  cfg.rank_q = ranks[0];
  cfg.rank_k = ranks[1];
  cfg.rank_v = ranks[2];
  cfg.rope_enabled = rope;
  cfg.validate();

  const auto out = prepare_out(args);
  const bool instrumented = instrument::enabled();
  std::vector<std::optional<BenchReport>> base(sweep.size()), lr(sweep.size());
  for (std::size_t i = 0; i < sweep.size(); ++i)
    for (auto m : mechanisms) {
      std::cerr << "bench-attention: " << mechanism_name(m) << " n=" << sweep[i] << '\n';
      auto r = bench_attention(m, sweep[i], d, heads, cfg, args.seed, {backward});
      if (instrumented && !r.instrumented())
        throw InstrumentationError(std::string("no measurements recorded for ") + mechanism_name(m) +
                                   " at n=" + std::to_string(sweep[i]));
      if (r.flops_measured && *r.flops_measured != r.flops_analytic)
        throw InstrumentationError(std::string(mechanism_name(m)) + " at n=" + std::to_string(sweep[i]) +
                                   ": measured " + std::to_string(*r.flops_measured) + " FLOPs, analytic " +
                                   std::to_string(r.flops_analytic));
      write_file(out / ("bench_" + std::string(mechanism_name(m)) + "_n" + std::to_string(sweep[i]) + ".json"),
                 r.to_json());
      (m == Mechanism::Baseline ? base : lr)[i] = std::move(r);
    }

  auto flops = [](const BenchReport& r) {
    return static_cast<double>(r.flops_measured.value_or(r.flops_analytic));
  };
  auto score = [](const BenchReport& r) {
    return static_cast<double>(r.score_flops_measured.value_or(r.score_flops_analytic));
  };
  auto opt = [](const std::optional<std::uint64_t>& v) { return v ? std::to_string(*v) : std::string(); };

  std::ostringstream csv, plot, table;
  csv << "n,d,heads,rank_q,rank_k,rank_v,flops_baseline,flops_lr,score_flops_baseline,peak_bytes_baseline,"
         "peak_bytes_lr,memory_ratio,flop_slope_baseline,flop_slope_lr,score_slope_baseline\n";
  plot << "mechanism,n,peak_bytes\n";
  char line[256];
  std::snprintf(line, sizeof line, "%8s %16s %16s %14s %14s %8s\n", "n", "flops_baseline", "flops_lr",
                "peak_baseline", "peak_lr", "ratio");
  table << line;
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    const auto n = static_cast<double>(sweep[i]);
    std::string ratio, sb, sl, ss;
    if (base[i] && lr[i] && base[i]->peak_bytes && lr[i]->peak_bytes && *base[i]->peak_bytes > 0)
      ratio = fmt(static_cast<double>(*lr[i]->peak_bytes) / static_cast<double>(*base[i]->peak_bytes));
    if (i > 0) {
      const auto n0 = static_cast<double>(sweep[i - 1]);
      if (base[i] && base[i - 1]) {
        sb = fmt(slope(flops(*base[i - 1]), flops(*base[i]), n0, n));
        ss = fmt(slope(score(*base[i - 1]), score(*base[i]), n0, n));
      }
      if (lr[i] && lr[i - 1]) sl = fmt(slope(flops(*lr[i - 1]), flops(*lr[i]), n0, n));
    }
    csv << sweep[i] << ',' << d << ',' << heads << ',' << ranks[0] << ',' << ranks[1] << ',' << ranks[2] << ','
        << (base[i] ? opt(base[i]->flops_measured.value_or(base[i]->flops_analytic)) : "") << ','
        << (lr[i] ? opt(lr[i]->flops_measured.value_or(lr[i]->flops_analytic)) : "") << ','
        << (base[i] ? opt(base[i]->score_flops_measured.value_or(base[i]->score_flops_analytic)) : "") << ','
        << (base[i] ? opt(base[i]->peak_bytes) : "") << ',' << (lr[i] ? opt(lr[i]->peak_bytes) : "") << ',' << ratio
        << ',' << sb << ',' << sl << ',' << ss << '\n';
    for (const auto* r : {&base[i], &lr[i]})
      if (*r) plot << mechanism_name((*r)->mechanism) << ',' << sweep[i] << ',' << opt((**r).peak_bytes) << '\n';
    std::snprintf(line, sizeof line, "%8lld %16s %16s %14s %14s %8s\n", static_cast<long long>(sweep[i]),
                  base[i] ? opt(base[i]->flops_measured.value_or(base[i]->flops_analytic)).c_str() : "-",
                  lr[i] ? opt(lr[i]->flops_measured.value_or(lr[i]->flops_analytic)).c_str() : "-",
                  base[i] && base[i]->peak_bytes ? opt(base[i]->peak_bytes).c_str() : "-",
                  lr[i] && lr[i]->peak_bytes ? opt(lr[i]->peak_bytes).c_str() : "-",
                  ratio.empty() ? "-" : ratio.substr(0, 8).c_str());
    table << line;
  }
  write_file(out / "bench_summary.csv", csv.str());
  write_file(out / "plot_n_peak_bytes.csv", plot.str());
  std::cout << table.str();
  return kOk;
}

// bench-adapter

int cmd_bench_adapter(const CommonArgs& args) {
  const auto doc = load_config(args, {"model", "adapter"});
  std::int64_t m = 768, n = 768, rank = 16;
  {
    SectionReader r(doc.find("adapter"));
    r.read("m", m);
    r.read("n", n);
    r.read("rank", rank);
    r.finish();
  }
  const auto cfg = harness_config_from_section(doc.find("model"));
  const auto counts = adapter_param_count(m, n, rank);
  const auto harness = count_parameters(cfg).split();
  const auto sam = sam_scale_extrapolation();

  nlohmann::ordered_json j;
  j["adapter"] = {{"m", m},
                  {"n", n},
                  {"rank", rank},
                  {"fullrank", counts.fullrank},
                  {"lowrank", counts.lowrank},
                  {"reduction", counts.reduction}};
  j["harness"] = {{"frozen", harness.frozen}, {"trainable", harness.trainable}, {"fraction", harness.fraction()}};
  j["sam_scale"] = {{"trainable", sam.trainable},
                    {"reference_total", sam.reference_total},
                    {"fraction", sam.fraction_of_reference}};
  const auto out = prepare_out(args);
  write_file(out / "adapter.json", j.dump(2));

  std::printf("adapter %lldx%lld rank %lld: full %lld, low-rank %lld, reduction %.4f\n", static_cast<long long>(m),
              static_cast<long long>(n), static_cast<long long>(rank), static_cast<long long>(counts.fullrank),
              static_cast<long long>(counts.lowrank), counts.reduction);
  std::printf("harness: frozen %lld, trainable %lld, fraction %.6f\n", static_cast<long long>(harness.frozen),
              static_cast<long long>(harness.trainable), harness.fraction());
  std::printf("sam scale: trainable %lld of %lld, fraction %.6f\n", static_cast<long long>(sam.trainable),
              static_cast<long long>(sam.reference_total), sam.fraction_of_reference);
  return kOk;
}

// train

struct DataArgs {
  std::int64_t dataset_size = 200;
  std::int64_t difficulty = 2;
};

int cmd_train(const CommonArgs& args) {
  const auto doc = load_config(args, {"model", "train"});
  const auto cfg = harness_config_from_section(doc.find("model"));
  Schedule schedule;
  TrainOptions topts;
  DataArgs data_args;
  {
    SectionReader r(doc.find("train"));
    read_schedule(r, schedule);
    r.read("batch_size", topts.batch_size);
    r.read("restore_best", topts.restore_best);
    r.read("dataset_size", data_args.dataset_size);
    r.read("difficulty", data_args.difficulty);
    r.finish();
  }
  schedule.validate();
  const auto out = prepare_out(args);

  const auto data = split_dataset(
      synth_dataset(args.seed, data_args.dataset_size, cfg.image_size, static_cast<int>(data_args.difficulty)));
  auto model = build_balr_model(cfg, args.seed);
  const auto split = trainable_parameter_split(model);
  std::cerr << "train: " << split.trainable << " trainable of " << split.frozen + split.trainable << " parameters\n";
  const auto history = train(model, data, schedule, args.seed, topts);
  const auto test = evaluate(model, data.test, topts.batch_size);

  write_file(out / "history.csv", history.to_csv());
  write_file(out / "history.json", history.to_json());
  std::ostringstream plot;
  plot << "epoch,val_dice\n";
  for (const auto& e : history.epochs) plot << e.epoch << ',' << fmt(e.val.dice) << '\n';
  write_file(out / "plot_epoch_dice.csv", plot.str());
  write_file(out / "model.ini", "[model]\n" + cfg.to_text());
  save_checkpoint(model, (out / "model.balrckpt").string());

  std::printf("epochs %zu  best_epoch %lld  best_val_dice %.4f  test_dice %.4f  test_miou %.4f\n",
              history.epochs.size(), static_cast<long long>(history.best_epoch),
              history.best_epoch < 0 ? 0.0 : history.best_val_dice, test.dice, test.miou);
  return kOk;
}

// ablate

int cmd_ablate(const CommonArgs& args, const std::string& seeds_flag) {
  const auto doc = load_config(args, {"model", "train", "ablate"});
  AblationOptions opts;
  opts.base = harness_config_from_section(doc.find("model"), ablation_desk_config());
  std::vector<std::int64_t> seeds{static_cast<std::int64_t>(args.seed) + 1, static_cast<std::int64_t>(args.seed) + 2,
                                  static_cast<std::int64_t>(args.seed) + 3};
  {
    SectionReader r(doc.find("train"));
    read_schedule(r, opts.schedule);
    r.read("batch_size", opts.train.batch_size);
    r.read("restore_best", opts.train.restore_best);
    r.finish();
  }
  {
    SectionReader r(doc.find("ablate"));
    std::int64_t difficulty = opts.difficulty;
    r.read("seeds", seeds);
    r.read("dataset_size", opts.dataset_size);
    r.read("difficulty", difficulty);
    r.finish();
    opts.difficulty = static_cast<int>(difficulty);
  }
  if (!seeds_flag.empty()) seeds = parse_list(seeds_flag);
  opts.schedule.validate();
  opts.log = [](const std::string& s) { std::cerr << s << '\n'; };
  const auto out = prepare_out(args);

  std::vector<std::uint64_t> useeds;
  for (auto s : seeds) {
    if (s < 0) throw ConfigError("seeds must be non-negative");
    useeds.push_back(static_cast<std::uint64_t>(s));
  }
  const auto table = ablation_run(useeds, opts);
  write_file(out / "ablation.csv", table.to_csv());
  write_file(out / "ablation.json", table.to_json());

  std::printf("%-26s %3s %3s %3s  %-17s %-17s\n", "arm", "lr", "ad", "cd", "mDSC", "mIoU");
  for (const auto& r : table.rows)
    std::printf("%-26s %3s %3s %3s  %.4f +- %.4f  %.4f +- %.4f\n", r.arm.name.c_str(), r.arm.lr_tensor ? "x" : "-",
                r.arm.adapters ? "x" : "-", r.arm.cden ? "x" : "-", r.dice.mean, r.dice.sd, r.miou.mean,
                r.miou.sd);
  return kOk;
}

// verify

int cmd_verify(const CommonArgs& args, const std::string& filter, bool inject_fault) {
  if (inject_fault) hooks::set_rank_prefactor_fault(true);
  const auto report = run_verify(filter);
  hooks::set_rank_prefactor_fault(false);
  if (report.results.empty()) throw ConfigError("no verification check matches filter '" + filter + "'");
  write_file(prepare_out(args) / "verify.json", report.to_json());
  std::cout << report.table();
  if (const auto* f = report.first_failure()) {
    std::cerr << "verify: first failing check: " << f->name << ": " << f->detail << '\n';
    return kVerifyFailed;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank attention and adapter segmentation toolkit"};
  app.require_subcommand(1);

  CommonArgs common;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "Run configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", common.seed, "Random seed");
    cmd->add_option("--out", common.out_dir, "Output directory");
    cmd->add_flag("--no-instrument", common.no_instrument, "Disable FLOP counting (also BALR_NO_INSTRUMENT=1)");
  };

  BenchArgs bench;
  auto* bench_attn = app.add_subcommand("bench-attention", "FLOPs and peak memory of one attention layer");
  add_common(bench_attn);
  bench_attn->add_option("--mechanism", bench.mechanism, "baseline, lr-tensor or both")
      ->check(CLI::IsMember({"baseline", "lr-tensor", "both"}));
  bench_attn->add_option("--n-sweep", bench.n_sweep, "Comma-separated sequence lengths");
  bench_attn->add_option("--n", bench.n, "Single sequence length");

  auto* bench_adapter = app.add_subcommand("bench-adapter", "Adapter and harness parameter arithmetic");
  add_common(bench_adapter);

  auto* train_cmd = app.add_subcommand("train", "Train the segmentation harness on synthetic data");
  add_common(train_cmd);

  std::string seeds;
  auto* ablate = app.add_subcommand("ablate", "Four-arm component ablation");
  add_common(ablate);
  ablate->add_option("--seeds", seeds, "Comma-separated seeds (default: seed+1, seed+2, seed+3)");

  std::string filter;
  bool inject_fault = false;
  auto* verify = app.add_subcommand("verify", "Run the invariant suite");
  add_common(verify);
  verify->add_option("--filter", filter, "Run only checks whose name contains this text");
  verify->add_flag("--inject-prefactor-fault", inject_fault, "Corrupt the 1/R prefactor (suite self-test)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  if (const char* env = std::getenv("BALR_NO_INSTRUMENT"); env && std::string(env) != "0" && *env)
    common.no_instrument = true;
  instrument::set_enabled(!common.no_instrument);

  try {
    if (*bench_attn) return cmd_bench_attention(common, bench);
    if (*bench_adapter) return cmd_bench_adapter(common);
    if (*train_cmd) return cmd_train(common);
    if (*ablate) return cmd_ablate(common, seeds);
    if (*verify) return cmd_verify(common, filter, inject_fault);
  } catch (const FormatError& e) {
    std::cerr << "config error: " << (common.config_path.empty() ? "" : common.config_path + ": ") << e.what() << '\n';
    return kConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ScheduleError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const InstrumentationError& e) {
    std::cerr << "instrumentation failure: " << e.what() << '\n';
    return kInstrumentationFailed;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kOk;
}
