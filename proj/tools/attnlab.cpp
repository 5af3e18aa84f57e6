// Experiment runner: every subcommand resolves a flat key=value config
// (defaults < --config file < --set overrides < seed flags), refuses unknown
// keys before any computation, and writes its CSV artifacts plus a manifest
// that replays as a config file.
#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnlab/attention.hpp"
#include "attnlab/gradcheck.hpp"
#include "attnlab/io.hpp"
#include "attnlab/kvsim.hpp"
#include "attnlab/microlm.hpp"
#include "attnlab/synthlab.hpp"

namespace {

using namespace attnlab;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;      // bad flags, keys, values, or shapes
constexpr int kExitNumeric = 3;     // non-finite results or failed gradcheck
constexpr int kExitDivergence = 4;  // run completed but the detector flagged it
constexpr double kGradTol = 1e-5;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = "out";
  std::uint64_t seed_data = 0;
  std::uint64_t seed_init = 0;
  CLI::Option* seed_data_opt = nullptr;
  CLI::Option* seed_init_opt = nullptr;
};

void add_common_flags(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "key = value config file");
  sub->add_option("--set", args.sets, "override one key (repeatable)")
      ->type_name("KEY=VALUE");
  sub->add_option("--out", args.out_dir, "output directory")->capture_default_str();
  args.seed_data_opt =
      sub->add_option("--seed-data", args.seed_data, "shorthand for --set seed.data=N");
  args.seed_init_opt =
      sub->add_option("--seed-init", args.seed_init, "shorthand for --set seed.init=N");
}

ConfigMap resolve_map(const CommonArgs& args) {
  ConfigMap map;
  if (!args.config_path.empty()) map = load_config_file(args.config_path);
  for (const std::string& kv : args.sets) apply_override(map, kv);
  if (args.seed_data_opt && args.seed_data_opt->count() > 0) {
    apply_override(map, "seed.data=" + std::to_string(args.seed_data));
  }
  if (args.seed_init_opt && args.seed_init_opt->count() > 0) {
    apply_override(map, "seed.init=" + std::to_string(args.seed_init));
  }
  return map;
}

std::vector<std::size_t> parse_n_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("cannot parse '" + item + "' in n list '" + text + "'");
    }
    pos = comma + 1;
    if (comma == text.size()) break;
  }
  if (out.empty()) throw ConfigError("empty n list");
  return out;
}

// Writes the config portion up front; the caller finalizes with outputs and
// the end timestamp once the run succeeds.
ManifestInfo start_manifest(const std::string& command, const ConfigReader& reader,
                            const std::string& out_dir) {
  ensure_dir(out_dir);
  ManifestInfo info;
  info.command = command;
  info.start_time = utc_timestamp();
  info.resolved_config = reader.resolved();
  write_manifest(out_dir + "/manifest.txt", info);
  return info;
}

void finish_manifest(ManifestInfo& info, const std::vector<std::string>& outputs,
                     const std::string& out_dir) {
  info.outputs = outputs;
  info.end_time = utc_timestamp();
  write_manifest(out_dir + "/manifest.txt", info);
}

int run_synth(const CommonArgs& args) {
  ConfigReader reader(resolve_map(args));
  SynthRunConfig cfg;
  cfg.target.n = reader.get_u64("synth.n", cfg.target.n);
  cfg.target.band = reader.get_u64("synth.band", cfg.target.band);
  cfg.target.bernoulli_p = reader.get_double("synth.bernoulli_p", cfg.target.bernoulli_p);
  cfg.d_k = reader.get_u64("synth.d_k", cfg.d_k);
  const std::string mask = reader.get_string("synth.mask", "global");
  const std::uint64_t span = reader.get_u64("synth.span", 50);
  cfg.steps = reader.get_u64("synth.steps", cfg.steps);
  cfg.log_every = reader.get_u64("synth.log_every", cfg.log_every);
  cfg.init_std = reader.get_double("synth.init_std", cfg.init_std);
  cfg.fixed_lr = reader.get_double("synth.lr", cfg.fixed_lr);
  cfg.target.seed = reader.get_u64("seed.data", 1);
  cfg.init_seed = reader.get_u64("seed.init", 1);
  if (mask == "global") {
    cfg.mask = MaskSpec::global_causal();
  } else if (mask == "local") {
    cfg.mask = MaskSpec::local_causal(span);
  } else {
    throw ConfigError("synth.mask must be 'global' or 'local', got '" + mask + "'");
  }
  reader.finish();
  cfg.validate();

  ManifestInfo manifest = start_manifest("synth", reader, args.out_dir);
  SynthRunResult result = run_synth(cfg);

  {
    CsvWriter csv(args.out_dir + "/curve.csv", synth_csv_header());
    for (const CurveRecord& rec : result.curve) csv.row(synth_csv_row(rec));
    csv.close();
  }
  write_checkpoint(args.out_dir + "/checkpoint.bin", {"q", "k"}, {&result.q, &result.k});
  finish_manifest(manifest, {"curve.csv", "checkpoint.bin"}, args.out_dir);

  if (result.aborted_non_finite) {
    std::fprintf(stderr, "synth: non-finite loss at step %llu, run aborted\n",
                 static_cast<unsigned long long>(result.curve.back().step));
    return kExitNumeric;
  }
  std::printf("synth: %zu steps, final loss %s, peak |QK^T| %s -> %s/curve.csv\n",
              static_cast<std::size_t>(cfg.steps),
              result.curve.empty() ? "n/a" : fmt_double(result.curve.back().loss).c_str(),
              result.curve.empty()
                  ? "n/a"
                  : fmt_double(result.curve.back().max_abs_logit_all).c_str(),
              args.out_dir.c_str());
  return kExitOk;
}

int run_train_lm(const CommonArgs& args) {
  ConfigReader reader(resolve_map(args));
  TrainLmConfig cfg;
  cfg.model.n_layers = reader.get_u64("lm.layers", cfg.model.n_layers);
  cfg.model.d_model = reader.get_u64("lm.d_model", cfg.model.d_model);
  cfg.model.n_heads = reader.get_u64("lm.heads", cfg.model.n_heads);
  cfg.model.d_ffn = reader.get_u64("lm.d_ffn", cfg.model.d_ffn);
  cfg.model.vocab = reader.get_u64("lm.vocab", cfg.model.vocab);
  cfg.model.seq_len = reader.get_u64("lm.seq_len", cfg.model.seq_len);
  const std::uint64_t local_heads = reader.get_u64("lm.local_heads", 0);
  const std::uint64_t local_span = reader.get_u64("lm.span", 0);
  const bool qk_norm = reader.get_bool("lm.qk_norm", false);
  cfg.model.init_std = reader.get_double("lm.init_std", cfg.model.init_std);
  cfg.steps = reader.get_u64("lm.steps", cfg.steps);
  cfg.tokens_per_batch = reader.get_u64("lm.tokens_per_batch", cfg.tokens_per_batch);
  const std::uint64_t corpus_bytes = reader.get_u64("lm.corpus_bytes", 1u << 20);
  cfg.val_every = reader.get_u64("lm.val_every", cfg.val_every);
  cfg.val_batches = reader.get_u64("lm.val_batches", cfg.val_batches);

  cfg.adamw.beta1 = reader.get_double("opt.beta1", cfg.adamw.beta1);
  cfg.adamw.beta2 = reader.get_double("opt.beta2", cfg.adamw.beta2);
  cfg.adamw.eps = reader.get_double("opt.eps", cfg.adamw.eps);
  cfg.adamw.weight_decay = reader.get_double("opt.weight_decay", cfg.adamw.weight_decay);
  cfg.adamw.clip_norm = reader.get_double("opt.clip_norm", cfg.adamw.clip_norm);
  cfg.schedule.lr_max = reader.get_double("opt.lr_max", cfg.schedule.lr_max);
  cfg.schedule.lr_min = reader.get_double("opt.lr_min", cfg.schedule.lr_min);
  cfg.schedule.warmup_steps = reader.get_u64("opt.warmup_steps", cfg.schedule.warmup_steps);
  cfg.schedule.decay_steps = reader.get_u64("opt.decay_steps", cfg.schedule.decay_steps);

  cfg.divergence.window = reader.get_u64("detect.window", cfg.divergence.window);
  cfg.divergence.ratio = reader.get_double("detect.ratio", cfg.divergence.ratio);

  const std::uint64_t seed_data = reader.get_u64("seed.data", 1);
  cfg.model.seed = reader.get_u64("seed.init", 1);
  cfg.data_seed = seed_data;
  if (local_heads > cfg.model.n_heads) {
    throw ConfigError("lm.local_heads exceeds lm.heads");
  }
  cfg.model.layout = LsLayout::local_global(
      local_heads, cfg.model.n_heads - local_heads, local_span, qk_norm);
  reader.finish();
  cfg.validate();

  ManifestInfo manifest = start_manifest("train-lm", reader, args.out_dir);
  const ByteCorpus corpus = make_synthetic_corpus(corpus_bytes, seed_data);
  TrainLmResult result = train_lm(cfg, corpus);

  {
    CsvWriter csv(args.out_dir + "/telemetry.csv",
                  telemetry_csv_header(cfg.model.n_layers, cfg.model.n_heads));
    for (const TelemetryRecord& rec : result.telemetry) csv.row(telemetry_csv_row(rec));
    csv.close();
  }
  std::vector<std::string> outputs{"telemetry.csv", "checkpoint.bin"};
  if (cfg.val_every > 0) {
    CsvWriter csv(args.out_dir + "/validation.csv", {"step", "val_loss"});
    for (const ValRecord& rec : result.val_curve) {
      csv.row({std::to_string(rec.step), fmt_double(rec.val_loss)});
    }
    csv.close();
    outputs.push_back("validation.csv");
  }
  write_checkpoint(args.out_dir + "/checkpoint.bin", result.params.param_names(),
                   static_cast<const Parameters&>(result.params).param_list());
  finish_manifest(manifest, outputs, args.out_dir);

  if (result.halted_non_finite) {
    std::fprintf(stderr, "train-lm: non-finite loss at step %llu, run halted\n",
                 static_cast<unsigned long long>(result.telemetry.back().step));
    return kExitNumeric;
  }
  std::printf("train-lm: %zu steps, final loss %s -> %s/telemetry.csv\n",
              result.telemetry.size(),
              result.telemetry.empty() ? "n/a"
                                       : fmt_double(result.telemetry.back().loss).c_str(),
              args.out_dir.c_str());
  if (!result.divergence_flags.empty()) {
    std::fprintf(stderr, "train-lm: divergence detector flagged %zu steps (first at %llu)\n",
                 result.divergence_flags.size(),
                 static_cast<unsigned long long>(result.divergence_flags.front()));
    return kExitDivergence;
  }
  return kExitOk;
}

int run_bench(const CommonArgs& args) {
  ConfigReader reader(resolve_map(args));
  const std::vector<std::size_t> n_list =
      parse_n_list(reader.get_string("bench.n_list", "256,512,1024,2048"));
  const std::uint64_t local_heads = reader.get_u64("bench.local_heads", 5);
  const std::uint64_t global_heads = reader.get_u64("bench.global_heads", 1);
  const std::uint64_t span = reader.get_u64("bench.span", 100);
  const std::uint64_t d_model = reader.get_u64("bench.d_model", 192);
  const std::uint64_t d_k = reader.get_u64("bench.d_k", 32);
  const std::uint64_t d_v = reader.get_u64("bench.d_v", 32);
  const std::uint64_t batch = reader.get_u64("bench.batch", 1);
  const std::uint64_t repeats = reader.get_u64("bench.repeats", 5);
  const std::uint64_t seed = reader.get_u64("seed.data", 1);
  reader.finish();

  const LsLayout ls = LsLayout::local_global(local_heads, global_heads, span);
  const LsLayout vanilla = LsLayout::all_global(ls.n_heads());
  ManifestInfo manifest = start_manifest("bench", reader, args.out_dir);

  CsvWriter csv(args.out_dir + "/bench.csv", bench_csv_header());
  for (std::size_t n : n_list) {
    const CostReport vr =
        bench_batch_forward(vanilla, ls, n, d_model, d_k, d_v, batch, repeats, seed);
    csv.row(bench_csv_row(vr, "vanilla"));
    const CostReport lr =
        bench_batch_forward(ls, ls, n, d_model, d_k, d_v, batch, repeats, seed);
    csv.row(bench_csv_row(lr, "ls"));
    std::printf("bench: n=%zu vanilla %.2f ms, ls %.2f ms (%.1f%% reduction)\n", n,
                vr.wall_ms_median, lr.wall_ms_median,
                100.0 * (1.0 - lr.wall_ms_median / vr.wall_ms_median));
  }
  csv.close();
  finish_manifest(manifest, {"bench.csv"}, args.out_dir);
  return kExitOk;
}

int run_gradcheck(const CommonArgs& args) {
  ConfigReader reader(resolve_map(args));
  const std::uint64_t seeds = reader.get_u64("gradcheck.seeds", 20);
  reader.finish();

  ManifestInfo manifest = start_manifest("gradcheck", reader, args.out_dir);
  const std::vector<GradcheckResult> results = run_gradcheck_suites(seeds);

  CsvWriter csv(args.out_dir + "/gradcheck.csv", {"suite", "max_rel_error", "seeds"});
  for (const GradcheckResult& r : results) {
    csv.row({r.name, fmt_double(r.max_rel_error), std::to_string(r.seeds)});
    std::printf("gradcheck: %-28s max rel error %.3e over %zu seeds\n", r.name.c_str(),
                r.max_rel_error, r.seeds);
  }
  csv.close();
  finish_manifest(manifest, {"gradcheck.csv"}, args.out_dir);

  const double worst = gradcheck_worst(results);
  std::printf("gradcheck: worst %.3e (tolerance %.0e)\n", worst, kGradTol);
  return worst < kGradTol ? kExitOk : kExitNumeric;
}

int run_flops(const CommonArgs& args) {
  ConfigReader reader(resolve_map(args));
  const std::vector<std::size_t> n_list =
      parse_n_list(reader.get_string("flops.n_list", "2048,8192"));
  const std::uint64_t local_heads = reader.get_u64("flops.local_heads", 5);
  const std::uint64_t global_heads = reader.get_u64("flops.global_heads", 1);
  const std::uint64_t span = reader.get_u64("flops.span", 100);
  const std::uint64_t d_k = reader.get_u64("flops.d_k", 32);
  const std::uint64_t d_v = reader.get_u64("flops.d_v", 32);
  reader.finish();

  const LsLayout ls = LsLayout::local_global(local_heads, global_heads, span);
  ManifestInfo manifest = start_manifest("flops", reader, args.out_dir);

  CsvWriter csv(args.out_dir + "/flops.csv", {"n", "flops_ls", "flops_vanilla", "ratio"});
  for (std::size_t n : n_list) {
    const FlopsReport r = attention_flops(ls, n, d_k, d_v);
    csv.row({std::to_string(n), std::to_string(r.ls_flops),
             std::to_string(r.vanilla_flops), fmt_double(r.ratio)});
    std::printf("flops: n=%-8zu ls %llu  vanilla %llu  ratio %.4f\n", n,
                static_cast<unsigned long long>(r.ls_flops),
                static_cast<unsigned long long>(r.vanilla_flops), r.ratio);
  }
  csv.close();
  finish_manifest(manifest, {"flops.csv"}, args.out_dir);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-attention numerical laboratory"};
  app.require_subcommand(1);

  CommonArgs synth_args, lm_args, bench_args, grad_args, flops_args;
  int (*runner)(const CommonArgs&) = nullptr;
  const CommonArgs* chosen = nullptr;

  CLI::App* synth = app.add_subcommand("synth", "banded-target attention fit");
  add_common_flags(synth, synth_args);
  synth->callback([&] { runner = run_synth; chosen = &synth_args; });

  CLI::App* lm = app.add_subcommand("train-lm", "byte-level decoder training");
  add_common_flags(lm, lm_args);
  lm->callback([&] { runner = run_train_lm; chosen = &lm_args; });

  CLI::App* bench = app.add_subcommand("bench", "streaming forward wall-clock benchmark");
  add_common_flags(bench, bench_args);
  bench->callback([&] { runner = run_bench; chosen = &bench_args; });

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  add_common_flags(grad, grad_args);
  grad->callback([&] { runner = run_gradcheck; chosen = &grad_args; });

  CLI::App* flops = app.add_subcommand("flops", "attention cost-model table");
  add_common_flags(flops, flops_args);
  flops->callback([&] { runner = run_flops; chosen = &flops_args; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    return runner(*chosen);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::out_of_range& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  }
}
