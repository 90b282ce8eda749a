#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "xdiff/io.hpp"
#include "xdiff/pipeline.hpp"

using namespace xdiff;

namespace {

struct ConfigArgs {
  std::string config;
  std::vector<std::string> sets;
  // Flag overrides, applied before --set.
  std::vector<std::pair<std::string, std::function<std::optional<nlohmann::json>()>>> flags;
};

template <class T>
void flag(CLI::App* cmd, ConfigArgs& a, const std::string& name, const std::string& key,
          std::shared_ptr<std::optional<T>> slot, const std::string& help) {
  cmd->add_option(name, *slot, help);
  a.flags.emplace_back(key, [slot]() -> std::optional<nlohmann::json> {
    if (!*slot) return std::nullopt;
    return nlohmann::json(**slot);
  });
}

template <class T>
std::shared_ptr<std::optional<T>> slot() {
  return std::make_shared<std::optional<T>>();
}

ConfigArgs& add_config(CLI::App* cmd, std::vector<std::unique_ptr<ConfigArgs>>& store) {
  store.push_back(std::make_unique<ConfigArgs>());
  ConfigArgs& a = *store.back();
  cmd->add_option("--config", a.config, "JSON run config");
  cmd->add_option("--set", a.sets, "override key=value (dotted keys, JSON values)");
  flag(cmd, a, "--train-dir", "train_dir", slot<std::string>(), "training dataset directory");
  flag(cmd, a, "--eval-dir", "eval_dir", slot<std::string>(), "evaluation dataset directory");
  flag(cmd, a, "--models", "model_dir", slot<std::string>(), "model bundle directory");
  flag(cmd, a, "--out", "output_dir", slot<std::string>(), "output directory");
  flag(cmd, a, "--seed", "seeds.master", slot<std::uint64_t>(), "master seed");
  flag(cmd, a, "--T", "T", slot<int>(), "diffusion steps");
  flag(cmd, a, "--M", "M", slot<int>(), "SRM steps");
  flag(cmd, a, "--N", "N", slot<int>(), "resample timestep");
  flag(cmd, a, "--drf", "drf", slot<double>(), "dose reduction factor");
  flag(cmd, a, "--ordering", "ordering", slot<std::string>(), "sd1-sd2 or sd2-sd1");
  flag(cmd, a, "--lambda-lq", "guidance.lq", slot<double>(), "low-quality image guidance weight");
  flag(cmd, a, "--lambda-y", "guidance.y", slot<double>(), "sinogram pyramid guidance weight");
  flag(cmd, a, "--lambda-m", "guidance.m", slot<double>(), "meta-information guidance weight");
  flag(cmd, a, "--r-input", "r_input", slot<std::string>(), "restored or raw");
  flag(cmd, a, "--use-srm", "use_srm", slot<bool>(), "run the sinogram restoration model");
  return a;
}

RunConfig resolve(const ConfigArgs& a) {
  nlohmann::json j = nlohmann::json::object();
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw IoError("config file not found: " + a.config);
    try {
      j = nlohmann::json::parse(io::read_text(a.config));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("cannot parse " + a.config + ": " + e.what());
    }
  }
  for (const auto& [key, get] : a.flags) {
    if (auto v = get()) apply_override(j, key + "=" + v->dump());
  }
  for (const auto& s : a.sets) apply_override(j, s);
  return RunConfig::from_json(j);
}

std::vector<Case> eval_cases(const RunConfig& cfg) { return load_dataset(cfg.eval_dir, cfg.max_eval_cases); }

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

int cmd_gen_data(const RunConfig& cfg, const std::string& dir, int count, std::uint64_t seed) {
  const fs::path out = dir.empty() ? cfg.train_dir : fs::path(dir);
  const auto rows = generate_dataset(out, count, seed, cfg.case_config());
  std::cout << "wrote " << rows.size() << " cases to " << out.string() << "\n";
  return 0;
}

int cmd_fit(const RunConfig& cfg) {
  const auto train = load_dataset(cfg.train_dir, cfg.max_fit_cases);
  FitReport rep;
  const ModelBundle m = fit_all(train, cfg, &rep);
  m.save(cfg.model_dir);
  io::write_json(cfg.model_dir / "fit_report.json", {{"config", cfg.to_json()},
                                                     {"cases", train.size()},
                                                     {"srm_relative_loss", rep.srm_loss},
                                                     {"sd1_relative_loss", rep.sd1_loss},
                                                     {"sd2_relative_loss", rep.sd2_loss},
                                                     {"align_final_loss", rep.align_final_loss}});
  std::cout << "fitted " << train.size() << " cases into " << cfg.model_dir.string() << "\n";
  return 0;
}

int cmd_reconstruct(const RunConfig& cfg) {
  const Pipeline p(cfg, ModelBundle::load(cfg.model_dir));
  const auto res = run_reconstruct(p, eval_cases(cfg));
  std::cout << std::fixed << std::setprecision(4) << "cases " << res.cases.size() << "  psnr "
            << res.summary["psnr"].get<double>() << " (baseline " << res.summary["baseline_psnr"].get<double>()
            << ")  ssim " << res.summary["ssim"].get<double>() << " (baseline "
            << res.summary["baseline_ssim"].get<double>() << ")\n";
  return 0;
}

int cmd_sweep(const RunConfig& cfg) {
  const Pipeline p(cfg, ModelBundle::load(cfg.model_dir));
  const auto rows = run_sweep(p, eval_cases(cfg), cfg.resolved_sweep());
  write_sweep_csv(cfg.output_dir / "sweep.csv", rows);
  for (const auto& r : rows) std::printf("N=%-4d psnr %.4f ssim %.4f\n", r.N, r.psnr, r.ssim);
  std::printf("best N = %d\n", rows[best_sweep_row(rows)].N);
  return 0;
}

int cmd_ordering(const RunConfig& cfg) {
  const auto rows = run_ordering_compare(cfg, ModelBundle::load(cfg.model_dir), eval_cases(cfg));
  std::ostringstream os;
  os << "id,psnr_sd1_sd2,ssim_sd1_sd2,psnr_sd2_sd1,ssim_sd2_sd1\n" << std::setprecision(17);
  double a = 0, b = 0;
  for (const auto& r : rows) {
    os << r.id << ',' << r.psnr_sd1_sd2 << ',' << r.ssim_sd1_sd2 << ',' << r.psnr_sd2_sd1 << ','
       << r.ssim_sd2_sd1 << '\n';
    a += r.psnr_sd1_sd2;
    b += r.psnr_sd2_sd1;
  }
  io::write_text(cfg.output_dir / "ordering.csv", os.str());
  std::printf("mean psnr sd1-sd2 %.4f  sd2-sd1 %.4f\n", a / rows.size(), b / rows.size());
  return 0;
}

int cmd_align_demo(const RunConfig& cfg, int count, int distractors, std::uint64_t seed) {
  const ModelBundle m = ModelBundle::load(cfg.model_dir);
  CaseConfig acfg = cfg.case_config();
  acfg.phantom.image_size = cfg.align_image_size;
  acfg.geometry = Geometry::covering(cfg.align_image_size, cfg.num_angles);
  const auto items = make_align_pairs(count, seed, acfg, align_source_from_string(cfg.align_source));
  if (count < distractors + 1) throw ConfigError("count must exceed distractors");
  Rng rng = make_rng(seed, "align-demo");
  std::ostringstream os;
  os << "item,prompt,probability,is_match,is_argmax\n" << std::setprecision(9);
  int hits = 0;
  for (int i = 0; i < count; ++i) {
    std::vector<int> others;
    for (int k = 0; k < count; ++k) {
      if (k != i) others.push_back(k);
    }
    std::vector<std::string> prompts{render_prompt(items[i].meta)};
    for (int d = 0; d < distractors; ++d) {
      const std::size_t pick = d + static_cast<std::size_t>(uniform01(rng) * (others.size() - d));
      std::swap(others[d], others[pick]);
      prompts.push_back(render_prompt(items[others[d]].meta));
    }
    const auto prob = align_probability(m.encoder, items[i].image, prompts);
    const auto best = std::max_element(prob.begin(), prob.end()) - prob.begin();
    hits += best == 0 ? 1 : 0;
    for (std::size_t k = 0; k < prompts.size(); ++k) {
      os << i << ',' << csv_quote(prompts[k]) << ',' << prob[k] << ',' << (k == 0) << ','
         << (static_cast<long>(k) == best) << '\n';
    }
  }
  io::write_text(cfg.output_dir / "align_demo.csv", os.str());
  std::printf("matched-prompt accuracy %.4f over %d items (%d distractors)\n",
              static_cast<double>(hits) / count, count, distractors);
  return 0;
}

int cmd_metrics(const RunConfig& cfg, const std::string& recon_dir) {
  const fs::path dir = recon_dir.empty() ? cfg.output_dir / "recon" : fs::path(recon_dir);
  std::vector<MetricReport> reps;
  for (const auto& c : eval_cases(cfg)) {
    const Image recon = io::load_image(dir / c.id);
    reps.push_back(evaluate(c.id, recon, c.phantom.image, c.phantom, c.meta));
  }
  write_reports(cfg.output_dir / "metrics_recomputed.csv", cfg.output_dir / "metrics_recomputed.json", reps);
  const auto s = report_summary(reps);
  std::printf("cases %zu  psnr %.4f  ssim %.4f\n", reps.size(), s.at("psnr").at("mean").get<double>(),
              s.at("ssim").at("mean").get<double>());
  return 0;
}

int cmd_report(const RunConfig& cfg, const std::string& sweep_path) {
  const fs::path path = sweep_path.empty() ? cfg.output_dir / "sweep.csv" : fs::path(sweep_path);
  const auto rows = read_sweep_csv(path);
  const auto& best = rows[best_sweep_row(rows)];
  const bool interior = best.N != rows.front().N && best.N != rows.back().N;
  std::printf("%6s %10s %8s %12s\n", "N", "psnr", "ssim", "mse");
  for (const auto& r : rows) {
    std::printf("%6d %10.4f %8.4f %12.6g%s\n", r.N, r.psnr, r.ssim, r.mse, r.N == best.N ? "  *" : "");
  }
  std::printf("best N = %d (%s)\n", best.N, interior ? "interior" : "boundary");
  return 0;
}

int cmd_dump_pyramid(const RunConfig& cfg, const std::string& id) {
  const ModelBundle m = ModelBundle::load(cfg.model_dir);
  const Pipeline p(cfg, m);
  for (const auto& c : eval_cases(cfg)) {
    if (!id.empty() && c.id != id) continue;
    const FrontResult f = p.front(c);
    dump_pyramid(cfg.output_dir / "pyramid" / c.id, f.pyramid);
    std::cout << "dumped " << c.id << "\n";
    if (!id.empty()) return 0;
  }
  if (!id.empty()) throw IoError("case " + id + " not found in " + cfg.eval_dir.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xdiff: cascade diffusion PET reconstruction toolkit"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<ConfigArgs>> store;
  std::function<int()> run;

  auto* gen = app.add_subcommand("gen-data", "simulate a phantom dataset");
  auto& gen_cfg = add_config(gen, store);
  std::string gen_dir;
  int gen_count = 40;
  std::uint64_t gen_seed = 1;
  gen->add_option("--dir", gen_dir, "dataset directory (default: train_dir)");
  gen->add_option("--count", gen_count, "number of cases")->check(CLI::PositiveNumber);
  gen->add_option("--data-seed", gen_seed, "dataset seed");
  gen->callback([&] { run = [&] { return cmd_gen_data(resolve(gen_cfg), gen_dir, gen_count, gen_seed); }; });

  auto* fit = app.add_subcommand("fit", "fit SRM, SD1, SD2 and the MI encoder");
  auto& fit_cfg = add_config(fit, store);
  fit->callback([&] { run = [&] { return cmd_fit(resolve(fit_cfg)); }; });

  auto* rec = app.add_subcommand("reconstruct", "reconstruct every evaluation case");
  auto& rec_cfg = add_config(rec, store);
  rec->callback([&] { run = [&] { return cmd_reconstruct(resolve(rec_cfg)); }; });

  auto* sweep = app.add_subcommand("sweep-n", "PSNR/SSIM over resample timesteps");
  auto& sweep_cfg = add_config(sweep, store);
  std::vector<int> sweep_ns;
  sweep->add_option("--ns", sweep_ns, "resample timesteps")->delimiter(',');
  sweep->callback([&] {
    run = [&] {
      RunConfig cfg = resolve(sweep_cfg);
      if (!sweep_ns.empty()) {
        cfg.sweep_N = sweep_ns;
        cfg.validate();
      }
      return cmd_sweep(cfg);
    };
  });

  auto* ord = app.add_subcommand("ordering-compare", "SD1-to-SD2 versus SD2-to-SD1 at matched seeds");
  auto& ord_cfg = add_config(ord, store);
  ord->callback([&] { run = [&] { return cmd_ordering(resolve(ord_cfg)); }; });

  auto* align = app.add_subcommand("align-demo", "prompt matching probabilities on held-out pairs");
  auto& align_cfg = add_config(align, store);
  int align_count = 300, align_distractors = 8;
  std::uint64_t align_seed = 1001;
  align->add_option("--count", align_count, "held-out pairs")->check(CLI::PositiveNumber);
  align->add_option("--distractors", align_distractors, "wrong prompts per item")->check(CLI::PositiveNumber);
  align->add_option("--pair-seed", align_seed, "seed of the held-out pairs");
  align->callback([&] {
    run = [&] { return cmd_align_demo(resolve(align_cfg), align_count, align_distractors, align_seed); };
  });

  auto* met = app.add_subcommand("metrics", "recompute metrics of saved reconstructions");
  auto& met_cfg = add_config(met, store);
  std::string met_dir;
  met->add_option("--recon-dir", met_dir, "directory of reconstructions (default: <out>/recon)");
  met->callback([&] { run = [&] { return cmd_metrics(resolve(met_cfg), met_dir); }; });

  auto* rep = app.add_subcommand("report", "summarise a sweep CSV");
  auto& rep_cfg = add_config(rep, store);
  std::string rep_path;
  rep->add_option("--sweep", rep_path, "sweep CSV (default: <out>/sweep.csv)");
  rep->callback([&] { run = [&] { return cmd_report(resolve(rep_cfg), rep_path); }; });

  auto* dump = app.add_subcommand("dump-pyramid", "write CDSM feature pyramids of evaluation cases");
  auto& dump_cfg = add_config(dump, store);
  std::string dump_id;
  dump->add_option("--case", dump_id, "case id (default: all)");
  dump->callback([&] { run = [&] { return cmd_dump_pyramid(resolve(dump_cfg), dump_id); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
