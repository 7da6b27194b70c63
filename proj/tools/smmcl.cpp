// Command-line front end: generate / train / ablate / eval / gradcheck.
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "smmcl/config.hpp"
#include "smmcl/data.hpp"
#include "smmcl/gradcheck.hpp"
#include "smmcl/metrics.hpp"
#include "smmcl/model.hpp"
#include "smmcl/training.hpp"

namespace fs = std::filesystem;
using namespace smmcl;

namespace {

constexpr const char* kBuildId = "smmcl 1.0.0 (" __VERSION__ ")";

int worker_threads(int cells) {
  int n = 0;
  if (const char* env = std::getenv("SMMCL_THREADS")) n = std::atoi(env);
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  return std::min(n, cells);
}

void write_run_info(const fs::path& dir, const RunConfig& cfg,
                    uint64_t seed) {
  std::ofstream f(dir / "run_info.txt");
  f << "build = " << kBuildId << "\n";
  f << "seed = " << seed << "\n";
  f << "precision = " << cfg.precision << "\n";
}

// Flag overrides shared by the training-flavored subcommands.
struct Overrides {
  std::string config_path;
  fs::path out;
  uint64_t seed = 0;
  double lambda_cm = 0, lambda_vis = 0, lambda_aux = 0, tau = 0, lr = 0;
  int epochs = 0, batch_size = 0;
  bool no_normalize = false, symmetrize = false;
  std::string precision;
  CLI::App* cmd = nullptr;

  void attach(CLI::App* c, bool with_out = true) {
    cmd = c;
    c->add_option("--config", config_path, "key=value config file");
    if (with_out) c->add_option("--out", out, "output directory")->required();
    c->add_option("--seed", seed, "RNG seed");
    c->add_option("--lambda-cm", lambda_cm, "cross-modal loss weight");
    c->add_option("--lambda-vis", lambda_vis, "visible intra-modal loss weight");
    c->add_option("--lambda-aux", lambda_aux, "auxiliary intra-modal loss weight");
    c->add_option("--tau", tau, "contrastive temperature");
    c->add_option("--epochs", epochs, "training epochs");
    c->add_option("--batch-size", batch_size, "batch size");
    c->add_option("--lr", lr, "base learning rate");
    c->add_flag("--no-normalize-embeddings", no_normalize,
                "skip L2 normalization of sampled embeddings");
    c->add_flag("--symmetrize-cm", symmetrize,
                "average both anchor directions in the cross-modal loss");
    c->add_option("--precision", precision, "training precision: f32 or f64");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = read_run_config(config_path);
    if (cmd->count("--seed")) {
      cfg.gen.seed = seed;
      cfg.train.seed = seed;
    }
    if (cmd->count("--lambda-cm")) cfg.train.contrast.lambda_cm = lambda_cm;
    if (cmd->count("--lambda-vis")) cfg.train.contrast.lambda_vis = lambda_vis;
    if (cmd->count("--lambda-aux")) cfg.train.contrast.lambda_aux = lambda_aux;
    if (cmd->count("--tau")) cfg.train.contrast.tau = tau;
    if (cmd->count("--epochs")) cfg.train.epochs = epochs;
    if (cmd->count("--batch-size")) cfg.train.batch_size = batch_size;
    if (cmd->count("--lr")) cfg.train.base_lr = lr;
    if (no_normalize) cfg.train.contrast.normalize_embeddings = false;
    if (symmetrize) cfg.train.contrast.symmetrize_cm = true;
    if (!precision.empty()) cfg.precision = precision;
    cfg.sync();
    return cfg;
  }
};

std::pair<std::vector<SceneSample>, std::vector<SceneSample>> load_splits(
    const fs::path& data_dir) {
  if (!fs::exists(data_dir / "train" / "manifest.txt"))
    throw IoError("no train split under " + data_dir.string());
  auto train = read_dataset(data_dir / "train");
  std::vector<SceneSample> eval;
  if (fs::exists(data_dir / "eval" / "manifest.txt"))
    eval = read_dataset(data_dir / "eval");
  return {std::move(train), std::move(eval)};
}

int cmd_generate(const Overrides& ov, int n_train, int n_eval) {
  RunConfig cfg = ov.resolve();
  if (ov.cmd->count("--n-train")) cfg.n_train = n_train;
  if (ov.cmd->count("--n-eval")) cfg.n_eval = n_eval;
  cfg.validate();  // before any file is written
  std::vector<SceneSample> train, eval;
  for (int i = 0; i < cfg.n_train; ++i)
    train.push_back(generate_scene(cfg.gen, i));
  for (int i = 0; i < cfg.n_eval; ++i)
    eval.push_back(generate_scene(cfg.gen, cfg.n_train + i));
  fs::create_directories(ov.out);
  write_dataset(train, ov.out / "train");
  if (!eval.empty()) write_dataset(eval, ov.out / "eval");
  write_run_config(ov.out / "config.ini", cfg);
  write_run_info(ov.out, cfg, cfg.gen.seed);
  std::cout << "wrote " << cfg.n_train << " train + " << cfg.n_eval
            << " eval scenes to " << ov.out.string() << "\n";
  return 0;
}

template <typename T>
int run_train(const RunConfig& cfg, const fs::path& data_dir,
              const fs::path& out) {
  auto [train_set, eval_set] = load_splits(data_dir);
  std::vector<EpochRecord> history;
  auto on_epoch = [&](const EpochRecord& rec, const ParamRegistry<T>& params) {
    history.push_back(rec);
    // interrupt-safe: rewrite history + checkpoint each epoch (tmp + rename)
    write_history_csv(out / "history.csv", history);
    save_checkpoint(out / "checkpoint", params, cfg.model);
    std::cout << "epoch " << rec.epoch << " ce " << rec.loss_ce << " cm "
              << rec.loss_cm << " miou " << rec.miou << " sep "
              << rec.separability << " lr " << rec.lr << "\n";
  };
  TrainResult<T> res =
      train<T>(train_set, eval_set, cfg.model, cfg.train, on_epoch);
  write_history_csv(out / "history.csv", res.history);
  save_checkpoint(out / "checkpoint", res.params, cfg.model);
  return 0;
}

int cmd_train(const Overrides& ov, const fs::path& data_dir) {
  RunConfig cfg = ov.resolve();
  cfg.validate();
  if (!fs::exists(data_dir / "train" / "manifest.txt"))
    throw IoError("no train split under " + data_dir.string());
  fs::create_directories(ov.out);
  write_run_config(ov.out / "config.ini", cfg);
  write_run_info(ov.out, cfg, cfg.train.seed);
  return cfg.precision == "f64" ? run_train<double>(cfg, data_dir, ov.out)
                                : run_train<float>(cfg, data_dir, ov.out);
}

struct CellResult {
  AblationRow row;
  std::vector<EpochRecord> history;
};

template <typename T>
std::vector<CellResult> run_ablation(const RunConfig& cfg,
                                     const std::vector<SceneSample>& train_set,
                                     const std::vector<SceneSample>& eval_set,
                                     const std::vector<uint64_t>& seeds) {
  const auto& variants = ablation_variants();
  struct Cell {
    const char* variant;
    bool use_cm, use_intra;
    uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto& [name, flags] : variants)
    for (uint64_t s : seeds)
      cells.push_back({name, flags.first, flags.second, s});
  std::vector<CellResult> results(cells.size());
  std::atomic<size_t> next{0};
  std::mutex io_mutex;
  auto work = [&]() {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      TrainConfig tc = cfg.train;
      tc.use_cm = cells[i].use_cm;
      tc.use_intra = cells[i].use_intra;
      tc.seed = cells[i].seed;
      TrainResult<T> res = train<T>(train_set, eval_set, cfg.model, tc);
      CellResult& cr = results[i];
      cr.row.variant = cells[i].variant;
      cr.row.seed = cells[i].seed;
      cr.row.miou = res.history.back().miou;
      cr.row.separability = res.history.back().separability;
      cr.history = res.history;
      std::lock_guard<std::mutex> lk(io_mutex);
      std::cout << cr.row.variant << " seed " << cr.row.seed << " miou "
                << cr.row.miou << " sep " << cr.row.separability << std::endl;
    }
  };
  int nthreads = worker_threads(static_cast<int>(cells.size()));
  if (nthreads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  return results;
}

void write_ablation_csv(const fs::path& path,
                        const std::vector<CellResult>& results) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f.precision(12);
  f << "variant,seed,miou,separability,miou_std,separability_std\n";
  for (const CellResult& r : results)
    f << r.row.variant << "," << r.row.seed << "," << r.row.miou << ","
      << r.row.separability << ",,\n";
  for (auto& [name, flags] : ablation_variants()) {
    double sm = 0, ss = 0, sm2 = 0, ss2 = 0;
    int n = 0;
    for (const CellResult& r : results) {
      if (r.row.variant != name) continue;
      sm += r.row.miou;
      ss += r.row.separability;
      sm2 += r.row.miou * r.row.miou;
      ss2 += r.row.separability * r.row.separability;
      ++n;
    }
    double mm = sm / n, ms = ss / n;
    double vm = std::max(0.0, sm2 / n - mm * mm);
    double vs = std::max(0.0, ss2 / n - ms * ms);
    f << name << ",summary," << mm << "," << ms << "," << std::sqrt(vm) << ","
      << std::sqrt(vs) << "\n";
  }
}

int cmd_ablate(const Overrides& ov, const fs::path& data_dir,
               const std::string& seeds_arg) {
  RunConfig cfg = ov.resolve();
  cfg.validate();
  std::vector<uint64_t> seeds;
  std::istringstream is(seeds_arg);
  std::string tok;
  while (std::getline(is, tok, ','))
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
  if (seeds.empty()) throw ArgumentError("--seeds must list at least one seed");
  auto [train_set, eval_set] = load_splits(data_dir);
  if (eval_set.empty()) throw IoError("ablation needs an eval split");
  fs::create_directories(ov.out);
  write_run_config(ov.out / "config.ini", cfg);
  write_run_info(ov.out, cfg, cfg.train.seed);
  std::vector<CellResult> results =
      cfg.precision == "f64"
          ? run_ablation<double>(cfg, train_set, eval_set, seeds)
          : run_ablation<float>(cfg, train_set, eval_set, seeds);
  for (const CellResult& r : results) {
    fs::path cell = ov.out / "cells" /
                    (r.row.variant + "-s" + std::to_string(r.row.seed));
    fs::create_directories(cell);
    write_history_csv(cell / "history.csv", r.history);
  }
  write_ablation_csv(ov.out / "ablation.csv", results);
  std::cout << "wrote " << (ov.out / "ablation.csv").string() << "\n";
  return 0;
}

template <typename T>
int run_eval(const fs::path& ckpt, const fs::path& data_dir,
             const std::string& out_file, uint64_t seed) {
  auto [reg, mc] = load_checkpoint<T>(ckpt);
  fs::path split = fs::exists(data_dir / "eval" / "manifest.txt")
                       ? data_dir / "eval"
                       : data_dir;
  std::vector<SceneSample> samples = read_dataset(split);
  if (samples.empty()) throw IoError("empty eval split in " + split.string());
  std::vector<PreparedSample<T>> prep = prepare_samples<T>(samples, mc);
  TrainConfig tc;
  tc.seed = seed;
  EvalReport rep = detail::evaluate(prep, reg, mc, tc);
  std::ostringstream os;
  os.precision(12);
  os << "metric,value\n";
  for (size_t k = 0; k < rep.per_class_iou.size(); ++k)
    os << "iou_class_" << k << "," << rep.per_class_iou[k] << "\n";
  os << "miou," << rep.miou << "\n";
  os << "separability_visible," << rep.sep_vis << "\n";
  os << "separability_auxiliary," << rep.sep_aux << "\n";
  os << "separability_pooled," << rep.sep_pooled << "\n";
  if (!out_file.empty()) {
    std::ofstream f(out_file);
    if (!f) throw IoError("cannot write " + out_file);
    f << os.str();
  }
  std::cout << os.str();
  return 0;
}

int cmd_gradcheck(const std::string& scope) {
  std::vector<GradCheckResult> results;
  if (scope == "losses" || scope == "all") {
    auto r = gradcheck::check_losses();
    results.insert(results.end(), r.begin(), r.end());
  }
  if (scope == "fusion" || scope == "all") {
    auto r = gradcheck::check_fusion();
    results.insert(results.end(), r.begin(), r.end());
  }
  if (scope == "model" || scope == "all") {
    auto r = gradcheck::check_model();
    results.insert(results.end(), r.begin(), r.end());
  }
  if (results.empty()) throw ArgumentError("unknown gradcheck scope " + scope);
  bool ok = true;
  for (const GradCheckResult& r : results) {
    std::cout << r.component << ": worst rel err " << r.worst_rel_err
              << " (tol " << r.tolerance << ") at " << r.worst_at << " -> "
              << (r.pass ? "PASS" : "FAIL") << "\n";
    ok = ok && r.pass;
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supervised multi-modal contrastive segmentation toolkit"};
  app.require_subcommand(1);

  Overrides gen_ov, train_ov, abl_ov;
  int n_train = 1000, n_eval = 200;
  fs::path train_data, abl_data, eval_data, eval_ckpt;
  std::string seeds_arg = "0,1,2,3,4";
  std::string eval_out;
  uint64_t eval_seed = 0;
  std::string gc_scope = "all";

  CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset");
  gen_ov.attach(gen);
  gen->add_option("--n-train", n_train, "training scene count");
  gen->add_option("--n-eval", n_eval, "evaluation scene count");

  CLI::App* tr = app.add_subcommand("train", "train one model");
  tr->add_option("--data", train_data, "dataset directory")->required();
  train_ov.attach(tr);

  CLI::App* ab = app.add_subcommand("ablate", "run the four-variant matrix");
  ab->add_option("--data", abl_data, "dataset directory")->required();
  ab->add_option("--seeds", seeds_arg, "comma-separated seed list");
  abl_ov.attach(ab);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--out", eval_out, "report CSV path (also printed)");
  ev->add_option("--seed", eval_seed, "embedding-sampling seed");

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference checks");
  gc->add_option("--scope", gc_scope, "losses | fusion | model | all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_ov, n_train, n_eval);
    if (tr->parsed()) return cmd_train(train_ov, train_data);
    if (ab->parsed()) return cmd_ablate(abl_ov, abl_data, seeds_arg);
    if (ev->parsed())
      return run_eval<float>(eval_ckpt, eval_data, eval_out, eval_seed);
    if (gc->parsed()) return cmd_gradcheck(gc_scope);
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
