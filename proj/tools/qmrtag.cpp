// qmrtag: command-line front end for synthetic data, text ingestion,
// moments initialization, variational training, evaluation, checkpoint
// selection and the tagging service.

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "qmrtag/baselines.hpp"
#include "qmrtag/dataset.hpp"
#include "qmrtag/eval.hpp"
#include "qmrtag/model_io.hpp"
#include "qmrtag/moments.hpp"
#include "qmrtag/service.hpp"
#include "qmrtag/synth.hpp"
#include "qmrtag/text.hpp"
#include "qmrtag/variational.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qmrtag;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::uint64_t seed = 1;
  std::string out = "run";
  unsigned threads = 1;
  bool deterministic = false;

  unsigned workers() const { return deterministic ? 1 : std::max(1u, threads); }
};

// Run directory bookkeeping: inputs are hashed, outputs listed, and the
// effective configuration is written next to the manifest.
class Run {
 public:
  Run(const std::string& command, const Globals& g, const CLI::App& app,
      std::vector<std::string> argv)
      : command_(command), dir_(fs::path(g.out)) {
    fs::create_directories(dir_);
    manifest_["command"] = command;
    manifest_["argv"] = std::move(argv);
    manifest_["version"] = kVersion;
    manifest_["seed"] = g.seed;
    manifest_["threads"] = g.workers();
    manifest_["deterministic"] = g.deterministic;
    manifest_["inputs"] = json::object();
    manifest_["outputs"] = json::array();
    // Keep global settings and those of the active subcommand only.
    std::istringstream all(app.config_to_str(true, false));
    for (std::string line; std::getline(all, line);) {
      const auto key_end = line.find('=');
      const auto dot = line.find('.');
      const bool unset = line.ends_with("=\"\"");
      if (!unset && (dot == std::string::npos || dot > key_end ||
                     line.compare(0, dot + 1, command + ".") == 0)) {
        config_ += line + "\n";
      }
    }
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void input(const std::string& label, const std::string& file) {
    manifest_["inputs"][label] = {{"path", fs::absolute(file).string()},
                                  {"fnv1a", hex64(fnv1a(read_file(file)))}};
  }

  void output(const std::string& name) { manifest_["outputs"].push_back(name); }

  json& extra() { return manifest_; }

  void finish() {
    write_file(path("config.toml").string(), config_);
    manifest_["config_file"] = "config.toml";
    write_file(path("manifest.json").string(), manifest_.dump(1) + "\n");
  }

 private:
  std::string command_;
  fs::path dir_;
  json manifest_;
  std::string config_;
};

std::string env_name(const std::string& scope, const std::string& opt) {
  std::string s = "QMRTAG_" + (scope.empty() ? "" : scope + "_") + opt;
  for (char& c : s) {
    c = c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return s;
}

template <typename T>
CLI::Option* opt(CLI::App* app, const std::string& name, T& var,
                 const std::string& help) {
  const std::string scope = app->get_parent() ? app->get_name() : "";
  return app->add_option("--" + name, var, help)
      ->envname(env_name(scope, name))
      ->capture_default_str();
}

CLI::Option* flag(CLI::App* app, const std::string& name, bool& var,
                  const std::string& help) {
  const std::string scope = app->get_parent() ? app->get_name() : "";
  return app->add_flag("--" + name, var, help)->envname(env_name(scope, name));
}

void add_gibbs_options(CLI::App* app, GibbsConfig& g, const std::string& prefix) {
  opt(app, prefix + "chains", g.chains, "Gibbs chains");
  opt(app, prefix + "burn-in", g.burn_in, "Gibbs burn-in sweeps per chain");
  opt(app, prefix + "kept", g.kept, "Gibbs kept sweeps per chain");
  opt(app, prefix + "thinning", g.thinning, "Sweeps between kept samples");
}

void save_json(const fs::path& p, const json& j) {
  write_file(p.string(), j.dump(1) + "\n");
}

// ---- synth ---------------------------------------------------------------

struct SynthOpts {
  ScenarioSpec spec;
  std::size_t test_records = 20000;
};

void cmd_synth(SynthOpts o, const Globals& g, Run& run) {
  o.spec.seed = g.seed;
  const auto [truth, noise] = generate_ground_truth(o.spec);
  const Dataset full = generate_dataset(truth, noise, o.spec.records, o.spec.seed);
  FilterReport rep;
  const Dataset train = cohort_filter(full, o.spec.cohort_min, &rep);
  const Dataset test_full = generate_dataset(
      truth, noise, o.test_records, derive_seed(o.spec.seed, 0x74657374ULL));
  FilterReport test_rep;
  const Dataset test = cohort_filter(test_full, o.spec.cohort_min, &test_rep);

  save_model(run.path("truth.json").string(), truth, noise);
  save_json(run.path("noise.json"), noise_to_json(noise));
  save_dataset(run.path("train.jsonl").string(), train);
  save_dataset(run.path("test.jsonl").string(), test);
  for (const char* f : {"truth.json", "noise.json", "train.jsonl", "test.jsonl"}) {
    run.output(f);
  }
  run.extra()["retention"] = {{"train", rep.retention()}, {"test", test_rep.retention()}};
  std::cout << "synth: " << train.size() << " train / " << test.size()
            << " test records after cohort filter (retention "
            << rep.retention() << ")\n";
}

// ---- ingest --------------------------------------------------------------

struct IngestOpts {
  std::string corpus;
  std::string anchors;
  std::string labels;
  std::size_t max_terms = 1000;
  std::size_t bigrams = 200;
};

void cmd_ingest(const IngestOpts& o, const Globals& g, Run& run) {
  run.input("corpus", o.corpus);
  run.input("anchors", o.anchors);
  const auto corpus = load_corpus(o.corpus);
  AnchorSpec anchors;
  try {
    anchors = anchor_spec_from_json(json::parse(read_file(o.anchors)));
  } catch (const json::exception& e) {
    throw DataError("anchor file is not JSON: " + std::string(e.what()));
  }
  std::optional<LabelMap> labels;
  if (!o.labels.empty()) {
    run.input("labels", o.labels);
    try {
      labels = label_map_from_json(json::parse(read_file(o.labels)));
    } catch (const json::exception& e) {
      throw DataError("label map is not JSON: " + std::string(e.what()));
    }
  }
  const auto bigrams = top_bigrams(corpus, o.bigrams);
  const auto vocab = build_vocabulary(corpus, anchors, o.max_terms, bigrams);
  const auto ds = vectorize_corpus(corpus, vocab, labels ? &*labels : nullptr, g.workers());
  save_json(run.path("vocabulary.json"), vocabulary_to_json(vocab));
  save_dataset(run.path("dataset.jsonl").string(), ds);
  run.output("vocabulary.json");
  run.output("dataset.jsonl");
  std::cout << "ingest: " << ds.size() << " records, n = " << vocab.n()
            << " columns, m = " << vocab.m() << " conditions\n";
}

// ---- init ----------------------------------------------------------------

struct InitOpts {
  std::string data;
  std::string noise;
  double smoothing = 1.0;
  bool no_denoise = false;
};

void cmd_init(const InitOpts& o, const Globals& g, Run& run) {
  run.input("data", o.data);
  run.input("noise", o.noise);
  const auto ds = load_dataset(o.data);
  const auto noise = load_noise(o.noise);
  MomentsConfig cfg;
  cfg.smoothing = o.smoothing;
  cfg.denoise = !o.no_denoise;
  cfg.threads = g.workers();
  const auto res = moments_init(ds, noise, cfg);
  save_model(run.path("model.json").string(), res.params, noise);
  save_json(run.path("moments_diagnostics.json"), res.diagnostics.to_json());
  run.output("model.json");
  run.output("moments_diagnostics.json");
  std::cout << "init: wrote " << run.path("model.json").string() << "\n";
}

// ---- train ---------------------------------------------------------------

struct TrainOpts {
  std::string data;
  std::string init;
  std::string noise;
  bool random_init = false;
  bool weight_decay_grid = false;
  TrainConfig cfg;
};

std::string epoch_stem(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%04zu", epoch);
  return buf;
}

void cmd_train(TrainOpts o, const Globals& g, Run& run) {
  run.input("data", o.data);
  const auto ds = load_dataset(o.data);
  NoiseModel noise;
  ModelParams theta0;
  if (!o.init.empty()) {
    run.input("init", o.init);
    auto loaded = load_model(o.init);
    theta0 = std::move(loaded.params);
    noise = std::move(loaded.noise);
  }
  if (!o.noise.empty()) {
    run.input("noise", o.noise);
    noise = load_noise(o.noise);
  }
  if (noise.size() == 0) {
    throw ConfigError("train needs --noise or an --init model carrying a noise model");
  }
  o.cfg.seed = g.seed;
  o.cfg.threads = g.workers();
  const auto [train_set, validation] = split_validation(ds, o.cfg.validation_size, g.seed);
  if (o.random_init) {
    theta0 = random_theta(train_set, noise, g.seed);
  } else if (o.init.empty()) {
    throw ConfigError("train needs --init MODEL or --random-init");
  }

  const fs::path ckdir = run.path("checkpoints");
  fs::create_directories(ckdir);
  auto save_epoch = [&](const EpochLog& e, const Checkpoint& cp) {
    save_checkpoint((ckdir / epoch_stem(cp.epoch)).string(), cp, noise);
    std::cout << "epoch " << e.epoch << "  elbo " << e.elbo << "  supervised "
              << e.supervised_loss << "  validation " << e.validation_score
              << (e.skipped_steps ? "  skipped " + std::to_string(e.skipped_steps) : "")
              << "\n";
  };

  TrainResult result;
  json grid_scores = json::array();
  if (o.weight_decay_grid) {
    auto grid = train_weight_decay_grid(train_set, validation, theta0, noise, o.cfg);
    for (const auto& [wd, score] : grid.scores) {
      grid_scores.push_back({{"weight_decay", wd}, {"validation_score", score}});
    }
    o.cfg.weight_decay = grid.best_weight_decay;
    result = std::move(grid.best);
    for (const auto& cp : result.checkpoints) {
      save_checkpoint((ckdir / epoch_stem(cp.epoch)).string(), cp, noise);
    }
  } else {
    result = train(train_set, validation, theta0, noise, o.cfg, save_epoch);
  }
  {
    std::ofstream log(run.path("training_log.csv"));
    write_training_log(log, result.log);
  }
  save_model(run.path("model.json").string(), result.best.theta, noise);
  save_json(run.path("selection.json"),
            {{"selected_epoch", result.best.epoch},
             {"validation_score", result.best.validation_score},
             {"weight_decay", o.cfg.weight_decay},
             {"weight_decay_grid", grid_scores}});
  run.output("model.json");
  run.output("training_log.csv");
  run.output("selection.json");
  run.output("checkpoints/");
  std::cout << "train: selected epoch " << result.best.epoch << " (validation "
            << result.best.validation_score << ")\n";
}

// ---- eval ----------------------------------------------------------------

struct EvalOpts {
  std::string test;
  std::vector<std::string> models;  // name=path
  std::vector<std::string> baselines;
  std::string train;
  std::string noise;
};

void cmd_eval(const EvalOpts& o, const Globals& g, Run& run) {
  run.input("test", o.test);
  const auto test = load_dataset(o.test);
  const auto instances = make_task_instances(test, g.seed);
  std::vector<ReportRow> rows;
  for (const auto& spec : o.models) {
    const auto eq = spec.find('=');
    const std::string name = eq == std::string::npos ? fs::path(spec).stem().string()
                                                     : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    run.input("model:" + name, path);
    const auto model = load_model(path);
    rows.push_back({name, evaluate_model(noisy_or_ranker(model.params), test,
                                         instances, g.workers())});
  }
  if (!o.baselines.empty()) {
    if (o.train.empty()) {
      throw ConfigError("baselines need --train data");
    }
    run.input("train", o.train);
    const auto train_set = load_dataset(o.train);
    NoiseModel noise;
    for (const auto& b : o.baselines) {
      if ((b == "naive" || b == "noise-tolerant") && noise.size() == 0) {
        if (o.noise.empty()) {
          throw ConfigError("baseline " + b + " needs --noise");
        }
        run.input("noise", o.noise);
        noise = load_noise(o.noise);
      }
      MleConfig mle;
      mle.threads = g.workers();
      if (b == "naive") {
        const auto fit = naive_labels_train(train_set, noise, mle);
        rows.push_back({"Naive labels", evaluate_model(noisy_or_ranker(fit.params), test,
                                                       instances, g.workers())});
      } else if (b == "oracle") {
        const auto fit = oracle_mle_train(train_set, mle);
        rows.push_back({"Oracle MLE", evaluate_model(noisy_or_ranker(fit.params), test,
                                                     instances, g.workers())});
      } else if (b == "noise-tolerant") {
        NoiseTolerantConfig nt;
        nt.threads = g.workers();
        const auto model = noise_tolerant_train(train_set, noise, nt);
        rows.push_back({"Noise tolerant classifiers",
                        evaluate_model(
                            [&](const PatientRecord& r, const TagTaskInstance& i) {
                              return model.rank(r, i.known);
                            },
                            test, instances, g.workers())});
      } else {
        throw ConfigError("unknown baseline '" + b + "'");
      }
    }
  }
  if (rows.empty()) {
    throw ConfigError("eval needs at least one --model or --baseline");
  }
  {
    std::ofstream csv(run.path("report.csv"));
    write_report_csv(csv, rows);
  }
  save_json(run.path("report.json"),
            report_to_json(rows, {{"noise_tolerant_features",
                                   "all columns except the condition's own anchor"},
                                  {"instances", instances.size()}}));
  run.output("report.csv");
  run.output("report.json");
  write_report_csv(std::cout, rows);
}

// ---- select --------------------------------------------------------------

struct SelectOpts {
  std::string checkpoints;
  std::string validation;
  GibbsConfig gibbs{1, 50, 200, 1, 0, 1};
};

void cmd_select(const SelectOpts& o, const Globals& g, Run& run) {
  run.input("validation", o.validation);
  const auto validation = load_dataset(o.validation);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(o.checkpoints)) {
    if (e.path().extension() == ".json") {
      files.push_back(e.path());
    }
  }
  if (files.empty()) {
    throw DataError("no checkpoints in " + o.checkpoints);
  }
  std::sort(files.begin(), files.end());
  json scores = json::array();
  double best = -1.0;
  std::optional<LoadedCheckpoint> chosen;
  for (const auto& f : files) {
    auto cp = load_checkpoint(f.string());
    const double s = heldout_anchor_score(cp.checkpoint.theta, validation, cp.noise,
                                          o.gibbs, derive_seed(g.seed, 0x7363ULL),
                                          g.workers());
    scores.push_back({{"checkpoint", f.filename().string()}, {"score", s}});
    if (s > best) {
      best = s;
      chosen = std::move(cp);
    }
  }
  save_model(run.path("model.json").string(), chosen->checkpoint.theta, chosen->noise);
  save_json(run.path("selection.json"),
            {{"selected_epoch", chosen->checkpoint.epoch}, {"score", best}, {"scores", scores}});
  run.output("model.json");
  run.output("selection.json");
  std::cout << "select: epoch " << chosen->checkpoint.epoch << " (score " << best << ")\n";
}

// ---- serve ---------------------------------------------------------------

struct ServeOpts {
  std::string model;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;
  double watch = 0.0;  // seconds between model-file checks; 0 disables
  GibbsConfig gibbs{2, 200, 500, 1, 0, 1};
};

std::atomic<bool> g_stop{false};

void cmd_serve(const ServeOpts& o, const Globals& g, Run& run) {
  (void)g;
  run.input("model", o.model);
  ServiceConfig cfg;
  cfg.sampler = o.gibbs;
  TagService service(cfg);
  service.load_model_file(o.model);
  TagServer server(service, o.static_dir);
  const int port = server.bind(o.host, o.port);
  if (port < 0) {
    throw ConfigError("cannot bind " + o.host + ":" + std::to_string(o.port));
  }
  run.extra()["port"] = port;
  run.finish();
  std::cout << "serving " << o.model << " on http://" << o.host << ":" << port
            << std::endl;
  std::thread loop([&] { server.listen_after_bind(); });
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  auto last_check = std::chrono::steady_clock::now();
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    if (o.watch > 0.0 &&
        std::chrono::steady_clock::now() - last_check >
            std::chrono::duration<double>(o.watch)) {
      last_check = std::chrono::steady_clock::now();
      try {
        const auto text = read_file(o.model);
        if (hex64(fnv1a(text)) != service.model()->hash) {
          service.set_model(ServedModel::from(parse_model(text), o.model));
          std::cout << "reloaded " << o.model << std::endl;
        }
      } catch (const std::exception& e) {
        std::cerr << "reload skipped: " << e.what() << std::endl;
      }
    }
  }
  server.stop();
  loop.join();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noisy-or tagging models from anchors"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML configuration file")->envname("QMRTAG_CONFIG");
  app.allow_config_extras(false);
  app.set_version_flag("--version", kVersion);

  Globals g;
  opt(&app, "seed", g.seed, "Base random seed");
  opt(&app, "out", g.out, "Run directory");
  opt(&app, "threads", g.threads, "Worker threads");
  flag(&app, "deterministic", g.deterministic, "Single-threaded, bit-reproducible run");

  SynthOpts so;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scenario and datasets");
  opt(synth, "conditions", so.spec.m, "Number of conditions m");
  opt(synth, "features", so.spec.n, "Number of columns n, anchors included");
  opt(synth, "prior-lo", so.spec.prior.lo, "Lower bound of condition priors");
  opt(synth, "prior-hi", so.spec.prior.hi, "Upper bound of condition priors");
  opt(synth, "failure-density", so.spec.failure_density, "Edge probability");
  opt(synth, "failure-lo", so.spec.failure.lo, "Lower bound of failure probabilities");
  opt(synth, "failure-hi", so.spec.failure.hi, "Upper bound of failure probabilities");
  opt(synth, "leak-lo", so.spec.leak.lo, "Lower bound of leak probabilities");
  opt(synth, "leak-hi", so.spec.leak.hi, "Upper bound of leak probabilities");
  opt(synth, "p-a1-y1", so.spec.p_a1_y1, "P(anchor on | condition on)");
  opt(synth, "p-a1-y0", so.spec.p_a1_y0, "P(anchor on | condition off)");
  opt(synth, "records", so.spec.records, "Training records before the cohort filter");
  opt(synth, "test-records", so.test_records, "Test records before the cohort filter");
  opt(synth, "cohort-min", so.spec.cohort_min, "Minimum true conditions per record");

  IngestOpts io;
  auto* ingest = app.add_subcommand("ingest", "Vectorize a visit corpus");
  opt(ingest, "corpus", io.corpus, "Visit corpus (JSONL)")->required()->check(CLI::ExistingFile);
  opt(ingest, "anchors", io.anchors, "Anchor spec (JSON)")->required()->check(CLI::ExistingFile);
  opt(ingest, "labels", io.labels, "Billing-code label map (JSON)")->check(CLI::ExistingFile);
  opt(ingest, "max-terms", io.max_terms, "Vocabulary size before anchors are re-added");
  opt(ingest, "bigrams", io.bigrams, "Number of merged bigrams");

  InitOpts ino;
  auto* init = app.add_subcommand("init", "Method-of-moments initialization");
  opt(init, "data", ino.data, "Dataset (JSONL)")->required()->check(CLI::ExistingFile);
  opt(init, "noise", ino.noise, "Noise model (JSON)")->required()->check(CLI::ExistingFile);
  opt(init, "smoothing", ino.smoothing, "Additive smoothing of co-occurrence counts");
  flag(init, "no-denoise", ino.no_denoise, "Skip the denoising projection");

  TrainOpts to;
  auto* trn = app.add_subcommand("train", "Variational training with checkpoints");
  opt(trn, "data", to.data, "Training dataset (JSONL)")->required()->check(CLI::ExistingFile);
  opt(trn, "init", to.init, "Initial model (JSON)")->check(CLI::ExistingFile);
  opt(trn, "noise", to.noise, "Noise model (JSON)")->check(CLI::ExistingFile);
  flag(trn, "random-init", to.random_init, "Random initial failures and leaks");
  flag(trn, "weight-decay-grid", to.weight_decay_grid,
       "Select weight decay from {0, 0.1, 0.01, 0.001}");
  opt(trn, "lambda", to.cfg.lambda, "Weight of the supervised anchor term");
  opt(trn, "samples", to.cfg.samples, "Samples per gradient");
  opt(trn, "lr-phi", to.cfg.lr_phi, "Learning rate of the recognition model");
  opt(trn, "lr-theta-ratio", to.cfg.lr_theta_ratio, "Model learning rate / lr-phi");
  opt(trn, "burn-in-epochs", to.cfg.burn_in_epochs, "Epochs with the model frozen");
  opt(trn, "epochs", to.cfg.epochs, "Total epochs");
  opt(trn, "minibatch", to.cfg.minibatch, "Records per step");
  opt(trn, "weight-decay", to.cfg.weight_decay, "L2 penalty on recognition weights");
  opt(trn, "baseline-hidden", to.cfg.baseline_hidden, "Hidden units of the baseline net");
  opt(trn, "signal-decay", to.cfg.signal_decay, "Decay of the running signal statistics");
  opt(trn, "validation-size", to.cfg.validation_size, "Held-out records for selection");
  opt(trn, "validate-every", to.cfg.validate_every, "Epochs between validation scores");
  add_gibbs_options(trn, to.cfg.validation_gibbs, "gibbs-");

  EvalOpts eo;
  auto* evl = app.add_subcommand("eval", "Held-out tag report");
  opt(evl, "test", eo.test, "Labeled test dataset (JSONL)")->required()->check(CLI::ExistingFile);
  opt(evl, "model", eo.models, "Model to evaluate, as NAME=PATH (repeatable)");
  opt(evl, "baseline", eo.baselines, "naive, oracle or noise-tolerant (repeatable)");
  opt(evl, "train", eo.train, "Training data for baselines")->check(CLI::ExistingFile);
  opt(evl, "noise", eo.noise, "Noise model for baselines")->check(CLI::ExistingFile);

  SelectOpts seo;
  auto* sel = app.add_subcommand("select", "Pick a checkpoint by held-out anchor score");
  opt(sel, "checkpoints", seo.checkpoints, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  opt(sel, "validation", seo.validation, "Validation dataset (JSONL)")->required()->check(CLI::ExistingFile);
  add_gibbs_options(sel, seo.gibbs, "gibbs-");

  ServeOpts sv;
  auto* srv = app.add_subcommand("serve", "Start the tagging service");
  opt(srv, "model", sv.model, "Model file (JSON)")->required()->check(CLI::ExistingFile);
  opt(srv, "host", sv.host, "Listen address");
  opt(srv, "port", sv.port, "Listen port (0 picks a free one)");
  opt(srv, "static", sv.static_dir, "Directory served at /");
  opt(srv, "watch", sv.watch, "Seconds between model-file reload checks (0 = off)");
  add_gibbs_options(srv, sv.gibbs, "gibbs-");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::vector<std::string> args(argv, argv + argc);
  try {
    auto* sub = app.get_subcommands().front();
    Run run(sub->get_name(), g, app, args);
    const std::string name = sub->get_name();
    if (name == "synth") {
      cmd_synth(so, g, run);
    } else if (name == "ingest") {
      cmd_ingest(io, g, run);
    } else if (name == "init") {
      cmd_init(ino, g, run);
    } else if (name == "train") {
      cmd_train(to, g, run);
    } else if (name == "eval") {
      cmd_eval(eo, g, run);
    } else if (name == "select") {
      cmd_select(seo, g, run);
    } else if (name == "serve") {
      cmd_serve(sv, g, run);
      return 0;
    }
    run.finish();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
