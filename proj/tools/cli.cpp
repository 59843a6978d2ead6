#include "cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "dotfan/augment.hpp"
#include "dotfan/errors.hpp"
#include "dotfan/eval.hpp"
#include "dotfan/io.hpp"
#include "dotfan/plot.hpp"
#include "dotfan/synth_data.hpp"
#include "dotfan/trainer.hpp"

namespace dotfan::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFemLog = "fem_log.jsonl";
constexpr const char* kFsrLog = "fsr_log.jsonl";
constexpr const char* kTrainLog = "train_log.jsonl";

// Values of every subcommand; only the parsed subcommand writes them.
struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string checkpoint_dir;
  bool overwrite = false;

  int identities = 20;
  int per_identity = 20;
  int identity_offset = 0;

  std::string data;
  bool resume = false;
  int stop_at = -1;

  std::vector<std::string> inputs;
  std::string poses;
  std::string labels;
  int label = codes::kPassThroughLabel;
  int multiplier = 1;

  std::string left;
  std::string right;
  int steps = 11;

  std::string train_manifest;
  std::string test_manifest;
  std::size_t max_pairs = 2000;
  bool roc = false;

  std::string log;
  std::vector<std::string> reports;
};

struct Seeded {
  CLI::Option* seed = nullptr;
};

train::TrainConfig load_config(const Options& o, const Seeded& s) {
  train::TrainConfig c;
  if (!o.config.empty()) {
    std::string text;
    try {
      text = io::read_text(o.config);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    c = train::TrainConfig::parse(text, o.config);
  }
  if (s.seed && s.seed->count() > 0) c.seed = o.seed;
  return c;
}

fs::path require_dir(const std::string& value, const char* flag) {
  if (value.empty()) throw ContractError(std::string(flag) + " is required");
  return fs::path(value);
}

// The loaded images must match the configured networks.
train::TrainingSet load_training_set(const std::string& manifest, const train::TrainConfig& c) {
  auto data = train::TrainingSet::from_manifest(manifest);
  data.validate();
  if (data.images.front().size != c.network.image_size) {
    throw DataError(manifest + ": images are " + std::to_string(data.images.front().size) +
                    " px but the config expects " + std::to_string(c.network.image_size));
  }
  const auto m = synth::read_manifest(manifest);
  if (m.d_s != c.network.code_dims.d_s || m.d_e != c.network.code_dims.d_e) {
    throw ConfigError(manifest + ": shape dimensions differ from the config (d_s, d_e)");
  }
  return data;
}

void refuse_existing(const fs::path& file, bool overwrite) {
  if (fs::exists(file) && !overwrite) {
    throw ContractError(file.string() + " exists; pass --overwrite to replace it");
  }
}

// ---------------------------------------------------------------- commands

void make_data(const Options& o, const Seeded& s, std::ostream& out) {
  const auto c = load_config(o, s);
  synth::DatasetConfig dc;
  dc.n_identities = o.identities;
  dc.images_per_identity = o.per_identity;
  dc.identity_offset = o.identity_offset;
  dc.image_size = c.network.image_size;
  dc.seed = c.seed;
  const auto dir = require_dir(o.out, "--out");
  const auto& dims = c.network.code_dims;
  const auto dataset = synth::build_dataset(synth::toy_model(dims.d_s, dims.d_e), dc);
  augment::prepare_output_dir(dir, o.overwrite);
  const auto m = synth::write_dataset(dir, dataset, dims.d_s, dims.d_e);
  out << "wrote " << m.rows.size() << " images to " << (dir / "manifest.csv").string() << "\n";
}

void pretrain_fem(const Options& o, const Seeded& s, std::ostream& out) {
  const auto c = load_config(o, s);
  const auto dir = require_dir(o.checkpoint_dir, "--checkpoint-dir");
  refuse_existing(dir / train::kFemFile, o.overwrite);
  const auto data = load_training_set(o.data, c);
  fs::create_directories(dir);
  std::ofstream log(dir / kFemLog);
  const auto r = train::pretrain_fem(data, c, &log);
  r.fem.save(dir / train::kFemFile);
  out << "identity embedder: loss " << r.first_batch_loss << " -> " << r.epoch_losses.back()
      << ", held-out cosine gap " << r.heldout_gap << "\n";
}

void pretrain_fsr(const Options& o, const Seeded& s, std::ostream& out) {
  const auto c = load_config(o, s);
  const auto dir = require_dir(o.checkpoint_dir, "--checkpoint-dir");
  refuse_existing(dir / train::kFsrFile, o.overwrite);
  const auto data = load_training_set(o.data, c);
  fs::create_directories(dir);
  std::ofstream log(dir / kFsrLog);
  const auto r = train::pretrain_fsr(data, c, &log);
  r.fsr.save(dir / train::kFsrFile);
  out << "shape regressor: held-out wpdc " << r.heldout_wpdc << " (mean predictor " << r.mean_predictor_wpdc
      << ")\n";
}

// Keeps log lines of steps before `step`.
std::string truncate_log(const fs::path& path, int step) {
  if (!fs::exists(path)) return {};
  std::istringstream is(io::read_text(path));
  std::string line, kept;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (train::parse_log_line(line).step < step) kept += line + "\n";
  }
  return kept;
}

void train_cmd(const Options& o, const Seeded& s, std::ostream& out) {
  const auto c = load_config(o, s);
  const auto dir = require_dir(o.checkpoint_dir, "--checkpoint-dir");
  const auto data = load_training_set(o.data, c);
  auto fem = nn::FaceExpert::load(dir / train::kFemFile, c.network);
  auto fsr = nn::ShapeRegressor::load(dir / train::kFsrFile, c.network);
  const auto& dims = c.network.code_dims;
  auto model = synth::toy_model(dims.d_s, dims.d_e);
  const bool has_state = fs::exists(dir / train::kStateFile);
  if (has_state && !o.resume && !o.overwrite) {
    throw ContractError("training state exists in " + dir.string() + "; pass --resume or --overwrite");
  }
  auto trainer = (o.resume && has_state)
                     ? train::JointTrainer::resume(dir, std::move(model), data, std::move(fem), std::move(fsr), c)
                     : train::JointTrainer(std::move(model), data, std::move(fem), std::move(fsr), c);
  const auto log_path = dir / kTrainLog;
  const std::string previous = truncate_log(log_path, trainer.current_step());
  std::ofstream log(log_path, std::ios::trunc);
  log << previous;
  train::RunOptions run;
  run.stop_at = o.stop_at;
  run.log = &log;
  run.checkpoint_dir = dir;
  const auto reports = train::run_joint(trainer, run);
  out << "trained to step " << trainer.current_step() << " of " << c.total_iterations;
  if (!reports.empty()) out << ", last cycle loss " << reports.back().generator.cycle;
  out << "\n";
}

std::vector<augment::SourceImage> sources_for(const Options& o, const augment::Synthesizer& synth,
                                              std::ostream& err) {
  if (o.inputs.empty()) throw ContractError("no input images given");
  auto sources = augment::load_sources(o.inputs, synth.spec().image_size, &err);
  if (sources.empty()) throw DataError("none of the inputs could be read");
  return sources;
}

void grid_cmd(const Options& o, const std::vector<augment::PosePreset>& poses, const std::vector<int>& labels,
              std::ostream& out, std::ostream& err) {
  const auto synth = augment::Synthesizer::load(require_dir(o.checkpoint_dir, "--checkpoint-dir"));
  const auto dir = require_dir(o.out, "--out");
  const auto sources = sources_for(o, synth, err);
  const auto result = augment::synthesize_grid(synth, sources, poses, labels);
  augment::write_outputs(dir, result, o.overwrite);
  out << "wrote " << result.images.size() << " images to " << dir.string() << "\n";
}

void augment_cmd(const Options& o, const Seeded& s, std::ostream& out) {
  const auto c = load_config(o, s);
  const auto synth = augment::Synthesizer::load(require_dir(o.checkpoint_dir, "--checkpoint-dir"));
  if (o.data.empty()) throw ContractError("--data is required");
  augment::AugmentationPlan plan;
  plan.poses = augment::parse_poses(o.poses);
  plan.labels = augment::parse_labels(o.labels);
  plan.multiplier = o.multiplier;
  const fs::path dir = o.out.empty() ? augment::default_augment_dir(o.data, o.multiplier) : fs::path(o.out);
  const auto m = augment::augment_dataset(synth, o.data, plan, c.seed, dir, o.overwrite);
  out << "wrote " << m.rows.size() << " rows to " << (dir / "manifest.csv").string() << "\n";
}

void interpolate_cmd(const Options& o, std::ostream& out) {
  if (o.steps < 2) throw ContractError("--steps must be at least 2");
  const auto synth = augment::Synthesizer::load(require_dir(o.checkpoint_dir, "--checkpoint-dir"));
  const auto dir = require_dir(o.out, "--out");
  const auto size = synth.spec().image_size;
  const auto read = [&](const std::string& path) {
    const Image image = io::read_png(path);
    if (image.size != size) throw DataError(path + ": image size does not match the networks");
    return image;
  };
  const auto left = codes::replace_illumination(synth.source_code(read(o.left)), o.label);
  const auto right = codes::replace_illumination(synth.source_code(read(o.right)), o.label);
  const auto frames = augment::interpolate_frames(synth, left, right, o.steps);
  augment::prepare_output_dir(dir, o.overwrite);
  std::ostringstream manifest;
  manifest << "index,alpha,output\n" << std::setprecision(17);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::ostringstream name;
    name << "frame_" << std::setw(3) << std::setfill('0') << i << ".png";
    io::write_png(dir / name.str(), frames[i]);
    manifest << i << ',' << static_cast<double>(i) / static_cast<double>(frames.size() - 1) << ',' << name.str()
             << "\n";
  }
  io::write_text(dir / "manifest.csv", manifest.str());
  out << "wrote " << frames.size() << " frames to " << dir.string() << "\n";
}

void evaluate_cmd(const Options& o, const Seeded& s, std::ostream& out) {
  const auto c = load_config(o, s);
  const auto dir = require_dir(o.out, "--out");
  const auto train_set = load_training_set(o.train_manifest, c);
  const auto test_set = load_training_set(o.test_manifest, c);
  const auto report = eval::recognition_experiment(train_set, test_set, c, o.max_pairs);
  fs::create_directories(dir);
  refuse_existing(dir / "report.json", o.overwrite);
  eval::write_report(dir / "report.json", report);
  if (o.roc) eval::write_roc_csv(dir / "roc.csv", report);
  out << "accuracy " << report.accuracy << ", auc " << report.auc << ", pairs " << report.n_pairs << "\n";
}

void plot_cmd(const Options& o, std::ostream& out) {
  const auto dir = require_dir(o.out, "--out");
  if (o.log.empty() == o.reports.empty()) throw ContractError("give exactly one of --log or --report");
  std::vector<plot::Series> series;
  std::string name, title;
  if (!o.log.empty()) {
    series = plot::read_log_series(o.log);
    name = "losses.svg";
    title = fs::path(o.log).filename().string();
  } else {
    const std::vector<fs::path> paths(o.reports.begin(), o.reports.end());
    series = plot::read_report_series(paths);
    name = "metrics.svg";
    title = "evaluation reports";
  }
  fs::create_directories(dir);
  refuse_existing(dir / name, o.overwrite);
  io::write_text(dir / name, plot::render_svg(series, title));
  out << "wrote " << (dir / name).string() << "\n";
}

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, Options& o, Seeded& s) {
  CLI::App* sub = app.add_subcommand(name, help);
  sub->add_option("--config", o.config, "Key-value config file");
  s.seed = sub->add_option("--seed", o.seed, "Seed overriding the config");
  sub->add_option("--out", o.out, "Output directory");
  sub->add_option("--checkpoint-dir", o.checkpoint_dir, "Directory of network checkpoints");
  sub->add_flag("--overwrite", o.overwrite, "Replace existing outputs");
  return sub;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Face augmentation with pose, shape and illumination control", "dotfan"};
  app.require_subcommand(1);
  Options o;
  std::map<std::string, Seeded> seeds;

  auto* make = add_command(app, "make-data", "Render a synthetic face dataset", o, seeds["make-data"]);
  make->add_option("--identities", o.identities, "Number of identities")->check(CLI::PositiveNumber);
  make->add_option("--per-identity", o.per_identity, "Images per identity")->check(CLI::PositiveNumber);
  make->add_option("--identity-offset", o.identity_offset, "First identity label")->check(CLI::NonNegativeNumber);

  auto* fem = add_command(app, "pretrain-fem", "Pretrain the identity embedder", o, seeds["pretrain-fem"]);
  fem->add_option("--data", o.data, "Dataset manifest")->required();
  auto* fsr = add_command(app, "pretrain-fsr", "Pretrain the shape regressor", o, seeds["pretrain-fsr"]);
  fsr->add_option("--data", o.data, "Dataset manifest")->required();

  auto* train = add_command(app, "train", "Joint adversarial training", o, seeds["train"]);
  train->add_option("--data", o.data, "Dataset manifest")->required();
  train->add_flag("--resume", o.resume, "Continue from the saved state");
  train->add_option("--stop-at", o.stop_at, "Stop before this step (exclusive)");

  auto* frontalize = add_command(app, "frontalize", "Synthesize frontal faces", o, seeds["frontalize"]);
  frontalize->add_option("inputs", o.inputs, "PNG images or dataset manifests")->required();
  frontalize->add_option("--label", o.label, "Illumination label (13 keeps the input lighting)");

  auto* rotate = add_command(app, "rotate", "Synthesize faces at pose presets", o, seeds["rotate"]);
  rotate->add_option("inputs", o.inputs, "PNG images or dataset manifests")->required();
  rotate->add_option("--poses", o.poses, "Pose presets: frontal, keep, sweep, yaw<deg>")->default_val("sweep");
  rotate->add_option("--label", o.label, "Illumination label (13 keeps the input lighting)");

  auto* relight = add_command(app, "relight", "Synthesize faces under illumination labels", o, seeds["relight"]);
  relight->add_option("inputs", o.inputs, "PNG images or dataset manifests")->required();
  relight->add_option("--labels", o.labels, "Illumination labels, e.g. 0,4,8,12 or 0-12")->required();
  relight->add_option("--poses", o.poses, "Pose presets")->default_val("keep");

  auto* aug = add_command(app, "augment", "Add synthesized variants to a dataset", o, seeds["augment"]);
  aug->add_option("--data", o.data, "Dataset manifest")->required();
  aug->add_option("--multiplier", o.multiplier, "Variants per source image")->check(CLI::IsMember({1, 3}));
  aug->add_option("--poses", o.poses, "Pose presets")->default_val("sweep");
  aug->add_option("--labels", o.labels, "Illumination labels")->default_val("0-12");

  auto* interp = add_command(app, "interpolate", "Morph between two faces", o, seeds["interpolate"]);
  interp->add_option("--left", o.left, "First face image")->required();
  interp->add_option("--right", o.right, "Second face image")->required();
  interp->add_option("--steps", o.steps, "Number of frames, endpoints included");
  interp->add_option("--label", o.label, "Illumination label for both endpoints");

  auto* evaluate = add_command(app, "evaluate", "Train an embedder and verify on held-out identities", o,
                               seeds["evaluate"]);
  evaluate->add_option("--train", o.train_manifest, "Training manifest")->required();
  evaluate->add_option("--test", o.test_manifest, "Test manifest")->required();
  evaluate->add_option("--max-pairs", o.max_pairs, "Cap on verification pairs")->check(CLI::PositiveNumber);
  evaluate->add_flag("--roc", o.roc, "Also write roc.csv");

  auto* plot = add_command(app, "plot", "Render loss or metric curves as SVG", o, seeds["plot"]);
  plot->add_option("--log", o.log, "Line-delimited JSON log");
  plot->add_option("--report", o.reports, "Evaluation report files");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  const Seeded& s = seeds[name];
  try {
    if (name == "make-data") make_data(o, s, out);
    else if (name == "pretrain-fem") pretrain_fem(o, s, out);
    else if (name == "pretrain-fsr") pretrain_fsr(o, s, out);
    else if (name == "train") train_cmd(o, s, out);
    else if (name == "frontalize") grid_cmd(o, {augment::frontal_preset()}, {o.label}, out, err);
    else if (name == "rotate") grid_cmd(o, augment::parse_poses(o.poses), {o.label}, out, err);
    else if (name == "relight") grid_cmd(o, augment::parse_poses(o.poses), augment::parse_labels(o.labels), out, err);
    else if (name == "augment") augment_cmd(o, s, out);
    else if (name == "interpolate") interpolate_cmd(o, out);
    else if (name == "evaluate") evaluate_cmd(o, s, out);
    else if (name == "plot") plot_cmd(o, out);
    return kSuccess;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kIncompatible;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kIncompatible;
  } catch (const LossError& e) {
    err << "training diverged: " << e.what() << "\n";
    return kIncompatible;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace dotfan::cli
