#include "dasgan/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dasgan/ck_pipeline.hpp"
#include "dasgan/error.hpp"
#include "dasgan/inference.hpp"
#include "dasgan/io.hpp"
#include "dasgan/metrics.hpp"
#include "dasgan/synthdata.hpp"
#include "dasgan/training.hpp"

namespace dasgan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kRunManifestFormat = "dasgan-run-manifest";
constexpr int kRunManifestVersion = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string quote(std::string_view text) {
  std::string out;
  for (char c : text) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out.push_back(c);
  }
  return out;
}

int fail(std::string_view kind, std::string_view message, int code) {
  message = message.substr(0, message.find('\n'));
  std::cerr << "error: kind=" << kind << " message=\"" << quote(message) << "\"\n";
  return code;
}

fs::path resolve_out(const std::string& flag, const std::string& subcommand) {
  if (!flag.empty()) return flag;
  if (const char* root = std::getenv(kOutRootEnv); root && *root) return fs::path(root) / subcommand;
  throw UsageError("--out is required (or set " + std::string(kOutRootEnv) + ")");
}

/// Writes the effective config and the run manifest listing every output.
class Run {
 public:
  Run(std::string subcommand, fs::path out, json config) : subcommand_(std::move(subcommand)), out_(std::move(out)), config_(std::move(config)) {
    fs::create_directories(out_);
    io::write_json(out_ / "effective_config.json", config_);
  }

  const fs::path& out() const { return out_; }
  fs::path output(const fs::path& relative) {
    outputs_.push_back(relative.generic_string());
    fs::create_directories((out_ / relative).parent_path());
    return out_ / relative;
  }
  void declare(const fs::path& relative) { outputs_.push_back(relative.generic_string()); }

  void finish() {
    std::sort(outputs_.begin(), outputs_.end());
    io::write_json(out_ / "run_manifest.json", {{"format", kRunManifestFormat},
                                                {"version", kRunManifestVersion},
                                                {"subcommand", subcommand_},
                                                {"config_hash", io::config_hash(config_)},
                                                {"outputs", outputs_}});
  }

 private:
  std::string subcommand_;
  fs::path out_;
  json config_;
  std::vector<std::string> outputs_;
};

std::ofstream open_table(const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << std::setprecision(6) << std::fixed;
  return f;
}

json read_config_file(const std::string& path) { return path.empty() ? json::object() : io::read_json(path); }

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out, config;
  std::uint64_t seed = 7;
  std::optional<int> patch_size, train_a, train_b, test, validation;
  std::optional<double> annotation_fraction;
  std::string b_labels = "ck";
};

int run_synth(const SynthArgs& args) {
  synth::SynthConfig config;
  synth::SplitSizes sizes;
  const auto file = read_config_file(args.config);
  for (const auto& [key, v] : file.items()) {
    if (key == "patch_size") config.patch_size = v.get<int>();
    else if (key == "noise_sigma") config.noise_sigma = v.get<double>();
    else if (key == "distractor_density") config.distractor_density = v.get<double>();
    else if (key == "positive_fraction") config.positive_fraction = v.get<double>();
    else if (key == "train_a") sizes.train_a = v.get<int>();
    else if (key == "train_b") sizes.train_b = v.get<int>();
    else if (key == "test") sizes.test = v.get<int>();
    else if (key == "validation") sizes.validation = v.get<int>();
    else if (key == "annotation_fraction") sizes.annotation_fraction = v.get<double>();
    else if (key == "seed") config.seed = v.get<std::uint64_t>();
    else throw Error(ErrorKind::Configuration, "unknown synth config key '" + key + "'");
  }
  config.seed = args.seed;
  if (args.patch_size) config.patch_size = *args.patch_size;
  if (args.train_a) sizes.train_a = *args.train_a;
  if (args.train_b) sizes.train_b = *args.train_b;
  if (args.test) sizes.test = *args.test;
  if (args.validation) sizes.validation = *args.validation;
  if (args.annotation_fraction) sizes.annotation_fraction = *args.annotation_fraction;
  if (args.b_labels == "ck") sizes.b_labels = synth::BLabelSource::CkPipeline;
  else if (args.b_labels == "truth") sizes.b_labels = synth::BLabelSource::GroundTruth;
  else throw UsageError("--b-labels must be ck or truth");
  config.validate();

  const json effective = {{"seed", config.seed},
                          {"patch_size", config.patch_size},
                          {"noise_sigma", config.noise_sigma},
                          {"distractor_density", config.distractor_density},
                          {"positive_fraction", config.positive_fraction},
                          {"train_a", sizes.train_a},
                          {"train_b", sizes.train_b},
                          {"test", sizes.test},
                          {"validation", sizes.validation},
                          {"annotation_fraction", sizes.annotation_fraction},
                          {"b_labels", args.b_labels}};
  Run run("synth", resolve_out(args.out, "synth"), effective);
  const auto split = synth::make_splits(config, sizes);
  io::write_split(run.out(), split);
  for (const auto& entry : io::read_manifest(run.out() / "manifest.json")) {
    run.declare(entry.image);
    run.declare(entry.mask);
  }
  run.declare("manifest.json");
  run.finish();
  return 0;
}

// ---------------------------------------------------------------------------
// ck-segment

struct CkArgs {
  std::string in, out, stain_matrix;
  int close_radius = 2;
  int bins = 256;
  double blank_density = 0.1;
  std::string on_blank = "empty";
};

int run_ck_segment(const CkArgs& args) {
  ck::SegmentOptions options;
  options.close_radius = args.close_radius;
  options.bins = args.bins;
  options.blank_density = args.blank_density;
  if (args.on_blank == "empty") options.on_blank = ck::BlankPolicy::EmptyMask;
  else if (args.on_blank == "error") options.on_blank = ck::BlankPolicy::Error;
  else throw UsageError("--on-blank must be empty or error");
  const auto stains = args.stain_matrix.empty() ? ck::StainMatrix::hematoxylin_dab() : ck::StainMatrix::load(args.stain_matrix);

  Run run("ck-segment", resolve_out(args.out, "ck-segment"),
          {{"in", args.in},
           {"stain_matrix", stains.rows()},
           {"close_radius", options.close_radius},
           {"bins", options.bins},
           {"blank_density", options.blank_density},
           {"on_blank", args.on_blank}});
  const auto files = io::list_pngs(args.in);
  if (files.empty()) throw Error(ErrorKind::InvalidInput, "no PNG patches in " + args.in);
  for (const auto& file : files) {
    const auto stem = file.stem().string();
    const auto image = io::read_image(file, Domain::B, stem);
    const auto binary = ck::segment_ck(image, stains, options);
    const auto [negative, positive] = ck::condition_masks(binary, Domain::B);
    io::write_mask(run.output(fs::path("masks") / (stem + ".png")), ck::to_label_mask(binary, Domain::B));
    io::write_mask(run.output(fs::path("conditioned") / (stem + "_neg.png")), negative);
    io::write_mask(run.output(fs::path("conditioned") / (stem + "_pos.png")), positive);
  }
  run.finish();
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string mode, config, data, out;
  std::optional<int> iterations, batch_size, checkpoint_every, threads;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& args) {
  auto config = train::config_from_json(read_config_file(args.config));
  config.mode = train::mode_from_string(args.mode);
  if (args.iterations) config.iterations = *args.iterations;
  if (args.batch_size) config.batch_size = *args.batch_size;
  if (args.checkpoint_every) config.checkpoint_every = *args.checkpoint_every;
  if (args.threads) config.threads = *args.threads;
  if (args.seed) config.seed = *args.seed;
  config.validate();

  auto effective = train::to_json(config);
  effective["data"] = args.data;
  Run run("train", resolve_out(args.out, "train"), effective);
  config.out_dir = run.out();

  fs::path manifest = args.data;
  if (fs::is_directory(manifest)) manifest /= "manifest.json";
  const auto data = io::read_split(manifest);
  data.validate();

  const auto state = train::train(config, data);
  run.declare("training_log.jsonl");
  for (const auto& c : state.checkpoints) run.declare(fs::relative(c.path, run.out()) / "manifest.json");
  if (state.synthetic_dir) run.declare(fs::relative(*state.synthetic_dir, run.out()) / "manifest.json");

  const auto best = train::select_model(state.checkpoints);
  json checkpoints = json::array();
  for (const auto& c : state.checkpoints) {
    checkpoints.push_back({{"iteration", c.iteration}, {"test_mean_f1", c.test_f1}, {"path", fs::relative(c.path, run.out()).generic_string()}});
  }
  io::write_json(run.output("selection.json"), {{"best_iteration", best.iteration},
                                                {"best_test_mean_f1", best.test_f1},
                                                {"best_checkpoint", fs::relative(best.path, run.out()).generic_string()},
                                                {"checkpoints", checkpoints}});
  run.finish();
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string checkpoint, in, out;
  int tile = 64;
  int overlap = 16;
  int threads = 1;
};

std::vector<fs::path> inputs_of(const fs::path& in) {
  if (fs::is_directory(in)) return io::list_pngs(in);
  if (fs::is_regular_file(in)) return {in};
  throw Error(ErrorKind::Io, "no such input: " + in.string());
}

int run_predict(const PredictArgs& args) {
  torch::set_num_threads(args.threads);
  const infer::TileOptions tiles{args.tile, args.overlap};
  Run run("predict", resolve_out(args.out, "predict"),
          {{"checkpoint", args.checkpoint}, {"in", args.in}, {"tile", tiles.tile}, {"overlap", tiles.overlap}, {"threads", args.threads}});
  auto model = train::load_predictor(args.checkpoint);
  for (const auto& file : inputs_of(args.in)) {
    const auto stem = file.stem().string();
    const auto image = io::read_image(file, Domain::A, stem);
    const auto mask = infer::predict_mask(model, image, tiles);
    io::write_mask(run.output(fs::path("masks") / (stem + ".png")), mask);
    io::write_overlay(run.output(fs::path("overlays") / (stem + ".png")), image, mask);
  }
  run.finish();
  return 0;
}

// ---------------------------------------------------------------------------
// score

struct ScoreArgs {
  std::string masks, out;
};

int run_score(const ScoreArgs& args) {
  Run run("score", resolve_out(args.out, "score"), {{"masks", args.masks}});
  auto table = open_table(run.output("tc_scores.csv"));
  table << "id,tc_score_percent,tc_negative_pixels,tc_positive_pixels\n";
  for (const auto& file : inputs_of(args.masks)) {
    const auto mask = io::read_mask(file, Domain::A);
    table << file.stem().string() << ',';
    if (mask.count(label::kTcNegative) + mask.count(label::kTcPositive) == 0) table << "NA";
    else table << 100.0 * metrics::tc_score(mask);
    table << ',' << mask.count(label::kTcNegative) << ',' << mask.count(label::kTcPositive) << '\n';
  }
  run.finish();
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string pred, truth, out;
};

void write_f1_row(std::ofstream& f, const std::string& id, const metrics::F1Report& r) {
  f << id << ',' << r.other << ',' << r.tc_negative << ',' << r.tc_positive << ',' << r.tc << ',' << r.mean_three << ',' << r.mean_binary << '\n';
}

int run_evaluate(const EvaluateArgs& args) {
  Run run("evaluate", resolve_out(args.out, "evaluate"), {{"pred", args.pred}, {"truth", args.truth}});
  const auto truth_files = inputs_of(args.truth);
  if (truth_files.empty()) throw Error(ErrorKind::InvalidInput, "no ground-truth masks in " + args.truth);

  metrics::Confusion pooled;
  std::vector<metrics::ScoredImage> scored;
  auto f1_table = open_table(run.output("f1.csv"));
  f1_table << "id,other,tc_negative,tc_positive,tc,mean_three,mean_binary\n";
  for (const auto& truth_file : truth_files) {
    const auto id = truth_file.stem().string();
    const auto pred_file = fs::path(args.pred) / truth_file.filename();
    if (!fs::exists(pred_file)) throw Error(ErrorKind::InvalidInput, "missing prediction for " + id);
    const auto pred = io::read_mask(pred_file, Domain::A);
    const auto truth = io::read_mask(truth_file, Domain::A);
    require_same_shape(pred, truth);
    metrics::Confusion single;
    single.add(pred, truth);
    pooled.add(pred, truth);
    if (single.total() > 0) write_f1_row(f1_table, id, metrics::f1_scores(single));

    const bool has_true_epithelium = truth.count(label::kTcNegative) + truth.count(label::kTcPositive) > 0;
    const bool has_pred_epithelium = pred.count(label::kTcNegative) + pred.count(label::kTcPositive) > 0;
    if (has_true_epithelium) {
      scored.push_back({id, has_pred_epithelium ? metrics::tc_score(pred) : 0.0, metrics::tc_score(truth)});
    }
  }
  write_f1_row(f1_table, "pooled", metrics::f1_scores(pooled));

  auto tc_table = open_table(run.output("tc_scores.csv"));
  tc_table << "id,tc_cnn,tc_true\n";
  for (const auto& s : scored) tc_table << s.id << ',' << 100.0 * s.tc_cnn << ',' << 100.0 * *s.tc_true << '\n';

  json summary = {{"images", truth_files.size()}, {"scored_images", scored.size()}};
  if (scored.size() >= 2) {
    try {
      const auto report = metrics::score_report(scored);
      summary["lcc"] = report.lcc;
      summary["pcc"] = report.pcc;
      summary["mae"] = report.mae;
      auto bins = open_table(run.output("tc_bins.csv"));
      bins << "bin,count,mean,stddev\n";
      for (const auto& b : report.bins) bins << '"' << b.label << "\"," << b.count << ',' << b.mean << ',' << b.stddev << '\n';
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::UndefinedMetric) throw;
      summary["concordance_error"] = e.what();
    }
  }
  io::write_json(run.output("concordance.json"), summary);
  run.finish();
  return 0;
}

}  // namespace

int dispatch(int argc, char** argv) {
  CLI::App app{"Joint stain translation and epithelium segmentation"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate a seeded synthetic two-domain dataset");
  synth->add_option("--out", synth_args.out, "Output directory");
  synth->add_option("--config", synth_args.config, "JSON config file");
  synth->add_option("--seed", synth_args.seed, "Random seed");
  synth->add_option("--patch-size", synth_args.patch_size);
  synth->add_option("--train-a", synth_args.train_a);
  synth->add_option("--train-b", synth_args.train_b);
  synth->add_option("--test", synth_args.test);
  synth->add_option("--validation", synth_args.validation);
  synth->add_option("--annotation-fraction", synth_args.annotation_fraction, "Fraction of labelled train_a patches");
  synth->add_option("--b-labels", synth_args.b_labels, "ck (heuristic pipeline) or truth");

  CkArgs ck_args;
  auto* cks = app.add_subcommand("ck-segment", "Heuristic epithelium masks for CK patches");
  cks->add_option("--in", ck_args.in, "Directory of CK patches")->required();
  cks->add_option("--out", ck_args.out, "Output directory");
  cks->add_option("--stain-matrix", ck_args.stain_matrix, "JSON stain matrix");
  cks->add_option("--close-radius", ck_args.close_radius);
  cks->add_option("--bins", ck_args.bins);
  cks->add_option("--blank-density", ck_args.blank_density);
  cks->add_option("--on-blank", ck_args.on_blank, "empty or error");

  TrainArgs train_args;
  auto* trn = app.add_subcommand("train", "Train a model or a baseline");
  trn->add_option("--mode", train_args.mode, "dasgan | seg-real | seg-synth | two-step")->required();
  trn->add_option("--data", train_args.data, "Split manifest or dataset directory")->required();
  trn->add_option("--config", train_args.config, "JSON training config");
  trn->add_option("--out", train_args.out, "Output directory");
  trn->add_option("--iterations", train_args.iterations);
  trn->add_option("--batch-size", train_args.batch_size);
  trn->add_option("--checkpoint-every", train_args.checkpoint_every);
  trn->add_option("--threads", train_args.threads);
  trn->add_option("--seed", train_args.seed);

  PredictArgs predict_args;
  auto* prd = app.add_subcommand("predict", "Segment PD-L1 patches with a checkpoint");
  prd->add_option("--checkpoint", predict_args.checkpoint, "Checkpoint directory")->required();
  prd->add_option("--in", predict_args.in, "Image file or directory")->required();
  prd->add_option("--out", predict_args.out, "Output directory");
  prd->add_option("--tile", predict_args.tile);
  prd->add_option("--overlap", predict_args.overlap);
  prd->add_option("--threads", predict_args.threads);

  ScoreArgs score_args;
  auto* scr = app.add_subcommand("score", "Tumor Cell scores of label masks");
  scr->add_option("--masks", score_args.masks, "Mask file or directory")->required();
  scr->add_option("--out", score_args.out, "Output directory");

  EvaluateArgs eval_args;
  auto* evl = app.add_subcommand("evaluate", "F1, concordance and bin tables against ground truth");
  evl->add_option("--pred", eval_args.pred, "Directory of predicted masks")->required();
  evl->add_option("--truth", eval_args.truth, "Directory of ground-truth masks")->required();
  evl->add_option("--out", eval_args.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (synth->parsed()) return run_synth(synth_args);
    if (cks->parsed()) return run_ck_segment(ck_args);
    if (trn->parsed()) return run_train(train_args);
    if (prd->parsed()) return run_predict(predict_args);
    if (scr->parsed()) return run_score(score_args);
    if (evl->parsed()) return run_evaluate(eval_args);
  } catch (const UsageError& e) {
    return fail("usage", e.what(), 2);
  } catch (const Error& e) {
    return fail(to_string(e.kind()), e.what(), 1);
  } catch (const json::exception& e) {
    return fail(to_string(ErrorKind::Configuration), e.what(), 1);
  } catch (const c10::Error& e) {
    return fail("internal", e.what_without_backtrace(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return fail("usage", "no subcommand", 2);
}

}  // namespace dasgan::cli
