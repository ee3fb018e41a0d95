// sagnet: data generation, training, sampling, editing tasks and evaluation.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sagnet/metrics.hpp"
#include "sagnet/tasks.hpp"
#include "sagnet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sagnet;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

fs::path normalized(const fs::path& p) {
  fs::path n = fs::absolute(p).lexically_normal();
  if (n.filename().empty()) n = n.parent_path();
  return n;
}

/// Output directory assembled next to its destination and moved into place on
/// success; anything left behind by a failure is deleted.
class StagedDir {
 public:
  explicit StagedDir(const fs::path& out) : out_(normalized(out)) {
    if (fs::exists(out_) && !(fs::is_directory(out_) && fs::is_empty(out_)))
      throw UsageError("output '" + out_.string() + "' already exists and is not an empty directory");
    stage_ = out_.parent_path() / ("." + out_.filename().string() + ".partial");
    fs::remove_all(stage_);
    fs::create_directories(stage_);
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;
  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(stage_, ec);
    }
  }
  const fs::path& path() const noexcept { return stage_; }
  void commit() {
    if (fs::exists(out_)) fs::remove(out_);
    fs::rename(stage_, out_);
    committed_ = true;
  }

 private:
  fs::path out_;
  fs::path stage_;
  bool committed_ = false;
};

struct Run {
  std::string subcommand;
  std::vector<std::string> argv;
  std::string started;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::trunc);
  os << j.dump(2) << "\n";
  if (!os) throw Error("cannot write " + path.string());
}

void write_run(const fs::path& dir, const Run& run, const json& config, unsigned threads) {
  write_json(dir / "run.json", json{{"version", kVersion},
                                    {"subcommand", run.subcommand},
                                    {"argv", run.argv},
                                    {"config", config},
                                    {"threads", threads},
                                    {"started_at", run.started},
                                    {"finished_at", utc_now()}});
}

std::vector<std::size_t> parse_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError(std::string(what) + ": '" + s + "' is not a comma-separated list of non-negative integers");
    }
  }
  return out;
}

const ShapeSample& pick(const std::vector<ShapeSample>& data, std::size_t index, const char* flag) {
  if (index >= data.size())
    throw UsageError(std::string(flag) + " " + std::to_string(index) + " is out of range for a dataset of " + std::to_string(data.size()));
  return data[index];
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string cls = joints::kClassName;
  std::size_t count = 100;
  std::uint64_t seed = 1;
  std::uint32_t resolution = 16;
  bool stratified = false;
  std::string out;
};

void cmd_gen_data(const GenDataArgs& a, const Run& run, unsigned threads) {
  if (a.cls != joints::kClassName) throw UsageError("--class: only '" + std::string(joints::kClassName) + "' can be generated");
  if (a.count == 0) throw UsageError("--count must be positive");
  StagedDir out(a.out);
  const auto ds = joints::generate_dataset(a.count, a.seed, a.resolution, a.stratified, threads);
  save_dataset(out.path(), ds.samples, joints::kClassName, 2, a.resolution);
  json specs = json::array();
  for (const auto& s : ds.specs)
    specs.push_back({{"mode", s.mode}, {"block_size", s.block_size}, {"tenon_size", s.tenon_size}, {"tenon_offset", s.tenon_offset}});
  write_json(out.path() / "labels.json", json{{"labels", ds.labels}, {"specs", specs}});
  write_run(out.path(), run,
            {{"class", a.cls}, {"count", a.count}, {"seed", a.seed}, {"resolution", a.resolution}, {"stratified", a.stratified}}, threads);
  out.commit();
  std::cout << "wrote " << a.count << " joints to " << normalized(a.out).string() << "\n";
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::size_t iters = 2000;
  std::optional<std::size_t> phase1;
  std::size_t batch = 10;
  double lr = 0.001;
  double momentum = 0.0;
  double clip = 5.0;
  double box_weight = 10.0;
  double lambda_max = 0.8;
  double eta_max = 0.8;
  std::size_t ramp = 60000;
  std::size_t checkpoint_every = 0;
  std::size_t feature_dim = 512;
  std::size_t latent_dim = 512;
  std::size_t exchange = 2;
  std::string channels;
  std::uint64_t seed = 1;
  std::size_t log_every = 100;
};

int cmd_train(const TrainArgs& a, const Run& run, unsigned threads) {
  Manifest manifest;
  auto data = load_dataset(a.data, &manifest);
  if (data.empty()) throw UsageError("--data: dataset is empty");
  TrainConfig c;
  c.model.k = manifest.k;
  c.model.resolution = manifest.resolution;
  c.model.feature_dim = a.feature_dim;
  c.model.latent_dim = a.latent_dim;
  c.model.iterations = a.exchange;
  c.model.channels = a.channels.empty() ? ModelConfig::default_channels(manifest.resolution) : parse_list(a.channels, "--channels");
  c.model.seed = a.seed;
  c.iterations = a.iters;
  c.phase1_iters = a.phase1.value_or(a.iters / 5);
  c.batch_size = a.batch;
  c.learning_rate = a.lr;
  c.momentum = a.momentum;
  c.clip_norm = a.clip;
  c.box_weight = a.box_weight;
  c.anneal.lambda_max = a.lambda_max;
  c.anneal.eta_max = a.eta_max;
  c.anneal.ramp_iters = a.ramp;
  c.checkpoint_every = a.checkpoint_every;
  c.seed = a.seed;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }

  StagedDir out(a.out);
  Trainer<float> trainer(c, std::move(data));
  std::size_t clipped = 0;
  const auto result = train<float>(trainer, out.path(), [&](const LossReport& r) {
    clipped += r.clipped ? 1 : 0;
    if (a.log_every > 0 && (r.iter % a.log_every == 0 || r.iter + 1 == c.iterations))
      std::cerr << "iter " << r.iter << " phase " << r.phase << " l_f " << r.l_f << " l_kl " << r.l_kl << " r " << r.r_reg
                << " total " << r.total << (r.clipped ? " (clipped)" : "") << "\n";
  });
  json cfg = to_json(c);
  cfg["data"] = normalized(a.data).string();
  write_run(out.path(), run, cfg, threads);
  out.commit();
  if (result.faulted) {
    std::cerr << "error: " << result.fault << "; last good checkpoint kept in " << normalized(a.out).string() << "\n";
    return 1;
  }
  if (clipped > 0) std::cerr << "gradient clipped on " << clipped << " of " << result.log.size() << " iterations\n";
  std::cout << "initial l_f " << result.log.front().l_f << ", final l_f " << result.log.back().l_f << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string ckpt;
  std::string out;
  std::size_t count = 100;
  std::uint64_t seed = 1;
  std::string mask;
  bool obj = false;
};

void cmd_sample(const SampleArgs& a, const Run& run, unsigned threads) {
  if (a.count == 0) throw UsageError("--count must be positive");
  const auto model = load_model<float>(a.ckpt);
  const auto prior = load_mask_prior(a.ckpt);
  tasks::SampleOptions opt;
  opt.count = a.count;
  opt.seed = a.seed;
  opt.threads = threads;
  opt.class_id = "sample";
  if (!a.mask.empty()) {
    PartMask m;
    for (auto v : parse_list(a.mask, "--mask")) m.flags.push_back(v != 0 ? 1 : 0);
    if (m.size() != model.config().k) throw UsageError("--mask must list " + std::to_string(model.config().k) + " flags");
    opt.fixed_mask = m;
  }
  StagedDir out(a.out);
  const auto res = tasks::sample_shapes(model, prior, opt);
  save_dataset(out.path(), res.shapes, opt.class_id, static_cast<std::uint32_t>(model.config().k),
               static_cast<std::uint32_t>(model.config().resolution));
  if (a.obj)
    for (std::size_t n = 0; n < res.shapes.size(); ++n)
      tasks::write_obj(out.path() / (fs::path(shape_file_name(n)).stem().string() + ".obj"), res.shapes[n]);
  write_run(out.path(), run, {{"ckpt", normalized(a.ckpt).string()}, {"count", a.count}, {"seed", a.seed}, {"mask", a.mask}, {"obj", a.obj}},
            threads);
  out.commit();
  std::cout << "wrote " << a.count << " samples to " << normalized(a.out).string() << "\n";
}

// ---------------------------------------------------------------------------

struct InterpolateArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::size_t a = 0;
  std::size_t b = 1;
  std::size_t steps = 5;
  bool obj = false;
};

void cmd_interpolate(const InterpolateArgs& a, const Run& run, unsigned threads) {
  if (a.steps < 2) throw UsageError("--steps must be at least 2");
  const auto model = load_model<float>(a.ckpt);
  const auto data = load_dataset(a.data);
  StagedDir out(a.out);
  auto shapes = tasks::interpolate(model, pick(data, a.a, "--a"), pick(data, a.b, "--b"), a.steps);
  for (auto& s : shapes) s = tasks::binarized(std::move(s));
  save_dataset(out.path(), shapes);
  if (a.obj)
    for (std::size_t n = 0; n < shapes.size(); ++n)
      tasks::write_obj(out.path() / (fs::path(shape_file_name(n)).stem().string() + ".obj"), shapes[n]);
  write_run(out.path(), run,
            {{"ckpt", normalized(a.ckpt).string()}, {"data", normalized(a.data).string()}, {"a", a.a}, {"b", a.b}, {"steps", a.steps}}, threads);
  out.commit();
}

// ---------------------------------------------------------------------------

struct FeedbackArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::size_t index = 0;
  std::string missing = "1";
  std::string direction = "s2g";
  std::size_t iterations = tasks::kFeedbackIterations;
  std::uint64_t seed = 1;
  bool obj = false;
};

void write_feedback(const fs::path& dir, const tasks::FeedbackResult& res, bool obj) {
  save_dataset(dir, std::span<const ShapeSample>(&res.sample, 1));
  std::ofstream csv(dir / "change.csv", std::ios::trunc);
  csv << "iter,change\n" << std::setprecision(9);
  for (std::size_t i = 0; i < res.change_norms.size(); ++i) csv << i << ',' << res.change_norms[i] << '\n';
  if (obj) tasks::write_obj(dir / "shape_000000.obj", res.sample);
}

void cmd_complete(const FeedbackArgs& a, const Run& run, unsigned threads) {
  const auto model = load_model<float>(a.ckpt);
  const auto data = load_dataset(a.data);
  tasks::CompletionProblem problem;
  problem.partial = pick(data, a.index, "--index");
  for (auto i : parse_list(a.missing, "--missing")) {
    if (i >= problem.partial.parts.size()) throw UsageError("--missing: part " + std::to_string(i) + " is out of range");
    problem.missing.insert(i);
    problem.partial.mask.flags[i] = 0;
    problem.partial.parts[i] = VoxelGrid(problem.partial.resolution());
    problem.partial.boxes[i] = Box6{};
  }
  if (!problem.missing.empty() && problem.missing.size() == problem.partial.parts.size())
    throw UsageError("--missing lists every part; use 'sample' instead");
  problem.iterations = a.iterations;
  StagedDir out(a.out);
  const auto res = tasks::complete(model, problem, a.seed);
  write_feedback(out.path(), res, a.obj);
  json report{{"index", a.index}, {"missing", a.missing}, {"iterations", a.iterations}};
  if (problem.partial.parts.size() == 2) {
    const auto f = joints::fit_oracle(tasks::binarized(res.sample));
    report["cavity"] = {{"r_o", f.r_o}, {"r_e", f.r_e}, {"r", f.r()}, {"degenerate", f.degenerate}};
  }
  write_json(out.path() / "report.json", report);
  write_run(out.path(), run,
            {{"ckpt", normalized(a.ckpt).string()}, {"data", normalized(a.data).string()}, {"index", a.index}, {"missing", a.missing},
             {"iterations", a.iterations}, {"seed", a.seed}},
            threads);
  out.commit();
  std::cout << report.dump(2) << "\n";
}

void cmd_map(const FeedbackArgs& a, const Run& run, unsigned threads) {
  tasks::Direction dir{};
  try {
    dir = tasks::parse_direction(a.direction);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const auto model = load_model<float>(a.ckpt);
  const auto data = load_dataset(a.data);
  StagedDir out(a.out);
  const auto res = tasks::map_modality(model, pick(data, a.index, "--index"), dir, a.iterations, a.seed);
  write_feedback(out.path(), res, a.obj);
  const json report{{"index", a.index}, {"direction", a.direction}, {"iterations", a.iterations}, {"error", res.error.value_or(0.0)}};
  write_json(out.path() / "report.json", report);
  write_run(out.path(), run,
            {{"ckpt", normalized(a.ckpt).string()}, {"data", normalized(a.data).string()}, {"index", a.index}, {"direction", a.direction},
             {"iterations", a.iterations}, {"seed", a.seed}},
            threads);
  out.commit();
  std::cout << report.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string metrics = "cavity,mmd,cov";
  std::size_t count = 100;
  std::size_t reference = 0;
  std::string ground = "cd";
  std::string classifier;
  std::uint64_t seed = 1;
};

void cmd_eval(const EvalArgs& a, const Run& run, unsigned threads) {
  std::vector<std::string> wanted;
  {
    std::stringstream ss(a.metrics);
    std::string m;
    while (std::getline(ss, m, ','))
      if (!m.empty()) wanted.push_back(m);
  }
  static const std::vector<std::string> kKnown{"cavity", "mmd", "cov", "inception", "knn"};
  for (const auto& m : wanted)
    if (std::find(kKnown.begin(), kKnown.end(), m) == kKnown.end())
      throw UsageError("--metrics: unknown metric '" + m + "' (known: cavity, mmd, cov, inception, knn)");
  if (wanted.empty()) throw UsageError("--metrics is empty");
  if (a.count == 0) throw UsageError("--count must be positive");
  if (a.ground != "cd" && a.ground != "emd") throw UsageError("--ground must be cd or emd");
  auto has = [&wanted](const char* m) { return std::find(wanted.begin(), wanted.end(), m) != wanted.end(); };
  const bool joint_metrics = has("cavity") || has("inception");

  const auto model = load_model<float>(a.ckpt);
  auto training = load_dataset(a.data);
  if (a.reference > 0 && a.reference < training.size()) training.resize(a.reference);
  if (joint_metrics && model.config().k != 2) throw UsageError("cavity and inception metrics need 2-part joints");
  std::optional<StagedDir> out;
  if (!a.out.empty()) out.emplace(a.out);

  tasks::SampleOptions opt;
  opt.count = a.count;
  opt.seed = a.seed;
  opt.threads = threads;
  const auto generated = tasks::sample_shapes(model, load_mask_prior(a.ckpt), opt).shapes;
  metrics::DistanceOptions dopt;
  dopt.ground = a.ground == "emd" ? metrics::Ground::kEmd : metrics::Ground::kChamfer;
  dopt.seed = derive_seed(a.seed, SeedStream::kEval);

  json report{{"count", a.count}, {"reference", training.size()}, {"ground", a.ground}};
  if (has("cavity")) {
    const auto c = metrics::cavity_scores(generated, threads);
    json per = json::array();
    std::vector<double> rs;
    for (const auto& e : c.samples) {
      per.push_back({{"r_o", e.r_o}, {"r_e", e.r_e}, {"r", e.r}, {"degenerate", e.degenerate}});
      rs.push_back(e.r);
    }
    report["cavity"] = {{"mean_r_o", c.mean_r_o}, {"mean_r_e", c.mean_r_e}, {"r_over", c.r_over},
                        {"median_r", c.median_r}, {"degenerate", c.degenerate}, {"samples", per}};
    if (out) {
      std::vector<double> thresholds;
      for (int t = 0; t <= 20; ++t) thresholds.push_back(0.1 * t);
      std::ofstream(out->path() / "cavity_curve.csv") << metrics::curve_csv(metrics::threshold_curve(rs, thresholds));
    }
  }
  if (has("mmd") || has("cov")) {
    const auto mc = metrics::mmd_cov(generated, training, dopt, threads);
    if (has("mmd")) report["mmd"] = mc.mmd;
    if (has("cov")) report["cov"] = mc.cov;
  }
  if (has("inception")) {
    metrics::ModeClassifier cls;
    const fs::path weights = a.classifier.empty() ? fs::path() : fs::path(a.classifier) / "classifier.sagw";
    if (!a.classifier.empty() && fs::exists(weights)) {
      std::ifstream in(fs::path(a.classifier) / "classifier.json");
      json j;
      in >> j;
      cls.load(weights, j.at("heldout_accuracy").get<double>());
    } else {
      cls.train();
      if (!a.classifier.empty()) {
        fs::create_directories(a.classifier);
        cls.save(weights);
        write_json(fs::path(a.classifier) / "classifier.json", json{{"heldout_accuracy", cls.heldout_accuracy()}});
      }
    }
    report["inception"] = metrics::inception_mode_score(generated, cls);
    report["classifier_accuracy"] = cls.heldout_accuracy();
  }
  if (has("knn")) {
    json nn = json::array();
    for (std::size_t q = 0; q < std::min<std::size_t>(generated.size(), 10); ++q) {
      const auto r = metrics::knn_retrieve(generated[q], training, 3, dopt, threads);
      json row = json::array();
      for (const auto& n : r.neighbors) row.push_back({{"index", n.index}, {"distance", n.distance}});
      nn.push_back(row);
    }
    report["knn"] = nn;
  }
  if (out) {
    write_json(out->path() / "report.json", report);
    write_run(out->path(), run,
              {{"ckpt", normalized(a.ckpt).string()}, {"data", normalized(a.data).string()}, {"metrics", a.metrics}, {"count", a.count},
               {"reference", a.reference}, {"ground", a.ground}, {"seed", a.seed}},
              threads);
    out->commit();
  }
  json summary = report;
  if (summary.contains("cavity")) summary["cavity"].erase("samples");
  std::cout << summary.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

struct GradCheckArgs {
  std::uint64_t seed = 1;
  double tolerance = 1e-3;
};

int cmd_grad_check(const GradCheckArgs& a) {
  ModelConfig mc;
  mc.k = 3;
  mc.resolution = 8;
  mc.feature_dim = 6;
  mc.latent_dim = 4;
  mc.iterations = 2;
  mc.channels = {2, 3};
  mc.seed = a.seed;
  SagNet<double> model(mc);
  Rng rng(derive_seed(a.seed, SeedStream::kData));
  std::vector<ShapeSample> samples;
  for (int n = 0; n < 2; ++n) {
    ShapeSample s = empty_sample(mc.k, static_cast<std::uint32_t>(mc.resolution));
    std::bernoulli_distribution coin(0.5);
    std::uniform_real_distribution<float> u(0.1F, 0.9F);
    for (std::size_t i = 0; i < mc.k; ++i) {
      for (std::uint32_t z = 0; z < mc.resolution; ++z)
        for (std::uint32_t y = 0; y < mc.resolution; ++y)
          for (std::uint32_t x = 0; x < mc.resolution; ++x) s.parts[i].at(x, y, z) = coin(rng) ? 1.0F : 0.0F;
      for (int c = 0; c < 3; ++c) {
        s.boxes[i].center[c] = u(rng);
        s.boxes[i].extents[c] = 0.5F * u(rng);
      }
    }
    s.mask.flags[2] = n == 0 ? 0 : 1;
    samples.push_back(std::move(s));
  }
  const auto batch = make_batch<double>(samples, mc.k, mc.resolution);
  Tensor<double> noise({2, mc.latent_dim});
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : noise.vec()) v = g(rng);
  ad::GradCheckOptions opt;
  opt.tolerance = a.tolerance;
  opt.seed = a.seed;
  opt.max_probes_per_param = 8;
  auto params = model.params().all();
  const auto rep = ad::grad_check<double>(
      [&](Tape<double>& t) { return compute_losses<double>(t, model, batch, &noise, 0.5, 0.3, 10.0).total; }, params, opt);
  json out{{"max_rel_error", rep.max_rel_error}, {"tolerance", rep.tolerance}, {"passed", rep.passed}, {"parameters", rep.entries.size()}};
  if (!rep.fault.empty()) out["fault"] = rep.fault;
  std::cout << out.dump(2) << "\n";
  return rep.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sagnet: structure-aware generative shape model"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough();  // --threads may follow the subcommand
  unsigned threads_flag = 0;
  app.add_option("--threads", threads_flag, "Worker threads (0 = all cores; SAGNET_THREADS overrides)")->capture_default_str();

  Run run;
  for (int i = 0; i < argc; ++i) run.argv.emplace_back(argv[i]);
  run.started = utc_now();

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic tenon-mortise joint dataset");
  c_gen->add_option("--class", gen.cls, "Shape class")->capture_default_str();
  c_gen->add_option("--count", gen.count, "Number of joints")->capture_default_str();
  c_gen->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
  c_gen->add_option("--resolution", gen.resolution, "Voxel grid side")->capture_default_str();
  c_gen->add_flag("--stratified", gen.stratified, "Cycle through the connection modes instead of drawing them");
  c_gen->add_option("--out", gen.out, "Output dataset directory")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model on a dataset");
  c_train->add_option("--data", tr.data, "Dataset directory")->required();
  c_train->add_option("--out", tr.out, "Checkpoint directory")->required();
  c_train->add_option("--iters", tr.iters, "Total iterations")->capture_default_str();
  c_train->add_option("--phase1", tr.phase1, "Phase-1 iterations (default: 20% of --iters)");
  c_train->add_option("--batch", tr.batch, "Mini-batch size")->capture_default_str();
  c_train->add_option("--lr", tr.lr, "SGD learning rate")->capture_default_str();
  c_train->add_option("--momentum", tr.momentum, "SGD momentum")->capture_default_str();
  c_train->add_option("--clip", tr.clip, "Gradient-norm clip (0 disables)")->capture_default_str();
  c_train->add_option("--box-weight", tr.box_weight, "Weight of the box term")->capture_default_str();
  c_train->add_option("--lambda-max", tr.lambda_max, "Final KL weight")->capture_default_str();
  c_train->add_option("--eta-max", tr.eta_max, "Final feature-regularizer weight")->capture_default_str();
  c_train->add_option("--ramp", tr.ramp, "Phase-2 iterations over which the weights ramp up")->capture_default_str();
  c_train->add_option("--checkpoint-every", tr.checkpoint_every, "Checkpoint period (0 = end only)")->capture_default_str();
  c_train->add_option("--feature-dim", tr.feature_dim, "Feature width")->capture_default_str();
  c_train->add_option("--latent-dim", tr.latent_dim, "Latent width")->capture_default_str();
  c_train->add_option("--exchange-iters", tr.exchange, "Attention exchange iterations (1-4)")->capture_default_str();
  c_train->add_option("--channels", tr.channels, "Encoder channel widths, comma-separated (default by resolution)");
  c_train->add_option("--seed", tr.seed, "Master seed")->capture_default_str();
  c_train->add_option("--log-every", tr.log_every, "Progress line period (0 = silent)")->capture_default_str();

  SampleArgs sm;
  auto* c_sample = app.add_subcommand("sample", "Sample shapes from the prior");
  c_sample->add_option("--ckpt", sm.ckpt, "Checkpoint directory")->required();
  c_sample->add_option("--out", sm.out, "Output dataset directory")->required();
  c_sample->add_option("--count", sm.count, "Number of shapes")->capture_default_str();
  c_sample->add_option("--seed", sm.seed, "Master seed")->capture_default_str();
  c_sample->add_option("--mask", sm.mask, "Fixed part mask, e.g. 1,1 (default: training mask distribution)");
  c_sample->add_flag("--obj", sm.obj, "Also write OBJ meshes");

  InterpolateArgs ip;
  auto* c_interp = app.add_subcommand("interpolate", "Interpolate between two dataset shapes in latent space");
  c_interp->add_option("--ckpt", ip.ckpt, "Checkpoint directory")->required();
  c_interp->add_option("--data", ip.data, "Dataset directory")->required();
  c_interp->add_option("--out", ip.out, "Output dataset directory")->required();
  c_interp->add_option("--a", ip.a, "Index of the first shape")->capture_default_str();
  c_interp->add_option("--b", ip.b, "Index of the second shape")->capture_default_str();
  c_interp->add_option("--steps", ip.steps, "Shapes along the path, endpoints included")->capture_default_str();
  c_interp->add_flag("--obj", ip.obj, "Also write OBJ meshes");

  FeedbackArgs cp;
  auto* c_complete = app.add_subcommand("complete", "Fill in missing parts of a dataset shape");
  c_complete->add_option("--ckpt", cp.ckpt, "Checkpoint directory")->required();
  c_complete->add_option("--data", cp.data, "Dataset directory")->required();
  c_complete->add_option("--out", cp.out, "Output directory")->required();
  c_complete->add_option("--index", cp.index, "Shape index")->capture_default_str();
  c_complete->add_option("--missing", cp.missing, "Parts to remove and complete, comma-separated")->capture_default_str();
  c_complete->add_option("--iterations", cp.iterations, "Feedback iterations")->capture_default_str();
  c_complete->add_option("--seed", cp.seed, "Master seed")->capture_default_str();
  c_complete->add_flag("--obj", cp.obj, "Also write an OBJ mesh");

  FeedbackArgs mp;
  auto* c_map = app.add_subcommand("map", "Recover boxes from voxels (g2s) or voxels from boxes (s2g)");
  c_map->add_option("--ckpt", mp.ckpt, "Checkpoint directory")->required();
  c_map->add_option("--data", mp.data, "Dataset directory")->required();
  c_map->add_option("--out", mp.out, "Output directory")->required();
  c_map->add_option("--index", mp.index, "Shape index")->capture_default_str();
  c_map->add_option("--direction", mp.direction, "g2s or s2g")->capture_default_str();
  c_map->add_option("--iterations", mp.iterations, "Feedback iterations")->capture_default_str();
  c_map->add_option("--seed", mp.seed, "Master seed")->capture_default_str();
  c_map->add_flag("--obj", mp.obj, "Also write an OBJ mesh");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Sample from a model and score the samples");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
  c_eval->add_option("--data", ev.data, "Training dataset directory")->required();
  c_eval->add_option("--out", ev.out, "Optional output directory for report.json and curves");
  c_eval->add_option("--metrics", ev.metrics, "Comma-separated: cavity, mmd, cov, inception, knn")->capture_default_str();
  c_eval->add_option("--count", ev.count, "Number of sampled shapes")->capture_default_str();
  c_eval->add_option("--reference", ev.reference, "Use only the first N training shapes (0 = all)")->capture_default_str();
  c_eval->add_option("--ground", ev.ground, "Point-cloud distance: cd or emd")->capture_default_str();
  c_eval->add_option("--classifier", ev.classifier, "Mode-classifier directory (trained and saved there if absent)");
  c_eval->add_option("--seed", ev.seed, "Master seed")->capture_default_str();

  GradCheckArgs gc;
  auto* c_grad = app.add_subcommand("grad-check", "Finite-difference check of the full loss on a tiny model");
  c_grad->add_option("--seed", gc.seed, "Seed")->capture_default_str();
  c_grad->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const unsigned threads = resolve_threads(threads_flag);
  try {
    run.subcommand = app.get_subcommands().front()->get_name();
    if (*c_gen) cmd_gen_data(gen, run, threads);
    else if (*c_train) return cmd_train(tr, run, threads);
    else if (*c_sample) cmd_sample(sm, run, threads);
    else if (*c_interp) cmd_interpolate(ip, run, threads);
    else if (*c_complete) cmd_complete(cp, run, threads);
    else if (*c_map) cmd_map(mp, run, threads);
    else if (*c_eval) cmd_eval(ev, run, threads);
    else if (*c_grad) return cmd_grad_check(gc);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
