// Acceptance gate: prints one PASS/FAIL line per criterion and exits non-zero
// if any selected criterion fails.
//
//   acceptance [--work DIR] [--only A1,A3,...] [--reuse]
//
// --reuse loads the overfit checkpoint from a previous run in DIR instead of
// training it again.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sagnet/metrics.hpp"
#include "sagnet/synthjoints.hpp"
#include "sagnet/tasks.hpp"
#include "sagnet/training.hpp"

namespace fs = std::filesystem;
using namespace sagnet;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// A1

Tensor<double> random_tensor(ad::Dims dims, Rng& rng, double sd = 1.0) {
  Tensor<double> t(std::move(dims));
  std::normal_distribution<double> g(0.0, sd);
  for (auto& v : t.vec()) v = g(rng);
  return t;
}

Var<double> project(Tape<double>& tape, Var<double> y, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(y.dims(), rng))));
}

void scramble(ParamStore<double>& s, Rng& rng, double sd) {
  std::normal_distribution<double> g(0.0, sd);
  for (auto* p : s.all())
    for (auto& v : p->value.vec()) v = g(rng);
}

Verdict a1_gradients() {
  double layer_err = 0.0, model_err = 0.0;
  std::vector<std::string> failures;
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    ParamStore<double> s;
    Linear<double> fc(s, "fc", 5, 4, rng, Activation::kTanh);
    GruCell<double> gru(s, "gru", 4, 5, rng);
    AttentionGate<double> gate(s, "gate", 4, rng);
    GeoEncoder<double> enc(s, "enc", 8, {2, 3}, 6, rng);
    GeoDecoder<double> dec(s, "dec", 8, {2, 3}, 6, rng);
    StrEncoder<double> senc(s, "senc", 6, rng);
    StrDecoder<double> sdec(s, "sdec", 6, rng);
    scramble(s, rng, 0.3);
    const auto x = random_tensor({2, 5}, rng), a = random_tensor({2, 4}, rng), b = random_tensor({2, 4}, rng);
    const auto h0 = random_tensor({2, 5}, rng);
    Tensor<double> grid({2, 1, 8, 8, 8});
    for (auto& v : grid.vec()) v = std::bernoulli_distribution(0.4)(rng) ? 1.0 : 0.0;
    const auto feat = random_tensor({2, 6}, rng);
    const auto pair = random_tensor({2, 12}, rng, 0.3);
    const std::vector<std::pair<const char*, std::function<Var<double>(Tape<double>&)>>> cases{
        {"linear", [&](Tape<double>& t) { return project(t, fc(t, t.constant(x)), 1); }},
        {"gru x3", [&](Tape<double>& t) {
           Var<double> h = t.constant(h0);
           for (int step = 0; step < 3; ++step) h = gru.step(t, h, t.constant(a));
           return project(t, h, 2);
         }},
        {"gate", [&](Tape<double>& t) { return project(t, gate(t, t.constant(a), t.constant(b)), 3); }},
        {"geo_encode", [&](Tape<double>& t) { return project(t, enc(t, t.constant(grid)), 4); }},
        {"geo_decode", [&](Tape<double>& t) { return project(t, dec(t, t.constant(feat)), 5); }},
        {"str_encode", [&](Tape<double>& t) { return project(t, senc(t, t.constant(pair)), 6); }},
        {"str_decode", [&](Tape<double>& t) { return project(t, sdec(t, t.constant(feat)), 7); }},
    };
    for (const auto& [name, fn] : cases) {
      const auto rep = ad::grad_check<double>(fn, s.all(), ad::GradCheckOptions{.seed = seed});
      layer_err = std::max(layer_err, rep.max_rel_error);
      if (!rep.passed) failures.push_back(std::string(name) + "/" + std::to_string(seed));
    }

    ModelConfig mc;
    mc.resolution = 8;
    mc.feature_dim = 6;
    mc.latent_dim = 4;
    mc.channels = {2, 3};
    mc.seed = seed;
    SagNet<double> model(mc);
    std::vector<ShapeSample> data;
    for (int n = 0; n < 2; ++n) {
      ShapeSample smp = empty_sample(2, 8);
      smp.mask = PartMask::all(2);
      std::uniform_real_distribution<float> u(0.1F, 0.9F);
      for (std::size_t i = 0; i < 2; ++i) {
        for (auto& v : smp.parts[i].values()) v = std::bernoulli_distribution(0.4)(rng) ? 1.0F : 0.0F;
        smp.boxes[i] = Box6{{u(rng), u(rng), u(rng)}, {0.5F * u(rng), 0.5F * u(rng), 0.5F * u(rng)}};
      }
      data.push_back(smp);
    }
    const auto batch = make_batch<double>(data, 2, 8);
    const auto noise = random_tensor({2, mc.latent_dim}, rng);
    ad::GradCheckOptions opt;
    opt.tolerance = 1e-3;
    opt.seed = seed;
    opt.max_probes_per_param = 16;
    const auto rep = ad::grad_check<double>(
        [&](Tape<double>& t) { return compute_losses<double>(t, model, batch, &noise, 0.5, 0.3, 10.0).total; }, model.params().all(),
        opt);
    model_err = std::max(model_err, rep.max_rel_error);
    if (!rep.passed) failures.push_back("end-to-end/" + std::to_string(seed));
  }
  std::string detail = "layer max rel err " + fmt("%.2e", layer_err) + " (< 1e-4), end-to-end " + fmt("%.2e", model_err) + " (< 1e-3)";
  for (const auto& f : failures) detail += ", failed " + f;
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------
// A2

Verdict a2_generator() {
  const auto ds = joints::generate_dataset(1000, 2, 16);
  std::size_t bad = 0;
  for (const auto& s : ds.samples) {
    const auto f = joints::fit_oracle(s);
    if (f.degenerate || f.r_o != 0.0 || f.r_e != 1.0) ++bad;
  }
  return {bad == 0, std::to_string(1000 - bad) + "/1000 joints score R_o = 0, R_e = 1 exactly"};
}

// ---------------------------------------------------------------------------
// A3, A7, A8

struct Overfit {
  std::vector<ShapeSample> data;
  std::optional<SagNet<float>> model;
  double first_lf = 0.0;
  double last_lf = 0.0;
};

TrainConfig overfit_config() {
  TrainConfig c;
  c.iterations = 3000;
  c.phase1_iters = 3000;
  c.learning_rate = 0.01;
  c.momentum = 0.9;
  c.seed = 1;
  return c;
}

void prepare_overfit(Overfit& o, const fs::path& work, bool reuse) {
  o.data = joints::generate_dataset(32, 5, 16, true).samples;
  const fs::path dir = work / "overfit";
  if (reuse && fs::exists(dir / kWeightsFile)) {
    o.model.emplace(load_model<float>(dir));
    std::ifstream in(dir / kLossLogFile);
    std::string line;
    std::getline(in, line);
    std::vector<double> lf;
    while (std::getline(in, line)) lf.push_back(std::stod(line.substr(line.find(',') + 1)));
    o.first_lf = lf.front();
    o.last_lf = lf.back();
    return;
  }
  fs::remove_all(dir);
  Trainer<float> trainer(overfit_config(), o.data);
  const auto res = train<float>(trainer, dir);
  if (res.faulted) throw NumericFault("overfit training: " + res.fault);
  o.first_lf = res.log.front().l_f;
  o.last_lf = res.log.back().l_f;
  o.model.emplace(load_model<float>(dir));
}

double iou(const VoxelGrid& a, const VoxelGrid& b) {
  double in = 0.0, un = 0.0;
  auto x = a.values(), y = b.values();
  for (std::size_t c = 0; c < x.size(); ++c) {
    in += (x[c] == 1.0F && y[c] == 1.0F) ? 1.0 : 0.0;
    un += (x[c] == 1.0F || y[c] == 1.0F) ? 1.0 : 0.0;
  }
  return un > 0.0 ? in / un : 1.0;
}

Verdict a3_overfit(const Overfit& o) {
  std::array<double, 2> slot{0.0, 0.0};
  double worst = 1.0, box = 0.0;
  for (const auto& s : o.data) {
    const auto rec = tasks::binarized(tasks::reconstruct(*o.model, s));
    for (std::size_t i = 0; i < 2; ++i) {
      const double v = iou(rec.parts[i], s.parts[i]);
      slot[i] += v;
      worst = std::min(worst, v);
      box += metrics::box_distance(rec.boxes[i], s.boxes[i]);
    }
  }
  const double n = static_cast<double>(o.data.size());
  slot[0] /= n;
  slot[1] /= n;
  box /= 2.0 * n;
  const double ratio = o.last_lf / o.first_lf;
  const bool pass = slot[0] >= 0.8 && slot[1] >= 0.8 && box <= 0.05 && ratio <= 0.1;
  return {pass, "mean IoU tenon " + fmt("%.3f", slot[0]) + ", mortise " + fmt("%.3f", slot[1]) + " (>= 0.8; worst single part " +
                    fmt("%.3f", worst) + "), box L2 " + fmt("%.4f", box) + " (<= 0.05), l_f " + fmt("%.4f", o.first_lf) + " -> " +
                    fmt("%.4f", o.last_lf) + " ratio " + fmt("%.4f", ratio) + " (<= 0.1)"};
}

Verdict a7_completion(const Overfit& o) {
  std::size_t good = 0;
  bool fixed_ok = true;
  std::array<std::size_t, 2> good_by_part{0, 0};
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t drop = trial % 2 == 0 ? joints::kMortise : joints::kTenon;
    const std::size_t keep = 1 - drop;
    tasks::CompletionProblem p;
    p.partial = o.data[trial];
    p.partial.mask.flags[drop] = 0;
    p.partial.parts[drop] = VoxelGrid(p.partial.resolution());
    p.partial.boxes[drop] = Box6{};
    p.missing = {drop};
    p.iterations = 300;
    const auto res = tasks::complete(*o.model, p, trial + 1);
    fixed_ok = fixed_ok && res.sample.parts[keep] == o.data[trial].parts[keep] && res.sample.boxes[keep] == o.data[trial].boxes[keep];
    const auto f = joints::fit_oracle(res.sample);
    if (!f.degenerate && f.r() <= 0.2) {
      ++good;
      ++good_by_part[drop];
    }
  }
  return {good >= 16 && fixed_ok, std::to_string(good) + "/20 completions reach R <= 0.2 (need 16; restored tenons " +
                                      std::to_string(good_by_part[joints::kTenon]) + "/10, mortises " +
                                      std::to_string(good_by_part[joints::kMortise]) + "/10), fixed parts " +
                                      (fixed_ok ? "bit-identical" : "MODIFIED")};
}

Verdict a8_interpolation(const Overfit& o) {
  std::size_t bad = 0, checked = 0;
  bool endpoints = true;
  for (std::size_t pair = 0; pair < 4; ++pair) {
    const auto& a = o.data[2 * pair];
    const auto& b = o.data[2 * pair + 1];
    const auto path = tasks::interpolate(*o.model, a, b, 5);
    endpoints = endpoints && path.front() == tasks::reconstruct(*o.model, a) && path.back() == tasks::reconstruct(*o.model, b);
    for (std::size_t s = 1; s + 1 < path.size(); ++s) {
      for (const auto& g : path[s].parts)
        for (float v : g.values()) {
          ++checked;
          if (!(v > 0.0F && v < 1.0F)) ++bad;
        }
      for (const auto& bx : path[s].boxes)
        for (float v : bx.to_array())
          if (!std::isfinite(v)) ++bad;
    }
  }
  return {endpoints && bad == 0, std::string("endpoints ") + (endpoints ? "bit-identical" : "DIFFER") + " to reconstructions, " +
                                     std::to_string(bad) + " of " + std::to_string(checked) + " intermediate voxels outside (0,1)"};
}

// ---------------------------------------------------------------------------
// A4

Verdict a4_anneal() {
  AnnealSchedule s;
  const std::size_t ramp = s.ramp_iters;
  const std::vector<std::pair<std::size_t, double>> expect{{0, 0.0}, {ramp / 2, 0.4}, {ramp, 0.8}, {ramp + 1, 0.8}, {10 * ramp, 0.8}};
  double worst = 0.0;
  for (const auto& [i, v] : expect) worst = std::max({worst, std::abs(s.lambda(i) - v), std::abs(s.eta(i) - v)});
  return {worst <= 1e-9, "max deviation " + fmt("%.1e", worst) + " over 0, ramp/2, ramp and beyond (ramp = " + std::to_string(ramp) + ")"};
}

// ---------------------------------------------------------------------------
// A5

metrics::Cloud random_cloud(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  metrics::Cloud c(n);
  for (auto& p : c) p = {u(rng), u(rng), u(rng)};
  return c;
}

Verdict a5_metrics() {
  Rng rng(55);
  std::vector<std::string> fails;
  {
    const auto a = random_cloud(50, rng), b = random_cloud(50, rng);
    auto one = [](const metrics::Cloud& x, const metrics::Cloud& y) {
      double acc = 0.0;
      for (const auto& p : x) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : y) best = std::min(best, std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2])));
        acc += best;
      }
      return acc;
    };
    if (metrics::chamfer(a, b) != one(a, b) + one(b, a)) fails.push_back("chamfer");
  }
  {
    const auto a = random_cloud(8, rng), b = random_cloud(8, rng);
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double c = 0.0;
      for (std::size_t i = 0; i < 8; ++i) c += metrics::distance(a[i], b[perm[i]]);
      best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    if (std::abs(metrics::emd(a, b) - best) > 1e-12) fails.push_back("emd");
  }
  {
    const auto ds = joints::generate_dataset(6, 8, 8);
    const auto r = metrics::mmd_cov(ds.samples, ds.samples);
    if (r.mmd != 0.0 || r.cov != 1.0) fails.push_back("mmd_cov");
  }
  double sym = 0.0, cop = 0.0;
  {
    ShapeSample s = empty_sample(2, 8);
    s.mask = PartMask::all(2);
    for (auto& v : s.parts[0].values()) v = std::bernoulli_distribution(0.4)(rng) ? 1.0F : 0.0F;
    s.boxes[0] = Box6{{0.3F, 0.4F, 0.5F}, {0.2F, 0.3F, 0.25F}};
    auto [g, b] = metrics::reflect_part(s, 0, metrics::MirrorPlane{0, 0.5});
    s.parts[1] = g;
    s.boxes[1] = b;
    sym = metrics::symmetry_score(s, 0, 1);
    if (sym > 1e-6) fails.push_back("symmetry");
  }
  {
    ShapeSample s = empty_sample(4, 4);
    s.mask = PartMask::all(4);
    const std::array<std::array<float, 3>, 4> c{{{0.1F, 0.2F, 0.5F}, {0.8F, 0.1F, 0.5F}, {0.4F, 0.9F, 0.5F}, {0.6F, 0.6F, 0.5F}}};
    for (std::size_t i = 0; i < 4; ++i) s.boxes[i] = Box6{c[i], {0.1F, 0.1F, 0.1F}};
    cop = metrics::coplanarity_score(s, {0, 1, 2, 3});
    if (cop > 1e-6) fails.push_back("coplanarity");
  }
  std::string detail = "chamfer exact, emd vs 8! permutations, mmd_cov(X,X), symmetry " + fmt("%.1e", sym) + ", coplanarity " + fmt("%.1e", cop);
  for (const auto& f : fails) detail += ", failed " + f;
  return {fails.empty(), detail};
}

// ---------------------------------------------------------------------------
// A6

Verdict a6_generative(const fs::path& work) {
  TrainConfig c;
  c.iterations = 8000;
  c.phase1_iters = 1600;
  c.learning_rate = 0.01;
  c.momentum = 0.9;
  c.seed = 6;
  const auto data = joints::generate_dataset(2000, 6, 16).samples;
  Trainer<float> trainer(c, data);
  const auto res = train<float>(trainer, work / "generative");
  if (res.faulted) return {false, "training fault: " + res.fault};
  tasks::SampleOptions opt;
  opt.count = 200;
  opt.seed = 6;
  const auto shapes = tasks::sample_shapes(trainer.model(), trainer.mask_prior(), opt).shapes;
  const auto gen = metrics::cavity_scores(shapes);
  const auto base = metrics::cavity_scores(metrics::shuffled_pairs(shapes));
  std::vector<double> rg, rb;
  for (std::size_t n = 0; n < shapes.size(); ++n) {
    rg.push_back(gen.samples[n].r);
    rb.push_back(base.samples[n].r);
  }
  const double p = metrics::sign_test_p(rg, rb);
  const bool pass = gen.r_over >= 0.05 && gen.median_r < base.median_r && p < 0.01;
  return {pass, "R_over " + fmt("%.3f", gen.r_over) + " (>= 0.05), median R " + fmt("%.3f", gen.median_r) + " vs shuffled " +
                    fmt("%.3f", base.median_r) + ", sign test p " + fmt("%.2e", p) + " (< 0.01), degenerate " + std::to_string(gen.degenerate) +
                    "/200, l_f " + fmt("%.3f", res.log.front().l_f) + " -> " + fmt("%.3f", res.log.back().l_f)};
}

// ---------------------------------------------------------------------------
// A9

int cli(const std::string& args) {
  const std::string cmd = "'" + std::string(SAGNET_CLI_PATH) + "' " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string bytes = ss.str();
    if (e.path().filename() == "run.json") {
      auto j = nlohmann::json::parse(bytes);
      j.erase("started_at");
      j.erase("finished_at");
      bytes = j.dump();
    }
    out[fs::relative(e.path(), dir).string()] = bytes;
  }
  return out;
}

Verdict a9_determinism(const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
  std::vector<std::string> bad;
  std::size_t files = 0;
  // Both runs use the same paths so that argv and the recorded paths match too.
  const fs::path r = dir / "run";
  for (int rep = 0; rep < 2; ++rep) {
    if (cli("gen-data --count 40 --seed 7 --out " + q(r / "data")) != 0) return {false, "gen-data failed"};
    if (cli("train --data " + q(r / "data") + " --out " + q(r / "ckpt") + " --iters 12 --phase1 4 --ramp 8 --seed 3 --log-every 0") != 0)
      return {false, "train failed"};
    if (cli("sample --ckpt " + q(r / "ckpt") + " --count 20 --seed 9 --obj --out " + q(r / "sample")) != 0) return {false, "sample failed"};
    fs::rename(r, dir / std::to_string(rep));
  }
  for (const char* step : {"data", "ckpt", "sample"}) {
    const auto a = snapshot(dir / "0" / step), b = snapshot(dir / "1" / step);
    files += a.size();
    if (a != b) bad.push_back(step);
  }
  std::string detail = std::to_string(files) + " artifacts from gen-data, train and sample compared byte for byte";
  for (const auto& s : bad) detail += ", " + s + " DIFFERS";
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------------------
// A10

Verdict a10_format(const fs::path& work) {
  Rng rng(10);
  std::uniform_real_distribution<float> u(-2.0F, 2.0F);
  const fs::path dir = work / "format";
  fs::remove_all(dir);
  std::map<std::pair<std::size_t, std::uint32_t>, std::vector<ShapeSample>> groups;
  for (int n = 0; n < 1000; ++n) {
    const std::size_t k = 2 + static_cast<std::size_t>(n % 5);
    const std::uint32_t r = std::array<std::uint32_t, 3>{4, 8, 16}[n % 3];
    ShapeSample s = empty_sample(k, r, "random");
    for (std::size_t i = 0; i < k; ++i) {
      s.mask.flags[i] = (i == 0 || std::bernoulli_distribution(0.7)(rng)) ? 1 : 0;
      if (!s.mask.present(i)) continue;
      for (auto& v : s.parts[i].values()) v = std::bernoulli_distribution(0.3)(rng) ? 1.0F : 0.0F;
      s.boxes[i] = Box6{{u(rng), u(rng), u(rng)}, {std::abs(u(rng)), std::abs(u(rng)), std::abs(u(rng))}};
    }
    groups[{k, r}].push_back(std::move(s));
  }
  std::size_t same = 0, total = 0;
  for (const auto& [key, samples] : groups) {
    const fs::path d = dir / (std::to_string(key.first) + "_" + std::to_string(key.second));
    save_dataset(d, samples, "random", static_cast<std::uint32_t>(key.first), key.second);
    const auto back = load_dataset(d);
    for (std::size_t n = 0; n < samples.size(); ++n) {
      ++total;
      if (n < back.size() && encode_shape(back[n]) == encode_shape(samples[n]) && back[n].parts == samples[n].parts &&
          back[n].boxes == samples[n].boxes && back[n].mask == samples[n].mask)
        ++same;
    }
  }
  auto bytes = encode_shape(groups.begin()->second.front());
  bytes[0] ^= 0x5A;
  std::string positioned = "not rejected";
  bool rejected = false;
  try {
    decode_shape(bytes);
  } catch (const FormatError& e) {
    rejected = e.offset() == 0 && std::string(e.what()).find("offset 0") != std::string::npos;
    positioned = e.what();
  }
  return {same == 1000 && total == 1000 && rejected,
          std::to_string(same) + "/1000 samples bit-exact after save/load; corrupted magic: " + positioned};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "sagnet_acceptance";
  std::set<std::string> only;
  bool reuse = false;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string id;
      while (std::getline(ss, id, ',')) only.insert(id);
    } else if (arg == "--reuse") {
      reuse = true;
    } else {
      std::cerr << "usage: acceptance [--work DIR] [--only A1,A2,...] [--reuse]\n";
      return 2;
    }
  }
  fs::create_directories(work);
  auto wanted = [&](const std::string& id) { return only.empty() || only.count(id) > 0; };

  Overfit overfit;
  std::optional<std::string> overfit_error;
  auto need_overfit = [&]() -> bool {
    if (overfit.model || overfit_error) return overfit.model.has_value();
    try {
      prepare_overfit(overfit, work, reuse);
    } catch (const std::exception& e) {
      overfit_error = e.what();
    }
    return overfit.model.has_value();
  };

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"A1", a1_gradients},
      {"A2", a2_generator},
      {"A3", [&] { return need_overfit() ? a3_overfit(overfit) : Verdict{false, *overfit_error}; }},
      {"A4", a4_anneal},
      {"A5", a5_metrics},
      {"A6", [&] { return a6_generative(work); }},
      {"A7", [&] { return need_overfit() ? a7_completion(overfit) : Verdict{false, *overfit_error}; }},
      {"A8", [&] { return need_overfit() ? a8_interpolation(overfit) : Verdict{false, *overfit_error}; }},
      {"A9", [&] { return a9_determinism(work); }},
      {"A10", [&] { return a10_format(work); }},
  };

  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << id << (id.size() < 3 ? "  " : " ") << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << "  [" << fmt("%.1f", secs)
              << " s]" << std::endl;
    failed += v.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
