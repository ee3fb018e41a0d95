#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sagnet/metrics.hpp"
#include "support.hpp"

using namespace sagnet;
using namespace sagnet::metrics;

namespace {

Cloud random_cloud(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Cloud c(n);
  for (auto& p : c) p = {u(rng), u(rng), u(rng)};
  return c;
}

double brute_chamfer(const Cloud& a, const Cloud& b) {
  auto one_way = [](const Cloud& x, const Cloud& y) {
    double acc = 0.0;
    for (const auto& p : x) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : y) best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]));
      acc += best;
    }
    return acc;
  };
  return one_way(a, b) + one_way(b, a);
}

double brute_emd(const Cloud& a, const Cloud& b) {
  std::vector<std::size_t> perm(a.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) c += distance(a[i], b[perm[i]]);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Part with only its eight corner voxels occupied: sparse enough that small
/// translations keep every point's nearest neighbour its own image.
VoxelGrid corners(std::uint32_t r) {
  VoxelGrid g(r);
  for (std::uint32_t z : {0U, r - 1})
    for (std::uint32_t y : {0U, r - 1})
      for (std::uint32_t x : {0U, r - 1}) g.at(x, y, z) = 1.0F;
  return g;
}

ShapeSample two_part(const VoxelGrid& a, const Box6& ba, const VoxelGrid& b, const Box6& bb) {
  ShapeSample s = empty_sample(2, a.resolution(), "t");
  s.parts = {a, b};
  s.boxes = {ba, bb};
  s.mask = PartMask::all(2);
  return s;
}

}  // namespace

TEST(Chamfer, MatchesQuadraticScan) {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = random_cloud(50, rng), b = random_cloud(50, rng);
    EXPECT_DOUBLE_EQ(chamfer(a, b), brute_chamfer(a, b));
  }
}

TEST(Chamfer, ClosedFormsAndSymmetry) {
  Rng rng(2);
  const auto a = random_cloud(30, rng), b = random_cloud(20, rng);
  EXPECT_EQ(chamfer(a, a), 0.0);
  EXPECT_EQ(chamfer(a, b), chamfer(b, a));
  const Cloud p{{0.0, 0.0, 0.0}}, q{{0.3, 0.4, 0.0}};
  EXPECT_DOUBLE_EQ(chamfer(p, q), 1.0);
  EXPECT_THROW(chamfer(Cloud{}, q), ContractError);
}

TEST(Emd, MatchesExhaustivePermutations) {
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    const auto a = random_cloud(8, rng), b = random_cloud(8, rng);
    EXPECT_NEAR(emd(a, b), brute_emd(a, b), 1e-12);
  }
}

TEST(Emd, CrossedPairingIsChosen) {
  const Cloud a{{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}};
  const Cloud b{{1.1, 0.0, 0.0}, {0.1, 0.0, 0.0}};
  EXPECT_NEAR(emd(a, b), 0.2, 1e-12);
}

TEST(Emd, ZeroExactlyOnEqualMultisets) {
  Rng rng(4);
  auto a = random_cloud(20, rng);
  auto b = a;
  std::shuffle(b.begin(), b.end(), rng);
  EXPECT_EQ(emd(a, b), 0.0);
  b[3][1] += 1e-3;
  EXPECT_GT(emd(a, b), 0.0);
  EXPECT_NEAR(emd(a, b), emd(b, a), 1e-12);
  EXPECT_THROW(emd(a, random_cloud(19, rng)), ContractError);
}

TEST(Emd, ResampledIsDeterministicAndBounded) {
  Rng rng(5);
  const auto a = random_cloud(40, rng), b = random_cloud(70, rng);
  EXPECT_EQ(emd_resampled(a, b, 32, 9), emd_resampled(a, b, 32, 9));
  EXPECT_THROW(emd_resampled(a, b, 257, 9), ContractError);
  EXPECT_THROW(emd_resampled(a, b, 0, 9), ContractError);
}

TEST(Assignment, MatchesBruteForce) {
  Rng rng(6);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::MatrixXd c(6, 6);
    for (Eigen::Index i = 0; i < 36; ++i) c(i) = u(rng);
    const auto m = solve_assignment(c);
    double got = 0.0;
    std::vector<std::size_t> cols(m);
    std::sort(cols.begin(), cols.end());
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_EQ(cols[i], i);
      got += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m[i]));
    }
    std::vector<std::size_t> perm{0, 1, 2, 3, 4, 5};
    double best = std::numeric_limits<double>::infinity();
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < 6; ++i) s += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]));
      best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(got, best, 1e-9);
  }
  EXPECT_THROW(solve_assignment(Eigen::MatrixXd(2, 3)), ContractError);
}

TEST(PointCloud, EmptyPartCollapsesToBoxCentre) {
  auto s = empty_sample(2, 8, "t");
  s.mask = PartMask::all(2);
  s.boxes[1] = Box6{{0.2F, 0.3F, 0.4F}, {0.1F, 0.1F, 0.1F}};
  const auto pts = part_points(s, 1);
  ASSERT_EQ(pts.size(), 1U);
  EXPECT_FLOAT_EQ(static_cast<float>(pts[0][1]), 0.3F);
  s.parts[0] = corners(8);
  const auto cloud = point_cloud(s);
  EXPECT_EQ(cloud.points.size(), 9U);
  EXPECT_EQ(std::count(cloud.part_id.begin(), cloud.part_id.end(), 1U), 1);
}

TEST(PointCloud, StridedResampling) {
  Rng rng(7);
  const auto a = random_cloud(10, rng);
  const auto up = resample_strided(a, 25);
  EXPECT_EQ(up.size(), 25U);
  EXPECT_EQ(up.front(), a.front());
  EXPECT_EQ(resample_strided(a, 10), a);
  EXPECT_THROW(resample_strided(Cloud{}, 3), ContractError);
}

TEST(ShapeDistance, ZeroOnSelfAndSymmetric) {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = sagnet::testing::random_sample(3, 8, rng, 0.3), y = sagnet::testing::random_sample(3, 8, rng, 0.3);
    EXPECT_EQ(shape_distance(x, x), 0.0);
    EXPECT_NEAR(shape_distance(x, y), shape_distance(y, x), 1e-9);
    DistanceOptions emd_opt;
    emd_opt.ground = Ground::kEmd;
    EXPECT_EQ(shape_distance(x, x, emd_opt), 0.0);
  }
  EXPECT_THROW(shape_distance(sagnet::testing::random_sample(2, 8, rng), sagnet::testing::random_sample(3, 8, rng)),
               ContractError);
}

TEST(ShapeDistance, ShiftedBoxesOracle) {
  Rng rng(9);
  const std::array<float, 3> delta{0.0006F, -0.0004F, 0.0003F};
  auto x = sagnet::testing::random_sample(3, 8, rng);
  auto y = x;
  double expected = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (int a = 0; a < 3; ++a) y.boxes[i].center[a] += delta[a];
    // The box centre moves by the rounded delta; every resampled point moves with it
    // and, being far closer to its own image than to any other point, pairs with it.
    const auto px = resample_strided(part_points(x, i), kChamferBudget);
    const auto py = resample_strided(part_points(y, i), kChamferBudget);
    expected += box_distance(x.boxes[i], y.boxes[i]) + brute_chamfer(px, py);
    double shift = 0.0;
    for (int a = 0; a < 3; ++a) shift += std::pow(static_cast<double>(y.boxes[i].center[a]) - x.boxes[i].center[a], 2);
    EXPECT_NEAR(brute_chamfer(px, py), 2.0 * kChamferBudget * std::sqrt(shift), 1e-4);
  }
  EXPECT_NEAR(shape_distance(x, y), expected, 1e-9);
}

TEST(ShapeDistance, SkipsPartsMissingOnEitherSide) {
  Rng rng(10);
  auto x = sagnet::testing::random_sample(3, 8, rng), y = sagnet::testing::random_sample(3, 8, rng);
  const double d1 = part_distance(x, 1, y, 1);
  x.mask.flags[1] = 0;
  EXPECT_NEAR(shape_distance(x, y), part_distance(x, 0, y, 0) + part_distance(x, 2, y, 2), 1e-12);
  x.mask.flags[1] = 1;
  EXPECT_NEAR(shape_distance(x, y), part_distance(x, 0, y, 0) + d1 + part_distance(x, 2, y, 2), 1e-12);
}

TEST(MmdCov, SelfMatchIsPerfect) {
  Rng rng(11);
  std::vector<ShapeSample> xs;
  for (int n = 0; n < 6; ++n) xs.push_back(sagnet::testing::random_sample(3, 8, rng, 0.3));
  for (Ground g : {Ground::kChamfer, Ground::kEmd}) {
    DistanceOptions opt;
    opt.ground = g;
    const auto r = mmd_cov(xs, xs, opt, 2);
    EXPECT_EQ(r.mmd, 0.0);
    EXPECT_EQ(r.cov, 1.0);
  }
  EXPECT_THROW(mmd_cov({}, xs), ContractError);
}

TEST(MmdCov, MatchesExhaustiveOracle) {
  Rng rng(12);
  std::vector<ShapeSample> gen, train;
  for (int n = 0; n < 3; ++n) gen.push_back(sagnet::testing::random_sample(2, 8, rng, 0.4));
  for (int n = 0; n < 4; ++n) train.push_back(sagnet::testing::random_sample(2, 8, rng, 0.4));
  const auto got = mmd_cov(gen, train);

  std::set<std::size_t> covered;
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < 2; ++i) {
      if (!gen[g].mask.present(i)) continue;
      double best = std::numeric_limits<double>::infinity();
      std::size_t owner = 99;
      for (std::size_t t = 0; t < 4; ++t) {
        if (!train[t].mask.present(i)) continue;
        const double d = part_distance(gen[g], i, train[t], i);
        if (d < best) {
          best = d;
          owner = t;
        }
      }
      if (owner != 99) covered.insert(owner);
    }
  double mmd = 0.0;
  for (std::size_t t = 0; t < 4; ++t) {
    double acc = 0.0;
    int parts = 0;
    for (std::size_t i = 0; i < 2; ++i) {
      if (!train[t].mask.present(i)) continue;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t g = 0; g < 3; ++g)
        if (gen[g].mask.present(i)) best = std::min(best, part_distance(gen[g], i, train[t], i));
      acc += best;
      ++parts;
    }
    mmd += acc / parts;
  }
  EXPECT_NEAR(got.mmd, mmd / 4.0, 1e-12);
  EXPECT_DOUBLE_EQ(got.cov, static_cast<double>(covered.size()) / 4.0);
  EXPECT_GE(got.cov, 0.25);
  EXPECT_LE(got.cov, 1.0);
}

TEST(Symmetry, MirroredPairScoresZero) {
  Rng rng(13);
  const auto g = sagnet::testing::random_grid(8, rng);
  const Box6 left{{0.3F, 0.4F, 0.5F}, {0.2F, 0.3F, 0.25F}};
  ShapeSample s = two_part(g, left, g, left);
  auto [mirrored, box] = reflect_part(s, 0, MirrorPlane{0, 0.5});
  s.parts[1] = mirrored;
  s.boxes[1] = box;
  EXPECT_NEAR(box.center[0], 0.7F, 1e-6);
  EXPECT_NEAR(symmetry_score(s, 0, 1), 0.0, 1e-6);
  EXPECT_NEAR(symmetry_score(s, 1, 0), 0.0, 1e-6);
  EXPECT_EQ(default_mirror_plane(s).axis, 0);
  EXPECT_NEAR(default_mirror_plane(s).offset, 0.5, 1e-6);
}

TEST(Symmetry, GrowsWithDisplacement) {
  const Box6 left{{0.3F, 0.5F, 0.5F}, {0.2F, 0.2F, 0.2F}};
  ShapeSample s = two_part(corners(8), left, corners(8), Box6{{0.7F, 0.5F, 0.5F}, {0.2F, 0.2F, 0.2F}});
  const MirrorPlane plane{0, 0.5};
  double prev = symmetry_score(s, 0, 1, plane);
  EXPECT_NEAR(prev, 0.0, 1e-6);
  for (int step = 1; step <= 10; ++step) {
    ShapeSample moved = s;
    moved.boxes[1].center[1] += 0.01F * static_cast<float>(step);
    moved.boxes[1].center[2] -= 0.005F * static_cast<float>(step);
    const double score = symmetry_score(moved, 0, 1, plane);
    EXPECT_GT(score, prev) << "step " << step;
    prev = score;
  }
}

TEST(Symmetry, AsymmetricPairScoresHigher) {
  Rng rng(14);
  const auto g = sagnet::testing::random_grid(8, rng);
  const Box6 left{{0.3F, 0.4F, 0.5F}, {0.2F, 0.3F, 0.25F}};
  ShapeSample sym = two_part(g, left, g, left);
  auto [m, b] = reflect_part(sym, 0, MirrorPlane{0, 0.5});
  sym.parts[1] = m;
  sym.boxes[1] = b;
  for (int trial = 0; trial < 5; ++trial) {
    ShapeSample asym = two_part(g, left, sagnet::testing::random_grid(8, rng), sagnet::testing::random_box(rng));
    EXPECT_GT(symmetry_score(asym, 0, 1, MirrorPlane{0, 0.5}), symmetry_score(sym, 0, 1, MirrorPlane{0, 0.5}));
  }
  sym.mask.flags[1] = 0;
  EXPECT_THROW(symmetry_score(sym, 0, 1), ContractError);
}

TEST(Coplanarity, ClosedForms) {
  auto s = empty_sample(4, 4, "t");
  s.mask = PartMask::all(4);
  const std::array<std::array<float, 3>, 4> c{{{0.1F, 0.2F, 0.5F}, {0.8F, 0.1F, 0.5F}, {0.4F, 0.9F, 0.5F}, {0.6F, 0.6F, 0.5F}}};
  for (std::size_t i = 0; i < 4; ++i) s.boxes[i] = Box6{c[i], {0.1F, 0.1F, 0.1F}};
  EXPECT_NEAR(coplanarity_score(s, {0, 1, 2, 3}), 0.0, 1e-6);
  s.boxes[3].center[2] = 0.5F + 0.125F;
  EXPECT_NEAR(coplanarity_score(s, {0, 1, 2, 3}), 0.125, 1e-6);
  s.boxes[2].center = {0.45F, 0.15F, 0.5F};  // on the line through the first two
  EXPECT_THROW(coplanarity_score(s, {0, 1, 2, 3}), DegenerateGeometry);
  s.mask.flags[3] = 0;
  EXPECT_THROW(coplanarity_score(s, {0, 1, 3, 2}), ContractError);
}

TEST(Coplanarity, MatchesDeterminantOracle) {
  Rng rng(15);
  std::uniform_real_distribution<float> u(0.0F, 1.0F);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = empty_sample(4, 4, "t");
    s.mask = PartMask::all(4);
    for (auto& b : s.boxes) b = Box6{{u(rng), u(rng), u(rng)}, {0.1F, 0.1F, 0.1F}};
    std::array<std::array<double, 3>, 3> e{};
    for (int r = 0; r < 3; ++r)
      for (int a = 0; a < 3; ++a) e[r][a] = static_cast<double>(s.boxes[r + 1].center[a]) - s.boxes[0].center[a];
    const double det = e[0][0] * (e[1][1] * e[2][2] - e[1][2] * e[2][1]) - e[0][1] * (e[1][0] * e[2][2] - e[1][2] * e[2][0]) +
                       e[0][2] * (e[1][0] * e[2][1] - e[1][1] * e[2][0]);
    const double nx = e[0][1] * e[1][2] - e[0][2] * e[1][1], ny = e[0][2] * e[1][0] - e[0][0] * e[1][2],
                 nz = e[0][0] * e[1][1] - e[0][1] * e[1][0];
    // Volume of the parallelepiped over the area of its base.
    EXPECT_NEAR(coplanarity_score(s, {0, 1, 2, 3}), std::abs(det) / std::sqrt(nx * nx + ny * ny + nz * nz), 1e-9);
  }
}

TEST(Cavity, GeneratorJointsFitPerfectly) {
  const auto ds = joints::generate_dataset(40, 3, 16, true);
  const auto rep = cavity_scores(ds.samples, 2);
  EXPECT_EQ(rep.mean_r_o, 0.0);
  EXPECT_EQ(rep.mean_r_e, 1.0);
  EXPECT_EQ(rep.r_over, 1.0);
  EXPECT_EQ(rep.median_r, 0.0);
  EXPECT_EQ(rep.degenerate, 0U);
  for (const auto& e : rep.samples) EXPECT_EQ(e.r, 0.0);
}

TEST(Cavity, EmptyTenonFlaggedAsDegenerate) {
  auto ds = joints::generate_dataset(3, 4, 16);
  ds.samples[1].parts[joints::kTenon] = VoxelGrid(16);
  const auto rep = cavity_scores(ds.samples);
  EXPECT_EQ(rep.degenerate, 1U);
  EXPECT_TRUE(rep.samples[1].degenerate);
  EXPECT_EQ(rep.samples[1].r_e, 0.0);
  EXPECT_EQ(rep.samples[0].r, 0.0);
}

TEST(Cavity, ShuffledPairsAreWorseAndSignTestDetectsIt) {
  const auto ds = joints::generate_dataset(40, 5, 16);
  const auto shuffled = shuffled_pairs(ds.samples);
  EXPECT_EQ(shuffled[0].parts[joints::kMortise], ds.samples[1].parts[joints::kMortise]);
  EXPECT_EQ(shuffled[0].parts[joints::kTenon], ds.samples[0].parts[joints::kTenon]);
  const auto a = cavity_scores(ds.samples), b = cavity_scores(shuffled);
  std::vector<double> ra, rb;
  for (std::size_t n = 0; n < 40; ++n) {
    ra.push_back(a.samples[n].r);
    rb.push_back(b.samples[n].r);
    EXPECT_GE(b.samples[n].r, 0.0);
    EXPECT_LE(b.samples[n].r, 2.0);
  }
  EXPECT_LT(a.median_r, b.median_r);
  EXPECT_LT(sign_test_p(ra, rb), 0.01);
}

TEST(SignTest, BinomialValues) {
  const std::vector<double> lo(10, 0.0), hi(10, 1.0);
  EXPECT_NEAR(sign_test_p(lo, hi), 2.0 / 1024.0, 1e-12);
  EXPECT_NEAR(sign_test_p(hi, lo), 2.0 / 1024.0, 1e-12);
  EXPECT_EQ(sign_test_p(lo, lo), 1.0);
  const std::vector<double> a{0, 0, 1, 5}, b{1, 1, 0, 5};  // 2 up, 1 down, 1 tie
  EXPECT_NEAR(sign_test_p(a, b), 1.0, 1e-12);
  EXPECT_NEAR(median({3.0, 1.0, 2.0, 10.0}), 2.5, 1e-12);
}

TEST(Inception, UniformAndConfidentBounds) {
  const std::vector<std::vector<double>> uniform(16, std::vector<double>(8, 0.125));
  EXPECT_NEAR(inception_score(uniform), 1.0, 1e-12);
  std::vector<std::vector<double>> confident;
  for (int n = 0; n < 32; ++n) {
    std::vector<double> p(8, 0.0);
    p[n % 8] = 1.0;
    confident.push_back(p);
  }
  EXPECT_NEAR(inception_score(confident), 8.0, 1e-9);
  Rng rng(16);
  std::gamma_distribution<double> gamma(0.5, 1.0);
  std::vector<std::vector<double>> random;
  for (int n = 0; n < 50; ++n) {
    std::vector<double> p(8);
    double z = 0.0;
    for (auto& v : p) z += (v = gamma(rng) + 1e-12);
    for (auto& v : p) v /= z;
    random.push_back(p);
  }
  const double is = inception_score(random);
  EXPECT_GE(is, 1.0);
  EXPECT_LE(is, 8.0);
  EXPECT_THROW(inception_score({}), ContractError);
}

TEST(Classifier, UntrainedIsRejected) {
  ModeClassifier c;
  const auto ds = joints::generate_dataset(2, 1, 16);
  EXPECT_THROW(c.predict_proba(ds.samples), ContractError);
  EXPECT_THROW(inception_mode_score(ds.samples, c), ContractError);
}

TEST(Classifier, SmallTrainingRunLearnsModes) {
  ClassifierConfig cfg;
  cfg.channels = {4, 8, 8};
  cfg.train_count = 320;
  cfg.heldout_count = 80;
  cfg.iterations = 250;
  ModeClassifier c(cfg);
  c.train();
  EXPECT_TRUE(c.trained());
  EXPECT_GT(c.heldout_accuracy(), 0.5);

  sagnet::testing::TempDir dir("cls");
  c.save(dir / "cls.sagw");
  ModeClassifier d(cfg);
  d.load(dir / "cls.sagw", c.heldout_accuracy());
  const auto ds = joints::generate_dataset(16, 77, 16, true);
  EXPECT_EQ(c.predict_proba(ds.samples), d.predict_proba(ds.samples));
  const double is = inception_mode_score(ds.samples, c);
  EXPECT_GE(is, 1.0);
  EXPECT_LE(is, 8.0);
}

TEST(Retrieval, MatchesLinearScan) {
  Rng rng(17);
  std::vector<ShapeSample> data;
  for (int n = 0; n < 12; ++n) data.push_back(sagnet::testing::random_sample(2, 8, rng, 0.3));
  data.push_back(data[4]);  // exact duplicate: tie broken by index
  const auto q = data[4];
  const auto r = knn_retrieve(q, data, 5, {}, 2);
  ASSERT_EQ(r.neighbors.size(), 5U);
  EXPECT_FALSE(r.clamped);
  EXPECT_EQ(r.neighbors[0].index, 4U);
  EXPECT_EQ(r.neighbors[0].distance, 0.0);
  EXPECT_EQ(r.neighbors[1].index, 12U);

  std::vector<std::pair<double, std::size_t>> scan;
  for (std::size_t i = 0; i < data.size(); ++i) scan.emplace_back(shape_distance(q, data[i]), i);
  std::sort(scan.begin(), scan.end());
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(r.neighbors[i].index, scan[i].second);
    EXPECT_EQ(r.neighbors[i].distance, scan[i].first);
  }
  EXPECT_EQ(knn_retrieve(q, data).neighbors.size(), 3U);
  const auto all = knn_retrieve(q, data, 100);
  EXPECT_TRUE(all.clamped);
  EXPECT_EQ(all.neighbors.size(), data.size());
  EXPECT_THROW(knn_retrieve(q, {}), ContractError);
}

TEST(Curves, ThresholdPercentages) {
  const std::vector<double> scores{0.1, 0.2, 0.2, 0.5};
  const std::vector<double> thresholds{0.0, 0.2, 1.0};
  const auto c = threshold_curve(scores, thresholds);
  ASSERT_EQ(c.size(), 3U);
  EXPECT_EQ(c[0].second, 0.0);
  EXPECT_EQ(c[1].second, 75.0);
  EXPECT_EQ(c[2].second, 100.0);
  EXPECT_EQ(curve_csv(c), "threshold,percentage\n0,0\n0.2,75\n1,100\n");
}
