#include <doctest.h>

#include "ensa/data.hpp"
#include "oracles.hpp"

#include <filesystem>
#include <sstream>

using namespace ensa;

namespace {

std::string epcd_bytes(const Dataset& data) {
  std::ostringstream os(std::ios::binary);
  for (const PointCloud& c : data) write_epcd(os, c);
  return os.str();
}

std::size_t parse_offset(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  try {
    read_dataset(is, "mem");
  } catch (const ParseError& e) {
    return e.offset();
  }
  return static_cast<std::size_t>(-1);
}

std::string csv_error(const std::string& text) {
  std::istringstream is(text);
  try {
    read_csv(is, "mem.csv");
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("task names") {
  for (SyntheticTask t :
       {SyntheticTask::LocalDensity, SyntheticTask::GlobalCentroidOffset, SyntheticTask::Mixed}) {
    CHECK(parse_task(task_name(t)) == t);
  }
  CHECK(task_target_dim(SyntheticTask::LocalDensity) == 1);
  CHECK(task_target_dim(SyntheticTask::GlobalCentroidOffset) == 3);
  CHECK(task_target_dim(SyntheticTask::Mixed) == 4);
  CHECK_THROWS_AS(parse_task("density"), ValueError);
}

TEST_CASE("spec validation") {
  auto bad = [](auto edit) {
    SyntheticTaskSpec s;
    edit(s);
    CHECK_THROWS(generate(s, 1));
  };
  bad([](SyntheticTaskSpec& s) { s.clusters = 0; });
  bad([](SyntheticTaskSpec& s) { s.n = 1; });
  bad([](SyntheticTaskSpec& s) { s.noise_sigma = -1; });
  bad([](SyntheticTaskSpec& s) { s.radius = -0.5; });
  bad([](SyntheticTaskSpec& s) { s.box = 0; });
  bad([](SyntheticTaskSpec& s) { s.centers = Matrix::Zero(3, 3); });
  SyntheticTaskSpec ok;
  CHECK_THROWS_AS(generate(ok, 0), ValueError);
}

TEST_CASE("one blob: the offset points at the blob centroid") {
  SyntheticTaskSpec s;
  s.n = 50;
  s.clusters = 1;
  s.seed = 3;
  const PointCloud c = generate(s, 1).front();
  CHECK(c.features == c.positions);
  const Eigen::RowVector3d centroid = c.positions.colwise().mean();
  for (Index i = 0; i < 50; ++i) {
    CHECK((c.targets.row(i) - (centroid - c.positions.row(i))).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("noise-free blobs give exact targets") {
  SyntheticTaskSpec s;
  s.n = 10;
  s.clusters = 2;
  s.noise_sigma = 0.0;
  s.centers = Matrix::Zero(2, 3);
  s.centers(0, 0) = 10.0;
  s.centers(1, 0) = -10.0;
  const PointCloud c = generate(s, 1).front();
  for (Index i = 0; i < 10; ++i) {
    const double x = i % 2 == 0 ? 10.0 : -10.0;
    CHECK(c.positions.row(i) == Eigen::RowVector3d(x, 0, 0));
    CHECK(c.targets.row(i) == Eigen::RowVector3d(-2 * x, 0, 0));
  }
}

TEST_CASE("density matches a pairwise count") {
  SyntheticTaskSpec s;
  s.task = SyntheticTask::LocalDensity;
  s.n = 120;
  s.clusters = 3;
  s.noise_sigma = 0.1;
  s.radius = 0.15;
  s.seed = 9;
  const PointCloud c = generate(s, 1).front();
  REQUIRE(c.target_dim() == 1);
  double total = 0.0;
  for (Index i = 0; i < 120; ++i) {
    int hits = 0;
    for (Index j = 0; j < 120; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) d2 += std::pow(c.positions(j, a) - c.positions(i, a), 2);
      if (d2 <= 0.15 * 0.15) ++hits;
    }
    CHECK(c.targets(i, 0) == static_cast<double>(static_cast<float>(hits / 120.0)));
    total += hits;
  }
  CHECK(total > 0);
}

TEST_CASE("mixed targets concatenate density and offset") {
  SyntheticTaskSpec s;
  s.n = 40;
  s.clusters = 4;
  s.seed = 11;
  s.task = SyntheticTask::Mixed;
  const PointCloud mixed = generate(s, 1).front();
  s.task = SyntheticTask::LocalDensity;
  const PointCloud dens = generate(s, 1).front();
  s.task = SyntheticTask::GlobalCentroidOffset;
  const PointCloud off = generate(s, 1).front();
  REQUIRE(mixed.target_dim() == 4);
  CHECK(mixed.positions == off.positions);
  CHECK(mixed.targets.col(0) == dens.targets.col(0));
  CHECK(mixed.targets.rightCols(3) == off.targets);
}

TEST_CASE("generation is seeded per sample") {
  SyntheticTaskSpec s;
  s.n = 30;
  s.clusters = 3;
  s.seed = 100;
  const Dataset a = generate(s, 4), b = generate(s, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a[i].positions == b[i].positions);
    CHECK(a[i].targets == b[i].targets);
  }
  CHECK(a[0].positions != a[1].positions);
  SyntheticTaskSpec t = s;
  t.seed = 100 ^ 3;
  CHECK(generate(t, 1).front().positions == a[3].positions);
}

TEST_CASE("blobs are well separated and points cycle over them") {
  SyntheticTaskSpec s;
  s.n = 30;
  s.clusters = 3;
  s.noise_sigma = 0.0;
  s.seed = 21;
  const PointCloud c = generate(s, 1).front();
  for (Index i = 3; i < 30; ++i) CHECK(c.positions.row(i) == c.positions.row(i % 3));
  for (Index a = 0; a < 3; ++a) {
    CHECK(c.positions.row(a).cwiseAbs().maxCoeff() <= 1.0);
    for (Index b = a + 1; b < 3; ++b) {
      CHECK((c.positions.row(a) - c.positions.row(b)).norm() >= 0.8 - 1e-6);
    }
  }
}

TEST_CASE("binary records round-trip bit for bit") {
  SyntheticTaskSpec s;
  s.n = 33;
  s.task = SyntheticTask::Mixed;
  const Dataset data = generate(s, 3);
  std::istringstream is(epcd_bytes(data), std::ios::binary);
  const Dataset back = read_dataset(is, "mem");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].positions == data[i].positions);
    CHECK(back[i].features == data[i].features);
    CHECK(back[i].targets == data[i].targets);
  }
  CHECK(epcd_bytes(data).size() == 3 * (16 + 4 * 33 * (3 + 3 + 4)));

  const auto dir = std::filesystem::temp_directory_path() / "ensa_test_data";
  std::filesystem::create_directories(dir);
  save_dataset(dir / "d.epcd", data);
  CHECK(load_dataset(dir / "d.epcd")[2].targets == data[2].targets);
  std::filesystem::remove_all(dir);
  CHECK_THROWS(load_dataset(dir / "missing.epcd"));
}

TEST_CASE("malformed binary records report byte offsets") {
  SyntheticTaskSpec s;
  s.n = 4;
  s.clusters = 1;
  const Dataset data = generate(s, 2);
  const std::string good = epcd_bytes(data);
  const std::size_t record = good.size() / 2;

  std::string bad = good;
  bad[0] = 'X';
  CHECK(parse_offset(bad) == 0);
  bad = good;
  bad[record + 1] = 'X';
  CHECK(parse_offset(bad) == record);
  bad = good;
  for (int i = 0; i < 4; ++i) bad[4 + static_cast<std::size_t>(i)] = 0;
  CHECK(parse_offset(bad) == 4);
  CHECK(parse_offset(good.substr(0, good.size() - 2)) == good.size() - 4);
  CHECK(parse_offset(good.substr(0, 6)) == 4);
}

TEST_CASE("csv round trip") {
  std::mt19937_64 r(5);
  PointCloud c;
  c.positions = oracle::uniform_cloud(1000, r, -3, 3);
  c.features = oracle::random_matrix(1000, 2, r);
  c.targets = oracle::random_matrix(1000, 3, r);
  std::stringstream ss;
  write_csv(ss, c);
  const PointCloud back = read_csv(ss, "mem.csv");
  CHECK((back.positions - c.positions).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK((back.features - c.features).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK((back.targets - c.targets).cwiseAbs().maxCoeff() <= 1e-6);

  std::istringstream no_targets("x,y,z,f1\n1,2,3,4\n5,6,7,8\n");
  const PointCloud nt = read_csv(no_targets, "mem.csv");
  CHECK(nt.size() == 2);
  CHECK(nt.target_dim() == 0);
  CHECK(nt.features(1, 0) == 8.0);

  std::istringstream reordered("f1,z,y,x,t1\n4,3,2,1,9\n");
  const PointCloud ro = read_csv(reordered, "mem.csv");
  CHECK(ro.positions.row(0) == Eigen::RowVector3d(1, 2, 3));
  CHECK(ro.targets(0, 0) == 9.0);
}

TEST_CASE("csv errors name the problem") {
  CHECK(csv_error("x,z,f1\n1,2,3\n").find("missing column 'y'") != std::string::npos);
  CHECK(csv_error("x,y,z,f2\n1,2,3,4\n").find("'f1'") != std::string::npos);
  CHECK(csv_error("x,y,z,f1,f1\n1,2,3,4,5\n").find("duplicate column 'f1'") != std::string::npos);
  CHECK(csv_error("x,y,z,f1,w\n1,2,3,4,5\n").find("unexpected column 'w'") != std::string::npos);
  CHECK(csv_error("x,y,z,f1\n1,2,3,4\n1,2,3\n").find("line 3") != std::string::npos);
  CHECK(csv_error("x,y,z,f1\n1,2,abc,4\n").find("'z'") != std::string::npos);
  CHECK(csv_error("").find("header") != std::string::npos);

  std::istringstream is("x,y,z,f1\n1,2,3,4\n1,2,q,4\n");
  try {
    read_csv(is, "mem.csv");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 3);
  }
}
