#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "headgen/geomio.hpp"
#include "headgen/headmodel.hpp"
#include "oracles.hpp"

#include <filesystem>
#include <fstream>

using namespace headgen;
using namespace headgen::geomio;

namespace {

Mesh unit_cube() {
  Mesh m;
  m.vertices.resize(8, 3);
  int k = 0;
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) m.vertices.row(k++) << x - 0.5, y - 0.5, z - 0.5;
  // 12 triangles, outward orientation
  const int f[12][3] = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
                        {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  m.faces.resize(12, 3);
  for (int i = 0; i < 12; ++i) m.faces.row(i) << f[i][0], f[i][1], f[i][2];
  return m;
}

Scan head_scan(uint64_t seed = 7) {
  headmodel::ModelGenConfig cfg;
  cfg.subdivisions = 2;
  cfg.n_beta = 8;
  cfg.seed = seed;
  const auto model = headmodel::generate_template_model(cfg);
  Scan scan;
  headmodel::HeadParams p(cfg.n_beta);
  p.theta[3 * headmodel::kJointJaw] = 0.1;
  scan.mesh = headmodel::make_synthetic_scan_mesh(model, p, 1);
  scan.params = p;
  scan.subject_id = "s0";
  return scan;
}

std::string slurp(const std::string& path) { return read_text_file(path); }

}  // namespace

TEST_CASE("closest_point_on_triangle: regions and degenerate triangles") {
  const Vec3 a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
  Vec3 bary;
  // interior
  Vec3 q = closest_point_on_triangle(Vec3(0.2, 0.2, 1.0), a, b, c, &bary);
  CHECK((q - Vec3(0.2, 0.2, 0.0)).norm() < 1e-15);
  CHECK(bary.sum() == doctest::Approx(1.0));
  // vertex region
  q = closest_point_on_triangle(Vec3(-1, -1, 0), a, b, c, &bary);
  CHECK((q - a).norm() == 0.0);
  // edge region
  q = closest_point_on_triangle(Vec3(0.5, -2, 0), a, b, c, &bary);
  CHECK((q - Vec3(0.5, 0, 0)).norm() < 1e-15);
  // degenerate point-triangle
  q = closest_point_on_triangle(Vec3(3, 4, 5), a, a, a, &bary);
  CHECK((q - a).norm() == 0.0);
}

TEST_CASE("bvh closest: exact agreement with the brute-force scan") {
  const Scan scan = head_scan();
  const TriangleBvh bvh(scan.mesh.vertices, scan.mesh.faces);
  Rng rng(31);
  for (int i = 0; i < 300; ++i) {
    Vec3 p;
    for (int c = 0; c < 3; ++c) p[c] = uniform_real(rng, -0.8, 0.8);
    const auto got = bvh.closest(p);
    const auto ref = oracles::closest_triangle_scan(scan.mesh, p);
    CHECK(got.triangle == ref.triangle);
    CHECK(got.dist_sq == ref.dist_sq);
  }
}

TEST_CASE("winding number: unit cube center and far point") {
  Scan scan;
  scan.mesh = unit_cube();
  CHECK(winding_number(scan.mesh, Vec3(0, 0, 0)) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(winding_number(scan.mesh, Vec3(2, 2, 2)) == doctest::Approx(0.0).epsilon(1e-9));
  Mat pts(2, 3);
  pts << 0, 0, 0, 2, 2, 2;
  const Vec labels = label_occupancy(scan, pts);
  CHECK(labels[0] == 1.0);
  CHECK(labels[1] == 0.0);
}

TEST_CASE("winding number: invariant under face reordering") {
  const Scan scan = head_scan();
  Mesh shuffled = scan.mesh;
  // rotate face list
  FaceMat f2(shuffled.faces.rows(), 3);
  for (int i = 0; i < f2.rows(); ++i) f2.row(i) = shuffled.faces.row((i + 17) % f2.rows());
  shuffled.faces = f2;
  Rng rng(32);
  for (int i = 0; i < 20; ++i) {
    Vec3 p;
    for (int c = 0; c < 3; ++c) p[c] = uniform_real(rng, -0.6, 0.6);
    CHECK(winding_number(scan.mesh, p) == doctest::Approx(winding_number(shuffled, p)).epsilon(1e-12));
  }
}

TEST_CASE("label_occupancy: on-surface points follow the documented tie rule") {
  const Scan scan = head_scan();
  Mat pts(3, 3);
  for (int k = 0; k < 3; ++k) pts.row(k) = scan.mesh.vertices.row(40 * k + 3);
  const Vec labels = label_occupancy(scan, pts);
  for (int k = 0; k < 3; ++k) {
    const double w = winding_number(scan.mesh, pts.row(k).transpose());
    CHECK(labels[k] == ((w >= 0.5) ? 1.0 : 0.0));
  }
}

TEST_CASE("label_occupancy: winding agrees with the ray-parity oracle") {
  const Scan scan = head_scan();
  REQUIRE(scan.watertight());
  Rng rng(33);
  Mat pts(500, 3);
  for (int i = 0; i < 500; ++i)
    for (int c = 0; c < 3; ++c) pts(i, c) = uniform_real(rng, -0.7, 0.7);
  const Vec winding = label_occupancy(scan, pts, InsideTest::WindingNumber);
  const Vec parity = label_occupancy(scan, pts, InsideTest::RayParity);
  int agree_oracle = 0;
  for (int i = 0; i < 500; ++i) {
    const bool inside = oracles::ray_parity_inside(scan.mesh, pts.row(i).transpose(), 1000 + i);
    if ((winding[i] > 0.5) == inside) agree_oracle++;
    CHECK(winding[i] == parity[i]);
  }
  CHECK(agree_oracle == 500);
}

TEST_CASE("label_occupancy: parity mode on a non-watertight mesh is a contract violation") {
  Scan scan;
  scan.mesh = unit_cube();
  // drop one face to open the surface
  FaceMat f = scan.mesh.faces.topRows(11);
  scan.mesh.faces = f;
  Mat pts(1, 3);
  pts.setZero();
  CHECK_THROWS_AS(label_occupancy(scan, pts, InsideTest::RayParity), ContractViolation);
}

TEST_CASE("sample_training_points: counts, sigma bound, determinism") {
  Scan scan = head_scan();
  SampleCounts counts;
  counts.near_surface = 400;
  counts.uniform = 200;
  counts.surface = 150;
  const SampleSet a = sample_training_points(scan, 99, counts);
  CHECK(a.points.rows() == 600);
  CHECK(a.occ.size() == 600);
  CHECK(a.surface_points.rows() == 150);
  CHECK(a.surface_colors.rows() == 150);
  CHECK(a.surface_normals.rows() == 150);

  const TriangleBvh bvh(scan.mesh.vertices, scan.mesh.faces);
  int within = 0;
  for (int i = 0; i < counts.near_surface; ++i) {
    const double d = std::sqrt(bvh.closest(a.points.row(i).transpose()).dist_sq);
    if (d <= 4 * 0.01) within++;
  }
  CHECK(within >= static_cast<int>(0.99 * counts.near_surface));

  const SampleSet b = sample_training_points(scan, 99, counts);
  CHECK(hash_matrix(a.points) == hash_matrix(b.points));
  CHECK(hash_matrix(a.surface_colors) == hash_matrix(b.surface_colors));

  // inside/outside labels agree with the parity oracle on a subsample
  for (int i = 0; i < 50; ++i) {
    const int idx = 400 + i;  // uniform block
    const bool inside =
        oracles::ray_parity_inside(scan.mesh, a.points.row(idx).transpose(), 500 + i);
    CHECK((a.occ[idx] > 0.5) == inside);
  }
}

TEST_CASE("sample sidecar cache: hit on matching key, rebuild on seed change") {
  Scan scan = head_scan();
  SampleCounts counts;
  counts.near_surface = 64;
  counts.uniform = 32;
  counts.surface = 16;
  const auto dir = std::filesystem::temp_directory_path() / "headgen_sidecar_test";
  std::filesystem::create_directories(dir);
  const std::string sidecar = (dir / "scan.samples.bin").string();
  std::filesystem::remove(sidecar);
  const SampleSet fresh = load_or_build_samples(scan, sidecar, 5, counts);
  REQUIRE(std::filesystem::exists(sidecar));
  const SampleSet cached = load_or_build_samples(scan, sidecar, 5, counts);
  CHECK(hash_matrix(fresh.points) == hash_matrix(cached.points));
  const SampleSet reseeded = load_or_build_samples(scan, sidecar, 6, counts);
  CHECK(hash_matrix(fresh.points) != hash_matrix(reseeded.points));
  std::filesystem::remove_all(dir);
}

TEST_CASE("marching cubes: analytic sphere radius bound and topology") {
  const double radius = 0.5;
  const int res = 64;
  auto field = [&](const Mat& pts) {
    Vec v(pts.rows());
    for (int i = 0; i < pts.rows(); ++i) v[i] = 0.5 + (radius - pts.row(i).norm());
    return v;
  };
  const Mesh mesh =
      marching_cubes(BatchField(field), Vec3(-1, -1, -1), Vec3(1, 1, 1), res);
  REQUIRE(mesh.face_count() > 0);
  const double h = 2.0 / res;
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    const double r = mesh.vertices.row(i).norm();
    CHECK(r >= radius - 1.5 * h);
    CHECK(r <= radius + 1.5 * h);
  }
  // closed, genus 0
  CHECK(boundary_edge_count(mesh) == 0);
  std::map<std::pair<int, int>, int> edges;
  for (int f = 0; f < mesh.face_count(); ++f)
    for (int k = 0; k < 3; ++k)
      edges[std::minmax(mesh.faces(f, k), mesh.faces(f, (k + 1) % 3))]++;
  const int euler = mesh.vertex_count() - static_cast<int>(edges.size()) + mesh.face_count();
  CHECK(euler == 2);
  // outward orientation: face normals point away from the center
  int outward = 0;
  for (int f = 0; f < mesh.face_count(); ++f) {
    const Vec3 a = mesh.vertices.row(mesh.faces(f, 0)).transpose();
    const Vec3 b = mesh.vertices.row(mesh.faces(f, 1)).transpose();
    const Vec3 c = mesh.vertices.row(mesh.faces(f, 2)).transpose();
    if ((b - a).cross(c - a).dot(a + b + c) > 0) outward++;
  }
  CHECK(outward == mesh.face_count());
  // no degenerate faces survive cleanup
  for (int f = 0; f < mesh.face_count(); ++f) {
    const Vec3 a = mesh.vertices.row(mesh.faces(f, 0)).transpose();
    const Vec3 b = mesh.vertices.row(mesh.faces(f, 1)).transpose();
    const Vec3 c = mesh.vertices.row(mesh.faces(f, 2)).transpose();
    CHECK((b - a).cross(c - a).norm() > 0.0);
  }
}

TEST_CASE("marching cubes: constant empty field gives an empty mesh") {
  auto field = [](const Mat& pts) { return Vec::Zero(pts.rows()); };
  const Mesh mesh = marching_cubes(BatchField(field), Vec3(-1, -1, -1), Vec3(1, 1, 1), 16);
  CHECK(mesh.vertex_count() == 0);
  CHECK(mesh.face_count() == 0);
}

TEST_CASE("marching cubes: watertight on a bumpy random smooth field") {
  auto field = [](const Mat& pts) {
    Vec v(pts.rows());
    for (int i = 0; i < pts.rows(); ++i) {
      const Vec3 p = pts.row(i).transpose();
      v[i] = 0.5 + (0.45 - p.norm()) + 0.08 * value_noise3(p * 3.0, 77, 2);
    }
    return v;
  };
  const Mesh mesh = marching_cubes(BatchField(field), Vec3(-1, -1, -1), Vec3(1, 1, 1), 32);
  REQUIRE(mesh.face_count() > 0);
  CHECK(boundary_edge_count(mesh) == 0);
}

TEST_CASE("marching cubes: resolution below 8 is rejected") {
  auto field = [](const Mat& pts) { return Vec::Zero(pts.rows()); };
  CHECK_THROWS_AS(marching_cubes(BatchField(field), Vec3(-1, -1, -1), Vec3(1, 1, 1), 4),
                  std::invalid_argument);
}

TEST_CASE("chamfer/f-score: identical meshes score 0 and 100") {
  const Scan scan = head_scan();
  const auto m = chamfer_and_fscore(scan.mesh, scan.mesh, 0.05, 2000);
  CHECK(m.chamfer == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(m.fscore == doctest::Approx(100.0));
}

TEST_CASE("chamfer/f-score: symmetric by construction") {
  const Scan a = head_scan(7);
  const Scan b = head_scan(8);
  const auto ab = chamfer_and_fscore(a.mesh, b.mesh, 0.05, 1500);
  const auto ba = chamfer_and_fscore(b.mesh, a.mesh, 0.05, 1500);
  CHECK(ab.chamfer == ba.chamfer);
  CHECK(ab.fscore == ba.fscore);
}

TEST_CASE("f-score: drops below 100 when one mesh is shifted past tau") {
  const Scan scan = head_scan();
  Mesh shifted = scan.mesh;
  shifted.vertices.col(2).array() += 0.1;  // 2*tau along the face normal region
  const auto m = chamfer_and_fscore(scan.mesh, shifted, 0.05, 3000);
  CHECK(m.fscore < 100.0);
  CHECK(m.chamfer > 0.0);
}

TEST_CASE("point-cloud chamfer: exact match with the quadratic oracle") {
  Rng rng(34);
  Mat a(137, 3), b(211, 3);
  for (int i = 0; i < a.size(); ++i) a(i / 3, i % 3) = uniform_real(rng, -1, 1);
  for (int i = 0; i < b.size(); ++i) b(i / 3, i % 3) = uniform_real(rng, -1, 1);
  const auto got = chamfer_and_fscore_points(a, b, 0.15);
  const auto ref = oracles::chamfer_points_quadratic(a, b, 0.15);
  CHECK(got.chamfer == ref.chamfer);
  CHECK(got.fscore == ref.fscore);
}

TEST_CASE("color distance: identical meshes give 0, gray-vs-black gives 50") {
  const Scan scan = head_scan();
  CHECK(color_distance(scan.mesh, scan.mesh, 1500) == doctest::Approx(0.0).epsilon(1e-12));

  Mesh gray = scan.mesh, black = scan.mesh;
  gray.colors = Mat::Constant(gray.vertex_count(), 3, 0.5);
  black.colors = Mat::Zero(black.vertex_count(), 3);
  CHECK(color_distance(gray, black, 1500) == doctest::Approx(50.0).epsilon(1e-9));
}

TEST_CASE("color distance: agrees with the quadratic oracle on small meshes") {
  const Scan a = head_scan(7);
  const Scan b = head_scan(9);
  const double got = color_distance(a.mesh, b.mesh, 300, 92);
  const double ref = oracles::color_distance_quadratic(a.mesh, b.mesh, 300, 92);
  CHECK(got == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("color distance: missing colors raise invalid_argument") {
  const Scan scan = head_scan();
  Mesh no_colors = scan.mesh;
  no_colors.colors.resize(0, 3);
  CHECK_THROWS_AS(color_distance(scan.mesh, no_colors), std::invalid_argument);
}

TEST_CASE("region filter: restricts metrics to the face area") {
  const Scan a = head_scan(7);
  const Scan b = head_scan(8);
  RegionFilter region;
  // anchor on the frontal region
  std::vector<int> front;
  for (int i = 0; i < a.mesh.vertex_count(); ++i)
    if (a.mesh.vertices(i, 2) > 0.2) front.push_back(i);
  region.anchor_points.resize(static_cast<int>(front.size()), 3);
  for (size_t i = 0; i < front.size(); ++i)
    region.anchor_points.row(static_cast<int>(i)) = a.mesh.vertices.row(front[i]);
  region.radius = 0.05;
  const auto masked = chamfer_and_fscore(a.mesh, b.mesh, 0.05, 2000, 91, &region);
  const auto full = chamfer_and_fscore(a.mesh, b.mesh, 0.05, 2000, 91);
  CHECK(masked.chamfer >= 0.0);
  CHECK(masked.chamfer != full.chamfer);
}

TEST_CASE("ply: binary round-trip is bit exact") {
  const Scan scan = head_scan();
  const auto dir = std::filesystem::temp_directory_path() / "headgen_ply_test";
  std::filesystem::create_directories(dir);
  const std::string p1 = (dir / "a.ply").string(), p2 = (dir / "b.ply").string();
  write_ply(p1, scan.mesh, PlyFormat::BinaryLittleEndian, {"roundtrip check"});
  std::vector<std::string> comments;
  const Mesh back = read_ply(p1, &comments);
  CHECK(comments.size() == 1);
  write_ply(p2, back, PlyFormat::BinaryLittleEndian, {"roundtrip check"});
  CHECK(slurp(p1) == slurp(p2));
  CHECK(hash_matrix(back.vertices) == hash_matrix(scan.mesh.vertices));
  CHECK(hash_matrix(back.colors) == hash_matrix(scan.mesh.colors));
  std::filesystem::remove_all(dir);
}

TEST_CASE("ply ascii and obj: value-exact round-trip") {
  const Scan scan = head_scan();
  const auto dir = std::filesystem::temp_directory_path() / "headgen_ascii_test";
  std::filesystem::create_directories(dir);
  const std::string ply = (dir / "a.ply").string(), obj = (dir / "a.obj").string();
  write_ply(ply, scan.mesh, PlyFormat::Ascii);
  const Mesh from_ply = read_ply(ply);
  CHECK(hash_matrix(from_ply.vertices) == hash_matrix(scan.mesh.vertices));
  write_obj(obj, scan.mesh);
  const Mesh from_obj = read_obj(obj);
  CHECK(hash_matrix(from_obj.vertices) == hash_matrix(scan.mesh.vertices));
  CHECK(hash_matrix(from_obj.colors) == hash_matrix(scan.mesh.colors));
  CHECK(from_obj.faces == scan.mesh.faces);
  std::filesystem::remove_all(dir);
}

TEST_CASE("scan: params and subject id survive the ply round-trip") {
  Scan scan = head_scan();
  scan.params.beta[2] = 0.875;
  scan.params.psi[11] = -0.25;
  const auto dir = std::filesystem::temp_directory_path() / "headgen_scan_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "scan.ply").string();
  write_scan(path, scan);
  const Scan back = read_scan(path);
  CHECK(back.subject_id == "s0");
  CHECK((back.params.beta - scan.params.beta).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.params.theta - scan.params.theta).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.params.psi - scan.params.psi).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("mesh utilities: normals, area, boundary edges") {
  const Scan scan = head_scan();
  const Mat normals = compute_vertex_normals(scan.mesh);
  int outward = 0;
  for (int i = 0; i < scan.mesh.vertex_count(); ++i)
    if (normals.row(i).dot(scan.mesh.vertices.row(i)) > 0) outward++;
  CHECK(outward == scan.mesh.vertex_count());  // star-shaped shell
  CHECK(mesh_surface_area(scan.mesh) > 0.5);
  CHECK(boundary_edge_count(scan.mesh) == 0);
}
