#include <doctest.h>

#include <cstring>
#include <sstream>

#include "safelearn/reach_io.h"

using namespace safelearn;

namespace {

const ReachSolution& small_solution() {
  static const ReachSolution sol =
      solve_hji(AffineVerticalModel{}, Grid2D(-0.5, 3.3, 41, -3.0, 3.0, 41),
                SlabConstraint{}, DisturbanceBound::constant(-1.5, 1.5));
  return sol;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("value grid round-trips bit for bit") {
  const ReachSolution& sol = small_solution();
  std::stringstream buf;
  write_value_grid(buf, sol, 3);
  int version = -1;
  const ReachSolution back = read_value_grid(buf, &version);
  CHECK(version == 3);
  CHECK(back.value.grid == sol.value.grid);
  CHECK(back.value.converged == sol.value.converged);
  CHECK(back.value.steps == sol.value.steps);
  CHECK(same_bits(back.value.values, sol.value.values));
  CHECK(same_bits(back.value.surface, sol.value.surface));
  CHECK(same_bits(back.policy.u_star, sol.policy.u_star));
  CHECK(same_bits(back.policy.switching, sol.policy.switching));
  CHECK(back.policy.tie_accel == sol.policy.tie_accel);
  CHECK(back.policy.tie_speed == sol.policy.tie_speed);
  const State x{0.4, -1.0};
  CHECK(safe_action(back.policy, back.value, x) ==
        safe_action(sol.policy, sol.value, x));
}

TEST_CASE("corrupt grid files are rejected") {
  std::stringstream buf;
  write_value_grid(buf, small_solution());
  std::string text = buf.str();

  std::istringstream truncated(text.substr(0, text.size() - 100));
  CHECK_THROWS_AS(read_value_grid(truncated), FormatError);

  std::istringstream wrong("{\"format\":\"something-else\"}\n");
  CHECK_THROWS_AS(read_value_grid(wrong), FormatError);

  std::istringstream garbage("not json\n");
  CHECK_THROWS_AS(read_value_grid(garbage), FormatError);
}

TEST_CASE("bound files keep both envelopes") {
  const Grid2D g(-0.5, 3.3, 11, -3.0, 3.0, 9);
  std::vector<double> lo(g.size()), hi(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) {
    lo[k] = -0.1 * k;
    hi[k] = 0.05 * k + 0.3;
  }
  const auto bound = DisturbanceBound::gridded(g, lo, hi);
  std::stringstream buf;
  write_bound(buf, bound, g, 0.95, 1.959963984540054);
  const BoundFile back = read_bound(buf);
  CHECK(back.p == 0.95);
  CHECK(back.z == 1.959963984540054);
  for (int i = 0; i < g.n1(); ++i)
    for (int j = 0; j < g.n2(); ++j) {
      const auto a = bound.at(g.node(i, j));
      const auto b = back.bound.at(g.node(i, j));
      CHECK(b.lower == doctest::Approx(a.lower).epsilon(1e-12));
      CHECK(b.upper == doctest::Approx(a.upper).epsilon(1e-12));
    }
  std::stringstream grid_file;
  write_value_grid(grid_file, small_solution());
  CHECK_THROWS_AS(read_bound(grid_file), FormatError);
}

TEST_CASE("contour CSV lists segment endpoint pairs on the zero level") {
  std::ostringstream out;
  write_contour_csv(out, small_solution().value);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "segment,x1,x2");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows > 20);
  CHECK(rows % 2 == 0);
}
