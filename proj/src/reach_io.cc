#include "safelearn/reach_io.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include <json.hpp>

namespace safelearn {

namespace {

void put_field(std::ostream& out, const std::vector<double>& f) {
  std::string bytes(f.size() * 8, '\0');
  for (std::size_t k = 0; k < f.size(); ++k) {
    const auto bits = std::bit_cast<std::uint64_t>(f[k]);
    for (int b = 0; b < 8; ++b)
      bytes[8 * k + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<double> get_field(std::istream& in, std::size_t n,
                              const std::string& name) {
  std::string bytes(n * 8, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw FormatError("truncated payload in field " + name);
  std::vector<double> f(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 * k + b]))
              << (8 * b);
    f[k] = std::bit_cast<double>(bits);
  }
  return f;
}

nlohmann::json grid_json(const Grid2D& g) {
  return {{"x1_min", g.x1_min()}, {"x1_max", g.x1_max()}, {"n1", g.n1()},
          {"x2_min", g.x2_min()}, {"x2_max", g.x2_max()}, {"n2", g.n2()}};
}

Grid2D grid_from(const nlohmann::json& j) {
  return Grid2D(j.at("x1_min").get<double>(), j.at("x1_max").get<double>(),
                j.at("n1").get<int>(), j.at("x2_min").get<double>(),
                j.at("x2_max").get<double>(), j.at("n2").get<int>());
}

nlohmann::json read_header(std::istream& in, const std::string& format) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad header: ") + e.what());
  }
  if (h.value("format", "") != format)
    throw FormatError("expected format " + format);
  return h;
}

void check_fields(const nlohmann::json& h, std::vector<std::string> want) {
  if (h.at("fields").get<std::vector<std::string>>() != want)
    throw FormatError("unexpected field list");
}

}  // namespace

void write_value_grid(std::ostream& out, const ReachSolution& sol, int version) {
  const ValueGrid& v = sol.value;
  nlohmann::json h;
  h["format"] = "safelearn-value-grid";
  h["format_version"] = 1;
  h["version"] = version;
  h["grid"] = grid_json(v.grid);
  h["constraint"] = {{"floor", v.constraint.floor}, {"ceiling", v.constraint.ceiling}};
  h["converged"] = v.converged;
  h["horizon_used"] = v.horizon_used;
  h["steps"] = v.steps;
  h["final_rate"] = v.final_rate;
  h["u_min"] = sol.policy.u_min;
  h["u_max"] = sol.policy.u_max;
  h["tie_split"] = sol.policy.tie_split;
  h["tie_accel"] = sol.policy.tie_accel;
  h["tie_speed"] = sol.policy.tie_speed;
  h["safe_area"] = v.safe_area();
  h["fields"] = {"V", "l", "u_star", "d_star", "switching"};
  out << h.dump() << '\n';
  put_field(out, v.values);
  put_field(out, v.surface);
  put_field(out, sol.policy.u_star);
  put_field(out, sol.policy.d_star);
  put_field(out, sol.policy.switching);
  if (!out) throw FormatError("write failed");
}

ReachSolution read_value_grid(std::istream& in, int* version) {
  const nlohmann::json h = read_header(in, "safelearn-value-grid");
  check_fields(h, {"V", "l", "u_star", "d_star", "switching"});
  const Grid2D g = grid_from(h.at("grid"));
  const std::size_t n = g.size();
  ReachSolution sol{ValueGrid{g, {h["constraint"]["floor"].get<double>(),
                                  h["constraint"]["ceiling"].get<double>()},
                              {}, {}},
                    SafePolicyTable{}};
  sol.value.converged = h.at("converged").get<bool>();
  sol.value.horizon_used = h.at("horizon_used").get<double>();
  sol.value.steps = h.at("steps").get<int>();
  sol.value.final_rate = h.at("final_rate").get<double>();
  sol.value.values = get_field(in, n, "V");
  sol.value.surface = get_field(in, n, "l");
  sol.policy.u_star = get_field(in, n, "u_star");
  sol.policy.d_star = get_field(in, n, "d_star");
  sol.policy.switching = get_field(in, n, "switching");
  sol.policy.u_min = h.at("u_min").get<double>();
  sol.policy.u_max = h.at("u_max").get<double>();
  sol.policy.tie_split = h.at("tie_split").get<double>();
  sol.policy.tie_accel = h.at("tie_accel").get<double>();
  sol.policy.tie_speed = h.at("tie_speed").get<double>();
  if (version) *version = h.at("version").get<int>();
  return sol;
}

void write_bound(std::ostream& out, const DisturbanceBound& bound,
                 const Grid2D& grid, double p, double z) {
  std::vector<double> lo(grid.size()), hi(grid.size());
  for (int i = 0; i < grid.n1(); ++i)
    for (int j = 0; j < grid.n2(); ++j) {
      const auto iv = bound.at(grid.node(i, j));
      lo[grid.index(i, j)] = iv.lower;
      hi[grid.index(i, j)] = iv.upper;
    }
  nlohmann::json h;
  h["format"] = "safelearn-bound";
  h["format_version"] = 1;
  h["grid"] = grid_json(grid);
  h["p"] = p;
  h["z"] = z;
  h["fields"] = {"lower", "upper"};
  out << h.dump() << '\n';
  put_field(out, lo);
  put_field(out, hi);
  if (!out) throw FormatError("write failed");
}

BoundFile read_bound(std::istream& in) {
  const nlohmann::json h = read_header(in, "safelearn-bound");
  check_fields(h, {"lower", "upper"});
  const Grid2D g = grid_from(h.at("grid"));
  auto lo = get_field(in, g.size(), "lower");
  auto hi = get_field(in, g.size(), "upper");
  return {DisturbanceBound::gridded(g, std::move(lo), std::move(hi)),
          h.at("p").get<double>(), h.at("z").get<double>()};
}

void write_contour_csv(std::ostream& out, const ValueGrid& v, double alpha) {
  out << "segment,x1,x2\n";
  out.precision(17);
  int k = 0;
  for (const auto& s : contour_segments(v, alpha)) {
    out << k << ',' << s.a.x1 << ',' << s.a.x2 << '\n';
    out << k << ',' << s.b.x1 << ',' << s.b.x2 << '\n';
    ++k;
  }
}

}  // namespace safelearn
