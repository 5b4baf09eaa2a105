#include "dwts/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dwts/math_util.hpp"

namespace dwts {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

std::string policy_name(Policy policy) {
  switch (policy) {
    case Policy::kDwts: return "DWTS";
    case Policy::kLintsFull: return "LINTS_FULL";
    case Policy::kLintsTrue: return "LINTS_TRUE";
    case Policy::kOful: return "OFUL";
    case Policy::kOracle: return "ORACLE";
  }
  throw std::invalid_argument("policy_name: unknown policy");
}

Policy policy_from_name(const std::string& name) {
  if (name == "DWTS") return Policy::kDwts;
  if (name == "LINTS_FULL") return Policy::kLintsFull;
  if (name == "LINTS_TRUE") return Policy::kLintsTrue;
  if (name == "OFUL") return Policy::kOful;
  if (name == "ORACLE") return Policy::kOracle;
  throw std::invalid_argument("unknown policy '" + name + "'");
}

void ExperimentConfig::validate() const {
  sem.validate();
  if (T < 1) throw std::invalid_argument("ExperimentConfig: T must be >= 1");
  if (n_replications < 1) {
    throw std::invalid_argument("ExperimentConfig: n_replications must be >= 1");
  }
  if (policies.empty()) {
    throw std::invalid_argument("ExperimentConfig: no policies");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("ExperimentConfig: alpha must be in (0,1)");
  }
  for (int p : p_grid) {
    if (p < sem.p_eff) {
      throw std::invalid_argument("ExperimentConfig: grid p below p_eff");
    }
  }
  for (double q : quantiles) {
    if (!(q >= 0.0 && q <= 1.0)) {
      throw std::invalid_argument("ExperimentConfig: quantiles in [0,1]");
    }
  }
}

double instantaneous_regret(const std::vector<ArmParams>& all_params,
                            const OnlineContext& x, int chosen_arm) {
  if (chosen_arm < 0 || chosen_arm >= static_cast<int>(all_params.size())) {
    throw std::invalid_argument("instantaneous_regret: invalid arm");
  }
  return best_arm(all_params, x).second -
         mean_reward(all_params[static_cast<std::size_t>(chosen_arm)], x);
}

namespace {

double min_nonzero_signal(const std::vector<ArmParams>& params) {
  double beta_theta = std::numeric_limits<double>::infinity();
  for (const ArmParams& arm : params) {
    for (Eigen::Index i = 0; i < arm.theta_star.size(); ++i) {
      const double v = std::abs(arm.theta_star[i]);
      if (v > 0.0) beta_theta = std::min(beta_theta, v);
    }
  }
  if (!std::isfinite(beta_theta)) {
    throw std::runtime_error("theoretical kappa needs a nonzero theta_star");
  }
  return beta_theta;
}

Mask true_support_mask(const ArmParams& params) {
  Mask mask;
  mask.selected.resize(static_cast<std::size_t>(params.theta_star.size()));
  mask.p_eff = 0;
  for (Eigen::Index i = 0; i < params.theta_star.size(); ++i) {
    const bool keep = params.theta_star[i] != 0.0;
    mask.selected[static_cast<std::size_t>(i)] = keep;
    mask.p_eff += keep;
  }
  return mask;
}

Mask all_true_mask(int p) {
  Mask mask;
  mask.selected.assign(static_cast<std::size_t>(p), true);
  mask.p_eff = p;
  return mask;
}

}  // namespace

RegretTrace run_replication(const ExperimentConfig& cfg, Policy policy,
                            int replication_id,
                            const ContextSampler& context_sampler) {
  cfg.validate();
  const SemConfig& sem = cfg.sem;

  RandomStream root(cfg.base_seed);
  RandomStream rep =
      root.child("replication").child(static_cast<std::uint64_t>(replication_id));
  RandomStream env =
      cfg.redraw_params_per_replication ? rep.child("env") : root.child("env-shared");

  const std::vector<ArmParams> params = build_true_params(sem, env);

  RegretTrace trace;
  trace.policy = policy_name(policy);
  trace.replication_id = replication_id;
  trace.instantaneous.resize(cfg.T);
  trace.cumulative.resize(cfg.T);

  // Policy state.
  std::vector<GaussianPosterior> posteriors;
  std::vector<Mask> masks;
  std::vector<OfulArmState> oful_states;

  if (policy == Policy::kDwts) {
    const OfflineDataset data = make_offline_dataset(sem, params, env);
    std::vector<DdlEstimate> estimates;
    estimates.reserve(sem.K);
    RandomStream ddl_rng = rep.child("ddl");
    for (int a = 0; a < sem.K; ++a) {
      RandomStream arm_rng = ddl_rng.child(static_cast<std::uint64_t>(a));
      estimates.push_back(
          ddl_fit(data.blocks[a].Z, data.blocks[a].y, cfg.ddl, arm_rng));
    }
    const double kappa =
        cfg.kappa_mode.theoretical
            ? choose_kappa_theoretical(estimates, cfg.alpha,
                                       min_nonzero_signal(params),
                                       cfg.kappa_literal)
            : cfg.kappa_mode.fixed_value;
    for (int a = 0; a < sem.K; ++a) {
      masks.push_back(build_mask(estimates[a].theta_hat, kappa));
      posteriors.push_back(
          init_warm_start(estimates[a], masks[a], sem.q, cfg.prior_mode));
    }
  } else if (policy == Policy::kLintsFull) {
    for (int a = 0; a < sem.K; ++a) {
      masks.push_back(all_true_mask(sem.p));
      posteriors.push_back(init_cold(sem.p + sem.q));
    }
  } else if (policy == Policy::kLintsTrue) {
    for (int a = 0; a < sem.K; ++a) {
      masks.push_back(true_support_mask(params[a]));
      posteriors.push_back(init_cold(masks[a].p_eff + sem.q));
    }
  } else if (policy == Policy::kOful) {
    for (int a = 0; a < sem.K; ++a) {
      oful_states.push_back(oful_init(sem.p + sem.q, cfg.oful.lambda_reg));
    }
  }

  // Environment streams shared across policies; the policy stream is its own.
  RandomStream ctx_rng = rep.child("context");
  RandomStream noise_rng = rep.child("noise");
  RandomStream policy_rng = rep.child("policy").child(policy_name(policy));

  std::vector<VectorXd> x_eff(static_cast<std::size_t>(sem.K));
  double running = 0.0;
  for (int t = 0; t < cfg.T; ++t) {
    const OnlineContext x = context_sampler
                                ? context_sampler(sem.p, sem.q, ctx_rng)
                                : draw_online_context(sem.p, sem.q, ctx_rng);
    if (x.size() != sem.p + sem.q) {
      throw std::invalid_argument("run_replication: sampler returned wrong dim");
    }
    const double eps = noise_rng.gaussian();

    int chosen = 0;
    switch (policy) {
      case Policy::kOracle:
        chosen = oracle_select(params, x);
        break;
      case Policy::kOful:
        chosen = oful_select(oful_states, x, cfg.oful);
        break;
      default: {
        for (int a = 0; a < sem.K; ++a) {
          x_eff[static_cast<std::size_t>(a)] = reduce_context(x, masks[a]);
        }
        chosen = ts_select(posteriors, x_eff, policy_rng).arm;
        break;
      }
    }

    const double reward =
        mean_reward(params[static_cast<std::size_t>(chosen)], x) +
        sem.noise_sd * eps;

    if (policy == Policy::kOful) {
      oful_update(oful_states[static_cast<std::size_t>(chosen)], x, reward);
    } else if (policy != Policy::kOracle) {
      posteriors[static_cast<std::size_t>(chosen)] = posterior_update(
          posteriors[static_cast<std::size_t>(chosen)],
          x_eff[static_cast<std::size_t>(chosen)], reward);
    }

    trace.instantaneous[t] = instantaneous_regret(params, x, chosen);
    running += trace.instantaneous[t];
    trace.cumulative[t] = running;
  }
  return trace;
}

QuantileTable aggregate_quantiles(const std::vector<RegretTrace>& traces,
                                  const std::vector<double>& quantiles) {
  if (traces.empty()) {
    throw std::invalid_argument("aggregate_quantiles: empty trace list");
  }
  const Eigen::Index T = traces[0].cumulative.size();
  for (const RegretTrace& trace : traces) {
    if (trace.cumulative.size() != T || trace.policy != traces[0].policy) {
      throw std::invalid_argument(
          "aggregate_quantiles: traces must share policy and horizon");
    }
  }
  QuantileTable table;
  table.policy = traces[0].policy;
  table.quantiles = quantiles;
  table.values.resize(T, static_cast<Eigen::Index>(quantiles.size()));
  std::vector<double> column(traces.size());
  for (Eigen::Index t = 0; t < T; ++t) {
    for (std::size_t r = 0; r < traces.size(); ++r) {
      column[r] = traces[r].cumulative[t];
    }
    std::sort(column.begin(), column.end());
    for (std::size_t qi = 0; qi < quantiles.size(); ++qi) {
      table.values(t, static_cast<Eigen::Index>(qi)) =
          quantile_type7_sorted(column, quantiles[qi]);
    }
  }
  return table;
}

namespace {

std::string quantile_header(double q) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "q%g", q * 100.0);
  return buf;
}

}  // namespace

void write_results_csv(const std::vector<QuantileTable>& tables,
                       const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_results_csv: cannot open " + path);
  const std::vector<double> header_qs =
      tables.empty() ? std::vector<double>{0.1, 0.5, 0.9} : tables[0].quantiles;
  std::fputs("policy,round", f);
  for (double q : header_qs) std::fprintf(f, ",%s", quantile_header(q).c_str());
  std::fputs("\n", f);
  for (const QuantileTable& table : tables) {
    for (Eigen::Index t = 0; t < table.values.rows(); ++t) {
      std::fprintf(f, "%s,%lld", table.policy.c_str(),
                   static_cast<long long>(t + 1));
      for (Eigen::Index qi = 0; qi < table.values.cols(); ++qi) {
        std::fprintf(f, ",%.17g", table.values(t, qi));
      }
      std::fputs("\n", f);
    }
  }
  std::fclose(f);
}

std::vector<QuantileTable> read_results_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_results_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("read_results_csv: empty file");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 3 || header[0] != "policy" || header[1] != "round") {
    throw std::runtime_error("read_results_csv: expected policy,round,q...");
  }
  std::vector<double> quantiles;
  for (std::size_t i = 2; i < header.size(); ++i) {
    if (header[i].empty() || header[i][0] != 'q') {
      throw std::runtime_error("read_results_csv: bad quantile column");
    }
    quantiles.push_back(std::stod(header[i].substr(1)) / 100.0);
  }

  std::vector<QuantileTable> tables;
  std::vector<std::vector<double>> rows;
  std::string current_policy;
  auto flush = [&]() {
    if (rows.empty()) return;
    QuantileTable table;
    table.policy = current_policy;
    table.quantiles = quantiles;
    table.values.resize(static_cast<Eigen::Index>(rows.size()),
                        static_cast<Eigen::Index>(quantiles.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t qi = 0; qi < quantiles.size(); ++qi) {
        table.values(static_cast<Eigen::Index>(r),
                     static_cast<Eigen::Index>(qi)) = rows[r][qi];
      }
    }
    tables.push_back(std::move(table));
    rows.clear();
  };

  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) {
      throw std::runtime_error("read_results_csv: column count mismatch");
    }
    if (cells[0] != current_policy) {
      flush();
      current_policy = cells[0];
    }
    std::vector<double> row;
    for (std::size_t i = 2; i < cells.size(); ++i) row.push_back(std::stod(cells[i]));
    rows.push_back(std::move(row));
  }
  flush();
  return tables;
}

namespace {

std::string default_color(const std::string& policy, std::size_t index) {
  if (policy == "DWTS") return "#1f77b4";
  if (policy == "LINTS_FULL") return "#d62728";
  if (policy == "LINTS_TRUE") return "#17becf";
  if (policy == "OFUL") return "#111111";
  if (policy == "ORACLE") return "#2ca02c";
  static const char* palette[] = {"#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return palette[index % 4];
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fmt_tick(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

// Smallest of {1, 2, 5} * 10^k that is >= span / divisions.
double nice_step(double span, int divisions) {
  const double raw = span / divisions;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (mag * m >= raw) return mag * m;
  }
  return mag * 10.0;
}

}  // namespace

void render_regret_svg(const std::vector<QuantileTable>& tables,
                       const std::string& path, const SvgStyle& style) {
  const int width = style.width;
  const int height = style.height;
  const double left = 70, right = 24, top = 42, bottom = 52;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;

  Eigen::Index max_rounds = 1;
  double y_max = 0.0;
  for (const QuantileTable& table : tables) {
    max_rounds = std::max(max_rounds, table.values.rows());
    if (table.values.size() > 0) {
      y_max = std::max(y_max, table.values.maxCoeff());
    }
  }
  if (y_max <= 0.0) y_max = 1.0;
  const double y_step = nice_step(y_max, 5);
  y_max = y_step * std::ceil(y_max / y_step);

  auto sx = [&](double round) {
    return left + (round - 1.0) / std::max<double>(max_rounds - 1, 1) * plot_w;
  };
  auto sy = [&](double v) { return top + plot_h - v / y_max * plot_h; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  if (!style.title.empty()) {
    svg << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"16\">"
        << style.title << "</text>\n";
  }

  // Axes and ticks.
  svg << "<g stroke=\"#333\" stroke-width=\"1\">\n";
  svg << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(top + plot_h)
      << "\" x2=\"" << fmt(left + plot_w) << "\" y2=\"" << fmt(top + plot_h)
      << "\"/>\n";
  svg << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(top) << "\" x2=\""
      << fmt(left) << "\" y2=\"" << fmt(top + plot_h) << "\"/>\n";
  svg << "</g>\n";
  svg << "<g font-family=\"sans-serif\" font-size=\"12\" fill=\"#333\">\n";
  for (double v = 0.0; v <= y_max + 1e-9; v += y_step) {
    svg << "<line x1=\"" << fmt(left - 4) << "\" y1=\"" << fmt(sy(v))
        << "\" x2=\"" << fmt(left) << "\" y2=\"" << fmt(sy(v))
        << "\" stroke=\"#333\"/>\n";
    svg << "<text x=\"" << fmt(left - 8) << "\" y=\"" << fmt(sy(v) + 4)
        << "\" text-anchor=\"end\">" << fmt_tick(v) << "</text>\n";
  }
  const double x_step = nice_step(static_cast<double>(max_rounds), 6);
  for (double r = 0.0; r <= static_cast<double>(max_rounds) + 1e-9; r += x_step) {
    const double rr = std::max(r, 1.0);
    svg << "<line x1=\"" << fmt(sx(rr)) << "\" y1=\"" << fmt(top + plot_h)
        << "\" x2=\"" << fmt(sx(rr)) << "\" y2=\"" << fmt(top + plot_h + 4)
        << "\" stroke=\"#333\"/>\n";
    svg << "<text x=\"" << fmt(sx(rr)) << "\" y=\"" << fmt(top + plot_h + 18)
        << "\" text-anchor=\"middle\">" << fmt_tick(rr) << "</text>\n";
  }
  svg << "<text x=\"" << fmt(left + plot_w / 2) << "\" y=\""
      << fmt(height - 14.0) << "\" text-anchor=\"middle\">round</text>\n";
  svg << "<text transform=\"translate(16," << fmt(top + plot_h / 2)
      << ") rotate(-90)\" text-anchor=\"middle\">cumulative regret</text>\n";
  svg << "</g>\n";

  // Quantile bands and medians. Band spans the first and last requested
  // quantiles; the median polyline uses the middle column.
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const QuantileTable& table = tables[i];
    if (table.values.rows() == 0) continue;
    std::string color;
    for (const auto& [name, c] : style.colors) {
      if (name == table.policy) color = c;
    }
    if (color.empty()) color = default_color(table.policy, i);
    const Eigen::Index n_q = table.values.cols();
    const Eigen::Index lo = 0, hi = n_q - 1, mid = n_q / 2;
    if (n_q >= 2) {
      svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.18\" "
             "stroke=\"none\" points=\"";
      for (Eigen::Index t = 0; t < table.values.rows(); ++t) {
        svg << fmt(sx(static_cast<double>(t + 1))) << ","
            << fmt(sy(table.values(t, lo))) << " ";
      }
      for (Eigen::Index t = table.values.rows() - 1; t >= 0; --t) {
        svg << fmt(sx(static_cast<double>(t + 1))) << ","
            << fmt(sy(table.values(t, hi)))
            << (t > 0 ? " " : "");
      }
      svg << "\"/>\n";
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"2\" points=\"";
    for (Eigen::Index t = 0; t < table.values.rows(); ++t) {
      svg << fmt(sx(static_cast<double>(t + 1))) << ","
          << fmt(sy(table.values(t, mid))) << (t + 1 < table.values.rows() ? " " : "");
    }
    svg << "\"/>\n";
  }

  // Legend.
  svg << "<g font-family=\"sans-serif\" font-size=\"13\">\n";
  for (std::size_t i = 0; i < tables.size(); ++i) {
    std::string color;
    for (const auto& [name, c] : style.colors) {
      if (name == tables[i].policy) color = c;
    }
    if (color.empty()) color = default_color(tables[i].policy, i);
    const double ly = top + 14 + 20.0 * static_cast<double>(i);
    svg << "<line x1=\"" << fmt(left + 12) << "\" y1=\"" << fmt(ly - 4)
        << "\" x2=\"" << fmt(left + 44) << "\" y2=\"" << fmt(ly - 4)
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << fmt(left + 50) << "\" y=\"" << fmt(ly) << "\">"
        << tables[i].policy << "</text>\n";
  }
  svg << "</g>\n</svg>\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("render_regret_svg: cannot open " + path);
  out << svg.str();
}

namespace {

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string SuiteManifest::to_json() const {
  json j;
  j["config_hash"] = config_hash;
  j["cells"] = json::array();
  for (const SuiteCell& cell : cells) {
    json c;
    c["p"] = cell.p;
    c["policy"] = cell.policy;
    c["csv"] = cell.csv_path;
    c["status"] = cell.status;
    if (!cell.error.empty()) c["error"] = cell.error;
    c["wall_clock_sec"] = cell.wall_clock_sec;
    c["replication_seeds"] = cell.replication_seeds;
    j["cells"].push_back(c);
  }
  j["svg"] = svg_paths;
  return j.dump(2);
}

SuiteManifest run_suite(const ExperimentConfig& cfg, int jobs) {
  cfg.validate();
  std::filesystem::create_directories(cfg.output_dir);
  std::vector<int> grid = cfg.p_grid.empty() ? std::vector<int>{cfg.sem.p} : cfg.p_grid;

  struct Task {
    std::size_t cell;
    int replication_id;
    ExperimentConfig cfg;  // per-cell config (p substituted)
    Policy policy;
  };
  struct CellDef {
    int p;
    Policy policy;
  };

  std::vector<CellDef> cell_defs;
  for (int p : grid) {
    for (Policy policy : cfg.policies) {
      cell_defs.push_back({p, policy});
    }
  }

  std::vector<Task> tasks;
  for (std::size_t c = 0; c < cell_defs.size(); ++c) {
    ExperimentConfig cell_cfg = cfg;
    cell_cfg.sem.p = cell_defs[c].p;
    for (int r = 0; r < cfg.n_replications; ++r) {
      tasks.push_back({c, r, cell_cfg, cell_defs[c].policy});
    }
  }

  std::vector<RegretTrace> results(tasks.size());
  std::vector<std::string> errors(tasks.size());
  std::vector<double> durations(tasks.size(), 0.0);

  if (jobs <= 0) {
    jobs = static_cast<int>(std::thread::hardware_concurrency());
    if (jobs <= 0) jobs = 1;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) break;
      const auto start = std::chrono::steady_clock::now();
      try {
        results[i] =
            run_replication(tasks[i].cfg, tasks[i].policy, tasks[i].replication_id);
      } catch (const std::exception& ex) {
        errors[i] = ex.what();
      }
      durations[i] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
              .count();
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  SuiteManifest manifest;
  manifest.config_hash = fnv1a_hex(cfg.to_json());

  // Deterministic fold: aggregate per cell in definition order.
  std::vector<std::vector<QuantileTable>> per_p_tables(grid.size());
  for (std::size_t c = 0; c < cell_defs.size(); ++c) {
    SuiteCell cell;
    cell.p = cell_defs[c].p;
    cell.policy = policy_name(cell_defs[c].policy);
    std::vector<RegretTrace> traces;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i].cell != c) continue;
      cell.wall_clock_sec += durations[i];
      if (!errors[i].empty() && cell.error.empty()) {
        cell.error = "replication " + std::to_string(tasks[i].replication_id) +
                     ": " + errors[i];
      }
      traces.push_back(results[i]);
      RandomStream root(cfg.base_seed);
      cell.replication_seeds.push_back(
          root.child("replication")
              .child(static_cast<std::uint64_t>(tasks[i].replication_id))
              .key());
    }
    if (cell.error.empty()) {
      const QuantileTable table = aggregate_quantiles(traces, cfg.quantiles);
      cell.csv_path = cfg.output_dir + "/p" + std::to_string(cell.p) + "_" +
                      cell.policy + ".csv";
      write_results_csv({table}, cell.csv_path);
      cell.status = "ok";
      for (std::size_t g = 0; g < grid.size(); ++g) {
        if (grid[g] == cell.p) {
          per_p_tables[g].push_back(table);
          break;
        }
      }
    } else {
      cell.status = "error";
    }
    manifest.cells.push_back(std::move(cell));
  }

  for (std::size_t g = 0; g < grid.size(); ++g) {
    if (per_p_tables[g].empty()) continue;
    SvgStyle style;
    style.title = "p = " + std::to_string(grid[g]);
    const std::string svg_path =
        cfg.output_dir + "/p" + std::to_string(grid[g]) + ".svg";
    render_regret_svg(per_p_tables[g], svg_path, style);
    manifest.svg_paths.push_back(svg_path);
  }

  std::ofstream mf(cfg.output_dir + "/manifest.json", std::ios::binary);
  if (!mf) throw std::runtime_error("run_suite: cannot write manifest");
  mf << manifest.to_json() << "\n";
  return manifest;
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["sem"] = json::parse(sem.to_json());
  j["T"] = T;
  j["n_replications"] = n_replications;
  std::vector<std::string> names;
  for (Policy p : policies) names.push_back(policy_name(p));
  j["policies"] = names;
  j["alpha"] = alpha;
  if (kappa_mode.theoretical) {
    j["kappa_mode"] = "theoretical";
  } else {
    j["kappa_mode"] = json{{"fixed", kappa_mode.fixed_value}};
  }
  j["base_seed"] = base_seed;
  j["output_dir"] = output_dir;
  j["p_grid"] = p_grid;
  j["redraw_params_per_replication"] = redraw_params_per_replication;
  j["kappa_literal"] = kappa_literal;
  j["prior_variance_mode"] =
      prior_mode == PriorVarianceMode::kVariance ? "variance" : "stderr";
  j["ddl"] = {{"trim_quantile", ddl.trim_quantile},
              {"lambda_rule", ddl.lambda_rule == LambdaRule::kCv ? "cv" : "fixed"},
              {"cv_folds", ddl.cv_folds},
              {"cv_grid", ddl.cv_grid},
              {"fixed_rule_scale", ddl.fixed_rule_scale},
              {"tol", ddl.tol},
              {"max_iter", ddl.max_iter}};
  j["oful"] = {{"delta", oful.delta},
               {"lambda_reg", oful.lambda_reg},
               {"param_norm_bound", oful.param_norm_bound}};
  j["quantiles"] = quantiles;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ExperimentConfig cfg;
  if (!j.contains("sem")) throw std::invalid_argument("experiment: missing sem");
  cfg.sem = SemConfig::from_json(j["sem"].dump());
  for (const auto& [key, value] : j.items()) {
    if (key == "sem") continue;
    else if (key == "T") cfg.T = value.get<int>();
    else if (key == "n_replications") cfg.n_replications = value.get<int>();
    else if (key == "policies") {
      cfg.policies.clear();
      for (const auto& name : value) {
        cfg.policies.push_back(policy_from_name(name.get<std::string>()));
      }
    } else if (key == "alpha") cfg.alpha = value.get<double>();
    else if (key == "kappa_mode") {
      if (value.is_string()) {
        if (value.get<std::string>() != "theoretical") {
          throw std::invalid_argument("experiment: kappa_mode string must be 'theoretical'");
        }
        cfg.kappa_mode.theoretical = true;
      } else if (value.is_object() && value.contains("fixed")) {
        cfg.kappa_mode.theoretical = false;
        cfg.kappa_mode.fixed_value = value["fixed"].get<double>();
      } else if (value.is_number()) {
        cfg.kappa_mode.theoretical = false;
        cfg.kappa_mode.fixed_value = value.get<double>();
      } else {
        throw std::invalid_argument("experiment: bad kappa_mode");
      }
    } else if (key == "base_seed") cfg.base_seed = value.get<std::uint64_t>();
    else if (key == "output_dir") cfg.output_dir = value.get<std::string>();
    else if (key == "p_grid") cfg.p_grid = value.get<std::vector<int>>();
    else if (key == "redraw_params_per_replication") {
      cfg.redraw_params_per_replication = value.get<bool>();
    } else if (key == "kappa_literal") cfg.kappa_literal = value.get<bool>();
    else if (key == "prior_variance_mode") {
      const auto mode = value.get<std::string>();
      if (mode == "variance") cfg.prior_mode = PriorVarianceMode::kVariance;
      else if (mode == "stderr") cfg.prior_mode = PriorVarianceMode::kStderr;
      else throw std::invalid_argument("experiment: bad prior_variance_mode");
    } else if (key == "ddl") {
      for (const auto& [dk, dv] : value.items()) {
        if (dk == "trim_quantile") cfg.ddl.trim_quantile = dv.get<double>();
        else if (dk == "lambda_rule") {
          const auto rule = dv.get<std::string>();
          if (rule == "cv") cfg.ddl.lambda_rule = LambdaRule::kCv;
          else if (rule == "fixed") cfg.ddl.lambda_rule = LambdaRule::kFixed;
          else throw std::invalid_argument("experiment: bad ddl.lambda_rule");
        } else if (dk == "cv_folds") cfg.ddl.cv_folds = dv.get<int>();
        else if (dk == "cv_grid") cfg.ddl.cv_grid = dv.get<int>();
        else if (dk == "fixed_rule_scale") cfg.ddl.fixed_rule_scale = dv.get<double>();
        else if (dk == "tol") cfg.ddl.tol = dv.get<double>();
        else if (dk == "max_iter") cfg.ddl.max_iter = dv.get<int>();
        else throw std::invalid_argument("experiment: unknown ddl field '" + dk + "'");
      }
    } else if (key == "oful") {
      for (const auto& [ok, ov] : value.items()) {
        if (ok == "delta") cfg.oful.delta = ov.get<double>();
        else if (ok == "lambda_reg") cfg.oful.lambda_reg = ov.get<double>();
        else if (ok == "param_norm_bound") cfg.oful.param_norm_bound = ov.get<double>();
        else throw std::invalid_argument("experiment: unknown oful field '" + ok + "'");
      }
    } else if (key == "quantiles") cfg.quantiles = value.get<std::vector<double>>();
    else throw std::invalid_argument("experiment: unknown field '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("experiment: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace dwts
