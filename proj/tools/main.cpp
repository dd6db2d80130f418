// Experiment runner. One JSON config per run; --set key.path=value overrides;
// every command writes its artifacts under the output root and records them
// in an atomically written manifest. Single-threaded by default; --threads
// only fans out whole trajectories, so results do not depend on it.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tiltflow/costmodel.hpp"
#include "tiltflow/flow.hpp"
#include "tiltflow/grid.hpp"
#include "tiltflow/guide.hpp"
#include "tiltflow/net.hpp"
#include "tiltflow/optimize.hpp"
#include "tiltflow/oracle.hpp"
#include "tiltflow/rng.hpp"
#include "tiltflow/schedule.hpp"
#include "tiltflow/secant.hpp"
#include "tiltflow/tilted.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace tiltflow;

namespace {

constexpr const char* kVersion = "0.1.0";

// --- config plumbing -----------------------------------------------------------

struct RunContext {
  std::string command;
  json cfg;
  fs::path out;
  unsigned threads = 1;
  std::vector<std::string> artifacts;
  std::vector<std::pair<std::string, double>> phases;
};

std::string rel_to_out(const RunContext& ctx, const fs::path& p) {
  return fs::relative(p, ctx.out).generic_string();
}

void note_artifact(RunContext& ctx, const fs::path& p) {
  ctx.artifacts.push_back(rel_to_out(ctx, p));
}

template <class F>
void phase(RunContext& ctx, const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  body();
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
  ctx.phases.emplace_back(name, dt.count());
}

std::string config_hash(const json& cfg) {
  // order-insensitive: hash the sorted-key dump
  const std::string canon = nlohmann::json(cfg).dump();
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(canon)));
  return buf;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) fail("cannot open for writing: " + tmp.string());
    os << text;
    if (!os) fail("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_manifest(const RunContext& ctx) {
  json man;
  man["command"] = ctx.command;
  man["config_hash"] = config_hash(ctx.cfg);
  man["versions"] = {{"tiltflow", kVersion}, {"config", 1}, {"tf2d", 1}, {"tfnn", 1}};
  man["threads"] = ctx.threads;
  json wt = json::object();
  for (const auto& [name, sec] : ctx.phases) wt[name] = sec;
  man["wall_times"] = wt;
  man["artifacts"] = ctx.artifacts;
  const fs::path path = ctx.out / ("manifest_" + ctx.command + ".json");
  write_text_atomic(path, man.dump(2) + "\n");
  std::cout << "manifest: " << path.string() << "\n";
}

void write_json(RunContext& ctx, const fs::path& path, const json& j) {
  write_text_atomic(path, j.dump(2) + "\n");
  note_artifact(ctx, path);
}

json load_config(const std::string& path, const std::vector<std::string>& sets) {
  json cfg = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) fail("cannot open for reading: " + path);
    cfg = json::parse(is);
  }
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail("--set expects key.path=value: " + kv);
    std::string ptr = "/" + kv.substr(0, eq);
    for (auto& c : ptr)
      if (c == '.') c = '/';
    const std::string raw = kv.substr(eq + 1);
    json val = json::parse(raw, nullptr, false);
    if (val.is_discarded()) val = raw;  // bare strings need no quotes
    cfg[json::json_pointer(ptr)] = val;
  }
  if (!cfg.contains("seed")) fail("config missing \"seed\"");
  return cfg;
}

fs::path resolve_out_dir(const json& cfg) {
  if (cfg.contains("out_dir")) return fs::path(cfg.at("out_dir").get<std::string>());
  if (const char* env = std::getenv("TF_OUT_DIR")) return fs::path(env);
  return fs::path(".");
}

const json& section(const json& cfg, const char* key) {
  static const json empty = json::object();
  const auto it = cfg.find(key);
  return it == cfg.end() ? empty : *it;
}

std::vector<std::uint32_t> hidden_widths(const json& j, std::vector<std::uint32_t> def) {
  if (!j.contains("hidden")) return def;
  std::vector<std::uint32_t> out;
  for (const auto& v : j.at("hidden")) out.push_back(v.get<std::uint32_t>());
  return out;
}

std::string fmt_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// --- world and model assembly --------------------------------------------------

WorldSpec world_spec_from(const json& cfg) {
  const json& w = section(cfg, "world");
  WorldSpec spec;
  spec.seed = cfg.at("seed").get<std::uint64_t>();
  const std::string dk = w.value("density_kind", "grf_potential");
  if (dk == "grf_potential") spec.density_kind = WorldSpec::DensityKind::grf_potential;
  else if (dk == "gaussian_mixture") spec.density_kind = WorldSpec::DensityKind::gaussian_mixture;
  else fail("unknown density_kind: " + dk);
  const std::string ck = w.value("cost_kind", "rbf_sum");
  if (ck == "grf") spec.cost_kind = WorldSpec::CostKind::grf;
  else if (ck == "rbf_sum") spec.cost_kind = WorldSpec::CostKind::rbf_sum;
  else fail("unknown cost_kind: " + ck);
  spec.nx = w.value("nx", spec.nx);
  spec.ny = w.value("ny", spec.ny);
  spec.length_scale = w.value("length_scale", spec.length_scale);
  spec.field_std = w.value("field_std", spec.field_std);
  spec.density_scale = w.value("density_scale", spec.density_scale);
  spec.n_rbf = w.value("n_rbf", spec.n_rbf);
  spec.rbf_width_min = w.value("rbf_width_min", spec.rbf_width_min);
  spec.rbf_width_max = w.value("rbf_width_max", spec.rbf_width_max);
  if (w.contains("bounds")) {
    const json& b = w.at("bounds");
    spec.bounds.x_min = b.value("x_min", spec.bounds.x_min);
    spec.bounds.x_max = b.value("x_max", spec.bounds.x_max);
    spec.bounds.y_min = b.value("y_min", spec.bounds.y_min);
    spec.bounds.y_max = b.value("y_max", spec.bounds.y_max);
  }
  if (w.contains("mixture")) {
    for (const auto& mj : w.at("mixture")) {
      MixtureComponent mc;
      mc.mean = {mj.at("mean").at(0).get<double>(), mj.at("mean").at(1).get<double>()};
      mc.cov_xx = mj.value("cov_xx", mc.cov_xx);
      mc.cov_xy = mj.value("cov_xy", mc.cov_xy);
      mc.cov_yy = mj.value("cov_yy", mc.cov_yy);
      mc.weight = mj.value("weight", mc.weight);
      spec.mixture.push_back(mc);
    }
  }
  if (spec.density_kind == WorldSpec::DensityKind::gaussian_mixture && spec.mixture.empty())
    fail("gaussian_mixture needs mixture components");
  return spec;
}

GridPmf build_density(const WorldSpec& spec) {
  return spec.density_kind == WorldSpec::DensityKind::grf_potential
             ? density_from_potential(make_grf(spec, "potential"), spec.density_scale)
             : mixture_pmf(spec);
}

GridField build_cost(const WorldSpec& spec) {
  return spec.cost_kind == WorldSpec::CostKind::grf ? make_grf(spec, "cost")
                                                    : make_rbf_cost(spec);
}

// Restriction of p to an evaluation grid: bilinear density at cell centers,
// floored and renormalized.
GridPmf eval_density(const GridPmf& p, std::uint32_t nx, std::uint32_t ny) {
  GridPmf pe(p.b, nx, ny);
  for (std::uint32_t ix = 0; ix < nx; ++ix)
    for (std::uint32_t iy = 0; iy < ny; ++iy)
      pe.at(ix, iy) = std::max(interp_density(p, {pe.cx(ix), pe.cy(iy)}), 1e-300);
  double z = 0.0;
  for (double v : pe.mass) z += v;
  for (double& v : pe.mass) v /= z;
  return pe;
}

VelocityModel load_velocity_model(const fs::path& path) {
  const NetCheckpoint ck = load_net(path.string());
  if (ck.kind != 0) fail("checkpoint is not a velocity field: " + path.string());
  VelocityModel m;
  m.net = ck.net;
  m.temb = ck.emb;
  return m;
}

CostPredictor load_cost_model(const fs::path& path) {
  const NetCheckpoint ck = load_net(path.string());
  if (ck.kind != 1) fail("checkpoint is not a cost predictor: " + path.string());
  CostPredictor m;
  m.net = ck.net;
  m.lemb = ck.emb;
  m.lambda_min = ck.lambda_min;
  m.lambda_max = ck.lambda_max;
  return m;
}

std::vector<Vec2> read_points_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open for reading: " + path.string());
  std::string line;
  std::getline(is, line);  // header
  std::vector<Vec2> pts;
  while (std::getline(is, line)) {
    Vec2 p;
    if (std::sscanf(line.c_str(), "%lf,%lf", &p.x, &p.y) == 2) pts.push_back(p);
  }
  return pts;
}

OdeConfig ode_config_from(const json& g) {
  const json& o = section(g, "ode");
  OdeConfig ode;
  ode.n_steps = o.value("n_steps", ode.n_steps);
  const std::string integ = o.value("integrator", "euler");
  if (integ == "euler") ode.integrator = OdeConfig::Integrator::euler;
  else if (integ == "midpoint") ode.integrator = OdeConfig::Integrator::midpoint;
  else fail("unknown integrator: " + integ);
  ode.t_start = o.value("t_start", ode.t_start);
  ode.t_end = o.value("t_end", ode.t_end);
  ode.terminal_clamp = o.value("terminal_clamp", ode.terminal_clamp);
  ode.trace_count = o.value("trace_count", ode.trace_count);
  return ode;
}

GuidanceSpec guidance_spec_from(const json& g, GuidanceMethod method) {
  GuidanceSpec spec;
  spec.method = method;
  spec.mc_size = g.value("mc_size", spec.mc_size);
  spec.antithetic = g.value("antithetic", spec.antithetic);
  spec.sigma_override = g.value("sigma_override", spec.sigma_override);
  const json& s = section(g, "secant");
  spec.secant.capacity = s.value("capacity", spec.secant.capacity);
  spec.secant.sigma2 = s.value("sigma2", spec.secant.sigma2);
  spec.secant.sigma3 = s.value("sigma3", spec.secant.sigma3);
  spec.secant.gamma0 = s.value("gamma0", spec.secant.gamma0);
  return spec;
}

// --- commands --------------------------------------------------------------------

int cmd_gen_world(RunContext& ctx) {
  const WorldSpec spec = world_spec_from(ctx.cfg);
  const json& w = section(ctx.cfg, "world");
  std::vector<double> q_lambdas{1.0, 10.0, 100.0};
  if (w.contains("q_lambdas")) q_lambdas = w.at("q_lambdas").get<std::vector<double>>();

  const fs::path dir = ctx.out / "world";
  fs::create_directories(dir);

  GridPmf p;
  GridField cost;
  phase(ctx, "build", [&] {
    p = build_density(spec);
    cost = build_cost(spec);
  });
  phase(ctx, "write", [&] {
    save_pmf(p, (dir / "p.pmf").string());
    note_artifact(ctx, dir / "p.pmf");
    write_pgm(p, (dir / "p.pgm").string());
    note_artifact(ctx, dir / "p.pgm");
    save_field(cost, (dir / "cost.field").string());
    note_artifact(ctx, dir / "cost.field");
    write_pgm(cost, (dir / "cost.pgm").string());
    note_artifact(ctx, dir / "cost.pgm");
    for (double lam : q_lambdas) {
      const GridPmf q = lam == 0.0 ? p : tilt(p, cost, lam);
      const std::string tag = "q_star_lambda" + fmt_num(lam);
      save_pmf(q, (dir / (tag + ".pmf")).string());
      note_artifact(ctx, dir / (tag + ".pmf"));
      write_pgm(q, (dir / (tag + ".pgm")).string());
      note_artifact(ctx, dir / (tag + ".pgm"));
    }
  });
  std::cout << "world: " << spec.nx << "x" << spec.ny << " density+cost, " << q_lambdas.size()
            << " tilted targets\n";
  return 0;
}

int cmd_train_flow(RunContext& ctx) {
  const json& f = section(ctx.cfg, "flow");
  GridPmf p;
  phase(ctx, "load", [&] { p = load_pmf((ctx.out / "world" / "p.pmf").string()); });

  ScalarEmbedding emb;
  emb.n_freq = f.value("n_freq", emb.n_freq);
  FlowTrainConfig tcfg;
  tcfg.steps = f.value("steps", tcfg.steps);
  tcfg.batch = f.value("batch", tcfg.batch);
  tcfg.lr = f.value("lr", tcfg.lr);

  Rng root(ctx.cfg.at("seed").get<std::uint64_t>());
  Rng init_rng = root.stream("flow-init");
  VelocityModel model(hidden_widths(f, {64, 64, 64}), emb, init_rng);

  std::vector<double> history;
  phase(ctx, "train", [&] { history = train_flow(model, p, tcfg, root.stream("flow-train")); });

  const fs::path dir = ctx.out / "flow";
  fs::create_directories(dir);
  phase(ctx, "write", [&] {
    save_net({0, model.net, model.temb, 0.0, 0.0}, (dir / "flow.net").string());
    note_artifact(ctx, dir / "flow.net");
    std::ofstream os(dir / "flow_history.csv");
    if (!os) fail("cannot open for writing: " + (dir / "flow_history.csv").string());
    os << "step,loss\n";
    os.precision(17);
    for (std::size_t i = 0; i < history.size(); ++i) os << i << ',' << history[i] << '\n';
    note_artifact(ctx, dir / "flow_history.csv");
  });
  std::cout << "flow: " << tcfg.steps << " steps, final loss " << history.back() << "\n";
  return 0;
}

int cmd_train_cost(RunContext& ctx) {
  const json& c = section(ctx.cfg, "cost");
  GridPmf p;
  GridField cost;
  phase(ctx, "load", [&] {
    p = load_pmf((ctx.out / "world" / "p.pmf").string());
    cost = load_field((ctx.out / "world" / "cost.field").string());
  });

  ScalarEmbedding emb;
  emb.n_freq = c.value("n_freq", emb.n_freq);
  Rng root(ctx.cfg.at("seed").get<std::uint64_t>());
  Rng init_rng = root.stream("cost-init");
  CostPredictor model(hidden_widths(c, {64, 64}), emb, init_rng);
  model.lambda_min = c.value("lambda_min", model.lambda_min);
  model.lambda_max = c.value("lambda_max", model.lambda_max);

  CostTrainConfig tcfg;
  tcfg.steps = c.value("steps", tcfg.steps);
  tcfg.batch = c.value("batch", tcfg.batch);
  tcfg.lr = c.value("lr", tcfg.lr);
  const std::string loss = c.value("loss", "skl");
  if (loss == "skl") tcfg.loss = CostLoss::skl;
  else if (loss == "mse") tcfg.loss = CostLoss::mse;
  else fail("unknown cost loss: " + loss);
  tcfg.stop_gradient = c.value("stop_gradient", tcfg.stop_gradient);
  tcfg.eval_interval = c.value("eval_interval", tcfg.eval_interval);
  if (c.contains("eval_lambdas"))
    tcfg.eval_lambdas = c.at("eval_lambdas").get<std::vector<double>>();
  tcfg.eval_nx = c.value("eval_nx", tcfg.eval_nx);
  tcfg.eval_ny = c.value("eval_ny", tcfg.eval_ny);

  CostTrainResult res;
  phase(ctx, "train", [&] { res = train_cost(model, p, cost, tcfg, root.stream("cost-train")); });

  const fs::path dir = ctx.out / "cost";
  fs::create_directories(dir);
  phase(ctx, "write", [&] {
    save_net({1, model.net, model.lemb, model.lambda_min, model.lambda_max},
             (dir / "cost_best.net").string());
    note_artifact(ctx, dir / "cost_best.net");
    CostPredictor last = model;
    last.net.params = res.last_params;
    save_net({1, last.net, last.lemb, last.lambda_min, last.lambda_max},
             (dir / "cost_last.net").string());
    note_artifact(ctx, dir / "cost_last.net");
    std::ofstream os(dir / "cost_history.csv");
    if (!os) fail("cannot open for writing: " + (dir / "cost_history.csv").string());
    os << "step,loss\n";
    os.precision(17);
    for (std::size_t i = 0; i < res.loss_history.size(); ++i)
      os << i << ',' << res.loss_history[i] << '\n';
    note_artifact(ctx, dir / "cost_history.csv");
    write_cost_metrics_csv(res.metrics, (dir / "cost_metrics.csv").string());
    note_artifact(ctx, dir / "cost_metrics.csv");
  });
  std::cout << "cost: " << tcfg.steps << " steps, best grid skl " << res.best_skl << " at step "
            << res.best_step << "\n";
  return 0;
}

int cmd_optimize(RunContext& ctx) {
  const json& o = section(ctx.cfg, "optimize");
  GridPmf p;
  GridField cost_field;
  VelocityModel flow;
  phase(ctx, "load", [&] {
    p = load_pmf((ctx.out / "world" / "p.pmf").string());
    cost_field = load_field((ctx.out / "world" / "cost.field").string());
    flow = load_velocity_model(ctx.out / "flow" / "flow.net");
  });

  AnnealConfig acfg;
  acfg.n_iters = o.value("n_iters", acfg.n_iters);
  acfg.eta = o.value("eta", acfg.eta);
  acfg.t_min_start = o.value("t_min_start", acfg.t_min_start);
  acfg.t_min_end = o.value("t_min_end", acfg.t_min_end);
  acfg.t_max = o.value("t_max", acfg.t_max);
  acfg.lambda = o.value("lambda", acfg.lambda);
  acfg.flow_term = o.value("flow_term", acfg.flow_term);
  acfg.score_samples = o.value("score_samples", acfg.score_samples);
  acfg.seed = ctx.cfg.at("seed").get<std::uint64_t>();
  const std::size_t n_starts = o.value("n_starts", 20u);
  const std::size_t trace_count = o.value("trace_count", 8u);

  // guidance cost drives the dynamics; the true field is used for reporting
  const std::string which = o.value("cost", "grid");
  GridCost grid_cost(cost_field);
  CostPredictor model_cost;
  const CostFn* drive = &grid_cost;
  if (which == "model") {
    model_cost = load_cost_model(ctx.out / "cost" / "cost_best.net");
    drive = &model_cost;
  } else if (which != "grid") {
    fail("unknown optimize cost: " + which);
  }

  Schedule sched;
  Rng root(acfg.seed);
  Rng start_rng = root.stream("opt-starts");
  const std::vector<Vec2> starts = sample(p, n_starts, start_rng);
  const auto neg_log_p = [&p](const Vec2& x) {
    return -std::log(std::max(interp_density(p, x), 1e-300));
  };

  std::vector<OptTrace> density, baseline;
  phase(ctx, "run", [&] {
    for (std::size_t i = 0; i < n_starts; ++i) {
      Rng ri = root.stream("opt", i);
      density.push_back(
          optimize_point_impl(starts[i], *drive, flow, sched, acfg, ri, neg_log_p));
      baseline.push_back(optimize_cost_only(starts[i], *drive, acfg));
    }
  });

  const auto mean_over = [&](const std::vector<OptTrace>& trs, bool final_row, bool density_col) {
    double acc = 0.0;
    for (const auto& tr : trs) {
      const Vec2 x = final_row ? tr.rows.back().x : tr.rows.front().x;
      acc += density_col ? neg_log_p(x) : interp(cost_field, x);
    }
    return acc / static_cast<double>(trs.size());
  };

  const fs::path dir = ctx.out / "optimize";
  fs::create_directories(dir);
  phase(ctx, "write", [&] {
    const std::size_t keep = std::min(trace_count, density.size());
    write_opt_traces_csv({density.begin(), density.begin() + keep},
                         (dir / "opt_traces.csv").string());
    note_artifact(ctx, dir / "opt_traces.csv");
    write_opt_traces_csv({baseline.begin(), baseline.begin() + keep},
                         (dir / "opt_baseline_traces.csv").string());
    note_artifact(ctx, dir / "opt_baseline_traces.csv");

    json sum;
    sum["n_starts"] = n_starts;
    sum["lambda"] = acfg.lambda;
    sum["initial_mean_cost"] = mean_over(density, false, false);
    sum["initial_mean_neg_log_p"] = mean_over(density, false, true);
    sum["density_final_mean_cost"] = mean_over(density, true, false);
    sum["density_final_mean_neg_log_p"] = mean_over(density, true, true);
    sum["baseline_final_mean_cost"] = mean_over(baseline, true, false);
    sum["baseline_final_mean_neg_log_p"] = mean_over(baseline, true, true);
    write_json(ctx, dir / "summary.json", sum);
    std::cout << "optimize: cost " << sum["initial_mean_cost"].get<double>() << " -> "
              << sum["density_final_mean_cost"].get<double>() << ", baseline -> "
              << sum["baseline_final_mean_cost"].get<double>() << "\n";
  });
  return 0;
}

int cmd_generate(RunContext& ctx) {
  const json& g = section(ctx.cfg, "generate");
  GridPmf p;
  GridField cost_field;
  VelocityModel flow;
  phase(ctx, "load", [&] {
    p = load_pmf((ctx.out / "world" / "p.pmf").string());
    cost_field = load_field((ctx.out / "world" / "cost.field").string());
    flow = load_velocity_model(ctx.out / "flow" / "flow.net");
  });

  std::vector<std::string> methods{"none", "dps", "lgd_mc", "sim_mc", "sa_mc"};
  if (g.contains("methods")) methods = g.at("methods").get<std::vector<std::string>>();
  std::vector<double> lambdas{1.0, 10.0, 100.0};
  if (g.contains("lambdas")) lambdas = g.at("lambdas").get<std::vector<double>>();
  const std::size_t n_samples = g.value("n_samples", 2000u);
  const std::uint32_t hist_nx = g.value("hist_nx", 125u);
  const std::uint32_t hist_ny = g.value("hist_ny", 125u);
  const OdeConfig ode = ode_config_from(g);

  const std::string which = g.value("cost", "grid");
  GridCost grid_cost(cost_field);
  CostPredictor model_cost;
  const CostFn* drive = &grid_cost;
  if (which == "model") {
    model_cost = load_cost_model(ctx.out / "cost" / "cost_best.net");
    drive = &model_cost;
  } else if (which != "grid") {
    fail("unknown generate cost: " + which);
  }

  const GridPmf p_eval = eval_density(p, hist_nx, hist_ny);
  const GridField cost_eval = resample_field(cost_field, hist_nx, hist_ny);

  Schedule sched;
  Rng root(ctx.cfg.at("seed").get<std::uint64_t>());
  const Rng gen_rng = root.stream("generate");

  const fs::path dir = ctx.out / "generate";
  fs::create_directories(dir);
  json rows = json::array();
  phase(ctx, "run", [&] {
    for (const std::string& mname : methods) {
      const GuidanceMethod method = method_from_name(mname);
      const std::vector<double> lams =
          method == GuidanceMethod::none ? std::vector<double>{0.0} : lambdas;
      for (double lam : lams) {
        const GuidanceSpec spec = guidance_spec_from(g, method);
        const GuidedResult res =
            guided_sample(flow, *drive, sched, spec, lam, n_samples, ode, gen_rng, ctx.threads);

        const std::string tag = mname + "_lambda" + fmt_num(lam);
        write_points_csv(res.points, (dir / ("points_" + tag + ".csv")).string());
        note_artifact(ctx, dir / ("points_" + tag + ".csv"));
        const GridPmf hist = histogram(res.points, p.b, hist_nx, hist_ny);
        save_pmf(hist, (dir / ("hist_" + tag + ".pmf")).string());
        note_artifact(ctx, dir / ("hist_" + tag + ".pmf"));
        if (!res.traces.empty()) {
          write_guide_traces_csv(res.traces, (dir / ("traces_" + tag + ".csv")).string());
          note_artifact(ctx, dir / ("traces_" + tag + ".csv"));
        }

        const GridPmf q_ref = lam == 0.0 ? p_eval : tilt(p_eval, cost_eval, lam);
        double mean_cost = 0.0;
        for (const Vec2& pt : res.points) mean_cost += interp(cost_field, pt);
        mean_cost /= static_cast<double>(res.points.size());

        json row;
        row["method"] = mname;
        row["lambda"] = lam;
        row["n"] = n_samples;
        row["kl_to_qstar"] = kl(hist, q_ref);
        row["kl_to_p"] = kl(hist, p_eval);
        row["mean_cost"] = mean_cost;
        rows.push_back(row);
      }
    }
  });
  phase(ctx, "write", [&] {
    json sum;
    sum["results"] = rows;
    write_json(ctx, dir / "summary.json", sum);
  });
  for (const auto& r : rows)
    std::cout << "generate: " << r["method"].get<std::string>() << " lambda "
              << r["lambda"].get<double>() << " kl_to_qstar " << r["kl_to_qstar"].get<double>()
              << "\n";
  return 0;
}

// Randomized queue of valid curvature pairs against an SPD map.
MemoryQueue random_queue(Rng& rng, Eigen::Index d, int m) {
  Eigen::MatrixXd G(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) G(i, j) = rng.normal2().x;
  const Eigen::MatrixXd A = G * G.transpose() + 0.3 * Eigen::MatrixXd::Identity(d, d);
  MemoryQueue q;
  q.capacity = static_cast<std::size_t>(m);
  for (int k = 0; k < m; ++k) {
    SecantPair pr;
    pr.s = Eigen::VectorXd(d);
    for (Eigen::Index i = 0; i < d; ++i) pr.s[i] = rng.normal2().x;
    pr.y_hat = A * pr.s;
    pr.u = rng.uniform(0.6, 1.4);
    pr.w = rng.uniform(0.0, 0.4);
    push_pair(q, pr);
  }
  return q;
}

int cmd_check(RunContext& ctx) {
  const json& c = section(ctx.cfg, "check");
  const std::uint64_t seed = ctx.cfg.at("seed").get<std::uint64_t>();
  const fs::path dir = ctx.out / "check";
  fs::create_directories(dir);
  json checks = json::array();
  bool all_pass = true;
  const auto add = [&](const std::string& name, bool pass, json extra) {
    extra["name"] = name;
    extra["pass"] = pass;
    checks.push_back(extra);
    all_pass = all_pass && pass;
    std::cout << "check " << name << ": " << (pass ? "pass" : "FAIL") << "\n";
  };
  Schedule sched;

  phase(ctx, "covariance_gap_bound", [&] {
    const int n_cfg = c.value("bound_configs", 10);
    Rng rng = Rng(seed).stream("check-bound");
    std::vector<BoundReport> reports;
    bool pass = true;
    for (int rep = 0; rep < n_cfg; ++rep) {
      GaussianWorld w;
      w.mean = {0.5 * rng.normal2().x, 0.5 * rng.normal2().x};
      Eigen::Matrix2d G;
      G << 1.0 + 0.3 * rng.normal2().x, 0.2 * rng.normal2().x, 0.0,
          1.0 + 0.3 * rng.normal2().x;
      w.S = G * G.transpose() + 0.3 * Eigen::Matrix2d::Identity();
      Eigen::Matrix2d H = Eigen::Matrix2d::Zero();
      H(0, 0) = 0.5 + rng.uniform(0.0, 1.5);
      H(1, 1) = 0.5 + rng.uniform(0.0, 1.5);
      const QuadraticCost cost(H, {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
      const double t = rng.uniform(0.2, 0.8);
      const Coeffs cf = coeffs(sched, t);
      const double s2a = cf.sigma * cf.sigma / cf.alpha;
      const Eigen::Matrix2d Sp = s2a * posterior_jacobian(w, t) +
                                 rng.uniform(0.0, 0.5) * Eigen::Matrix2d::Identity();
      const BoundReport r =
          check_theorem2(w, cost, rng.uniform(0.5, 2.0), sched,
                         {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)}, t, Sp);
      pass = pass && r.pass;
      reports.push_back(r);
    }
    write_bound_reports_jsonl(reports, (dir / "bounds.jsonl").string());
    note_artifact(ctx, dir / "bounds.jsonl");
    add("covariance_gap_bound", pass, {{"configs", n_cfg}});
  });

  phase(ctx, "compact_dense_equivalence", [&] {
    const int n_seq = c.value("sequences", 20);
    Rng rng = Rng(seed).stream("check-compact");
    double max_rel = 0.0;
    for (int rep = 0; rep < n_seq; ++rep) {
      const MemoryQueue q = random_queue(rng, 16, 20);
      const CompactB B = update_B(q, 1.0, 16);
      const Eigen::MatrixXd dense = dense_B_recursion(q, 1.0, 16);
      max_rel = std::max(max_rel, (dense_of(B) - dense).norm() / dense.norm());
    }
    add("compact_dense_equivalence", max_rel <= 1e-10,
        {{"sequences", n_seq}, {"max_rel_frobenius", max_rel}});
  });

  phase(ctx, "sqrt_factorization", [&] {
    const int n_fac = c.value("factorizations", 100);
    Rng rng = Rng(seed).stream("check-sqrt");
    double max_rel = 0.0;
    for (int rep = 0; rep < n_fac; ++rep) {
      const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng.below(63));
      const int m = 1 + static_cast<int>(rng.below(16));
      const MemoryQueue q = random_queue(rng, d, m);
      const CompactB B = update_B(q, 1.0, d);
      const SqrtFactor F = semi_numerical_sqrt(B);
      Eigen::MatrixXd L(d, d);
      for (Eigen::Index j = 0; j < d; ++j)
        L.col(j) = apply_L(F, Eigen::VectorXd::Unit(d, j));
      max_rel = std::max(max_rel,
                         (L * L.transpose() - dense_of(B)).norm() / dense_of(B).norm());
    }
    add("sqrt_factorization", max_rel <= 1e-8,
        {{"factorizations", n_fac}, {"max_rel_frobenius", max_rel}});
  });

  phase(ctx, "curvature_band", [&] {
    const GaussianWorld w{{0.0, 0.0}, Eigen::Matrix2d::Identity()};
    const AnalyticGaussianFlow flow{w};
    const QuadraticCost cost(Eigen::Matrix2d::Identity(), {0.0, 0.5});
    SecantConfig scfg;
    bool pass = true;
    double max_resid = 0.0;
    Rng root = Rng(seed).stream("check-band");
    for (int traj = 0; traj < 5; ++traj) {
      std::vector<double> grid(21);
      for (int k = 0; k <= 20; ++k) grid[k] = 0.98 * k / 20.0;
      Rng rng = root.stream("traj", traj);
      SaMcState st = SaMcState::init(scfg, sched, grid, rng.normal2());
      while (!st.done()) {
        SaMcDiag d;
        sa_mc_step(st, flow, cost, 1.0, 16, rng, false, &d);
        max_resid = std::max(max_resid, d.secant_resid);
        if (!d.pair_skipped && !d.evicted) {
          const double slack = 1e-10 * std::max(1.0, d.s_dot_Bs);
          pass = pass && d.s_dot_y_hat >= (1.0 - scfg.sigma2) * d.s_dot_Bs - slack &&
                 d.s_dot_y_hat <= (1.0 + scfg.sigma3) * d.s_dot_Bs + slack;
        }
      }
    }
    pass = pass && max_resid <= 1e-8;
    add("curvature_band", pass, {{"max_secant_resid", max_resid}});
  });

  phase(ctx, "score_sign", [&] {
    const GaussianWorld iso;
    double max_err = 0.0;
    for (int i = 0; i < 5; ++i) {
      const Vec2 x{-1.0 + 0.5 * i, 0.7 - 0.3 * i};
      const Vec2 sc = score_from_velocity(sched, x, analytic_velocity(iso, x, 0.5), 0.5);
      max_err = std::max(max_err, norm(sc - Vec2{-2.0 * x.x, -2.0 * x.y}));
    }
    bool pass = max_err <= 1e-10;
    GaussianWorld w;
    w.mean = {0.3, -0.6};
    w.S << 2.0, 0.4, 0.4, 0.8;
    double max_grid = 0.0;
    for (double t : {0.1, 0.3, 0.5, 0.7, 0.9})
      for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) {
          const Vec2 x{-2.0 + 0.5 * i, -2.0 + 0.5 * j};
          const Vec2 sc = score_from_velocity(sched, x, analytic_velocity(w, x, t), t);
          max_grid = std::max(max_grid, norm(sc - analytic_score(w, x, t)));
        }
    pass = pass && max_grid <= 1e-8;
    add("score_sign", pass, {{"max_iso_err", max_err}, {"max_grid_err", max_grid}});
  });

  phase(ctx, "small_tilt_ratio", [&] {
    const std::uint32_t n = c.value("ratio_grid", 64u);
    WorldSpec spec;
    spec.seed = seed;
    spec.nx = spec.ny = n;
    const GridPmf p = build_density(spec);
    const GridField jt = build_cost(spec);
    WorldSpec pspec = spec;
    pspec.seed = seed + 1;
    const GridField pert = make_grf(pspec, "pert");
    std::vector<double> jm(jt.values.size());
    for (std::size_t i = 0; i < jm.size(); ++i) jm[i] = jt.values[i] + 0.5 * pert.values[i];
    const double lam = 1e-3;
    const PopulationFunctionals s = population_functionals(p, jt.values, jm, lam);
    const double ratio = s.skl / (lam * lam * s.var);
    add("small_tilt_ratio", ratio > 0.95 && ratio < 1.05, {{"ratio", ratio}});
  });

  json report;
  report["all_pass"] = all_pass;
  report["checks"] = checks;
  write_json(ctx, dir / "report.json", report);
  return all_pass ? 0 : 1;
}

int cmd_evaluate(RunContext& ctx) {
  const json& e = section(ctx.cfg, "evaluate");
  if (!e.contains("points")) fail("evaluate needs a points path");
  fs::path pts_path = fs::path(e.at("points").get<std::string>());
  if (pts_path.is_relative()) pts_path = ctx.out / pts_path;
  const double lam = e.value("lambda", 1.0);
  const std::uint32_t hist_nx = e.value("hist_nx", 125u);
  const std::uint32_t hist_ny = e.value("hist_ny", 125u);

  GridPmf p;
  GridField cost_field;
  std::vector<Vec2> pts;
  phase(ctx, "load", [&] {
    p = load_pmf((ctx.out / "world" / "p.pmf").string());
    cost_field = load_field((ctx.out / "world" / "cost.field").string());
    pts = read_points_csv(pts_path);
  });
  if (pts.empty()) fail("no points in " + pts_path.string());

  json metrics;
  phase(ctx, "run", [&] {
    const GridPmf p_eval = eval_density(p, hist_nx, hist_ny);
    const GridField cost_eval = resample_field(cost_field, hist_nx, hist_ny);
    const GridPmf hist = histogram(pts, p.b, hist_nx, hist_ny);
    const GridPmf q_ref = lam == 0.0 ? p_eval : tilt(p_eval, cost_eval, lam);
    double mean_cost = 0.0, mean_nlp = 0.0;
    for (const Vec2& pt : pts) {
      mean_cost += interp(cost_field, pt);
      mean_nlp += -std::log(std::max(interp_density(p, pt), 1e-300));
    }
    metrics["points"] = rel_to_out(ctx, pts_path);
    metrics["n"] = pts.size();
    metrics["lambda"] = lam;
    metrics["kl_to_qstar"] = kl(hist, q_ref);
    metrics["kl_to_p"] = kl(hist, p_eval);
    metrics["mean_cost"] = mean_cost / static_cast<double>(pts.size());
    metrics["mean_neg_log_p"] = mean_nlp / static_cast<double>(pts.size());
  });
  const fs::path dir = ctx.out / "evaluate";
  fs::create_directories(dir);
  phase(ctx, "write", [&] { write_json(ctx, dir / "metrics.json", metrics); });
  std::cout << "evaluate: n " << pts.size() << " kl_to_qstar "
            << metrics["kl_to_qstar"].get<double>() << " mean_cost "
            << metrics["mean_cost"].get<double>() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tilted flow-matching generation and design optimization in 2D"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  unsigned threads = 1;
  app.add_option("-c,--config", config_path, "JSON config file");
  app.add_option("--set", sets, "override a config key, key.path=value");
  app.add_option("--threads", threads, "threads for per-trajectory fan-out")
      ->check(CLI::Range(1u, 64u));

  app.add_subcommand("gen-world", "generate density, cost field and tilted targets");
  app.add_subcommand("train-flow", "train the velocity model on the world density");
  app.add_subcommand("train-cost", "train the tilt-aware cost predictor");
  app.add_subcommand("optimize", "run annealed design optimization against a baseline");
  app.add_subcommand("generate", "sample guided trajectories and score them");
  app.add_subcommand("check", "run the analytic self-checks and write a report");
  app.add_subcommand("evaluate", "score an existing point set against the world");

  CLI11_PARSE(app, argc, argv);

  try {
    RunContext ctx;
    ctx.command = app.get_subcommands().front()->get_name();
    ctx.cfg = load_config(config_path, sets);
    ctx.threads = threads;
    ctx.out = resolve_out_dir(ctx.cfg);
    fs::create_directories(ctx.out);

    int rc = 1;
    if (ctx.command == "gen-world") rc = cmd_gen_world(ctx);
    else if (ctx.command == "train-flow") rc = cmd_train_flow(ctx);
    else if (ctx.command == "train-cost") rc = cmd_train_cost(ctx);
    else if (ctx.command == "optimize") rc = cmd_optimize(ctx);
    else if (ctx.command == "generate") rc = cmd_generate(ctx);
    else if (ctx.command == "check") rc = cmd_check(ctx);
    else if (ctx.command == "evaluate") rc = cmd_evaluate(ctx);
    write_manifest(ctx);
    return rc;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
}
