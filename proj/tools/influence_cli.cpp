#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "influence/errors.hpp"
#include "influence/oracle.hpp"
#include "influence/pipeline.hpp"

using namespace influence;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string model = "auto";
  std::string head = "categorical";
  std::string data = "synthetic:biased";
  std::string label = "y";
  std::string sensitive;
  std::string method = "fisher";
  std::string reg = "l2:0.001";
  std::string solver = "auto";
  double lissa_sigma = 1.0 / 500.0;
  int lissa_depth = 2000;
  int lissa_reps = 3;
  std::size_t lissa_batch = 0;
  double damping = 0.0;
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string params;
  bool no_standardize = false;

  double lr = 1e-4;
  int epochs = 100;
  std::size_t batch = 100;
  double wd = 1e-6;
  std::string polish = "auto";

  std::size_t cv_k = 0;
  std::size_t cv_folds = 5;
  std::vector<std::size_t> remove;
  double epsilon = 0.0;
  double delta = 0.05;
  std::string constants;
  std::size_t test_index = 0;
  std::string metric = "dp";
  int bins = 10;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Inline JSON, a JSON file, or nullopt when the argument looks like shorthand.
std::optional<nlohmann::json> json_arg(const std::string& arg) {
  if (!arg.empty() && (arg.front() == '{' || arg.front() == '[')) return nlohmann::json::parse(arg);
  if (fs::is_regular_file(arg)) return nlohmann::json::parse(read_text(arg));
  return std::nullopt;
}

ExpFamilyHead parse_head(const std::string& arg) {
  if (auto j = json_arg(arg)) return ExpFamilyHead::from_json(*j);
  if (arg == "gaussian") return ExpFamilyHead::gaussian();
  if (arg.rfind("categorical", 0) == 0) {
    const auto colon = arg.find(':');
    return ExpFamilyHead::categorical(colon == std::string::npos ? 2 : std::stoi(arg.substr(colon + 1)));
  }
  throw ParseError("unknown head '" + arg + "'");
}

// "linear" or "mlp:<w1>[,<w2>...][:act]"; dims come from the data and head.
Model parse_model(const std::string& arg, int in, int out) {
  if (auto j = json_arg(arg)) return Model::from_json(*j);
  if (arg == "linear") return Model::linear(in, out);
  if (arg.rfind("mlp:", 0) == 0) {
    std::string rest = arg.substr(4);
    Activation act = Activation::kRelu;
    const auto colon = rest.find(':');
    if (colon != std::string::npos) {
      act = parse_activation(rest.substr(colon + 1));
      rest = rest.substr(0, colon);
    }
    std::vector<int> hidden;
    std::stringstream ss(rest);
    std::string w;
    while (std::getline(ss, w, ',')) hidden.push_back(std::stoi(w));
    return Model::mlp(in, hidden, out, act);
  }
  throw ParseError("unknown model '" + arg + "'");
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--model", o.model, "auto | linear | mlp:<widths>[:act] | JSON | file; auto: mlp:1000:selu for fairness, else linear")->capture_default_str();
  app->add_option("--head", o.head, "categorical[:k] | gaussian | JSON | file")->capture_default_str();
  app->add_option("--data", o.data, "CSV path or synthetic:<blobs|linear|biased>[:k=v,...]")->capture_default_str();
  app->add_option("--label", o.label, "label column")->capture_default_str();
  app->add_option("--sensitive", o.sensitive, "sensitive column (CSV only)");
  app->add_flag("--no-standardize", o.no_standardize, "keep CSV features as read");
  app->add_option("--method", o.method, "fisher | hessian | both")->capture_default_str();
  app->add_option("--reg", o.reg, "none | l2:<lambda> | l1:<lambda>")->capture_default_str();
  app->add_option("--solver", o.solver, "auto | dense | lissa")->capture_default_str();
  app->add_option("--lissa-sigma", o.lissa_sigma)->capture_default_str();
  app->add_option("--lissa-depth", o.lissa_depth)->capture_default_str();
  app->add_option("--lissa-reps", o.lissa_reps)->capture_default_str();
  app->add_option("--lissa-batch", o.lissa_batch, "0: full batch up to 4096 samples, else 512")->capture_default_str();
  app->add_option("--damping", o.damping)->capture_default_str();
  app->add_option("--seed", o.seed)->capture_default_str();
  app->add_option("--out", o.out, "output directory")->capture_default_str();
  app->add_option("--params", o.params, "skip training and load theta from a params.json");
  app->add_option("--lr", o.lr)->capture_default_str();
  app->add_option("--epochs", o.epochs)->capture_default_str();
  app->add_option("--batch", o.batch)->capture_default_str();
  app->add_option("--wd", o.wd, "decoupled weight decay")->capture_default_str();
  app->add_option("--polish", o.polish, "auto | on | off: refine theta to a stationary point")->capture_default_str();
}

std::vector<CurvatureKind> parse_methods(const std::string& m) {
  if (m == "both") return {CurvatureKind::kFisher, CurvatureKind::kHessian};
  return {parse_curvature_kind(m)};
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write '" + path.string() + "'");
  out << text;
}

int run(Task task, const Options& o) {
  CsvOptions csv;
  csv.label_column = o.label;
  if (!o.sensitive.empty()) csv.sensitive_column = o.sensitive;
  csv.standardize = !o.no_standardize;
  const Dataset data = load_dataset(o.data, csv, o.seed);

  ExperimentConfig cfg;
  cfg.task = task;
  cfg.methods = parse_methods(o.method);
  cfg.head = parse_head(o.head);
  std::string model_arg = o.model;
  if (model_arg == "auto") model_arg = task == Task::kFairness ? "mlp:1000:selu" : "linear";
  cfg.model = parse_model(model_arg, data.dim(), cfg.head.dim());
  cfg.data = o.data;
  cfg.label_column = o.label;
  cfg.sensitive_column = csv.sensitive_column;
  cfg.reg = Regularizer::parse(o.reg);
  cfg.solver.method = SolverConfig::parse_method(o.solver);
  cfg.solver.damping = o.damping;
  cfg.solver.lissa.scale = o.lissa_sigma;
  cfg.solver.lissa.depth = o.lissa_depth;
  cfg.solver.lissa.repetitions = o.lissa_reps;
  cfg.solver.lissa.batch_size = o.lissa_batch;
  cfg.solver.lissa.seed = o.seed;
  cfg.train.learning_rate = o.lr;
  cfg.train.epochs = o.epochs;
  cfg.train.batch_size = o.batch;
  cfg.train.weight_decay = o.wd;
  cfg.train.seed = o.seed;
  if (o.polish == "auto") {
    cfg.polish = cfg.model.is_linear_in_params();
  } else if (o.polish == "on" || o.polish == "off") {
    cfg.polish = o.polish == "on";
  } else {
    throw InvalidInput("--polish takes auto, on or off");
  }
  cfg.seed = o.seed;
  cfg.cv_k = o.cv_k;
  cfg.cv_folds = o.cv_folds;
  cfg.unlearn_indices = o.remove;
  if (o.epsilon > 0.0) {
    NoiseRequest nr;
    nr.epsilon = o.epsilon;
    nr.delta = o.delta;
    nr.seed = o.seed;
    if (!o.constants.empty()) {
      auto j = json_arg(o.constants);
      if (!j) throw ParseError("--constants needs JSON or a JSON file");
      nr.constants = BoundConstants::from_json(*j);
    }
    cfg.noise = nr;
  }
  cfg.test_index = o.test_index;
  cfg.fairness.metric = parse_fairness_metric(o.metric);
  cfg.fairness.bins = o.bins;
  cfg.fairness.validate();

  FittedModel fitted;
  if (!o.params.empty()) {
    const auto j = nlohmann::json::parse(read_text(o.params));
    const auto theta = j.at("theta").get<std::vector<double>>();
    fitted.theta = Eigen::Map<const Vector>(theta.data(), static_cast<Eigen::Index>(theta.size()));
    if (fitted.theta.size() != cfg.model.num_params()) throw InvalidInput("params.json does not match the model");
  } else {
    fitted = fit(cfg, data);
  }
  const auto results = run_experiment(cfg, data, fitted.theta);

  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_file(dir / "result.json", results_json(results));
  write_file(dir / "timing.json", timing_json(results));
  write_file(dir / "influences.csv", influences_csv(results));
  write_file(dir / "report.md", report_markdown(results));
  nlohmann::json params = {{"model", cfg.model.to_json()},
                           {"theta", std::vector<double>(fitted.theta.data(),
                                                         fitted.theta.data() + fitted.theta.size())}};
  if (!fitted.loss_curve.empty()) params["loss_curve"] = fitted.loss_curve;
  write_file(dir / "params.json", params.dump(2) + "\n");
  std::cout << report_markdown(results);
  return 0;
}

int run_oracle(const std::string& check, std::uint64_t seed) {
  struct Case {
    std::string name;
    Model model;
    ExpFamilyHead head;
  };
  const int dim = 4;
  std::vector<Case> cases = {
      {"linear/categorical", Model::linear(dim, 3), ExpFamilyHead::categorical(3)},
      {"linear/gaussian", Model::linear(dim, 1), ExpFamilyHead::gaussian()},
      {"mlp-relu/categorical", Model::mlp(dim, {6}, 2, Activation::kRelu), ExpFamilyHead::categorical(2)},
      {"mlp-selu/gaussian", Model::mlp(dim, {5, 4}, 1, Activation::kSelu), ExpFamilyHead::gaussian()},
  };
  std::vector<oracle::FdTarget> targets;
  if (check == "all") {
    targets = {oracle::FdTarget::kGrad, oracle::FdTarget::kJvp, oracle::FdTarget::kVjp, oracle::FdTarget::kHvp,
               oracle::FdTarget::kFisher};
  } else {
    targets = {oracle::parse_fd_target(check)};
  }
  bool ok = true;
  std::printf("%-22s %-7s %-12s %-10s %s\n", "model", "check", "max_error", "tolerance", "status");
  for (const auto& c : cases) {
    Dataset data = c.head.kind() == ExpFamilyHead::Kind::kGaussian ? make_linear_regression(5, dim, 0.3, seed)
                                                                   : make_blobs(5, dim, 2.0, seed);
    if (c.head.classes() == 3) {
      for (Eigen::Index i = 0; i < data.labels.size(); ++i) data.labels[i] = static_cast<double>(i % 3);
    }
    const ParamVector theta = c.model.init_params(seed + 1);
    for (auto t : targets) {
      const auto r = oracle::fd_check(t, c.model, c.head, data, theta, seed);
      ok = ok && r.passed;
      std::printf("%-22s %-7s %-12.3e %-10.1e %s\n", c.name.c_str(), oracle::to_string(t).c_str(), r.max_error,
                  r.tolerance, r.passed ? "PASS" : ("FAIL " + r.detail).c_str());
    }
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Influence estimation with Fisher and Hessian curvature"};
  app.require_subcommand(1);
  Options o;

  auto* train_cmd = app.add_subcommand("train", "fit the model and report training metrics");
  auto* cv_cmd = app.add_subcommand("cv", "approximate k-fold cross-validation");
  auto* unlearn_cmd = app.add_subcommand("unlearn", "remove points via one influence step");
  auto* attr_cmd = app.add_subcommand("attribute", "score training points against a test row");
  auto* fair_cmd = app.add_subcommand("fairness", "unlearn points that hurt a fairness metric");
  for (auto* c : {train_cmd, cv_cmd, unlearn_cmd, attr_cmd, fair_cmd}) add_common(c, o);
  cv_cmd->add_option("--k", o.cv_k, "held-out size per fold, 0: 20% of n")->capture_default_str();
  cv_cmd->add_option("--folds", o.cv_folds)->capture_default_str();
  unlearn_cmd->add_option("--remove", o.remove, "indices to remove")->delimiter(',');
  unlearn_cmd->add_option("--epsilon", o.epsilon, "privacy epsilon; 0 disables noise")->capture_default_str();
  unlearn_cmd->add_option("--delta", o.delta)->capture_default_str();
  unlearn_cmd->add_option("--constants", o.constants, "bound constants as JSON or a JSON file");
  attr_cmd->add_option("--test-index", o.test_index, "row used as the test point")->capture_default_str();
  fair_cmd->add_option("--metric", o.metric, "dp | chi2")->capture_default_str();
  fair_cmd->add_option("--bins", o.bins)->capture_default_str();

  auto* oracle_cmd = app.add_subcommand("oracle", "finite-difference checks of the differentiation code");
  std::string check = "all";
  oracle_cmd->add_option("--check", check, "all | grad | jvp | vjp | hvp | fisher")->capture_default_str();
  oracle_cmd->add_option("--seed", o.seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (oracle_cmd->parsed()) return run_oracle(check, o.seed);
    const std::pair<CLI::App*, Task> tasks[] = {{train_cmd, Task::kTrain},
                                                {cv_cmd, Task::kCv},
                                                {unlearn_cmd, Task::kUnlearn},
                                                {attr_cmd, Task::kAttribute},
                                                {fair_cmd, Task::kFairness}};
    for (const auto& [cmd, task] : tasks) {
      if (cmd->parsed()) return run(task, o);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
