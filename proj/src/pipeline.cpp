#include "influence/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "influence/errors.hpp"
#include "influence/oracle.hpp"

namespace influence {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> to_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

// Column as numbers, or nullopt if every cell is text.
std::optional<std::vector<double>> numeric_column(const std::vector<std::vector<std::string>>& rows, std::size_t col,
                                                  const std::string& name) {
  std::vector<double> out(rows.size());
  std::optional<std::size_t> first_text;
  std::size_t numbers = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (auto v = to_number(rows[r][col])) {
      out[r] = *v;
      ++numbers;
    } else if (!first_text) {
      first_text = r;
    }
  }
  if (numbers == rows.size()) return out;
  if (numbers == 0) return std::nullopt;
  throw ParseError("non-numeric cell '" + rows[*first_text][col] + "' at row " + std::to_string(*first_text + 2) +
                   ", column '" + name + "'");
}

std::vector<double> coded_column(const std::vector<std::vector<std::string>>& rows, std::size_t col,
                                 const std::string& name) {
  if (auto v = numeric_column(rows, col, name)) return *v;
  std::set<std::string> levels;
  for (const auto& r : rows) levels.insert(r[col]);
  std::map<std::string, double> code;
  double c = 0.0;
  for (const auto& l : levels) code[l] = c++;
  std::vector<double> out(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) out[r] = code[rows[r][col]];
  return out;
}

}  // namespace

Dataset parse_csv(std::istream& in, const CsvOptions& opts) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty CSV input");
  const auto header = split_row(line);
  std::vector<std::vector<std::string>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_row(line);
    if (cells.size() != header.size()) {
      throw ParseError("row " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(header.size()));
    }
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw ParseError("CSV has no data rows");

  auto find = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError("missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t label_col = find(opts.label_column);
  const std::size_t none = header.size();
  const std::size_t sens_col = opts.sensitive_column ? find(*opts.sensitive_column) : none;

  Dataset data;
  data.label_name = opts.label_column;
  std::vector<std::vector<double>> columns;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_col || c == sens_col) continue;
    if (auto v = numeric_column(rows, c, header[c])) {
      columns.push_back(std::move(*v));
      data.feature_names.push_back(header[c]);
      continue;
    }
    std::set<std::string> levels;
    for (const auto& r : rows) levels.insert(r[c]);
    for (const auto& level : levels) {
      std::vector<double> col(rows.size());
      for (std::size_t r = 0; r < rows.size(); ++r) col[r] = rows[r][c] == level ? 1.0 : 0.0;
      columns.push_back(std::move(col));
      data.feature_names.push_back(header[c] + "=" + level);
    }
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  data.features.resize(n, static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    for (Eigen::Index r = 0; r < n; ++r) data.features(r, static_cast<Eigen::Index>(c)) = columns[c][r];
  }
  const auto labels = coded_column(rows, label_col, opts.label_column);
  data.labels = Eigen::Map<const Vector>(labels.data(), n);
  if (sens_col != none) {
    const auto s = coded_column(rows, sens_col, *opts.sensitive_column);
    data.sensitive = Eigen::Map<const Vector>(s.data(), n);
    data.sensitive_name = *opts.sensitive_column;
  }
  data.validate();
  if (opts.standardize) standardize(data);
  return data;
}

Dataset load_csv(const std::string& path, const CsvOptions& opts) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return parse_csv(in, opts);
}

void write_csv(std::ostream& out, const Dataset& data) {
  out << std::setprecision(17);
  for (int j = 0; j < data.dim(); ++j) {
    out << (j < static_cast<int>(data.feature_names.size()) ? data.feature_names[j] : "x" + std::to_string(j)) << ',';
  }
  out << data.label_name;
  if (data.sensitive) out << ',' << data.sensitive_name;
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (int j = 0; j < data.dim(); ++j) out << data.features(static_cast<Eigen::Index>(i), j) << ',';
    out << data.y(i);
    if (data.sensitive) out << ',' << (*data.sensitive)[static_cast<Eigen::Index>(i)];
    out << '\n';
  }
}

void write_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write '" + path + "'");
  write_csv(out, data);
}

void standardize(Dataset& data) {
  const auto n = static_cast<double>(data.size());
  for (Eigen::Index j = 0; j < data.features.cols(); ++j) {
    auto col = data.features.col(j);
    const double mean = col.sum() / n;
    col.array() -= mean;
    const double sd = std::sqrt(col.squaredNorm() / n);
    if (sd > 0.0) col /= sd;
  }
}

namespace {

Dataset empty_dataset(std::size_t n, int dim) {
  if (n < 1) throw InvalidInput("synthetic data needs n >= 1");
  if (dim < 1) throw InvalidInput("synthetic data needs d >= 1");
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(n), dim);
  d.labels.resize(static_cast<Eigen::Index>(n));
  for (int j = 0; j < dim; ++j) d.feature_names.push_back("x" + std::to_string(j));
  return d;
}

}  // namespace

Dataset make_blobs(std::size_t n, int dim, double sep, std::uint64_t seed) {
  Dataset d = empty_dataset(n, dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  const double shift = 0.5 * sep / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
    const bool y = coin(rng);
    for (int j = 0; j < dim; ++j) d.features(i, j) = normal(rng) + (y ? shift : -shift);
    d.labels[i] = y ? 1.0 : 0.0;
  }
  return d;
}

Dataset make_linear_regression(std::size_t n, int dim, double noise, std::uint64_t seed) {
  Dataset d = empty_dataset(n, dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double w = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
    double y = 0.0;
    for (int j = 0; j < dim; ++j) {
      d.features(i, j) = normal(rng);
      y += w * d.features(i, j);
    }
    d.labels[i] = y + noise * normal(rng);
  }
  return d;
}

Dataset make_biased_groups(std::size_t n, int dim, double bias, std::uint64_t seed) {
  if (dim < 2) throw InvalidInput("biased groups need d >= 2");
  if (!(bias >= 0.0 && bias <= 1.0)) throw InvalidInput("bias must lie in [0, 1]");
  Dataset d = empty_dataset(n, dim);
  d.feature_names.back() = "proxy";
  d.sensitive = Vector(static_cast<Eigen::Index>(n));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution flip(bias);
  const int m = dim - 1;
  const double w = 1.0 / std::sqrt(static_cast<double>(m));
  for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
    const bool s = coin(rng);
    double score = 0.0;
    for (int j = 0; j < m; ++j) {
      d.features(i, j) = normal(rng);
      score += w * d.features(i, j);
    }
    d.features(i, m) = (s ? 1.0 : -1.0) + normal(rng);
    const bool clean = score + kBiasedLabelNoise * normal(rng) > 0.0;
    const bool y = flip(rng) ? s : clean;
    d.labels[i] = y ? 1.0 : 0.0;
    (*d.sensitive)[i] = s ? 1.0 : 0.0;
  }
  return d;
}

Dataset load_dataset(const std::string& spec, const CsvOptions& opts, std::uint64_t seed) {
  const std::string prefix = "synthetic:";
  if (spec.rfind(prefix, 0) != 0) return load_csv(spec, opts);
  std::string rest = spec.substr(prefix.size());
  const auto colon = rest.find(':');
  const std::string kind = rest.substr(0, colon);
  std::map<std::string, double> kv;
  if (colon != std::string::npos) {
    std::stringstream ss(rest.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ParseError("synthetic option '" + item + "' needs key=value");
      const auto v = to_number(item.substr(eq + 1));
      if (!v) throw ParseError("synthetic option '" + item + "' is not numeric");
      kv[item.substr(0, eq)] = *v;
    }
  }
  auto get = [&](const std::string& k, double def) {
    const auto it = kv.find(k);
    return it == kv.end() ? def : it->second;
  };
  for (const auto& [k, v] : kv) {
    if (k != "n" && k != "d" && k != "sep" && k != "noise" && k != "bias" && k != "seed") {
      throw ParseError("unknown synthetic option '" + k + "'");
    }
  }
  const auto n = static_cast<std::size_t>(get("n", 4000));
  const int dim = static_cast<int>(get("d", 14));
  const auto s = static_cast<std::uint64_t>(get("seed", static_cast<double>(seed)));
  if (kind == "blobs") return make_blobs(n, dim, get("sep", 2.0), s);
  if (kind == "linear") return make_linear_regression(n, dim, get("noise", 0.5), s);
  if (kind == "biased") return make_biased_groups(n, dim, get("bias", 0.3), s);
  throw ParseError("unknown synthetic generator '" + kind + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidInput("learning rate must be positive");
  if (epochs < 1) throw InvalidInput("epochs must be >= 1");
  if (batch_size < 1) throw InvalidInput("batch size must be >= 1");
  if (!(weight_decay >= 0.0)) throw InvalidInput("weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidInput("betas must lie in [0, 1)");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", learning_rate}, {"epochs", epochs}, {"batch", batch_size}, {"weight_decay", weight_decay},
          {"beta1", beta1},      {"beta2", beta2},   {"eps", eps},          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("lr", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch", c.batch_size);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
  return c;
}

AdamW::AdamW(Eigen::Index dim, const TrainConfig& cfg) : cfg_(cfg), m_(Vector::Zero(dim)), v_(Vector::Zero(dim)) {
  cfg_.validate();
}

void AdamW::step(ParamVector& theta, const ParamVector& grad) {
  if (theta.size() != m_.size() || grad.size() != m_.size()) throw InvalidInput("AdamW dimension mismatch");
  ++t_;
  theta *= 1.0 - cfg_.learning_rate * cfg_.weight_decay;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  theta.array() -= cfg_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
}

TrainResult train(const Model& model, const ExpFamilyHead& head, const Dataset& data, const TrainConfig& cfg,
                  const std::optional<ParamVector>& init) {
  cfg.validate();
  if (data.size() == 0) throw InvalidInput("empty training set");
  TrainResult out;
  out.theta = init ? *init : model.init_params(cfg.seed);
  if (out.theta.size() != model.num_params()) throw InvalidInput("initial parameters have wrong length");
  AdamW opt(out.theta.size(), cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  out.loss_curve.push_back(mean_loss(model, head, data, out.theta));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      ParamVector g = ParamVector::Zero(out.theta.size());
      for (std::size_t k = start; k < end; ++k) {
        g += loss_grad(model, head, data.x(order[k]), data.y(order[k]), out.theta);
      }
      g /= static_cast<double>(end - start);
      opt.step(out.theta, g);
    }
    const double loss = mean_loss(model, head, data, out.theta);
    if (!std::isfinite(loss)) throw TrainingDiverged("training loss became non-finite", epoch);
    out.loss_curve.push_back(loss);
  }
  return out;
}

Task parse_task(std::string_view name) {
  if (name == "train") return Task::kTrain;
  if (name == "cv") return Task::kCv;
  if (name == "unlearn") return Task::kUnlearn;
  if (name == "attribute") return Task::kAttribute;
  if (name == "fairness") return Task::kFairness;
  throw InvalidInput("unknown task '" + std::string(name) + "'");
}

std::string to_string(Task t) {
  switch (t) {
    case Task::kTrain: return "train";
    case Task::kCv: return "cv";
    case Task::kUnlearn: return "unlearn";
    case Task::kAttribute: return "attribute";
    case Task::kFairness: return "fairness";
  }
  return "?";
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["task"] = to_string(task);
  j["methods"] = nlohmann::json::array();
  for (auto m : methods) j["methods"].push_back(to_string(m));
  j["model"] = model.to_json();
  j["head"] = head.to_json();
  j["data"] = data;
  j["label_column"] = label_column;
  if (sensitive_column) j["sensitive_column"] = *sensitive_column;
  j["reg"] = reg.to_string();
  j["solver"] = {{"method", to_string(solver.method)},
                 {"damping", solver.damping},
                 {"auto_damping", solver.auto_damping},
                 {"scope", solver.scope == CurvatureScope::kFull ? "full" : "reweighted"},
                 {"dense_cap", solver.dense_cap},
                 {"lissa",
                  {{"sigma", solver.lissa.scale},
                   {"depth", solver.lissa.depth},
                   {"reps", solver.lissa.repetitions},
                   {"batch", solver.lissa.batch_size},
                   {"seed", solver.lissa.seed}}}};
  j["train"] = train.to_json();
  j["polish"] = polish;
  j["seed"] = seed;
  j["cv"] = {{"k", cv_k}, {"folds", cv_folds}};
  j["unlearn"] = {{"indices", unlearn_indices}};
  if (noise) {
    j["unlearn"]["noise"] = {{"epsilon", noise->epsilon},
                             {"delta", noise->delta},
                             {"seed", noise->seed},
                             {"constants", noise->constants.to_json()}};
  }
  j["test_index"] = test_index;
  j["fairness"] = {{"metric", to_string(fairness.metric)}, {"bins", fairness.bins}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    c.task = parse_task(j.at("task").get<std::string>());
    c.methods.clear();
    for (const auto& m : j.at("methods")) c.methods.push_back(parse_curvature_kind(m.get<std::string>()));
    c.model = Model::from_json(j.at("model"));
    c.head = ExpFamilyHead::from_json(j.at("head"));
    c.data = j.at("data").get<std::string>();
    c.label_column = j.value("label_column", c.label_column);
    if (j.contains("sensitive_column")) c.sensitive_column = j["sensitive_column"].get<std::string>();
    c.reg = Regularizer::parse(j.value("reg", std::string("none")));
    if (j.contains("solver")) {
      const auto& s = j["solver"];
      c.solver.method = SolverConfig::parse_method(s.value("method", std::string("auto")));
      c.solver.damping = s.value("damping", 0.0);
      c.solver.auto_damping = s.value("auto_damping", true);
      c.solver.scope = s.value("scope", std::string("full")) == "reweighted" ? CurvatureScope::kReweighted
                                                                             : CurvatureScope::kFull;
      c.solver.dense_cap = s.value("dense_cap", kDefaultDenseCap);
      if (s.contains("lissa")) {
        const auto& l = s["lissa"];
        c.solver.lissa.scale = l.value("sigma", c.solver.lissa.scale);
        c.solver.lissa.depth = l.value("depth", c.solver.lissa.depth);
        c.solver.lissa.repetitions = l.value("reps", c.solver.lissa.repetitions);
        c.solver.lissa.batch_size = l.value("batch", c.solver.lissa.batch_size);
        c.solver.lissa.seed = l.value("seed", c.solver.lissa.seed);
      }
    }
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
    c.polish = j.value("polish", false);
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("cv")) {
      c.cv_k = j["cv"].value("k", std::size_t{0});
      c.cv_folds = j["cv"].value("folds", std::size_t{5});
    }
    if (j.contains("unlearn")) {
      c.unlearn_indices = j["unlearn"].value("indices", std::vector<std::size_t>{});
      if (j["unlearn"].contains("noise")) {
        const auto& nz = j["unlearn"]["noise"];
        NoiseRequest r;
        r.epsilon = nz.value("epsilon", r.epsilon);
        r.delta = nz.value("delta", r.delta);
        r.seed = nz.value("seed", r.seed);
        r.constants = BoundConstants::from_json(nz.value("constants", nlohmann::json::object()));
        c.noise = r;
      }
    }
    c.test_index = j.value("test_index", std::size_t{0});
    if (j.contains("fairness")) {
      c.fairness.metric = parse_fairness_metric(j["fairness"].value("metric", std::string("dp")));
      c.fairness.bins = j["fairness"].value("bins", 10);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad experiment config: ") + e.what());
  }
  return c;
}

nlohmann::json ExperimentResult::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["task"] = task;
  j["seed"] = seed;
  j["metrics"] = metrics;
  j["passes"] = {{"fwd", passes.forward_mode}, {"rev", passes.reverse_mode}, {"eval", passes.evaluations}};
  j["config"] = config;
  j["details"] = details;
  return j;
}

FittedModel fit(const ExperimentConfig& cfg, const Dataset& data) {
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  TrainResult tr = train(cfg.model, cfg.head, data, tc);
  FittedModel out{std::move(tr.theta), std::move(tr.loss_curve)};
  if (cfg.polish) {
    oracle::RetrainConfig rc;
    rc.warm_start = out.theta;
    rc.max_iterations = 50000;
    try {
      out.theta = oracle::retrain(cfg.model, cfg.head, data, WeightVector::all_ones(data.size()), cfg.reg, rc);
    } catch (const ConvergenceError&) {
      // Keep the AdamW iterate.
    }
  }
  return out;
}

namespace {

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

void run_task(const ExperimentConfig& cfg, InfluenceEngine& engine, ExperimentResult& res) {
  const auto& p = engine.problem();
  const Dataset& data = *p.data;
  switch (cfg.task) {
    case Task::kTrain: break;
    case Task::kCv: {
      const std::size_t k =
          cfg.cv_k > 0 ? cfg.cv_k : std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * p.n())));
      const CvResult cv = acv(engine, k, cfg.cv_folds, cfg.seed);
      res.metrics["acv"] = cv.estimate;
      res.metrics["k"] = static_cast<double>(k);
      res.metrics["folds"] = static_cast<double>(cfg.cv_folds);
      res.details["per_fold"] = cv.per_fold;
      for (std::size_t f = 0; f < cv.per_fold.size(); ++f) res.table.emplace_back(f, cv.per_fold[f]);
      break;
    }
    case Task::kUnlearn: {
      UnlearnRequest req{cfg.unlearn_indices, cfg.noise};
      const UnlearnResult u = unlearn(engine, req);
      res.metrics["n_removed"] = static_cast<double>(req.removed.size());
      res.metrics["noise_variance"] = u.noise_variance;
      res.metrics["shift_norm"] = (u.theta_noiseless - p.theta_hat).norm();
      if (!req.removed.empty()) {
        res.metrics["removed_loss_before"] = heldout_loss(p.model, p.head, data, p.theta_hat, req.removed);
        res.metrics["removed_loss_after"] = heldout_loss(p.model, p.head, data, u.theta_noiseless, req.removed);
      }
      res.details["theta"] = to_std(u.theta);
      for (Eigen::Index j = 0; j < u.theta.size(); ++j) res.table.emplace_back(static_cast<std::size_t>(j), u.theta[j]);
      break;
    }
    case Task::kAttribute: {
      if (cfg.test_index >= p.n()) throw InvalidInput("test index out of range");
      const Vector scores = attribution_scores(engine, data.x(cfg.test_index), data.y(cfg.test_index));
      Eigen::Index top = 0;
      scores.cwiseAbs().maxCoeff(&top);
      res.metrics["test_index"] = static_cast<double>(cfg.test_index);
      res.metrics["test_loss"] =
          sample_loss(p.model, p.head, data.x(cfg.test_index), data.y(cfg.test_index), p.theta_hat);
      res.metrics["top_index"] = static_cast<double>(top);
      res.metrics["top_score"] = scores[top];
      for (Eigen::Index i = 0; i < scores.size(); ++i) res.table.emplace_back(static_cast<std::size_t>(i), scores[i]);
      break;
    }
    case Task::kFairness: {
      const FairnessResult fr = fairness_pipeline(engine, cfg.fairness);
      res.metrics["metric_before"] = fr.metric_before;
      res.metrics["metric_after"] = fr.metric_after;
      res.metrics["perf_before"] = fr.perf_before;
      res.metrics["perf_after"] = fr.perf_after;
      res.metrics["n_removed"] = static_cast<double>(fr.selected.size());
      res.details["selected"] = fr.selected;
      res.details["metric"] = to_string(cfg.fairness.metric);
      if (fr.degenerate) res.details["degenerate_binning"] = true;
      for (Eigen::Index i = 0; i < fr.influence.size(); ++i) {
        res.table.emplace_back(static_cast<std::size_t>(i), fr.influence[i]);
      }
      break;
    }
  }
}

}  // namespace

std::vector<ExperimentResult> run_experiment(const ExperimentConfig& cfg, const Dataset& data,
                                             const std::optional<ParamVector>& theta_hat) {
  data.validate();
  if (cfg.methods.empty()) throw InvalidInput("no influence method selected");
  FittedModel fitted;
  if (theta_hat) {
    fitted.theta = *theta_hat;
  } else {
    fitted = fit(cfg, data);
  }
  const double train_loss = mean_loss(cfg.model, cfg.head, data, fitted.theta);
  const double perf = performance(cfg.model, cfg.head, data, fitted.theta);
  const double ebar = ebar_n(cfg.model, cfg.head, data, fitted.theta);
  double g_max = 0.0;
  for (const auto& r : loss_records(cfg.model, cfg.head, data, fitted.theta)) g_max = std::max(g_max, r.gradient_norm);
  const nlohmann::json snapshot = cfg.to_json();

  auto base = [&](const std::string& method) {
    ExperimentResult r;
    r.method = method;
    r.task = to_string(cfg.task);
    r.seed = cfg.seed;
    r.config = snapshot;
    r.metrics["train_loss"] = train_loss;
    r.metrics["performance"] = perf;
    r.metrics["ebar"] = ebar;
    r.metrics["g_max"] = g_max / static_cast<double>(data.size());
    r.metrics["n"] = static_cast<double>(data.size());
    r.metrics["d"] = static_cast<double>(fitted.theta.size());
    r.details = nlohmann::json::object();
    return r;
  };

  std::vector<ExperimentResult> out;
  if (cfg.task == Task::kTrain) {
    ExperimentResult r = base("none");
    r.details["theta"] = to_std(fitted.theta);
    r.details["loss_curve"] = fitted.loss_curve;
    for (Eigen::Index j = 0; j < fitted.theta.size(); ++j) r.table.emplace_back(static_cast<std::size_t>(j), fitted.theta[j]);
    out.push_back(std::move(r));
    return out;
  }
  for (CurvatureKind kind : cfg.methods) {
    ExperimentResult r = base(to_string(kind));
    auto counter = std::make_shared<PassCounter>();
    InfluenceProblem problem(cfg.model, cfg.head, data, fitted.theta, cfg.reg, counter);
    InfluenceEngine engine(problem, kind, cfg.solver);
    const auto t0 = std::chrono::steady_clock::now();
    run_task(cfg, engine, r);
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.passes = counter->snapshot();
    const bool dense = engine.shared_solver().dense();
    r.details["solver"] = dense ? "dense" : "lissa";
    out.push_back(std::move(r));
  }
  return out;
}

std::string results_json(const std::vector<ExperimentResult>& results) {
  nlohmann::json j;
  j["results"] = nlohmann::json::array();
  for (const auto& r : results) j["results"].push_back(r.to_json());
  return j.dump(2) + "\n";
}

std::string timing_json(const std::vector<ExperimentResult>& results) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& r : results) j[r.method] = {{"wall_time_s", r.wall_time_s}};
  return j.dump(2) + "\n";
}

std::string influences_csv(const std::vector<ExperimentResult>& results) {
  std::ostringstream out;
  out << std::setprecision(17) << "method,index,value\n";
  for (const auto& r : results) {
    for (const auto& [i, v] : r.table) out << r.method << ',' << i << ',' << v << '\n';
  }
  return out.str();
}

std::string report_markdown(const std::vector<ExperimentResult>& results) {
  std::ostringstream out;
  if (results.empty()) return "No results.\n";
  out << "# " << results.front().task << "\n\n";
  std::set<std::string> keys;
  for (const auto& r : results) {
    for (const auto& [k, v] : r.metrics) keys.insert(k);
  }
  out << "| metric |";
  for (const auto& r : results) out << ' ' << r.method << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < results.size(); ++i) out << "---|";
  out << '\n';
  out << std::setprecision(6);
  for (const auto& k : keys) {
    out << "| " << k << " |";
    for (const auto& r : results) {
      const auto it = r.metrics.find(k);
      out << ' ';
      if (it != r.metrics.end()) out << it->second;
      out << " |";
    }
    out << '\n';
  }
  out << "| fwd passes |";
  for (const auto& r : results) out << ' ' << r.passes.forward_mode << " |";
  out << "\n| rev passes |";
  for (const auto& r : results) out << ' ' << r.passes.reverse_mode << " |";
  out << "\n| wall time (s) |";
  for (const auto& r : results) out << ' ' << r.wall_time_s << " |";
  out << '\n';
  return out.str();
}

}  // namespace influence
