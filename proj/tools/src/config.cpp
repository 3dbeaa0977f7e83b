#include "vqkit_tools/config.hpp"

#include <concepts>
#include <fstream>
#include <limits>
#include <set>

#include "vqkit/errors.hpp"

namespace vqkit::tools {
namespace {

using nlohmann::json;

// Reads keys from one JSON object and rejects whatever is left over.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::int64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
      if (v->is_number_unsigned() && v->get<std::uint64_t>() > static_cast<std::uint64_t>(
                                                                   std::numeric_limits<std::int64_t>::max()))
        throw ConfigError(where(key) + " is out of range");
      out = v->get<std::int64_t>();
    }
  }
  template <std::unsigned_integral U>
  void get(const std::string& key, U& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0))
        throw ConfigError(where(key) + " must be a non-negative integer");
      const auto raw = v->get<std::uint64_t>();
      if (raw > std::numeric_limits<U>::max()) throw ConfigError(where(key) + " is out of range");
      out = static_cast<U>(raw);
    }
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array of numbers");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_number()) throw ConfigError(where(key) + " must be an array of numbers");
        out.push_back(x.get<double>());
      }
    }
  }
  void get(const std::string& key, std::vector<std::int64_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array of integers");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_number_integer()) throw ConfigError(where(key) + " must be an array of integers");
        out.push_back(x.get<std::int64_t>());
      }
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array of strings");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_string()) throw ConfigError(where(key) + " must be an array of strings");
        out.push_back(x.get<std::string>());
      }
    }
  }

  template <typename E, typename Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string name;
    if (find(key) == nullptr) return;
    get(key, name);
    try {
      out = parse(name);
    } catch (const ContractViolation& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.contains(key)) throw ConfigError("unknown key '" + where(key) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

MixtureSpec parse_mixture(const json& j, const std::string& path) {
  Obj o(j, path);
  MixtureSpec m;
  m.components.clear();
  o.get("dim", m.dim);
  o.get("samples", m.samples);
  if (const json* comps = o.find("components")) {
    if (!comps->is_array()) throw ConfigError(path + ".components must be an array");
    for (std::size_t i = 0; i < comps->size(); ++i) {
      Obj c((*comps)[i], path + ".components[" + std::to_string(i) + "]");
      MixtureComponent mc;
      c.get("mean", mc.mean);
      c.get("scale", mc.scale);
      c.get("weight", mc.weight);
      c.finish();
      m.components.push_back(std::move(mc));
    }
  }
  o.finish();
  return m;
}

void parse_data(const json& j, DataSpec& d) {
  Obj o(j, "data");
  o.get("samples", d.samples);
  o.get("dim", d.dim);
  o.get("components", d.components);
  o.get("spread", d.spread);
  o.get("scale", d.scale);
  o.get("relu", d.relu);
  if (const json* m = o.find("mixture")) d.mixture = parse_mixture(*m, "data.mixture");
  o.finish();
}

void parse_init(const json& j, InitMethod& m) {
  Obj o(j, "vq.init");
  o.get_enum("method", m.kind, parse_init_kind);
  o.get("fan", m.fan);
  o.get("low", m.low);
  o.get("high", m.high);
  o.get("iters", m.iters);
  o.get_enum("seeding", m.seeding, [](const std::string& s) {
    if (s == "plusplus") return KMeansSeeding::plusplus;
    if (s == "random_rows") return KMeansSeeding::random_rows;
    throw ContractViolation("unknown seeding '" + s + "'");
  });
  o.finish();
}

void parse_vq(const json& j, VQConfig& v) {
  Obj o(j, "vq");
  o.get("num_codes", v.num_codes);
  o.get("alpha", v.alpha);
  o.get("beta", v.beta);
  o.get("nu", v.nu);
  o.get_enum("distance", v.distance, parse_distance_kind);
  o.get("n_group", v.n_group);
  o.get_enum("sampling", v.sampling, parse_sampling_mode);
  o.get("tau0", v.tau0);
  o.get("tau_decay", v.tau_decay);
  o.get_enum("affine", v.affine, parse_affine_mode);
  o.get("affine_lr_scale", v.affine_lr_scale);
  o.get("affine_momentum", v.affine_momentum);
  o.get_enum("replacement", v.replacement, parse_replacement_mode);
  o.get("lifespan", v.lifespan);
  o.get_enum("reset", v.reset, parse_reset_mode);
  o.get("reset_every_epochs", v.reset_every_epochs);
  o.get("reset_iters", v.reset_iters);
  o.get_enum("update", v.update, parse_codebook_update);
  o.get("ema_decay", v.ema_decay);
  o.get_enum("reduction", v.reduction, parse_commit_reduction);
  o.get("chunk_rows", v.chunk_rows);
  if (const json* init = o.find("init")) parse_init(*init, v.init);
  o.finish();
}

void parse_train(const json& j, TrainSpec& t) {
  Obj o(j, "train");
  TrainConfig& c = t.config;
  o.get_enum("mode", t.mode, [](const std::string& s) {
    if (s == "joint") return TrainMode::joint;
    if (s == "alternating") return TrainMode::alternating;
    throw ContractViolation("unknown train mode '" + s + "'");
  });
  o.get("steps", c.steps);
  o.get("batch_size", c.batch_size);
  o.get("lr", c.optimizer.lr);
  o.get("momentum", c.optimizer.momentum);
  o.get("weight_decay", c.optimizer.weight_decay);
  o.get("codebook_lr", c.optimizer.codebook_lr);
  o.get("codebook_momentum", c.optimizer.codebook_momentum);
  if (const json* s = o.find("schedule")) {
    Obj so(*s, "train.schedule");
    so.get_enum("kind", c.schedule.kind, parse_schedule_kind);
    so.get("milestones", c.schedule.milestones);
    so.get("factor", c.schedule.factor);
    so.get("warmup_steps", c.schedule.warmup_steps);
    so.get("total_steps", c.schedule.total_steps);
    so.finish();
  }
  o.get("inner_k", c.inner_k);
  o.get("outer_k", c.outer_k);
  o.get("fused", c.fused);
  o.get("smoothness_gamma", c.smoothness_gamma);
  o.get("active_window", c.active_window);
  o.get("measure_grad_gap", c.measure_grad_gap);
  o.get("bypass_quantizer", c.bypass_quantizer);
  o.finish();
}

void parse_toy(const json& j, ToySpec& t) {
  Obj o(j, "toy");
  o.get("modes", t.modes);
  o.get("lr", t.lr);
  o.get("steps", t.steps);
  o.get("alpha", t.alpha);
  o.get("beta", t.beta);
  o.get("nu", t.nu);
  o.get("target_scale", t.target_scale);
  o.get("tolerance", t.tolerance);
  o.get("replicates", t.replicates);
  o.finish();
}

void parse_affine_toy(const json& j, AffineToySpec& a) {
  Obj o(j, "affine_toy");
  o.get("points", a.points);
  o.get("codes", a.codes);
  o.get("steps", a.steps);
  o.get("lr", a.lr);
  o.get("p_mean", a.p_mean);
  o.get("p_cov", a.p_cov);
  o.get("c_mean", a.c_mean);
  o.get("c_cov", a.c_cov);
  o.get("lr_scale", a.lr_scale);
  o.get("ema_momentum", a.ema_momentum);
  o.finish();
}

void parse_ablation(const json& j, AblationSpec& a) {
  Obj o(j, "ablation");
  o.get("replicates", a.replicates);
  o.get("threads", a.threads);
  if (const json* cells = o.find("cells")) {
    if (!cells->is_array()) throw ConfigError("ablation.cells must be an array");
    a.cells.clear();
    for (std::size_t i = 0; i < cells->size(); ++i) {
      const std::string path = "ablation.cells[" + std::to_string(i) + "]";
      Obj c((*cells)[i], path);
      AblationCell cell;
      c.get("name", cell.name);
      if (const json* ov = c.find("overrides")) {
        if (!ov->is_object()) throw ConfigError(path + ".overrides must be an object");
        cell.overrides = *ov;
      }
      c.finish();
      if (cell.name.empty()) throw ConfigError(path + ".name is required");
      a.cells.push_back(std::move(cell));
    }
  }
  o.finish();
}

void parse_init_study(const json& j, InitStudySpec& s) {
  Obj o(j, "init_study");
  o.get("methods", s.methods);
  o.get("replicates", s.replicates);
  o.get("num_codes", s.num_codes);
  o.get("holdout", s.holdout);
  o.get("kmeans_iters", s.kmeans_iters);
  o.finish();
}

void parse_replay(const json& j, ReplaySpec& r) {
  Obj o(j, "replay");
  o.get("metrics", r.metrics);
  o.get("num_codes", r.num_codes);
  o.finish();
}

void validate(const ExperimentConfig& c) {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  check(c.data.samples >= 1 && c.data.dim >= 1, "data.samples and data.dim must be >= 1");
  check(c.data.components >= 1, "data.components must be >= 1");
  check(c.data.scale >= 0.0, "data.scale must be >= 0");
  if (c.data.mixture) {
    try {
      c.data.mixture->validate();
    } catch (const ContractViolation& e) {
      throw ConfigError(std::string("data.mixture: ") + e.what());
    }
  }
  check(c.model.hidden >= 1 && c.model.code_dim >= 1, "model widths must be >= 1");
  try {
    c.vq.validate(c.model.code_dim);
    c.train.config.schedule.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  check(c.train.config.steps >= 0, "train.steps must be >= 0");
  check(c.train.config.batch_size >= 1, "train.batch_size must be >= 1");
  check(c.train.config.inner_k >= 1 && c.train.config.outer_k >= 1, "train.inner_k and outer_k must be >= 1");
  check(c.toy.lr > 0.0 && c.toy.steps >= 1, "toy.lr must be > 0 and toy.steps >= 1");
  check(c.toy.beta >= 0.0 && c.toy.beta <= 1.0, "toy.beta must lie in [0, 1]");
  check(c.toy.nu >= 0.0 && c.toy.alpha >= 0.0, "toy.alpha and toy.nu must be >= 0");
  check(c.toy.replicates >= 1, "toy.replicates must be >= 1");
  for (const auto& m : c.toy.modes)
    check(m == "no_vq" || m == "joint" || m == "alternated" || m == "lookahead", "unknown toy mode '" + m + "'");
  check(c.affine_toy.p_mean.size() == c.affine_toy.c_mean.size() && !c.affine_toy.p_mean.empty(),
        "affine_toy.p_mean and c_mean must have the same nonzero length");
  check(c.affine_toy.points >= 1 && c.affine_toy.codes >= 1, "affine_toy sizes must be >= 1");
  check(c.affine_toy.p_cov >= 0.0 && c.affine_toy.c_cov >= 0.0, "affine_toy covariances must be >= 0");
  check(c.affine_toy.ema_momentum > 0.0 && c.affine_toy.ema_momentum <= 1.0,
        "affine_toy.ema_momentum must lie in (0, 1]");
  check(c.ablation.replicates >= 1, "ablation.replicates must be >= 1");
  check(c.init_study.replicates >= 1 && c.init_study.num_codes >= 1, "init_study sizes must be >= 1");
  for (const auto& m : c.init_study.methods) {
    try {
      (void)parse_init_kind(m);
    } catch (const ContractViolation& e) {
      throw ConfigError(std::string("init_study.methods: ") + e.what());
    }
  }
}

json mixture_json(const MixtureSpec& m) {
  json comps = json::array();
  for (const auto& c : m.components) comps.push_back({{"mean", c.mean}, {"scale", c.scale}, {"weight", c.weight}});
  return {{"dim", m.dim}, {"samples", m.samples}, {"components", comps}};
}

}  // namespace

void MixtureSpec::validate() const {
  require(dim >= 1 && samples >= 1, "mixture dim and samples must be >= 1");
  require(!components.empty(), "mixture needs at least one component");
  double total = 0.0;
  for (const auto& c : components) {
    require(c.mean.size() == dim, "mixture component mean has the wrong dimension");
    require(c.scale >= 0.0, "mixture covariance scales must be >= 0");
    require(c.weight >= 0.0, "mixture weights must be >= 0");
    total += c.weight;
  }
  require(std::abs(total - 1.0) < 1e-9, "mixture weights must sum to 1");
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  Obj o(j, "");
  o.get("scenario", c.scenario);
  if (o.find("seed") == nullptr) throw ConfigError("seed is required");
  o.get("seed", c.seed);
  if (const json* v = o.find("data")) parse_data(*v, c.data);
  if (const json* v = o.find("model")) {
    Obj mo(*v, "model");
    mo.get("hidden", c.model.hidden);
    mo.get("code_dim", c.model.code_dim);
    mo.finish();
  }
  if (const json* v = o.find("vq")) parse_vq(*v, c.vq);
  if (const json* v = o.find("train")) parse_train(*v, c.train);
  if (const json* v = o.find("toy")) parse_toy(*v, c.toy);
  if (const json* v = o.find("affine_toy")) parse_affine_toy(*v, c.affine_toy);
  if (const json* v = o.find("ablation")) parse_ablation(*v, c.ablation);
  if (const json* v = o.find("init_study")) parse_init_study(*v, c.init_study);
  if (const json* v = o.find("replay")) parse_replay(*v, c.replay);
  o.finish();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = parse_config(j);
  c.base_dir = path.parent_path();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json data = {{"samples", c.data.samples}, {"dim", c.data.dim},     {"components", c.data.components},
               {"spread", c.data.spread},   {"scale", c.data.scale}, {"relu", c.data.relu}};
  if (c.data.mixture) data["mixture"] = mixture_json(*c.data.mixture);

  const VQConfig& v = c.vq;
  json init = {{"method", to_string(v.init.kind)},
               {"fan", v.init.fan},
               {"low", v.init.low},
               {"high", v.init.high},
               {"iters", v.init.iters},
               {"seeding", v.init.seeding == KMeansSeeding::plusplus ? "plusplus" : "random_rows"}};
  json vq = {{"num_codes", v.num_codes},
             {"alpha", v.alpha},
             {"beta", v.beta},
             {"nu", v.nu},
             {"distance", to_string(v.distance)},
             {"n_group", v.n_group},
             {"sampling", to_string(v.sampling)},
             {"tau0", v.tau0},
             {"tau_decay", v.tau_decay},
             {"affine", to_string(v.affine)},
             {"affine_lr_scale", v.affine_lr_scale},
             {"affine_momentum", v.affine_momentum},
             {"replacement", to_string(v.replacement)},
             {"lifespan", v.lifespan},
             {"reset", to_string(v.reset)},
             {"reset_every_epochs", v.reset_every_epochs},
             {"reset_iters", v.reset_iters},
             {"update", to_string(v.update)},
             {"ema_decay", v.ema_decay},
             {"reduction", to_string(v.reduction)},
             {"chunk_rows", v.chunk_rows},
             {"init", init}};

  const TrainConfig& t = c.train.config;
  json schedule = {{"kind", to_string(t.schedule.kind)},
                   {"milestones", t.schedule.milestones},
                   {"factor", t.schedule.factor},
                   {"warmup_steps", t.schedule.warmup_steps},
                   {"total_steps", t.schedule.total_steps}};
  json train = {{"mode", c.train.mode == TrainMode::joint ? "joint" : "alternating"},
                {"steps", t.steps},
                {"batch_size", t.batch_size},
                {"lr", t.optimizer.lr},
                {"momentum", t.optimizer.momentum},
                {"weight_decay", t.optimizer.weight_decay},
                {"codebook_lr", t.optimizer.codebook_lr},
                {"codebook_momentum", t.optimizer.codebook_momentum},
                {"schedule", schedule},
                {"inner_k", t.inner_k},
                {"outer_k", t.outer_k},
                {"fused", t.fused},
                {"smoothness_gamma", t.smoothness_gamma},
                {"active_window", t.active_window},
                {"measure_grad_gap", t.measure_grad_gap},
                {"bypass_quantizer", t.bypass_quantizer}};

  json toy = {{"modes", c.toy.modes},         {"lr", c.toy.lr},       {"steps", c.toy.steps},
              {"alpha", c.toy.alpha},         {"beta", c.toy.beta},   {"nu", c.toy.nu},
              {"target_scale", c.toy.target_scale}, {"tolerance", c.toy.tolerance},
              {"replicates", c.toy.replicates}};
  const AffineToySpec& a = c.affine_toy;
  json affine_toy = {{"points", a.points}, {"codes", a.codes},   {"steps", a.steps},
                     {"lr", a.lr},         {"p_mean", a.p_mean}, {"p_cov", a.p_cov},
                     {"c_mean", a.c_mean}, {"c_cov", a.c_cov},   {"lr_scale", a.lr_scale},
                     {"ema_momentum", a.ema_momentum}};
  json cells = json::array();
  for (const auto& cell : c.ablation.cells) cells.push_back({{"name", cell.name}, {"overrides", cell.overrides}});
  json ablation = {{"replicates", c.ablation.replicates}, {"threads", c.ablation.threads}, {"cells", cells}};
  json init_study = {{"methods", c.init_study.methods},
                     {"replicates", c.init_study.replicates},
                     {"num_codes", c.init_study.num_codes},
                     {"holdout", c.init_study.holdout},
                     {"kmeans_iters", c.init_study.kmeans_iters}};
  json replay = {{"metrics", c.replay.metrics}, {"num_codes", c.replay.num_codes}};

  return {{"scenario", c.scenario},
          {"seed", c.seed},
          {"data", data},
          {"model", {{"hidden", c.model.hidden}, {"code_dim", c.model.code_dim}}},
          {"vq", vq},
          {"train", train},
          {"toy", toy},
          {"affine_toy", affine_toy},
          {"ablation", ablation},
          {"init_study", init_study},
          {"replay", replay}};
}

}  // namespace vqkit::tools
