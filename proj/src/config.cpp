#include "stpnet/config.hpp"

#include <charconv>
#include <functional>
#include <set>
#include <sstream>

namespace stpnet {

void validate(const TrainConfig& cfg) {
  require(cfg.lr > 0, Status::InvalidArgument, "train config: lr must be > 0");
  require(cfg.batch >= 1, Status::InvalidArgument,
          "train config: batch must be >= 1");
  require(cfg.epochs >= 1, Status::InvalidArgument,
          "train config: epochs must be >= 1");
  require(cfg.patience >= 1, Status::InvalidArgument,
          "train config: patience must be >= 1");
  require(cfg.tau > 0, Status::InvalidArgument, "train config: tau must be > 0");
  require(cfg.gamma >= 0, Status::InvalidArgument,
          "train config: gamma must be >= 0");
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    size_t e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    size_t sp = line.find_first_of(" \t");
    require(sp != std::string::npos, Status::InvalidArgument,
            "config line " + std::to_string(lineno) + ": want 'key value'");
    std::string key = line.substr(0, sp);
    size_t vb = line.find_first_not_of(" \t", sp);
    kv[key] = line.substr(vb);
  }
  return kv;
}

namespace {

class Binder {
 public:
  void num(const std::string& key, std::function<void(double)> set) {
    set_[key] = [set](const std::string& v) {
      size_t used = 0;
      double d = std::stod(v, &used);
      require(used == v.size(), Status::InvalidArgument,
              "config: bad number for " + std::string());
      set(d);
    };
  }
  void u64(const std::string& key, uint64_t* target) {
    set_[key] = [target](const std::string& v) {
      size_t used = 0;
      *target = std::stoull(v, &used);
      require(used == v.size(), Status::InvalidArgument,
              "config: bad unsigned integer");
    };
  }
  void flag(const std::string& key, bool* target) {
    set_[key] = [target](const std::string& v) {
      require(v == "0" || v == "1" || v == "true" || v == "false",
              Status::InvalidArgument, "config: flags take 0/1/true/false");
      *target = v == "1" || v == "true";
    };
  }
  void text(const std::string& key, std::string* target) {
    set_[key] = [target](const std::string& v) { *target = v; };
  }

  void apply(const std::map<std::string, std::string>& kv) const {
    for (const auto& [key, value] : kv) {
      auto it = set_.find(key);
      require(it != set_.end(), Status::InvalidArgument,
              "config: unknown key '" + key + "'");
      try {
        it->second(value);
      } catch (const Error&) {
        throw;
      } catch (const std::exception&) {
        fail(Status::InvalidArgument,
             "config: bad value '" + value + "' for key '" + key + "'");
      }
    }
  }

 private:
  std::map<std::string, std::function<void(const std::string&)>> set_;
};

void bind_model(Binder& b, StpnetConfig& m) {
  b.num("image_size", [&m](double v) { m.image_size = int64_t(v); });
  b.num("in_channels", [&m](double v) { m.in_channels = int64_t(v); });
  for (int i = 0; i < 5; ++i)
    b.num("channels" + std::to_string(i + 1),
          [&m, i](double v) { m.base_channels[size_t(i)] = int64_t(v); });
  b.num("tokens_per_phrase", [&m](double v) { m.L = int64_t(v); });
  b.num("text_dim", [&m](double v) { m.D = int64_t(v); });
  b.num("heads", [&m](double v) { m.heads = int(v); });
  for (int i = 0; i < 3; ++i)
    b.num("dilation" + std::to_string(i + 1),
          [&m, i](double v) { m.dilations[size_t(i)] = int(v); });
  b.num("utrans_from_stage", [&m](double v) { m.utrans_from_stage = int(v); });
  b.text("domain", &m.domain);
}

void bind_train(Binder& b, TrainConfig& t) {
  b.num("lr", [&t](double v) { t.lr = v; });
  b.num("batch", [&t](double v) { t.batch = int64_t(v); });
  b.num("epochs", [&t](double v) { t.epochs = int64_t(v); });
  b.num("patience", [&t](double v) { t.patience = int64_t(v); });
  b.u64("seed", &t.seed);
  b.flag("no_text", &t.no_text);
  b.flag("no_ssm", &t.no_ssm);
  b.flag("no_utrans_text", &t.no_utrans_text);
  b.flag("teacher_force_text", &t.teacher_force_text);
  b.flag("swap_loc_order", &t.swap_loc_order);
  b.num("lambda1", [&t](double v) { t.lambda1 = v; });
  b.num("lambda2", [&t](double v) { t.lambda2 = v; });
  b.num("lambda3", [&t](double v) { t.lambda3 = v; });
  b.num("tau", [&t](double v) { t.tau = v; });
  b.num("gamma", [&t](double v) { t.gamma = v; });
}

void bind_gen(Binder& b, GenConfig& g, RunConfig& rc) {
  b.num("lesions_min", [&g](double v) { g.k_min = int(v); });
  b.num("lesions_max", [&g](double v) { g.k_max = int(v); });
  b.num("radius_min", [&g](double v) { g.radius_min = v; });
  b.num("radius_max", [&g](double v) { g.radius_max = v; });
  b.num("lesion_delta", [&g](double v) { g.delta = v; });
  b.num("texture_amp", [&g](double v) { g.amp = v; });
  b.num("noise_sigma", [&g](double v) { g.sigma = v; });
  b.num("n_train", [&rc](double v) { rc.n_train = int64_t(v); });
  b.num("n_val", [&rc](double v) { rc.n_val = int64_t(v); });
  b.num("n_test", [&rc](double v) { rc.n_test = int64_t(v); });
}

constexpr int kConfigVersion = 1;

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  std::map<std::string, std::string> kv = parse_kv_text(text);
  auto ver = kv.find("config_version");
  if (ver != kv.end()) {
    require(ver->second == std::to_string(kConfigVersion), Status::Version,
            "config: unsupported config_version " + ver->second);
    kv.erase(ver);
  }
  RunConfig rc;
  Binder b;
  bind_model(b, rc.model);
  bind_train(b, rc.train);
  bind_gen(b, rc.gen, rc);
  b.apply(kv);
  rc.gen.image_size = rc.model.image_size;
  validate(rc.model);
  validate(rc.train);
  validate(rc.gen);
  require(rc.n_train > 0 && rc.n_val > 0 && rc.n_test > 0,
          Status::InvalidArgument, "config: split sizes must be positive");
  return rc;
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "config_version " << kConfigVersion << "\n";
  const StpnetConfig& m = cfg.model;
  os << "image_size " << m.image_size << "\n";
  os << "in_channels " << m.in_channels << "\n";
  for (int i = 0; i < 5; ++i)
    os << "channels" << i + 1 << " " << m.base_channels[size_t(i)] << "\n";
  os << "tokens_per_phrase " << m.L << "\n";
  os << "text_dim " << m.D << "\n";
  os << "heads " << m.heads << "\n";
  for (int i = 0; i < 3; ++i)
    os << "dilation" << i + 1 << " " << m.dilations[size_t(i)] << "\n";
  os << "utrans_from_stage " << m.utrans_from_stage << "\n";
  os << "domain " << m.domain << "\n";
  const TrainConfig& t = cfg.train;
  os << "lr " << t.lr << "\n";
  os << "batch " << t.batch << "\n";
  os << "epochs " << t.epochs << "\n";
  os << "patience " << t.patience << "\n";
  os << "seed " << t.seed << "\n";
  os << "no_text " << (t.no_text ? 1 : 0) << "\n";
  os << "no_ssm " << (t.no_ssm ? 1 : 0) << "\n";
  os << "no_utrans_text " << (t.no_utrans_text ? 1 : 0) << "\n";
  os << "teacher_force_text " << (t.teacher_force_text ? 1 : 0) << "\n";
  os << "swap_loc_order " << (t.swap_loc_order ? 1 : 0) << "\n";
  os << "lambda1 " << t.lambda1 << "\n";
  os << "lambda2 " << t.lambda2 << "\n";
  os << "lambda3 " << t.lambda3 << "\n";
  os << "tau " << t.tau << "\n";
  os << "gamma " << t.gamma << "\n";
  const GenConfig& g = cfg.gen;
  os << "lesions_min " << g.k_min << "\n";
  os << "lesions_max " << g.k_max << "\n";
  os << "radius_min " << g.radius_min << "\n";
  os << "radius_max " << g.radius_max << "\n";
  os << "lesion_delta " << g.delta << "\n";
  os << "texture_amp " << g.amp << "\n";
  os << "noise_sigma " << g.sigma << "\n";
  os << "n_train " << cfg.n_train << "\n";
  os << "n_val " << cfg.n_val << "\n";
  os << "n_test " << cfg.n_test << "\n";
  return os.str();
}

std::string serialize_model_config(const StpnetConfig& m) {
  std::ostringstream os;
  os << "config_version " << kConfigVersion << "\n";
  os << "image_size " << m.image_size << "\n";
  os << "in_channels " << m.in_channels << "\n";
  for (int i = 0; i < 5; ++i)
    os << "channels" << i + 1 << " " << m.base_channels[size_t(i)] << "\n";
  os << "tokens_per_phrase " << m.L << "\n";
  os << "text_dim " << m.D << "\n";
  os << "heads " << m.heads << "\n";
  for (int i = 0; i < 3; ++i)
    os << "dilation" << i + 1 << " " << m.dilations[size_t(i)] << "\n";
  os << "utrans_from_stage " << m.utrans_from_stage << "\n";
  os << "domain " << m.domain << "\n";
  os << "tau " << m.tau << "\n";
  os << "gamma " << m.gamma << "\n";
  os << "lambda1 " << m.lambda1 << "\n";
  os << "lambda2 " << m.lambda2 << "\n";
  os << "lambda3 " << m.lambda3 << "\n";
  os << "seed " << m.seed << "\n";
  os << "use_text " << (m.use_text ? 1 : 0) << "\n";
  os << "use_ssm " << (m.use_ssm ? 1 : 0) << "\n";
  os << "use_utrans_text " << (m.use_utrans_text ? 1 : 0) << "\n";
  os << "swap_loc_order " << (m.swap_loc_order ? 1 : 0) << "\n";
  return os.str();
}

StpnetConfig parse_model_config(const std::string& text) {
  std::map<std::string, std::string> kv = parse_kv_text(text);
  auto ver = kv.find("config_version");
  require(ver != kv.end(), Status::Version,
          "model config: missing config_version");
  require(ver->second == std::to_string(kConfigVersion), Status::Version,
          "model config: unsupported config_version " + ver->second);
  kv.erase(ver);
  StpnetConfig m;
  Binder b;
  bind_model(b, m);
  b.num("tau", [&m](double v) { m.tau = v; });
  b.num("gamma", [&m](double v) { m.gamma = v; });
  b.num("lambda1", [&m](double v) { m.lambda1 = v; });
  b.num("lambda2", [&m](double v) { m.lambda2 = v; });
  b.num("lambda3", [&m](double v) { m.lambda3 = v; });
  b.u64("seed", &m.seed);
  b.flag("use_text", &m.use_text);
  b.flag("use_ssm", &m.use_ssm);
  b.flag("use_utrans_text", &m.use_utrans_text);
  b.flag("swap_loc_order", &m.swap_loc_order);
  b.apply(kv);
  validate(m);
  return m;
}

}  // namespace stpnet
