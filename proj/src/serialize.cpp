#include "kinfuse/serialize.hpp"

#include <fstream>
#include <sstream>

#include "kinfuse/error.hpp"

namespace kinfuse {

Json to_json(const EncoderConfig& c) {
  return Json{{"d_h", c.d_h},
              {"d_k", c.d_k},
              {"d_v", c.d_v},
              {"n_heads", c.n_heads},
              {"n_layers", c.n_layers},
              {"d_ff", c.d_ff},
              {"n_classes", c.n_classes},
              {"max_a", c.max_a},
              {"max_b", c.max_b},
              {"gamma", c.gamma},
              {"prior_mode", std::string(to_string(c.prior_mode))},
              {"kappa", c.kappa},
              {"dropout_rate", c.dropout_rate},
              {"seed", c.seed}};
}

EncoderConfig encoder_config_from_json(const Json& j) {
  EncoderConfig c;
  const auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("d_h", c.d_h);
  get("d_k", c.d_k);
  get("d_v", c.d_v);
  get("n_heads", c.n_heads);
  get("n_layers", c.n_layers);
  get("d_ff", c.d_ff);
  get("n_classes", c.n_classes);
  get("max_a", c.max_a);
  get("max_b", c.max_b);
  get("gamma", c.gamma);
  get("kappa", c.kappa);
  get("dropout_rate", c.dropout_rate);
  get("seed", c.seed);
  if (j.contains("prior_mode")) c.prior_mode = parse_prior_mode(j.at("prior_mode").get<std::string>());
  c.validate();
  return c;
}

Json to_json(const TrainConfig& c) {
  return Json{{"rho", c.rho},
              {"epsilon", c.epsilon},
              {"adadelta_lr", c.adadelta_lr},
              {"sgd_lr", c.sgd_lr},
              {"batch_size", c.batch_size},
              {"plateau_steps", c.plateau_steps},
              {"l2_full_ratio", c.l2_full_ratio},
              {"l2_full_step", c.l2_full_step},
              {"max_steps", c.max_steps},
              {"eval_every", c.eval_every},
              {"seed", c.seed},
              {"stop_at_perfect_val", c.stop_at_perfect_val}};
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  const auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("rho", c.rho);
  get("epsilon", c.epsilon);
  get("adadelta_lr", c.adadelta_lr);
  get("sgd_lr", c.sgd_lr);
  get("batch_size", c.batch_size);
  get("plateau_steps", c.plateau_steps);
  get("l2_full_ratio", c.l2_full_ratio);
  get("l2_full_step", c.l2_full_step);
  get("max_steps", c.max_steps);
  get("eval_every", c.eval_every);
  get("seed", c.seed);
  get("stop_at_perfect_val", c.stop_at_perfect_val);
  c.validate();
  return c;
}

Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    rows.push_back(Json(std::vector<Real>(r.begin(), r.end())));
  }
  return rows;
}

Json to_json(const PriorMatrix& p) {
  return Json{{"L", p.k.rows()},
              {"mode", std::string(to_string(p.mode))},
              {"kappa", p.kappa},
              {"m", p.layout.m},
              {"n", p.layout.n},
              {"rows", to_json(p.k)}};
}

Json to_json(const FusionTrace& t) {
  Json tokens = Json::array();
  for (std::size_t i = 0; i < t.g_fuse.size(); ++i)
    tokens.push_back(Json{{"pos", i}, {"g_fuse", t.g_fuse[i]}, {"g_filter", t.g_filter[i]}});
  return tokens;
}

std::string checkpoint_to_string(const Model& model) {
  Json params = Json::object();
  const ParamStore& ps = model.params();
  for (ParamId id = 0; id < ps.size(); ++id) {
    const Matrix& v = ps.value(id);
    params[ps.name(id)] = Json{{"shape", {v.rows(), v.cols()}}, {"data", v.values()}};
  }
  Json j{{"format_version", kCheckpointFormatVersion},
         {"config", to_json(model.config())},
         {"vocab", model.vocab().tokens()},
         {"params", std::move(params)}};
  return j.dump();
}

Model checkpoint_from_string(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError(std::string("checkpoint: invalid JSON: ") + e.what());
  }
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw DataError("checkpoint: unsupported format_version " + std::to_string(version));
    }
    EncoderConfig cfg = encoder_config_from_json(j.at("config"));
    Vocab vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    ParamStore store;
    for (const auto& [name, t] : j.at("params").items()) {
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw DataError("checkpoint: tensor '" + name + "' is not 2-D");
      store.add(name, Matrix::checked(shape[0], shape[1], t.at("data").get<std::vector<Real>>()));
    }
    return Model(cfg, std::move(vocab), std::move(store));
  } catch (const Json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  out << checkpoint_to_string(model) << '\n';
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_string(buf.str());
}

}  // namespace kinfuse
