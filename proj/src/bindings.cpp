#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "kinfuse/error.hpp"
#include "kinfuse/robustness.hpp"
#include "kinfuse/serialize.hpp"
#include "kinfuse/trainer.hpp"

namespace py = pybind11;
using namespace kinfuse;

namespace {

using PyExample = std::tuple<int, std::string, std::string>;

LabeledDataset to_dataset(const std::vector<PyExample>& rows) {
  LabeledDataset d;
  for (const auto& [label, a, b] : rows) d.examples.push_back({label, a, b});
  return d;
}

std::vector<PyExample> from_dataset(const LabeledDataset& d) {
  std::vector<PyExample> out;
  for (const Example& e : d.examples) out.emplace_back(e.label, e.text_a, e.text_b);
  return out;
}

Json to_json_obj(const py::object& o) {
  if (o.is_none()) return Json::object();
  return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::object to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["accuracy"] = m.accuracy;
  d["mean_loss"] = m.mean_loss;
  d["support"] = m.support;
  d["correct"] = m.correct;
  d["total"] = m.total;
  return d;
}

const LexicalKB& kb_or_empty(const LexicalKB* kb) {
  static const LexicalKB empty;
  return kb ? *kb : empty;
}

}  // namespace

PYBIND11_MODULE(kinfuse, m) {
  m.doc() = "Knowledge-infused attention for sentence-pair classification";

  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("tokenize", [](const std::string& s) { return tokenize(s); });
  m.def("l2_ratio", &l2_ratio, py::arg("t"), py::arg("full_step"), py::arg("full_ratio"));
  m.def("load_dataset", [](const std::filesystem::path& p) { return from_dataset(load_dataset(p)); });
  m.def("save_dataset", [](const std::filesystem::path& p, const std::vector<PyExample>& rows) {
    save_dataset(p, to_dataset(rows));
  });

  py::class_<LexicalKB>(m, "LexicalKB")
      .def(py::init<>())
      .def_static("load", [](const std::filesystem::path& p) { return load_kb(p); })
      .def("add",
           [](LexicalKB& kb, const std::string& a, const std::string& b, const std::string& rel) {
             const auto kind = parse_relation(rel);
             if (!kind) throw std::invalid_argument("unknown relation '" + rel + "'");
             kb.add(a, b, *kind);
           })
      .def("relation_vector",
           [](const LexicalKB& kb, const std::string& a, const std::string& b) {
             const RelationVector v = kb.relation_vector(a, b);
             std::vector<int> out;
             for (RelationKind k : kAllRelations) out.push_back(v[k]);
             return out;
           })
      .def("count",
           [](const LexicalKB& kb, const std::string& rel) {
             const auto kind = parse_relation(rel);
             if (!kind) throw std::invalid_argument("unknown relation '" + rel + "'");
             return kb.count(*kind);
           })
      .def("__len__", &LexicalKB::num_pairs);

  py::class_<Model>(m, "Model")
      .def(py::init([](const py::object& encoder, const std::vector<PyExample>& corpus,
                       std::size_t min_freq) {
             return Model(encoder_config_from_json(to_json_obj(encoder)),
                          build_vocab(to_dataset(corpus), min_freq));
           }),
           py::arg("encoder"), py::arg("corpus"), py::arg("min_freq") = 1)
      .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
      .def("save", [](const Model& model, const std::filesystem::path& p) { save_checkpoint(p, model); })
      .def_property_readonly("config", [](const Model& model) { return to_py(to_json(model.config())); })
      .def_property_readonly("vocab_size", [](const Model& model) { return model.vocab().size(); })
      .def_property_readonly("num_parameters",
                             [](const Model& model) { return model.params().num_scalars(); })
      .def(
          "predict",
          [](const Model& model, const std::string& a, const std::string& b, const LexicalKB* kb) {
            return model.inspect(prepare_example(model, kb_or_empty(kb), {0, a, b})).output.probs.values();
          },
          py::arg("text_a"), py::arg("text_b"), py::arg("kb") = nullptr)
      .def(
          "inspect",
          [](const Model& model, const std::string& a, const std::string& b, const LexicalKB* kb) {
            const InspectionResult r = model.inspect(prepare_example(model, kb_or_empty(kb), {0, a, b}));
            py::list layers;
            for (const auto& heads : r.layers) {
              py::list hs;
              for (const FusionTrace& t : heads) {
                py::dict d;
                d["g_fuse"] = t.g_fuse;
                d["g_filter"] = t.g_filter;
                hs.append(d);
              }
              layers.append(hs);
            }
            py::dict out;
            out["probs"] = r.output.probs.values();
            out["mean_g_filter"] = r.mean_g_filter();
            out["layers"] = layers;
            return out;
          },
          py::arg("text_a"), py::arg("text_b"), py::arg("kb") = nullptr)
      .def(
          "evaluate",
          [](const Model& model, const std::vector<PyExample>& rows, const LexicalKB* kb) {
            return metrics_dict(evaluate(model, prepare_dataset(model, kb_or_empty(kb), to_dataset(rows))));
          },
          py::arg("examples"), py::arg("kb") = nullptr)
      .def(
          "gradcheck",
          [](Model& model, const std::vector<PyExample>& rows, const LexicalKB* kb, double eps,
             double tol, std::optional<std::uint64_t> dropout_seed) {
            const auto batch = prepare_dataset(model, kb_or_empty(kb), to_dataset(rows));
            const GradCheckReport r = check_model_gradients(model, batch, eps, tol, dropout_seed);
            py::dict per;
            for (const TensorGradCheck& t : r.tensors) per[py::str(t.name)] = t.max_rel_error;
            py::dict out;
            out["max_rel_error"] = r.max_rel_error;
            out["passed"] = r.passed();
            out["tensors"] = per;
            return out;
          },
          py::arg("examples"), py::arg("kb") = nullptr, py::arg("eps") = 1e-4,
          py::arg("tol") = 1e-4, py::arg("dropout_seed") = std::nullopt);

  m.def(
      "train",
      [](Model& model, const std::vector<PyExample>& train_rows,
         const std::vector<PyExample>& val_rows, const LexicalKB* kb, const py::object& cfg) {
        const LexicalKB& k = kb_or_empty(kb);
        const auto tr = prepare_dataset(model, k, to_dataset(train_rows));
        const auto va = prepare_dataset(model, k, to_dataset(val_rows));
        const TrainConfig tc = train_config_from_json(to_json_obj(cfg));
        TrainResult r = [&] {
          py::gil_scoped_release release;
          return train(model, tr, va, tc);
        }();
        py::list log;
        for (const LogRecord& rec : r.log) log.append(to_py(Json::parse(to_jsonl(rec))));
        return py::make_tuple(std::move(r.best), r.best_step, r.best_val_acc, log);
      },
      py::arg("model"), py::arg("train"), py::arg("val"), py::arg("kb") = nullptr,
      py::arg("config") = py::none(),
      "Trains in place; returns (best_model, best_step, best_val_acc, log).");

  m.def(
      "synthetic_splits",
      [](const LexicalKB& kb, std::size_t n, const std::filesystem::path& templates,
         std::uint64_t seed) {
        Rng rng(seed);
        const SyntheticSplits s = gen_synthetic_splits(kb, n, load_templates(templates), rng);
        py::dict out;
        out["train"] = from_dataset(s.train);
        out["val"] = from_dataset(s.val);
        out["test"] = from_dataset(s.test);
        return out;
      },
      py::arg("kb"), py::arg("n"), py::arg("templates"), py::arg("seed") = 0);

  m.def(
      "swap_antonyms",
      [](const std::vector<PyExample>& rows, const LexicalKB& kb, std::uint64_t seed) {
        Rng rng(seed);
        return from_dataset(transform_dataset(to_dataset(rows), kb, SwapKind::Antonym, rng).data);
      },
      py::arg("examples"), py::arg("kb"), py::arg("seed") = 0);
  m.def(
      "swap_synonyms",
      [](const std::vector<PyExample>& rows, const LexicalKB& kb, std::uint64_t seed) {
        Rng rng(seed);
        return from_dataset(transform_dataset(to_dataset(rows), kb, SwapKind::Synonym, rng).data);
      },
      py::arg("examples"), py::arg("kb"), py::arg("seed") = 0);
}
