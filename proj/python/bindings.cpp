#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "couplet/cli.hpp"
#include "couplet/error.hpp"
#include "couplet/metrics.hpp"
#include "couplet/pipeline.hpp"
#include "couplet/utf8.hpp"

namespace py = pybind11;
using namespace couplet;

namespace {

std::u32string from_py(const std::string& s) { return utf8::strip_spaces(utf8::decode_or_throw(s, "argument")); }

std::vector<CoupletPair> pairs_from_py(const std::vector<std::pair<std::string, std::string>>& pairs) {
    std::vector<CoupletPair> out;
    out.reserve(pairs.size());
    for (const auto& [upper, lower] : pairs) {
        out.push_back({from_py(upper), from_py(lower)});
    }
    return out;
}

py::dict bleu_dict(const BleuResult& r) {
    py::dict d;
    d["score"] = r.score;
    d["precisions"] = r.precisions;
    d["brevity_penalty"] = r.brevity_penalty;
    d["candidate_length"] = r.candidate_length;
    d["reference_length"] = r.reference_length;
    return d;
}

}  // namespace

PYBIND11_MODULE(_couplet, m) {
    m.doc() = "Chinese couplet generation with fused glyph, pinyin, POS and contextual embeddings.";

    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

    m.def(
        "load_couplets",
        [](const std::filesystem::path& upper, const std::filesystem::path& lower, int max_len) {
            const auto r = load_couplets(upper, lower, max_len);
            std::vector<std::pair<std::string, std::string>> pairs;
            for (const auto& p : r.pairs) {
                pairs.emplace_back(utf8::encode(p.upper), utf8::encode(p.lower));
            }
            return py::make_tuple(pairs, r.dropped);
        },
        py::arg("upper_path"), py::arg("lower_path"), py::arg("max_len") = kDefaultMaxLen,
        "Returns (pairs, dropped) with pairs as (upper, lower) strings.");

    py::class_<Vocab>(m, "Vocab")
        .def_static(
            "build",
            [](const std::vector<std::pair<std::string, std::string>>& pairs, int min_freq) {
                return Vocab::build(pairs_from_py(pairs), min_freq);
            },
            py::arg("pairs"), py::arg("min_freq") = 1)
        .def_static("load", &Vocab::load)
        .def("save", &Vocab::save)
        .def("__len__", &Vocab::size)
        .def_property_readonly("hash", &Vocab::hash)
        .def(
            "encode", [](const Vocab& v, const std::string& text, bool add_bos_eos) {
                return v.encode(from_py(text), add_bos_eos);
            },
            py::arg("text"), py::arg("add_bos_eos") = false)
        .def("decode", [](const Vocab& v, const std::vector<int>& ids) { return utf8::encode(v.decode(ids)); })
        .def_readonly_static("PAD", &Vocab::kPad)
        .def_readonly_static("BOS", &Vocab::kBos)
        .def_readonly_static("EOS", &Vocab::kEos)
        .def_readonly_static("UNK", &Vocab::kUnk)
        .def_readonly_static("SEP", &Vocab::kSep);

    m.def(
        "bleu",
        [](const std::vector<std::string>& candidates, const std::vector<std::string>& references, int max_n) {
            std::vector<std::u32string> c;
            std::vector<std::u32string> r;
            for (const auto& s : candidates) {
                c.push_back(from_py(s));
            }
            for (const auto& s : references) {
                r.push_back(from_py(s));
            }
            return bleu_dict(bleu(c, r, max_n));
        },
        py::arg("candidates"), py::arg("references"), py::arg("max_n") = 4);

    m.def(
        "cross_entropy_loss",
        [](const Mat& logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
            auto r = cross_entropy_loss(logits, targets, mask);
            return py::make_tuple(r.loss, r.grad);
        },
        py::arg("logits"), py::arg("targets"), py::arg("mask"), "Masked mean cross-entropy; returns (loss, dlogits).");

    m.def("positional_encoding", &positional_encoding, py::arg("length"), py::arg("d_model"));

    m.def("systems", [] {
        std::vector<std::string> names;
        for (const auto& s : all_systems()) {
            names.push_back(s.name);
        }
        return names;
    });

    py::class_<TrainingState>(m, "Checkpoint")
        .def_static("load", &load_checkpoint, py::arg("path"))
        .def("save", [](const TrainingState& s, const std::filesystem::path& p) { save_checkpoint(p, s); })
        .def_readonly("system", &TrainingState::system)
        .def_readonly("step", &TrainingState::step)
        .def_readonly("vocab", &TrainingState::vocab)
        .def_property_readonly("parameter_count", [](const TrainingState& s) { return s.model.parameter_count(); })
        .def(
            "generate",
            [](const TrainingState& s, const std::string& upper, int beam_width, bool enforce_length) {
                return utf8::encode(generate(s.model, s.vocab, from_py(upper), {beam_width, enforce_length}));
            },
            py::arg("upper"), py::arg("beam_width") = 1, py::arg("enforce_length") = true)
        .def(
            "beam_search",
            [](const TrainingState& s, const std::string& upper, int beam_width, bool enforce_length) {
                std::vector<std::pair<std::string, double>> out;
                for (const auto& h : beam_search(s.model, s.vocab.encode(from_py(upper)), beam_width, enforce_length)) {
                    out.emplace_back(utf8::encode(s.vocab.decode(h.content())), h.log_prob);
                }
                return out;
            },
            py::arg("upper"), py::arg("beam_width"), py::arg("enforce_length") = true,
            "Returns [(lower, log_prob)] best first.")
        .def(
            "perplexity",
            [](const TrainingState& s, const std::vector<std::pair<std::string, std::string>>& pairs) {
                return perplexity(s.model, encode_pairs(s.vocab, pairs_from_py(pairs)));
            },
            py::arg("pairs"));

    m.def(
        "train",
        [](const std::filesystem::path& config, const std::map<std::string, std::string>& overrides, bool resume) {
            RunConfig cfg = RunConfig::load(config);
            detail::KeyValues kv;
            for (const auto& [k, v] : overrides) {
                kv.set(k, v);
            }
            cfg.apply(kv, {});
            auto summary = run_training(cfg, resume, nullptr);
            std::vector<double> losses;
            for (const auto& s : summary.log.steps) {
                losses.push_back(s.loss);
            }
            return py::make_tuple(std::move(summary.state), losses);
        },
        py::arg("config"), py::arg("overrides") = std::map<std::string, std::string>{}, py::arg("resume") = false,
        "Trains per a config file; returns (checkpoint, per-step losses).");

    m.def(
        "main",
        [](const std::vector<std::string>& args, const std::string& stdin_text) {
            std::istringstream in(stdin_text);
            std::ostringstream out;
            std::ostringstream err;
            const int code = run_cli(args, in, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), py::arg("stdin") = "", "Runs the command-line tool; returns (exit_code, stdout, stderr).");
}
