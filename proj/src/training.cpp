#include "couplet/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "couplet/detail/binary.hpp"
#include "couplet/detail/keyvalue.hpp"
#include "couplet/error.hpp"
#include "couplet/metrics.hpp"

namespace couplet {

namespace {

constexpr std::string_view kCheckpointMagic = "CKP1";
constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F64 = 0, F32 = 1, I64 = 2, I32 = 3, U8 = 4 };

struct Section {
    std::string name;
    DType dtype = DType::U8;
    std::vector<std::uint64_t> shape;
    std::vector<std::uint8_t> payload;
};

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::F64:
        case DType::I64:
            return 8;
        case DType::F32:
        case DType::I32:
            return 4;
        case DType::U8:
            return 1;
    }
    throw DataError("checkpoint: unknown dtype");
}

Section text_section(std::string name, const std::string& text) {
    return {std::move(name), DType::U8, {text.size()}, {text.begin(), text.end()}};
}

Section matrix_section(std::string name, const Mat& m) {
    Section s{std::move(name), DType::F64, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
    const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
    s.payload.assign(p, p + m.size() * sizeof(double));
    return s;
}

template <typename T>
Section int_section(std::string name, std::span<const T> values) {
    const DType dtype = sizeof(T) == 8 ? DType::I64 : DType::I32;
    Section s{std::move(name), dtype, {values.size()}, {}};
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    s.payload.assign(p, p + values.size() * sizeof(T));
    return s;
}

Section scalar_i64(std::string name, std::int64_t value) {
    return int_section<std::int64_t>(std::move(name), std::span<const std::int64_t>(&value, 1));
}

std::string format_double(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

std::string config_echo(const TrainingState& state) {
    const auto& m = state.model.config();
    const auto& f = state.model.fusion_spec();
    const auto& t = state.train;
    detail::KeyValues kv;
    kv.set("system", state.system);
    kv.set("model.variant", to_string(m.variant));
    kv.set("model.enc_layers", std::to_string(m.enc_layers));
    kv.set("model.dec_layers", std::to_string(m.dec_layers));
    kv.set("model.n_heads", std::to_string(m.n_heads));
    kv.set("model.d_model", std::to_string(m.d_model));
    kv.set("model.d_ff", std::to_string(m.d_ff));
    kv.set("model.dropout", format_double(m.dropout));
    kv.set("model.vocab_size", std::to_string(m.vocab_size));
    kv.set("model.max_len", std::to_string(m.max_len));
    kv.set("fusion.use_glyph", f.use_glyph ? "true" : "false");
    kv.set("fusion.use_pinyin", f.use_pinyin ? "true" : "false");
    kv.set("fusion.use_pos", f.use_pos ? "true" : "false");
    kv.set("fusion.use_context", f.use_context ? "true" : "false");
    kv.set("fusion.glyph_dim", std::to_string(f.glyph_dim));
    kv.set("fusion.pinyin_dim", std::to_string(f.pinyin_dim));
    kv.set("fusion.pos_dim", std::to_string(f.pos_dim));
    kv.set("fusion.context_dim", std::to_string(f.context_dim));
    kv.set("fusion.pinyin_rows", std::to_string(f.pinyin_rows));
    kv.set("fusion.pos_rows", std::to_string(f.pos_rows));
    kv.set("train.learning_rate", format_double(t.learning_rate));
    kv.set("train.batch_size", std::to_string(t.batch_size));
    kv.set("train.epochs", std::to_string(t.epochs));
    kv.set("train.max_steps", std::to_string(t.max_steps));
    kv.set("train.adam_beta1", format_double(t.adam_beta1));
    kv.set("train.adam_beta2", format_double(t.adam_beta2));
    kv.set("train.adam_eps", format_double(t.adam_eps));
    kv.set("train.seed", std::to_string(t.seed));
    kv.set("train.checkpoint_every", std::to_string(t.checkpoint_every));
    kv.set("train.clip_grad_norm", t.clip_grad_norm ? "true" : "false");
    kv.set("train.validation_fraction", format_double(t.validation_fraction));
    kv.set("context_file", state.context_file);
    return kv.serialize();
}

}  // namespace

TrainConfig TrainConfig::desk() {
    TrainConfig cfg;
    cfg.batch_size = 16;
    return cfg;
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0)) {
        throw Error("train config: learning_rate must be >= 0");
    }
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
        throw Error("train config: Adam betas must be in [0, 1)");
    }
    if (batch_size < 1 || epochs < 0 || max_steps < 0 || checkpoint_every < 0) {
        throw Error("train config: batch_size must be >= 1 and step counts non-negative");
    }
}

LossResult cross_entropy_loss(const Mat& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
    if (static_cast<std::size_t>(logits.rows()) != targets.size() || targets.size() != mask.size()) {
        throw Error("cross_entropy_loss: logits, targets and mask disagree in length");
    }
    LossResult result;
    result.grad = Mat::Zero(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        result.count += mask[i] != 0 ? 1 : 0;
    }
    if (result.count == 0) {
        throw Error("cross_entropy_loss: no unmasked positions");
    }
    const double inv = 1.0 / static_cast<double>(result.count);
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        if (mask[i] == 0) {
            continue;
        }
        const int target = targets[i];
        if (target < 0 || target >= logits.cols()) {
            throw Error("cross_entropy_loss: target id out of range");
        }
        const double max = logits.row(i).maxCoeff();
        const RowVec shifted = logits.row(i).array() - max;
        const RowVec e = shifted.array().exp();
        const double sum = e.sum();
        total += std::log(sum) - shifted[target];
        result.grad.row(i) = e * (inv / sum);
        result.grad(i, target) -= inv;
    }
    result.loss = total * inv;
    return result;
}

std::vector<NamedParam> collect_params(Model& model) {
    std::vector<NamedParam> params;
    model.visit([&params](const std::string& name, Param& p) { params.push_back({name, &p}); });
    return params;
}

void adam_step(std::span<const NamedParam> params, AdamState& state, const TrainConfig& cfg) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.push_back(Mat::Zero(p.param->value.rows(), p.param->value.cols()));
            state.v.push_back(Mat::Zero(p.param->value.rows(), p.param->value.cols()));
        }
    }
    if (state.m.size() != params.size()) {
        throw Error("adam_step: optimizer state does not match the parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& g = params[i].param->grad;
        if (state.m[i].rows() != g.rows() || state.m[i].cols() != g.cols()) {
            throw Error("adam_step: state shape mismatch for " + params[i].name);
        }
        if (!g.allFinite()) {
            throw Error("adam_step: non-finite gradient in " + params[i].name);
        }
    }
    ++state.t;
    const double b1 = cfg.adam_beta1;
    const double b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i].param;
        auto& m = state.m[i];
        auto& v = state.v[i];
        m = b1 * m + (1.0 - b1) * p.grad;
        v = b2 * v + (1.0 - b2) * p.grad.cwiseAbs2();
        p.value.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
    }
}

double clip_gradients(std::span<const NamedParam> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        sq += p.param->grad.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& p : params) {
            p.param->grad *= scale;
        }
    }
    return norm;
}

std::vector<std::uint8_t> serialize_checkpoint(const TrainingState& state) {
    std::vector<Section> sections;
    sections.push_back(text_section("config", config_echo(state)));
    sections.push_back(text_section("vocab", state.vocab.serialize()));
    sections.push_back(scalar_i64("vocab.hash", static_cast<std::int64_t>(state.vocab.hash())));
    sections.push_back(int_section<int>("annotations.pinyin", state.model.annotations().pinyin_of_token));
    sections.push_back(int_section<int>("annotations.pos", state.model.annotations().pos_of_token));
    sections.push_back(scalar_i64("train.step", state.step));
    std::ostringstream rng;
    rng << state.rng;
    sections.push_back(text_section("rng", rng.str()));
    std::vector<std::string> names;
    state.model.visit([&](const std::string& name, const Param& p) {
        names.push_back(name);
        sections.push_back(matrix_section("param/" + name, p.value));
    });
    sections.push_back(scalar_i64("adam.t", state.adam.t));
    for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
        sections.push_back(matrix_section("adam.m/" + names.at(i), state.adam.m[i]));
        sections.push_back(matrix_section("adam.v/" + names.at(i), state.adam.v[i]));
    }

    detail::ByteWriter out;
    out.put_string(kCheckpointMagic);
    out.put(kCheckpointVersion);
    out.put(static_cast<std::uint32_t>(sections.size()));
    for (const auto& s : sections) {
        out.put(static_cast<std::uint32_t>(s.name.size()));
        out.put_string(s.name);
        out.put(static_cast<std::uint8_t>(s.dtype));
        out.put(static_cast<std::uint32_t>(s.shape.size()));
        for (auto d : s.shape) {
            out.put(d);
        }
        out.put_bytes(s.payload);
    }
    return std::move(out.bytes());
}

TrainingState parse_checkpoint(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes, "checkpoint");
    if (in.get_string(4) != kCheckpointMagic) {
        throw DataError("checkpoint: bad magic (expected CKP1)");
    }
    const auto version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = in.get<std::uint32_t>();
    std::map<std::string, Section> sections;
    std::vector<std::string> order;
    for (std::uint32_t i = 0; i < count; ++i) {
        Section s;
        s.name = in.get_string(in.get<std::uint32_t>());
        s.dtype = static_cast<DType>(in.get<std::uint8_t>());
        const auto rank = in.get<std::uint32_t>();
        std::uint64_t elements = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            s.shape.push_back(in.get<std::uint64_t>());
            elements *= s.shape.back();
        }
        const auto raw = in.get_bytes(elements * dtype_size(s.dtype));
        s.payload.assign(raw.begin(), raw.end());
        order.push_back(s.name);
        sections.emplace(s.name, std::move(s));
    }
    if (!in.done()) {
        throw DataError("checkpoint: trailing bytes");
    }
    const auto need = [&](const std::string& name, DType dtype) -> const Section& {
        const auto it = sections.find(name);
        if (it == sections.end()) {
            throw DataError("checkpoint: missing section " + name);
        }
        if (it->second.dtype != dtype) {
            throw DataError("checkpoint: section " + name + " has the wrong dtype");
        }
        return it->second;
    };
    const auto text = [&](const std::string& name) {
        const auto& s = need(name, DType::U8);
        return std::string(s.payload.begin(), s.payload.end());
    };
    const auto ints = [&](const std::string& name) {
        const auto& s = need(name, DType::I32);
        std::vector<int> out(s.payload.size() / sizeof(int));
        std::memcpy(out.data(), s.payload.data(), s.payload.size());
        return out;
    };
    const auto i64 = [&](const std::string& name) {
        const auto& s = need(name, DType::I64);
        if (s.payload.size() != sizeof(std::int64_t)) {
            throw DataError("checkpoint: section " + name + " must be a scalar");
        }
        std::int64_t v;
        std::memcpy(&v, s.payload.data(), sizeof v);
        return v;
    };
    const auto matrix = [&](const std::string& name, const Mat& like) {
        const auto& s = need(name, DType::F64);
        if (s.shape.size() != 2 || s.shape[0] != static_cast<std::uint64_t>(like.rows()) ||
            s.shape[1] != static_cast<std::uint64_t>(like.cols())) {
            throw DataError("checkpoint: section " + name + " has the wrong shape");
        }
        Mat m(like.rows(), like.cols());
        std::memcpy(m.data(), s.payload.data(), s.payload.size());
        return m;
    };

    const auto kv = detail::KeyValues::parse(text("config"));
    TrainingState state;
    state.system = kv.get("system");
    state.context_file = kv.get("context_file");
    ModelConfig mc;
    mc.variant = parse_variant(kv.get("model.variant"));
    mc.enc_layers = kv.get_int("model.enc_layers");
    mc.dec_layers = kv.get_int("model.dec_layers");
    mc.n_heads = kv.get_int("model.n_heads");
    mc.d_model = kv.get_int("model.d_model");
    mc.d_ff = kv.get_int("model.d_ff");
    mc.dropout = kv.get_double("model.dropout");
    mc.vocab_size = kv.get_int("model.vocab_size");
    mc.max_len = kv.get_int("model.max_len");
    FusionSpec fs;
    fs.use_glyph = kv.get_bool("fusion.use_glyph");
    fs.use_pinyin = kv.get_bool("fusion.use_pinyin");
    fs.use_pos = kv.get_bool("fusion.use_pos");
    fs.use_context = kv.get_bool("fusion.use_context");
    fs.glyph_dim = kv.get_int("fusion.glyph_dim");
    fs.pinyin_dim = kv.get_int("fusion.pinyin_dim");
    fs.pos_dim = kv.get_int("fusion.pos_dim");
    fs.context_dim = kv.get_int("fusion.context_dim");
    fs.pinyin_rows = kv.get_int("fusion.pinyin_rows");
    fs.pos_rows = kv.get_int("fusion.pos_rows");
    fs.d_model = mc.d_model;
    auto& t = state.train;
    t.learning_rate = kv.get_double("train.learning_rate");
    t.batch_size = kv.get_int("train.batch_size");
    t.epochs = kv.get_int("train.epochs");
    t.max_steps = kv.get_int64("train.max_steps");
    t.adam_beta1 = kv.get_double("train.adam_beta1");
    t.adam_beta2 = kv.get_double("train.adam_beta2");
    t.adam_eps = kv.get_double("train.adam_eps");
    t.seed = kv.get_uint64("train.seed");
    t.checkpoint_every = kv.get_int64("train.checkpoint_every");
    t.clip_grad_norm = kv.get_bool("train.clip_grad_norm");
    t.validation_fraction = kv.get_double("train.validation_fraction");

    state.vocab = Vocab::parse(text("vocab"));
    if (static_cast<std::uint64_t>(i64("vocab.hash")) != state.vocab.hash()) {
        throw DataError("checkpoint: vocabulary hash mismatch");
    }
    TokenAnnotations ann{ints("annotations.pinyin"), ints("annotations.pos")};
    state.model = Model(mc, fs, std::move(ann));
    state.step = i64("train.step");
    std::istringstream rng(text("rng"));
    rng >> state.rng;
    if (!rng) {
        throw DataError("checkpoint: corrupt generator state");
    }
    std::vector<std::string> names;
    state.model.visit([&](const std::string& name, Param& p) {
        p.value = matrix("param/" + name, p.value);
        p.zero_grad();
        names.push_back(name);
    });
    state.adam.t = i64("adam.t");
    if (sections.count("adam.m/" + names.front()) != 0) {
        for (const auto& name : names) {
            const Mat* like = nullptr;
            state.model.visit([&](const std::string& n, const Param& p) {
                if (n == name) {
                    like = &p.value;
                }
            });
            state.adam.m.push_back(matrix("adam.m/" + name, *like));
            state.adam.v.push_back(matrix("adam.v/" + name, *like));
        }
    }
    if (!state.context_file.empty()) {
        state.model.set_context_file(
            std::make_shared<const PrecomputedContext>(PrecomputedContext::load(state.context_file)));
    }
    return state;
}

void save_checkpoint(const std::filesystem::path& path, const TrainingState& state) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    // Write-then-rename so an interrupted run never leaves a torn checkpoint.
    auto tmp = path;
    tmp += ".tmp";
    detail::write_file(tmp, serialize_checkpoint(state));
    std::filesystem::rename(tmp, path);
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return parse_checkpoint(bytes);
}

std::int64_t total_steps(const TrainConfig& cfg, std::size_t train_pairs) {
    if (cfg.max_steps > 0) {
        return cfg.max_steps;
    }
    const auto per_epoch = static_cast<std::int64_t>((train_pairs + cfg.batch_size - 1) / cfg.batch_size);
    return per_epoch * cfg.epochs;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::mt19937_64 mix(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
    return shuffled_order(n, mix());
}

double train_step(TrainingState& state, const Batch& batch) {
    auto& model = state.model;
    const auto tf = make_teacher_forced(batch, model.config().variant);
    model.zero_grad();
    Model::Cache cache;
    const Mat logits = model.forward(tf.input, Mode::Train, &state.rng, &cache);
    const auto loss = cross_entropy_loss(logits, tf.targets, tf.loss_mask);
    model.backward(loss.grad, cache);
    const auto params = collect_params(model);
    if (state.train.clip_grad_norm) {
        clip_gradients(params, 1.0);
    }
    adam_step(params, state.adam, state.train);
    ++state.step;
    return loss.loss;
}

double batch_loss(const Model& model, const Batch& batch) {
    const auto tf = make_teacher_forced(batch, model.config().variant);
    const Mat logits = model.forward(tf.input, Mode::Eval, nullptr, nullptr);
    return cross_entropy_loss(logits, tf.targets, tf.loss_mask).loss;
}

TrainingLog train(TrainingState& state, std::span<const EncodedPair> train_set,
                  std::span<const EncodedPair> validation_set, const TrainOptions& options) {
    state.train.validate();
    if (train_set.empty()) {
        throw Error("train: empty training set");
    }
    const auto& cfg = state.train;
    const auto per_epoch = static_cast<std::int64_t>((train_set.size() + cfg.batch_size - 1) / cfg.batch_size);
    auto stop = total_steps(cfg, train_set.size());
    if (options.stop_at_step > 0) {
        stop = std::min(stop, options.stop_at_step);
    }
    TrainingLog log;
    std::vector<Batch> batches;
    int loaded_epoch = -1;
    const auto start = std::chrono::steady_clock::now();
    while (state.step < stop) {
        const int epoch = static_cast<int>(state.step / per_epoch);
        if (epoch != loaded_epoch) {
            const auto order = epoch_order(train_set.size(), cfg.seed, epoch);
            batches = batchify(train_set, cfg.batch_size, Vocab::kPad, order);
            loaded_epoch = epoch;
        }
        const auto& batch = batches[static_cast<std::size_t>(state.step % per_epoch)];
        const double loss = train_step(state, batch);
        const double wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        log.steps.push_back({state.step, epoch, loss, cfg.learning_rate, wall_ms});
        if (options.log != nullptr) {
            nlohmann::ordered_json j{{"step", state.step}, {"epoch", epoch}, {"loss", loss}, {"lr", cfg.learning_rate},
                             {"wall_ms", wall_ms}};
            *options.log << j.dump() << '\n';
        }
        if (state.step % per_epoch == 0 && !validation_set.empty()) {
            const double ppl = perplexity(state.model, validation_set);
            log.epochs.push_back({epoch, ppl});
            if (options.log != nullptr) {
                *options.log << nlohmann::ordered_json{{"epoch", epoch}, {"val_perplexity", ppl}}.dump() << '\n';
            }
        }
        if (!options.checkpoint_path.empty() && cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
            save_checkpoint(options.checkpoint_path, state);
        }
    }
    if (!options.checkpoint_path.empty()) {
        save_checkpoint(options.checkpoint_path, state);
    }
    return log;
}

}  // namespace couplet
