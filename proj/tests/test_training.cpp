#include <doctest.h>

#include <cmath>
#include <sstream>

#include "couplet/detail/binary.hpp"
#include "couplet/error.hpp"
#include "couplet/pipeline.hpp"
#include "couplet/training.hpp"
#include "support.hpp"

using namespace couplet;
using couplet::testing::synthetic_couplets;
using couplet::testing::TempDir;

namespace {

TrainingState small_state(const std::vector<CoupletPair>& pairs, const std::string& system, std::uint64_t seed,
                          int d_model = 16, int layers = 1) {
    RunConfig cfg;
    cfg.system = system;
    cfg.model.d_model = d_model;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 2 * d_model;
    cfg.model.enc_layers = layers;
    cfg.model.dec_layers = layers;
    cfg.model.max_len = 8;
    cfg.context_dim = 8;
    cfg.train.seed = seed;
    cfg.train.batch_size = 4;
    cfg.train.learning_rate = 1e-3;
    const auto vocab = Vocab::build(pairs);
    const Lexicons lex{testing::synthetic_pinyin(vocab), testing::synthetic_pos(vocab)};
    const auto atlas = testing::synthetic_atlas(vocab);
    return new_training_state(cfg, vocab, &lex, &atlas);
}

bool same_params(const Model& a, const Model& b) {
    std::vector<Mat> pa;
    std::vector<Mat> pb;
    a.visit([&](const std::string&, const Param& p) { pa.push_back(p.value); });
    b.visit([&](const std::string&, const Param& p) { pb.push_back(p.value); });
    return pa == pb;
}

}  // namespace

TEST_CASE("cross_entropy_loss") {
    SUBCASE("uniform logits give ln V") {
        const Mat logits = Mat::Constant(4, 10, 0.3);
        const std::vector<int> targets = {0, 3, 9, 5};
        const std::vector<std::uint8_t> mask = {1, 1, 1, 1};
        CHECK(cross_entropy_loss(logits, targets, mask).loss == doctest::Approx(std::log(10.0)).epsilon(1e-14));
    }
    SUBCASE("logit gap 20") {
        Mat logits = Mat::Zero(1, 5);
        logits(0, 2) = 20.0;
        const std::vector<int> targets = {2};
        const std::vector<std::uint8_t> mask = {1};
        const double loss = cross_entropy_loss(logits, targets, mask).loss;
        CHECK(loss < 1e-8);
        CHECK(loss == doctest::Approx(std::log1p(4.0 * std::exp(-20.0))).epsilon(1e-9));
    }
    SUBCASE("masking equals the kept subset") {
        const Mat logits = Mat::Random(6, 7);
        const std::vector<int> targets = {1, 2, 3, 4, 5, 6};
        const std::vector<std::uint8_t> mask = {1, 0, 1, 0, 1, 0};
        Mat kept(3, 7);
        kept << logits.row(0), logits.row(2), logits.row(4);
        const std::vector<int> kept_targets = {1, 3, 5};
        const std::vector<std::uint8_t> all = {1, 1, 1};
        const auto masked = cross_entropy_loss(logits, targets, mask);
        CHECK(masked.loss == doctest::Approx(cross_entropy_loss(kept, kept_targets, all).loss).epsilon(1e-14));
        CHECK(masked.grad.row(1).isZero(0.0));
        CHECK(masked.count == 3);
    }
    SUBCASE("gradient") {
        Mat logits = Mat::Random(3, 4);
        const std::vector<int> targets = {0, 3, 1};
        const std::vector<std::uint8_t> mask = {1, 1, 0};
        const auto r = cross_entropy_loss(logits, targets, mask);
        for (Eigen::Index i = 0; i < logits.size(); ++i) {
            const double old = logits.data()[i];
            logits.data()[i] = old + 1e-6;
            const double up = cross_entropy_loss(logits, targets, mask).loss;
            logits.data()[i] = old - 1e-6;
            const double down = cross_entropy_loss(logits, targets, mask).loss;
            logits.data()[i] = old;
            CHECK(r.grad.data()[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-6));
        }
    }
    SUBCASE("no unmasked positions") {
        const std::vector<int> targets = {1};
        const std::vector<std::uint8_t> mask = {0};
        CHECK_THROWS_AS(cross_entropy_loss(Mat::Zero(1, 3), targets, mask), Error);
    }
}

TEST_CASE("adam_step") {
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    Param p(Mat::Constant(1, 1, 1.0));
    p.grad(0, 0) = 1.0;
    std::vector<NamedParam> params = {{"p", &p}};
    AdamState state;
    adam_step(params, state, cfg);
    CHECK(state.t == 1);
    CHECK(p.value(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p.value(0, 0) == doctest::Approx(1.0 - 0.1 * 1.0 / (1.0 + 1e-8)).epsilon(1e-15));

    SUBCASE("zero gradient leaves parameters unchanged") {
        Param q(Mat::Constant(2, 3, 0.5));
        std::vector<NamedParam> qs = {{"q", &q}};
        AdamState s;
        adam_step(qs, s, cfg);
        CHECK(q.value == Mat::Constant(2, 3, 0.5));
        CHECK(s.t == 1);
        CHECK((s.v[0].array() >= 0.0).all());
    }
    SUBCASE("non-finite gradient names the parameter") {
        p.grad(0, 0) = std::nan("");
        try {
            adam_step(params, state, cfg);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("p") != std::string::npos);
        }
        CHECK(state.t == 1);
    }
    SUBCASE("clipping bounds the global norm") {
        Param a(Mat::Zero(1, 2));
        a.grad << 3.0, 4.0;
        std::vector<NamedParam> as = {{"a", &a}};
        CHECK(clip_gradients(as, 1.0) == doctest::Approx(5.0));
        CHECK(a.grad.norm() == doctest::Approx(1.0));
    }
}

TEST_CASE("checkpoint round trip is byte-identical") {
    const auto pairs = synthetic_couplets(12, 2, 5, 15, 1);
    for (const auto* system : {"fusion-decoder", "anchi-transformer"}) {
        auto state = small_state(pairs, system, 3);
        const auto enc = encode_pairs(state.vocab, pairs);
        train_step(state, batchify(enc, 4).front());
        TempDir dir;
        save_checkpoint(dir / "a.ckpt", state);
        const auto loaded = load_checkpoint(dir / "a.ckpt");
        save_checkpoint(dir / "b.ckpt", loaded);
        CHECK(detail::read_file(dir / "a.ckpt") == detail::read_file(dir / "b.ckpt"));
        CHECK(same_params(loaded.model, state.model));
        CHECK(loaded.adam == state.adam);
        CHECK(loaded.rng == state.rng);
        CHECK(loaded.step == state.step);
        CHECK(loaded.vocab == state.vocab);
        CHECK(loaded.train == state.train);
        CHECK(loaded.model.config() == state.model.config());
        CHECK(loaded.model.fusion_spec() == state.model.fusion_spec());

        SUBCASE("corruption is detected") {
            auto bytes = detail::read_file(dir / "a.ckpt");
            bytes.resize(bytes.size() - 3);
            CHECK_THROWS_AS(parse_checkpoint(bytes), DataError);
            auto bad = detail::read_file(dir / "a.ckpt");
            bad[1] = 'X';
            CHECK_THROWS_AS(parse_checkpoint(bad), DataError);
        }
    }
}

TEST_CASE("two steps after a save/load equal two steps without it") {
    const auto pairs = synthetic_couplets(8, 2, 5, 15, 2);
    auto a = small_state(pairs, "fusion-transformer", 4);
    const auto batch = batchify(encode_pairs(a.vocab, pairs), 8).front();
    train_step(a, batch);
    auto b = parse_checkpoint(serialize_checkpoint(a));
    for (int i = 0; i < 2; ++i) {
        train_step(a, batch);
        train_step(b, batch);
    }
    CHECK(same_params(a.model, b.model));
    CHECK(serialize_checkpoint(a) == serialize_checkpoint(b));
}

TEST_CASE("training loop") {
    const auto pairs = synthetic_couplets(20, 2, 5, 15, 3);

    SUBCASE("learning rate zero keeps parameters") {
        auto state = small_state(pairs, "fusion-decoder", 5);
        state.train.learning_rate = 0.0;
        state.train.epochs = 1;
        const auto before = parse_checkpoint(serialize_checkpoint(state));
        const auto enc = encode_pairs(state.vocab, pairs);
        const auto log = train(state, enc, {});
        CHECK(log.steps.size() == 5);
        CHECK(same_params(before.model, state.model));
    }
    SUBCASE("seeded runs are identical, and resume is bit-exact") {
        auto a = small_state(pairs, "fusion-decoder", 6);
        auto b = small_state(pairs, "fusion-decoder", 6);
        a.train.max_steps = b.train.max_steps = 12;
        const auto enc = encode_pairs(a.vocab, pairs);
        const std::vector<EncodedPair> val(enc.begin(), enc.begin() + 2);
        std::ostringstream log_a;
        const auto la = train(a, enc, val, {0, {}, &log_a});
        TrainOptions half;
        half.stop_at_step = 7;
        train(b, enc, val, half);
        auto resumed = parse_checkpoint(serialize_checkpoint(b));
        const auto lb = train(resumed, enc, val);
        CHECK(serialize_checkpoint(a) == serialize_checkpoint(resumed));
        REQUIRE(lb.steps.size() == 5);
        CHECK(lb.steps.back().loss == la.steps.back().loss);
        CHECK(la.epochs.size() == 2);
        CHECK(la.epochs[0].validation_perplexity >= 1.0);
        const auto text = log_a.str();
        CHECK(text.find("{\"step\":1,\"epoch\":0,\"loss\":") == 0);
        CHECK(text.find("\"val_perplexity\"") != std::string::npos);
    }
    SUBCASE("epoch order depends only on seed and epoch") {
        CHECK(epoch_order(50, 1, 3) == epoch_order(50, 1, 3));
        CHECK(epoch_order(50, 1, 3) != epoch_order(50, 1, 4));
        CHECK(total_steps(TrainConfig{.batch_size = 4, .epochs = 3}, 10) == 9);
    }
    SUBCASE("checkpoints are written periodically") {
        TempDir dir;
        auto state = small_state(pairs, "anchi-decoder", 7);
        state.train.max_steps = 4;
        state.train.checkpoint_every = 2;
        TrainOptions opt;
        opt.checkpoint_path = dir / "run.ckpt";
        opt.stop_at_step = 3;
        train(state, encode_pairs(state.vocab, pairs), {}, opt);
        CHECK(load_checkpoint(dir / "run.ckpt").step == 3);
    }
}

TEST_CASE("loss on a frozen batch falls over the first 10 steps at lr 1e-4 (desk model)") {
    const auto pairs = synthetic_couplets(16, 4, 7, 40, 11);
    const auto vocab = Vocab::build(pairs);
    const Lexicons lex{testing::synthetic_pinyin(vocab), testing::synthetic_pos(vocab)};
    const auto atlas = testing::synthetic_atlas(vocab);
    RunConfig cfg;
    cfg.system = "fusion-decoder";
    cfg.train.seed = 8;
    auto state = new_training_state(cfg, vocab, &lex, &atlas);
    CHECK(state.train.learning_rate == 1e-4);
    const auto batch = batchify(encode_pairs(vocab, pairs), 16).front();
    std::vector<double> curve;
    for (int i = 0; i < 10; ++i) {
        curve.push_back(batch_loss(state.model, batch));
        train_step(state, batch);
    }
    curve.push_back(batch_loss(state.model, batch));
    for (std::size_t i = 1; i < curve.size(); ++i) {
        CHECK(curve[i] < curve[i - 1]);
    }
}

TEST_CASE("a desk model memorizes a single couplet in 200 steps") {
    const std::vector<CoupletPair> one = {{U"晚风摇树树还挺", U"晨露润花花更红"}};
    RunConfig cfg;
    cfg.system = "fusion-decoder";
    cfg.train.seed = 1;
    const auto vocab = Vocab::build(one);
    const Lexicons lex{testing::synthetic_pinyin(vocab), testing::synthetic_pos(vocab)};
    const auto atlas = testing::synthetic_atlas(vocab);
    auto state = new_training_state(cfg, vocab, &lex, &atlas);
    const auto batch = batchify(encode_pairs(vocab, one), 1).front();
    for (int i = 0; i < 200; ++i) {
        train_step(state, batch);
    }
    const double loss = batch_loss(state.model, batch);
    MESSAGE("training-set loss after 200 steps " << loss);
    CHECK(loss < 0.1);
}
