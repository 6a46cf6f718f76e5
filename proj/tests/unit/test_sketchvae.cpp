#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "common/generators.hpp"
#include "common/gradcheck.hpp"
#include "sketchnet/nn/optim.hpp"
#include "sketchnet/vae.hpp"

using namespace sketchnet;

namespace {

VaeConfig tiny() {
  VaeConfig c;
  c.embed = 4;
  c.encoder_hidden = 3;
  c.pitch_latent = 2;
  c.rhythm_latent = 2;
  c.beat_hidden = 3;
  c.tick_hidden = 3;
  c.seed = 5;
  return c;
}

VaeConfig small() {
  VaeConfig c;
  c.embed = 16;
  c.encoder_hidden = 24;
  c.pitch_latent = 8;
  c.rhythm_latent = 8;
  c.beat_hidden = 24;
  c.tick_hidden = 24;
  return c;
}

template <class T>
void zero_heads(SketchVae<T>& vae) {
  for (auto* p : vae.params().all()) {
    if (p->name.starts_with("decoder.tick_out") || p->name.find(".mean.") != std::string::npos ||
        p->name.find(".logvar.") != std::string::npos) {
      p->value.setZero();
    }
  }
}

}  // namespace

TEST_CASE("encoder and decoder shapes") {
  SketchVae<float> vae(small());
  std::mt19937_64 rng(1);
  const auto batch = testing::random_measures(rng, 5);
  const auto z = vae.encode_means(batch);
  CHECK(z.rows() == 5);
  CHECK(z.cols() == 16);
  const auto dec = vae.decode(z);
  REQUIRE(dec.logits.size() == 5);
  CHECK(dec.logits[0].rows() == kFramesPerMeasure);
  CHECK(dec.logits[0].cols() == kFrameVocab);
  for (const auto& f : dec.frames) {
    for (int t : f.tokens) CHECK(in_frame_vocab(t));
  }

  std::vector<PitchSeq> pitch;
  for (const auto& f : batch) pitch.push_back(pitch_of(f));
  const auto enc = vae.encode_pitch(pitch, rng);
  CHECK(enc.posterior.mean.cols() == 8);
  CHECK((enc.posterior.stddev.array() > 0).all());
  CHECK(enc.sample.rows() == 5);
}

TEST_CASE("batched decoding matches per-item decoding") {
  SketchVae<float> vae(small());
  std::mt19937_64 rng(2);
  const auto batch = testing::random_measures(rng, 4);
  const auto z = vae.encode_means(batch);
  const auto all = vae.decode(z);
  for (Eigen::Index b = 0; b < 4; ++b) {
    const auto one = vae.decode(nn::Matrix<float>(z.row(b)));
    CHECK(one.frames[0] == all.frames[static_cast<std::size_t>(b)]);
    CHECK(one.logits[0].isApprox(all.logits[static_cast<std::size_t>(b)], 1e-4f));
  }
}

TEST_CASE("construction and decoding are deterministic") {
  SketchVae<float> a(small()), b(small());
  CHECK(parameter_hash(a.params()) == parameter_hash(b.params()));
  std::mt19937_64 rng(3);
  const auto batch = testing::random_measures(rng, 3);
  CHECK(a.reconstruct(batch) == b.reconstruct(batch));

  std::mt19937_64 r1(7), r2(7);
  const auto z = a.encode_means(batch);
  const auto s1 = a.decode(z, nullptr, {.temperature = 1.0, .rng = &r1}).frames;
  const auto s2 = a.decode(z, nullptr, {.temperature = 1.0, .rng = &r2}).frames;
  CHECK(s1 == s2);
}

TEST_CASE("uniform logits and a standard posterior give ln(130) and zero KL") {
  SketchVae<double> vae(VaeConfig{});
  zero_heads(vae);
  std::mt19937_64 rng(4);
  const auto batch = testing::random_measures(rng, 3);
  nn::Tape<double> tape(false);
  const auto elbo = vae.forward_train(tape, batch, rng, 0.1);
  CHECK(std::abs(elbo.reconstruction.value()(0, 0) - std::log(130.0)) < 1e-6);
  CHECK(std::abs(elbo.kl.value()(0, 0)) < 1e-6);
  CHECK(std::abs(elbo.total.value()(0, 0) - std::log(130.0)) < 1e-6);
}

TEST_CASE("ELBO gradients match finite differences on a reduced model") {
  SketchVae<double> vae(tiny());
  std::mt19937_64 data(6);
  const auto batch = testing::random_measures(data, 2);
  auto loss = [&](nn::Tape<double>& tape) {
    std::mt19937_64 rng(11);
    return vae.forward_train(tape, batch, rng, 0.5).total;
  };
  const auto r = testing::grad_check(vae.params().all(), loss, 12);
  CHECK(r.checked >= 50);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("reconstruction accuracy counts matching frames") {
  FrameSequence target = FrameSequence::rest();
  FrameSequence predicted = target;
  for (std::size_t t = 0; t < 6; ++t) predicted[t] = 60;
  const std::vector<FrameSequence> p{predicted}, q{target};
  CHECK(reconstruction_accuracy(p, q) == Catch::Approx(18.0 / 24.0));
  CHECK_THROWS_AS(reconstruction_accuracy(p, std::vector<FrameSequence>{}), ShapeMismatch);
}

TEST_CASE("bad inputs are rejected") {
  SketchVae<float> vae(small());
  nn::Tape<float> tape(false);
  PitchSeq p;
  p.tokens.fill(kPitchPad);
  p[3] = 200;
  CHECK_THROWS_AS(vae.encode_pitch(tape, std::vector<PitchSeq>{p}), VocabError);
  RhythmSeq r;
  r.tokens.fill(7);
  CHECK_THROWS_AS(vae.encode_rhythm(tape, std::vector<RhythmSeq>{r}), VocabError);
  CHECK_THROWS_AS(vae.decode(nn::Matrix<float>::Zero(1, 5)), ShapeMismatch);
  nn::Matrix<float> z = nn::Matrix<float>::Zero(1, 16);
  z(0, 2) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(vae.decode(z), ShapeMismatch);
}

TEST_CASE("checkpoints round-trip and refuse mismatched layouts") {
  SketchVae<float> vae(small());
  const auto bytes = vae.serialize();
  const auto ck = parse_checkpoint(bytes);
  CHECK(ck.kind == "sketchvae");
  CHECK(ck.id.size() == 16);
  auto back = SketchVae<float>::from_checkpoint(ck);
  CHECK(parameter_hash(back.params()) == parameter_hash(vae.params()));

  auto bad = ck;
  bad.meta["hyper"]["frame_vocab"] = 131;
  CHECK_THROWS_AS(SketchVae<float>::from_checkpoint(bad), CheckpointMismatch);
  bad = ck;
  bad.tensors.begin()->second.resize(1, 1);
  CHECK_THROWS_AS(SketchVae<float>::from_checkpoint(bad), CheckpointMismatch);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointMismatch);
}

TEST_CASE("a small model overfits a handful of measures") {
  SketchVae<float> vae(small());
  std::mt19937_64 rng(8);
  const auto batch = testing::random_measures(rng, 4, 60, 64);
  nn::Adam<float> opt(vae.params().all(), {.learning_rate = 1e-2});
  for (int step = 0; step < 800; ++step) {
    opt.zero_grad();
    nn::Tape<float> tape;
    tape.backward(vae.forward_train(tape, batch, rng, 0.0f).total);
    nn::clip_grad_norm(opt.params(), 5.0f);
    opt.step();
  }
  CHECK(reconstruction_accuracy(vae.reconstruct(batch), batch) >= 0.9);
}
