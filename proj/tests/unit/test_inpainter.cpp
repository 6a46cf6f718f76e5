#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "common/generators.hpp"
#include "common/gradcheck.hpp"
#include "sketchnet/inpainter.hpp"

using namespace sketchnet;

namespace {

VaeConfig small_vae() {
  VaeConfig c;
  c.embed = 8;
  c.encoder_hidden = 12;
  c.pitch_latent = 6;
  c.rhythm_latent = 6;
  c.beat_hidden = 12;
  c.tick_hidden = 12;
  return c;
}

InpainterConfig small_inp() {
  InpainterConfig c;
  c.hidden = 10;
  return c;
}

template <class T>
Matrix<T> random_latents(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
  return m;
}

}  // namespace

TEST_CASE("context and prediction shapes") {
  SketchInpainter<float> inp(InpainterConfig{}, 128, 128);
  const auto past = random_latents<float>(6 * 3, 256, 1);
  const auto future = random_latents<float>(6 * 3, 256, 2);
  Tape<float> tape(false);
  const auto state = inp.encode_context(tape, tape.constant(past), tape.constant(future), 3);
  CHECK(state.h_pitch.rows() == 3);
  CHECK(state.h_pitch.cols() == 512);
  CHECK(state.h_rhythm.cols() == 512);

  const auto free = inp.predict_missing(tape, state, 4);
  CHECK(free.s_pitch.rows() == 4 * 3);
  CHECK(free.s_pitch.cols() == 128);
  CHECK(free.s_rhythm.cols() == 128);

  const auto teacher = tape.constant(random_latents<float>(4 * 3, 256, 3));
  std::mt19937_64 rng(1);
  const auto forced = inp.predict_missing(tape, state, 4, &teacher, &rng);
  CHECK(forced.joint().rows() == free.joint().rows());
  CHECK(forced.joint().cols() == free.joint().cols());
  CHECK(free.joint().value().allFinite());
}

TEST_CASE("zero context through zero recurrent weights stays finite") {
  SketchInpainter<float> inp(small_inp(), 6, 6);
  for (auto* p : inp.params().all()) {
    if (p->name.find("w_hh") != std::string::npos) p->value.setZero();
  }
  const auto out = inp.predict(Matrix<float>::Zero(12, 12), Matrix<float>::Zero(12, 12), 2, 4);
  CHECK(out.allFinite());
}

TEST_CASE("context encoding is sensitive to past order") {
  SketchInpainter<double> inp(small_inp(), 6, 6);
  auto past = random_latents<double>(6, 12, 4);
  const auto future = random_latents<double>(6, 12, 5);
  const auto a = inp.predict(past, future, 1, 4);
  past.row(0).swap(past.row(3));
  const auto b = inp.predict(past, future, 1, 4);
  CHECK((a - b).norm() > 1e-6);
}

TEST_CASE("pitch and rhythm streams are independent") {
  SketchInpainter<double> inp(small_inp(), 6, 6);
  auto past = random_latents<double>(12, 12, 6);
  auto future = random_latents<double>(12, 12, 7);
  const auto base = inp.predict(past, future, 2, 4);
  past.rightCols(6).setZero();
  future.rightCols(6).setZero();
  const auto no_rhythm = inp.predict(past, future, 2, 4);
  CHECK(base.leftCols(6).isApprox(no_rhythm.leftCols(6)));
  CHECK_FALSE(base.rightCols(6).isApprox(no_rhythm.rightCols(6)));
  past.leftCols(6).setZero();
  future.leftCols(6).setZero();
  const auto neither = inp.predict(past, future, 2, 4);
  CHECK(neither.rightCols(6).isApprox(no_rhythm.rightCols(6)));
}

TEST_CASE("batch rows are independent") {
  SketchInpainter<double> inp(small_inp(), 6, 6);
  const auto past = random_latents<double>(12, 12, 8);
  const auto future = random_latents<double>(12, 12, 9);
  const auto both = inp.predict(past, future, 2, 4);
  Matrix<double> p1(6, 12), f1(6, 12);
  for (int t = 0; t < 6; ++t) {
    p1.row(t) = past.row(t * 2 + 1);
    f1.row(t) = future.row(t * 2 + 1);
  }
  const auto one = inp.predict(p1, f1, 1, 4);
  for (int m = 0; m < 4; ++m) CHECK(one.row(m).isApprox(both.row(m * 2 + 1)));
}

TEST_CASE("bad context masks are rejected") {
  SketchInpainter<float> inp(small_inp(), 6, 6);
  Tape<float> tape(false);
  CHECK_THROWS_AS(inp.encode_context(tape, tape.constant(Matrix<float>::Zero(5, 12)),
                                     tape.constant(Matrix<float>::Zero(6, 12)), 2),
                  MaskError);
  CHECK_THROWS_AS(inp.encode_context(tape, tape.constant(Matrix<float>::Zero(0, 12)),
                                     tape.constant(Matrix<float>::Zero(6, 12)), 1),
                  MaskError);
  const auto st = inp.encode_context(tape, tape.constant(Matrix<float>::Zero(6, 12)),
                                     tape.constant(Matrix<float>::Zero(6, 12)), 1);
  CHECK_THROWS_AS(inp.predict_missing(tape, st, 0), MaskError);
}

TEST_CASE("stage-one loss reaches the inpainter but not the frozen VAE") {
  SketchVae<double> vae(small_vae());
  vae.params().set_frozen(true);
  SketchInpainter<double> inp(small_inp(), 6, 6);
  const auto before = parameter_hash(vae.params());
  std::mt19937_64 rng(3);
  std::vector<std::vector<FrameSequence>> target(2);
  for (auto& t : target) t = testing::random_measures(rng, 4);
  const auto past = random_latents<double>(12, 12, 10);
  const auto future = random_latents<double>(12, 12, 11);

  auto loss = [&](Tape<double>& tape) {
    const auto st = inp.encode_context(tape, tape.constant(past), tape.constant(future), 2);
    return decode_loss(tape, vae, inp.predict_missing(tape, st, 4).joint(), target);
  };
  for (auto* p : vae.params().all()) p->grad.resize(0, 0);
  const auto r = testing::grad_check(inp.params().all(), loss, 6);
  CHECK(r.max_rel_error < 1e-3);
  for (auto* p : vae.params().all()) CHECK(p->grad.size() == 0);
  double norm = 0;
  for (auto* p : inp.params().all()) norm += p->grad.squaredNorm();
  CHECK(norm > 0);
  CHECK(parameter_hash(vae.params()) == before);
}

TEST_CASE("stage-one loss with a uniform decoder is ln(130)") {
  SketchVae<double> vae(small_vae());
  for (auto* p : vae.params().all()) {
    if (p->name.starts_with("decoder.tick_out")) p->value.setZero();
  }
  SketchInpainter<double> inp(small_inp(), 6, 6);
  std::mt19937_64 rng(4);
  std::vector<std::vector<FrameSequence>> target{testing::random_measures(rng, 4)};
  Tape<double> tape(false);
  const auto pred = tape.constant(inp.predict(random_latents<double>(6, 12, 1), random_latents<double>(6, 12, 2), 1, 4));
  CHECK(std::abs(decode_loss(tape, vae, pred, target).value()(0, 0) - std::log(130.0)) < 1e-9);
}

TEST_CASE("loss on encoder means equals the VAE's own teacher-forced reconstruction loss") {
  SketchVae<double> vae(small_vae());
  std::mt19937_64 rng(5);
  std::vector<std::vector<FrameSequence>> target{testing::random_measures(rng, 4), testing::random_measures(rng, 4)};
  // Time-major latents and the matching flat batch.
  std::vector<FrameSequence> flat;
  for (int m = 0; m < 4; ++m) {
    for (int b = 0; b < 2; ++b) flat.push_back(target[static_cast<std::size_t>(b)][static_cast<std::size_t>(m)]);
  }
  const auto z = vae.encode_means(flat);
  Tape<double> tape(false);
  const double via_inpaint = decode_loss(tape, vae, tape.constant(z), target).value()(0, 0);

  double oracle = 0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const std::vector<FrameSequence> one{flat[i]};
    const auto logits = vae.decode(Matrix<double>(z.row(static_cast<Eigen::Index>(i))), &one).logits[0];
    for (int t = 0; t < kFramesPerMeasure; ++t) {
      const double lse = std::log((logits.row(t).array() - logits.row(t).maxCoeff()).exp().sum()) + logits.row(t).maxCoeff();
      oracle += lse - logits(t, flat[i][static_cast<std::size_t>(t)]);
    }
  }
  oracle /= static_cast<double>(flat.size() * kFramesPerMeasure);
  CHECK(via_inpaint == Catch::Approx(oracle).epsilon(1e-9));
}

TEST_CASE("inpainter checkpoints record their VAE") {
  SketchInpainter<float> inp(small_inp(), 6, 6);
  const auto ck = parse_checkpoint(inp.serialize("abcdef0123456789"));
  auto back = SketchInpainter<float>::from_checkpoint(ck, "abcdef0123456789");
  CHECK(parameter_hash(back.params()) == parameter_hash(inp.params()));
  CHECK_THROWS_AS(SketchInpainter<float>::from_checkpoint(ck, "0000000000000000"), CheckpointMismatch);
}
