#include <doctest.h>

#include "oracles.hpp"
#include "rdetect/encoder.hpp"
#include "rdetect/error.hpp"

using namespace rdetect;
using namespace rdetect::encoder;

namespace {

trace::TraceSequence random_windows(Rng& rng, int slots, int width, int T) {
  trace::TraceSequence seq;
  for (int t = 0; t < T; ++t) seq.windows.push_back({oracle::random_matrix(rng, slots, width), t, t * width});
  return seq;
}

/// Scalar loss sum(G .* H) over the top-layer states.
double weighted_sum(const EncoderParams& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& g) {
  return (gru_forward(p, x).hidden.states.array() * g.array()).sum();
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("zero parameters give zero hidden states") {
  const auto p = EncoderParams::zeros(20, 8);
  auto rng = keyed_rng({1});
  const auto seq = random_windows(rng, 2, 10, 5);
  const auto fwd = gru_forward(p, seq);
  CHECK(fwd.hidden.states.isZero(0.0));
  CHECK(fwd.tape.layers[0].update.isConstant(0.5));

  EncoderStream stream(p);
  stream.init();
  for (const auto& w : seq.windows) CHECK(stream.step(w).isZero(0.0));
}

TEST_CASE("single window gives a single state") {
  const auto p = EncoderParams::random(20, 8, 3);
  auto rng = keyed_rng({2});
  const auto fwd = gru_forward(p, random_windows(rng, 2, 10, 1));
  CHECK(fwd.hidden.length() == 1);
  CHECK(fwd.tape.length() == 1);
}

TEST_CASE("prefix forward equals the leading states of the full forward") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = EncoderParams::random(12, 6, seed);
    auto rng = keyed_rng({seed, 1});
    const auto x = oracle::random_matrix(rng, 12, 9, 2.0);
    const auto full = gru_forward(p, x).hidden.states;
    for (int t = 1; t <= 9; ++t) CHECK(gru_forward(p, Eigen::MatrixXd(x.leftCols(t))).hidden.states == full.leftCols(t));
  }
}

TEST_CASE("causality: later inputs never change earlier states") {
  const auto p = EncoderParams::random(12, 6, 4);
  auto rng = keyed_rng({4});
  auto x = oracle::random_matrix(rng, 12, 7);
  const auto base = gru_forward(p, x).hidden.states;
  for (int t = 0; t < 7; ++t) {
    auto y = x;
    y.col(t).array() += 3.0;
    const auto pert = gru_forward(p, y).hidden.states;
    CHECK(pert.leftCols(t) == base.leftCols(t));
    CHECK_FALSE(pert.col(t) == base.col(t));
  }
}

TEST_CASE("hidden states lie strictly inside (-1, 1)") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = EncoderParams::random(16, 8, seed);
    auto rng = keyed_rng({seed, 9});
    const auto h = gru_forward(p, oracle::random_matrix(rng, 16, 12, 50.0)).hidden.states;
    CHECK(h.cwiseAbs().maxCoeff() < 1.0);
  }
}

TEST_CASE("streaming reproduces batch states bit for bit") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = EncoderParams::random(32, 16, seed);
    auto rng = keyed_rng({seed, 5});
    const auto seq = random_windows(rng, 4, 8, 11);
    const auto batch = gru_forward(p, seq).hidden.states;
    EncoderStream stream(p);
    stream.init();
    for (int t = 0; t < seq.length(); ++t) CHECK(stream.step(seq.windows[t]) == batch.col(t));
    CHECK(stream.steps() == 11);

    // Re-init behaves like a fresh stream.
    stream.init();
    CHECK(stream.steps() == 0);
    CHECK(stream.step(seq.windows[0]) == batch.col(0));
  }
}

TEST_CASE("stream use before init is an error") {
  const auto p = EncoderParams::random(4, 3, 1);
  EncoderStream stream(p);
  CHECK_THROWS_AS(stream.step(Eigen::VectorXd::Zero(4)), StateError);
}

TEST_CASE("shape mismatches are rejected") {
  const auto p = EncoderParams::random(6, 3, 1);
  CHECK_THROWS_AS(gru_forward(p, Eigen::MatrixXd::Zero(5, 2)), InvalidArgument);
  CHECK_THROWS_AS(gru_forward(p, trace::TraceSequence{}), InvalidArgument);
  const auto fwd = gru_forward(p, Eigen::MatrixXd::Ones(6, 4));
  CHECK_THROWS_AS(gru_backward(p, fwd.tape, Eigen::MatrixXd::Zero(3, 3)), InvalidArgument);
  const auto other = EncoderParams::random(6, 5, 1);
  CHECK_THROWS_AS(gru_backward(other, fwd.tape, Eigen::MatrixXd::Zero(5, 4)), InvalidArgument);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  const auto p = EncoderParams::random(6, 4, 2);
  auto rng = keyed_rng({3});
  const auto fwd = gru_forward(p, oracle::random_matrix(rng, 6, 5));
  const auto back = gru_backward(p, fwd.tape, Eigen::MatrixXd::Zero(4, 5));
  for (auto t : back.param_grads.tensors())
    for (double v : t) CHECK(v == 0.0);
  CHECK(back.input_grads.isZero(0.0));
}

TEST_CASE("gradient of the first state with respect to later inputs is zero") {
  const auto p = EncoderParams::random(6, 4, 2);
  auto rng = keyed_rng({6});
  const auto fwd = gru_forward(p, oracle::random_matrix(rng, 6, 4));
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(4, 4);
  g.col(0) = oracle::random_matrix(rng, 4, 1);
  const auto back = gru_backward(p, fwd.tape, g);
  CHECK(back.input_grads.rightCols(3).isZero(0.0));
  CHECK_FALSE(back.input_grads.col(0).isZero(0.0));
}

TEST_CASE("backward matches central finite differences") {
  // 2 slots, width 2, T = 3, three layers of width 4; 20 seeds.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    auto p = EncoderParams::random(4, 4, seed);
    auto rng = keyed_rng({seed, 77});
    // Larger weights exercise the saturating parts of the gates.
    for (auto t : p.tensors())
      for (double& v : t) v *= 2.0;
    Eigen::MatrixXd x = oracle::random_matrix(rng, 4, 3, 1.5);
    const Eigen::MatrixXd g = oracle::random_matrix(rng, 4, 3);

    const auto fwd = gru_forward(p, x);
    const auto back = gru_backward(p, fwd.tape, g);

    auto params = p.tensors();
    const auto grads = back.param_grads.tensors();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto fd = oracle::central_differences(params[k], [&] { return weighted_sum(p, x, g); });
      CHECK(oracle::max_relative_error(fd, grads[k]) < 1e-4);
    }
    const auto fd_x = oracle::central_differences(std::span<double>(x.data(), static_cast<std::size_t>(x.size())),
                                                  [&] { return weighted_sum(p, x, g); });
    CHECK(oracle::max_relative_error(
              fd_x, std::span<const double>(back.input_grads.data(), static_cast<std::size_t>(x.size()))) < 1e-4);
  }
}

TEST_CASE("parameter count sums every array") {
  const auto p = EncoderParams::random(160, 64, 1);
  const std::size_t layer0 = 3 * (64 * 160 + 64 * 64 + 64);
  const std::size_t layer = 3 * (64 * 64 + 64 * 64 + 64);
  CHECK(p.parameter_count() == layer0 + 2 * layer);
  std::size_t sum = 0;
  for (auto t : p.tensors()) sum += t.size();
  CHECK(sum == p.parameter_count());
}

TEST_CASE("checkpoint round trip is exact and versioned") {
  const auto p = EncoderParams::random(20, 7, 9);
  const auto bytes = serialize(p);
  CHECK(bytes.substr(4, 7) == "gru3 v1");
  CHECK(deserialize(bytes) == p);
  CHECK(serialize(deserialize(bytes)) == bytes);

  auto bad = bytes;
  bad[4] = 'x';
  try {
    deserialize(bad);
    FAIL("expected bad magic");
  } catch (const ParseError& e) {
    CHECK(e.kind() == ParseError::Kind::BadMagic);
  }
  auto v2 = bytes;
  v2[10] = '2';
  try {
    deserialize(v2);
    FAIL("expected version mismatch");
  } catch (const ParseError& e) {
    CHECK(e.kind() == ParseError::Kind::VersionMismatch);
  }
  try {
    deserialize(bytes.substr(0, bytes.size() - 3));
    FAIL("expected truncation");
  } catch (const ParseError& e) {
    CHECK(e.kind() == ParseError::Kind::Truncated);
  }
}

}  // TEST_SUITE
