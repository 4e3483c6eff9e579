#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"
#include "zslab/features.hpp"

#include <cstring>
#include <fstream>

using namespace zslab;
using namespace zslab::testing;
namespace fs = std::filesystem;

namespace {

// Hand-rolled RIFF writer so malformed headers can be produced.
void put16(std::string& s, std::uint16_t v) { s.append(reinterpret_cast<const char*>(&v), 2); }
void put32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }

std::string wav_bytes(const std::vector<std::int16_t>& pcm, std::uint16_t channels = 1, std::uint16_t format = 1,
                      std::uint16_t bits = 16) {
  std::string data(reinterpret_cast<const char*>(pcm.data()), pcm.size() * 2);
  std::string s = "RIFF";
  put32(s, static_cast<std::uint32_t>(36 + data.size()));
  s += "WAVEfmt ";
  put32(s, 16);
  put16(s, format);
  put16(s, channels);
  put32(s, 16000);
  put32(s, 16000u * channels * bits / 8);
  put16(s, static_cast<std::uint16_t>(channels * bits / 8));
  put16(s, bits);
  s += "data";
  put32(s, static_cast<std::uint32_t>(data.size()));
  return s + data;
}

fs::path write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
  return p;
}

Waveform noise(std::size_t n, std::uint64_t seed, double amp = 0.3) {
  CounterRng rng(seed);
  Waveform w;
  w.samples.resize(n);
  for (auto& s : w.samples) s = static_cast<float>(rng.uniform(-amp, amp));
  return w;
}

}  // namespace

TEST_CASE("read_wav scales by 1/32768 and accepts an empty data chunk") {
  const auto dir = scratch_dir("wav");
  auto w = read_wav(write_bytes(dir / "a.wav", wav_bytes({16384, -32768, 0})));
  REQUIRE(w.samples.size() == 3);
  CHECK(w.samples[0] == 0.5f);
  CHECK(w.samples[1] == -1.0f);
  CHECK(w.sample_rate == 16000);
  CHECK(read_wav(write_bytes(dir / "empty.wav", wav_bytes({}))).samples.empty());
}

TEST_CASE("read_wav rejects non-mono, non-PCM and truncated files") {
  const auto dir = scratch_dir("wav_bad");
  CHECK_THROWS_AS(read_wav(write_bytes(dir / "st.wav", wav_bytes({1, 2, 3, 4}, 2))), FormatError);
  CHECK_THROWS_AS(read_wav(write_bytes(dir / "fl.wav", wav_bytes({1, 2}, 1, 3))), FormatError);
  CHECK_THROWS_AS(read_wav(write_bytes(dir / "b8.wav", wav_bytes({1, 2}, 1, 1, 8))), FormatError);
  CHECK_THROWS_AS(read_wav(write_bytes(dir / "tr.wav", wav_bytes({1, 2, 3}).substr(0, 30))), FormatError);
  CHECK_THROWS_AS(read_wav(write_bytes(dir / "junk.wav", "not a wav file at all, sorry")), FormatError);
  CHECK_THROWS_AS(read_wav(dir / "missing.wav"), FormatError);
}

TEST_CASE("write_wav then read_wav is bit-exact on the int16 payload") {
  const auto dir = scratch_dir("wav_rt");
  CounterRng rng(3);
  std::vector<std::int16_t> pcm(4000);
  for (auto& v : pcm) v = static_cast<std::int16_t>(static_cast<std::int64_t>(rng.below(65536)) - 32768);
  const auto w = read_wav(write_bytes(dir / "in.wav", wav_bytes(pcm)));
  write_wav(dir / "out.wav", w);
  std::ifstream a(dir / "in.wav", std::ios::binary), b(dir / "out.wav", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK(read_wav(dir / "out.wav").samples == w.samples);
}

TEST_CASE("frame count law and shared framing") {
  const FeatureConfig cfg;
  CHECK(num_frames(400, cfg) == 1);
  CHECK(num_frames(559, cfg) == 1);
  CHECK(num_frames(560, cfg) == 2);
  CHECK(num_frames(16000, cfg) == 98);
  CHECK_THROWS(num_frames(399, cfg));
  for (std::size_t n : {400u, 1234u, 16000u, 16001u}) {
    const auto w = noise(n, n);
    const auto m = mfcc39(w), f = fbank45(w);
    CHECK(m.num_frames() == 1 + (static_cast<Index>(n) - 400) / 160);
    CHECK(m.num_frames() == f.num_frames());
    CHECK(m.dim() == 39);
    CHECK(f.dim() == 45);
    CHECK(m.kind == FeatureKind::MFCC39);
    CHECK(f.kind == FeatureKind::FBANK45);
    CHECK(m.frame_shift == doctest::Approx(0.01));
  }
  CHECK_THROWS(mfcc39(noise(399, 1)));
  Waveform w8 = noise(8000, 1);
  w8.sample_rate = 8000;
  CHECK_THROWS(mfcc39(w8));
}

TEST_CASE("zero waveform has zero deltas") {
  Waveform w;
  w.samples.assign(8000, 0.0f);
  const auto m = mfcc39(w);
  CHECK(m.frames.allFinite());
  CHECK((m.frames.rightCols(26).array() == 0).all());
}

TEST_CASE("deltas match the regression formula with edge replication") {
  CounterRng rng(4);
  for (Index t : {1, 2, 3, 7, 20}) {
    RowMatrix<double> c(t, 5);
    for (Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(-3, 3);
    const auto d = compute_deltas(c, 2);
    auto at = [&](Index i, Index k) { return c(std::clamp<Index>(i, 0, t - 1), k); };
    for (Index i = 0; i < t; ++i)
      for (Index k = 0; k < 5; ++k) {
        double num = 0;
        for (int n = 1; n <= 2; ++n) num += n * (at(i + n, k) - at(i - n, k));
        CHECK(d(i, k) == doctest::Approx(num / 10.0).epsilon(1e-12));
      }
  }
}

TEST_CASE("mfcc39 stacks statics, deltas and double deltas") {
  const auto m = mfcc39(noise(16000, 5));
  const RowMatrix<double> stat = m.frames.leftCols(13).cast<double>();
  const auto d = compute_deltas(stat, 2);
  const auto dd = compute_deltas(d, 2);
  CHECK((m.frames.middleCols(13, 13).cast<double>() - d).cwiseAbs().maxCoeff() < 1e-4);
  CHECK((m.frames.rightCols(13).cast<double>() - dd).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("doubling the amplitude adds 2 log 2 to every log energy") {
  const Waveform w = noise(16000, 6, 0.2);
  Waveform w2 = w;
  for (auto& s : w2.samples) s *= 2;
  const auto a = fbank45(w), b = fbank45(w2);
  const double shift = 2 * std::log(2.0);
  CHECK(((b.frames - a.frames).array() - static_cast<float>(shift)).abs().maxCoeff() < 1e-4);
}

TEST_CASE("mel filterbank spans the band with unit-peak triangles") {
  const FeatureConfig cfg;
  const auto fb = mel_filterbank(45, cfg);
  CHECK(fb.rows() == 45);
  CHECK(fb.cols() == 513);
  CHECK((fb.array() >= 0).all());
  for (Index r = 0; r < fb.rows(); ++r) CHECK(fb.row(r).maxCoeff() > 0);
}

TEST_CASE("features are deterministic") {
  const auto w = noise(9000, 7);
  CHECK(mfcc39(w).frames == mfcc39(w).frames);
  CHECK(fbank45(w).frames == fbank45(w).frames);
}

TEST_CASE("mu-law endpoints, zero and monotonicity") {
  const std::vector<float> edge{-1.0f, 0.0f, 1.0f};
  const auto codes = mulaw_encode(edge);
  CHECK(codes[0] == 0);
  CHECK((codes[1] == 127 || codes[1] == 128));
  CHECK(codes[2] == 255);
  const std::vector<int> zero_code{codes[1]};
  CHECK(std::abs(mulaw_decode(zero_code)[0]) < 1.0f / 255);

  std::vector<float> grid(20001);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -1.0f + 2.0f * static_cast<float>(i) / 20000.0f;
  const auto g = mulaw_encode(grid);
  CHECK(std::is_sorted(g.begin(), g.end()));
  CHECK(*std::min_element(g.begin(), g.end()) == 0);
  CHECK(*std::max_element(g.begin(), g.end()) == 255);
  // Decoding lands back in the same cell.
  const auto back = mulaw_encode(mulaw_decode(g));
  CHECK(back == g);
}

TEST_CASE("mu-law clamps out-of-range samples") {
  const std::vector<float> wild{-3.0f, 0.25f, 7.5f};
  std::size_t clamped = 0;
  const auto c = mulaw_encode(wild, 256, &clamped);
  CHECK(clamped == 2);
  CHECK(c[0] == 0);
  CHECK(c[2] == 255);
  CHECK_THROWS(mulaw_decode(std::vector<int>{256}));
}

TEST_CASE("feature files round-trip") {
  const auto dir = scratch_dir("feat");
  auto f = fbank45(noise(5000, 8));
  write_features(dir / "utt1.zsfeat", f);
  const auto g = read_features(dir / "utt1.zsfeat");
  CHECK(g.frames == f.frames);
  CHECK(g.kind == FeatureKind::FBANK45);
  CHECK(g.utterance_id == "utt1");
  CHECK(g.frame_shift == doctest::Approx(0.01));

  std::ifstream in(dir / "utt1.zsfeat", std::ios::binary);
  char magic[7];
  in.read(magic, 7);
  CHECK(std::string(magic, 7) == "ZSFEAT1");

  write_bytes(dir / "bad.zsfeat", "ZSFEAT2xxxxxxxxxxxx");
  CHECK_THROWS_AS(read_features(dir / "bad.zsfeat"), FormatError);
  std::string bytes;
  {
    std::ifstream src(dir / "utt1.zsfeat", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(src), {});
  }
  write_bytes(dir / "short.zsfeat", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_features(dir / "short.zsfeat"), FormatError);
}
