#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"
#include "zslab/synth.hpp"
#include "zslab/training.hpp"

#include <fstream>

using namespace zslab;
using namespace zslab::testing;
namespace fs = std::filesystem;

namespace {

CodecConfig small_config(BottleneckKind kind, int ds = 4) {
  CodecConfig c = CodecConfig::defaults(kind);
  c.channels = 16;
  c.num_symbols = kind == BottleneckKind::STE ? 64 : 32;
  c.embedding_dim = 8;
  c.speaker_embed_dim = 8;
  c.downsample_factor = ds;
  c.sigma = 0.7071;
  c.training.batch_size = 4;
  c.training.crop_frames = 32;
  c.training.lr = 1e-3;
  c.anneal.total_steps = 200;
  return c;
}

FeatureSequence random_mfcc(Index t, std::uint64_t seed) {
  CounterRng rng(seed);
  FeatureSequence f;
  f.frames.resize(t, 39);
  for (Index i = 0; i < f.frames.size(); ++i) f.frames.data()[i] = static_cast<float>(rng.normal());
  f.utterance_id = "r" + std::to_string(seed);
  return f;
}

struct Corpus {
  fs::path dir;
  SynthCorpus synth;
  TrainingCorpus train;
};

const Corpus& corpus() {
  static const Corpus c = [] {
    Corpus out;
    out.dir = scratch_dir("codec_corpus");
    out.synth = write_synthetic_corpus(out.dir, SynthOptions{5, 16.0, 8.0, 2.0});
    out.train = load_corpus(read_manifest(out.dir / "train.jsonl"));
    return out;
  }();
  return c;
}

}  // namespace

TEST_CASE("shape law: N = T / downsample and decode restores N * downsample frames") {
  for (int ds : {1, 4, 8}) {
    CodecModel m(small_config(BottleneckKind::VQVAE, ds), {"a", "b"});
    for (Index t : {8, 100, 1024}) {
      if (t < ds) continue;
      auto r = encode(m, random_mfcc(t, static_cast<std::uint64_t>(t)));
      const Index n = (t + ds - 1) / ds;
      CHECK(static_cast<Index>(r.symbols.symbol_ids.size()) == n);
      CHECK(r.z.shape() == Shape{1, m.config().latent_dim(), n});
      auto y = decode(m, r.z, "b");
      CHECK(y.num_frames() == n * ds);
      CHECK(y.dim() == 45);
      CHECK(y.kind == FeatureKind::FBANK45);
      CHECK(y.frames.allFinite());
    }
  }
  CodecModel m(small_config(BottleneckKind::VQVAE), {"a"});
  CHECK(encode(m, random_mfcc(100, 1)).symbols.symbol_ids.size() == 25);
  CHECK(encode(m, random_mfcc(4, 1)).symbols.symbol_ids.size() == 1);
  CHECK_THROWS(encode(m, random_mfcc(3, 1)));
}

TEST_CASE("every bottleneck encodes deterministically and ids stay in range") {
  for (auto kind : {BottleneckKind::STE, BottleneckKind::VQVAE, BottleneckKind::CATVAE}) {
    CodecModel m(small_config(kind), {"a", "b"});
    const auto x = random_mfcc(64, 2);
    const auto s1 = encode(m, x).symbols.symbol_ids;
    const auto s2 = encode(m, x).symbols.symbol_ids;
    CHECK(s1 == s2);
    for (auto id : s1) {
      CHECK(id >= 0);
      CHECK(id < m.config().num_symbols);
    }
    // Symbol ids map back to the latent the decoder saw.
    const auto r = encode(m, x);
    CHECK((m.symbols_to_latent(r.symbols.symbol_ids).value() == r.z.value()).all());
  }
}

TEST_CASE("decoupling: the encoder holds no speaker state") {
  CodecModel m(small_config(BottleneckKind::VQVAE), {"a", "b"});
  for (const auto& [name, _] : m.encoder_parameters()) {
    CHECK(name.find("speaker") == std::string::npos);
    CHECK(name.rfind("decoder", 0) != 0);
  }
  bool has_table = false;
  for (const auto& [name, t] : m.parameters())
    if (name == "decoder.speaker_embedding") {
      has_table = true;
      CHECK(t.shape() == Shape{2, 8});
    }
  CHECK(has_table);

  const auto x = random_mfcc(40, 3);
  const auto before = encode(m, x);
  for (auto& [name, t] : m.parameters())
    if (name == "decoder.speaker_embedding") t.mutable_value().setConstant(5.0f);
  CHECK((encode(m, x).h.value() == before.h.value()).all());

  auto unconditioned = small_config(BottleneckKind::VQVAE);
  unconditioned.speaker_conditioning = false;
  CodecModel u(unconditioned, {"a", "b"});
  for (const auto& [name, _] : u.parameters()) CHECK(name != "decoder.speaker_embedding");
  CHECK(decode(u, encode(u, x).z, "").frames.allFinite());
}

TEST_CASE("decode: unknown speakers are rejected with the known list") {
  CodecModel m(small_config(BottleneckKind::CATVAE), {"alice", "bob"});
  const auto z = encode(m, random_mfcc(16, 4)).z;
  try {
    decode(m, z, "carol");
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("carol") != std::string::npos);
    CHECK(msg.find("alice") != std::string::npos);
    CHECK(msg.find("bob") != std::string::npos);
  }
  CHECK(decode(m, z, "alice").frames != decode(m, z, "bob").frames);
}

TEST_CASE("train_step: STE has zero aux, encoder gradients are alive, crops are validated") {
  for (auto kind : {BottleneckKind::STE, BottleneckKind::VQVAE, BottleneckKind::CATVAE}) {
    CAPTURE(to_string(kind));
    Trainer t(make_model(small_config(kind), corpus().train));
    auto batch = sample_batch(corpus().train, t.model(), t.model().rng());
    const auto report = train_step(t.model(), batch, t.optimizer());
    CHECK(std::isfinite(report.total));
    if (kind == BottleneckKind::STE) CHECK(report.aux == 0.0);
    else CHECK(report.aux > 0.0);
    CHECK(t.model().step() == 1);
    double norm = 0;
    for (const auto& [name, p] : t.model().encoder_parameters())
      if (name != "codebook" && p.has_grad()) norm += p.grad().square().sum();
    CHECK(norm > 0);

    Batch<float> bad = batch;
    bad.fbank = reshape(batch.fbank, {batch.fbank.dim(0), 45, batch.fbank.dim(2)});
    bad.mfcc = Tensor<float>::zeros({batch.mfcc.dim(0), 39, 30});
    CHECK_THROWS_AS(train_step(t.model(), bad, t.optimizer()), ShapeError);
    bad.mfcc = Tensor<float>::zeros({batch.mfcc.dim(0), 39, 30});
    bad.fbank = Tensor<float>::zeros({batch.mfcc.dim(0), 45, 30});
    CHECK_THROWS_AS(train_step(t.model(), bad, t.optimizer()), ShapeError);  // 30 % 4 != 0
  }
}

TEST_CASE("500 steps lower the loss on a fixed batch") {
  Trainer t(make_model(small_config(BottleneckKind::VQVAE), corpus().train));
  CounterRng fixed(99);
  const auto batch = sample_batch(corpus().train, t.model(), fixed);
  auto eval_total = [&] {
    NoGradGuard guard;
    auto f = t.model().forward(batch.mfcc, batch.speakers, Mode::Eval);
    return static_cast<double>(t.model().objective(sum_squared_error(f.y_hat, batch.fbank), f.bottleneck.aux_loss).item());
  };
  const double before = eval_total();
  for (int i = 0; i < 500; ++i) t.step(corpus().train);
  CHECK(eval_total() < before);
}

TEST_CASE("non-finite losses are reported before any update") {
  Trainer t(make_model(small_config(BottleneckKind::VQVAE), corpus().train));
  auto batch = sample_batch(corpus().train, t.model(), t.model().rng());
  batch.fbank.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
  const auto w = t.model().parameters().front().second.value();
  CHECK_THROWS_AS(train_step(t.model(), batch, t.optimizer()), NumericError);
  CHECK((t.model().parameters().front().second.value() == w).all());
  CHECK(t.model().step() == 0);
}

TEST_CASE("composite encoder-decoder graph matches finite differences") {
  CodecConfig c = small_config(BottleneckKind::CATVAE);
  c.channels = 4;
  c.num_symbols = 4;
  c.speaker_embed_dim = 2;
  c.sigma = 0.5;
  BasicCodecModel<double> m(c, {"a", "b"});
  CounterRng rng(7);
  TensorD x = random_tensor({2, 39, 8}, rng, -1, 1);
  TensorD y = random_tensor({2, 45, 8}, rng, -1, 1, false);
  const std::vector<int> spk{1, 0};
  const auto rng_state = m.rng().state();
  std::vector<TensorD> inputs{x};
  for (const auto& p : m.parameter_tensors()) inputs.push_back(p);
  const double err = gradcheck(
      [&](const std::vector<TensorD>& in) {
        m.rng() = CounterRng(rng_state);
        auto f = m.forward(in[0], spk, Mode::Train);
        return m.objective(sum_squared_error(f.y_hat, y), f.bottleneck.aux_loss);
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("checkpoints round-trip parameters, optimizer, rng and symbols") {
  const auto dir = scratch_dir("ckpt");
  Trainer t(make_model(small_config(BottleneckKind::VQVAE), corpus().train));
  for (int i = 0; i < 5; ++i) t.step(corpus().train);
  save_checkpoint(dir / "a.zsckpt", t);
  Trainer u = load_checkpoint(dir / "a.zsckpt");
  CHECK(u.model().step() == 5);
  CHECK(u.model().speakers() == t.model().speakers());
  CHECK(canonical_json(u.model().config()) == canonical_json(t.model().config()));
  CHECK(u.model().rng().state() == t.model().rng().state());
  CHECK(u.model().norm().mean == t.model().norm().mean);
  const auto pt = t.model().parameters(), pu = u.model().parameters();
  REQUIRE(pt.size() == pu.size());
  for (std::size_t i = 0; i < pt.size(); ++i) {
    CHECK(pt[i].first == pu[i].first);
    CHECK((pt[i].second.value() == pu[i].second.value()).all());
    CHECK((t.optimizer().state().m[i] == u.optimizer().state().m[i]).all());
  }
  const auto x = mfcc39(read_wav(corpus().synth.test.front().wav));
  CHECK(encode(t.model(), x).symbols.symbol_ids == encode(u.model(), x).symbols.symbol_ids);

  std::ofstream(dir / "junk.zsckpt") << "ZSCKPT0 nope";
  CHECK_THROWS(load_checkpoint(dir / "junk.zsckpt"));
  CHECK_THROWS(load_checkpoint(dir / "missing.zsckpt"));
}

TEST_CASE("resumed training equals uninterrupted training") {
  const auto dir = scratch_dir("resume");
  auto cfg = small_config(BottleneckKind::CATVAE);
  cfg.training.total_steps = 12;

  Trainer full(make_model(cfg, corpus().train));
  const auto uninterrupted = run_training(full, corpus().train);

  Trainer first(make_model(cfg, corpus().train));
  first.model().mutable_config().training.total_steps = 5;
  run_training(first, corpus().train, RunOptions{dir, 0, {}});
  Trainer resumed = load_checkpoint(checkpoint_path(dir, 5));
  resumed.model().mutable_config().training.total_steps = 12;
  const auto tail = run_training(resumed, corpus().train);

  REQUIRE(tail.losses.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) CHECK(tail.losses[i].total == uninterrupted.losses[i + 5].total);
  const auto a = full.model().parameters(), b = resumed.model().parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK((a[i].second.value() == b[i].second.value()).all());
}

TEST_CASE("manifests and corpora") {
  const auto dir = scratch_dir("manifest");
  std::ofstream(dir / "empty.jsonl") << "\n";
  CHECK_THROWS(load_corpus(read_manifest(dir / "empty.jsonl")));
  std::ofstream(dir / "bad.jsonl") << R"({"id": "a", "wav": "a.wav", "speaker": "s"})" << "\n{oops\n";
  try {
    read_manifest(dir / "bad.jsonl");
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  const auto m = read_manifest(corpus().dir / "train.jsonl");
  CHECK(m.size() == corpus().synth.train.size());
  CHECK(m.front().wav.is_absolute() == corpus().dir.is_absolute());
  CHECK(fs::exists(m.front().wav));
  CHECK(corpus().train.speakers() == std::vector<std::string>{"spk0", "spk1"});
}

TEST_CASE("config JSON is strict and round-trips") {
  const auto c = small_config(BottleneckKind::STE);
  CodecConfig back;
  from_json(nlohmann::json::parse(canonical_json(c)), back);
  CHECK(canonical_json(back) == canonical_json(c));
  CodecConfig x;
  CHECK_THROWS(from_json(nlohmann::json{{"bottleneck", "vqvae"}, {"nonsense", 1}}, x));
  CHECK(CodecConfig::defaults(BottleneckKind::STE).speaker_embed_dim == 250);
  CHECK(CodecConfig::defaults(BottleneckKind::VQVAE).speaker_embed_dim == 128);
  CHECK(CodecConfig::defaults(BottleneckKind::STE).ste_bits() == 9);
  auto bad = c;
  bad.downsample_factor = 3;
  CHECK_THROWS(bad.validate());
}
